"""
Projection head for contrastive pretraining and the Deep-Sets disc classifier.
"""

import torch
import torch.nn as nn

from models.encoder import FEATURE_DIM, DiscEncoder
from utils.exceptions import DataError, NumericError

NUM_GRADES = 3


class ProjectionHead(nn.Module):
    """g(.): Linear -> BatchNorm -> ReLU -> Linear, output L2-normalized."""

    def __init__(
        self, in_dim: int = FEATURE_DIM, hidden_dim: int = 512, out_dim: int = 128
    ):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.net(z)
        norms = torch.linalg.vector_norm(h, dim=1, keepdim=True)
        if bool((norms == 0).any()):
            raise NumericError("projection produced a zero vector; cannot normalize")
        return h / norms


def project(z: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(z)


def pool_disc(embeddings: torch.Tensor) -> torch.Tensor:
    """Mean over the set dimension (-2).

    Values are sorted along the set axis before summation so any permutation of
    the set reduces in the same order and gives a bitwise identical result.
    Accepts S x D or B x S x D.
    """
    if embeddings.ndim not in (2, 3):
        raise DataError(
            "expected S x D or B x S x D embeddings, "
            f"got shape {tuple(embeddings.shape)}"
        )
    size = embeddings.shape[-2]
    if size == 0:
        raise DataError("cannot pool an empty disc set")
    if size == 1:
        return embeddings.squeeze(-2)
    ordered, _ = torch.sort(embeddings, dim=-2)
    return ordered.sum(dim=-2) / size


class DiscClassifier(nn.Module):
    """Encoder -> per-slice features -> Deep-Sets mean -> linear grade head."""

    def __init__(self, encoder: DiscEncoder, num_classes: int = NUM_GRADES):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(FEATURE_DIM, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """B x S x C x H x W disc sets -> pooled B x 512.

        B x C x H x W single crops are encoded without pooling.
        """
        if x.ndim == 4:
            return self.encoder(x)
        if x.ndim != 5:
            raise DataError(
                f"expected B x S x C x H x W disc sets, got shape {tuple(x.shape)}"
            )
        batch, size = x.shape[:2]
        flat = self.encoder(x.reshape(batch * size, *x.shape[2:]))
        return pool_disc(flat.reshape(batch, size, -1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def classify(pooled: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Logits for pooled 512-d disc vectors (B x 512 -> B x 3, or 512 -> 3)."""
    return head(pooled)


def predict_grades(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over grades.

    On ties torch.argmax returns the first maximal index, the less severe grade.
    """
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    return torch.argmax(logits, dim=1)
