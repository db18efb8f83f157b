"""
Loss kernels: cosine similarity, multi-positive NT-Xent, weighted focal loss, Smooth-L1.

All functions are stateless torch code and work in any floating dtype; the
gradient checks in the test-suite run them in float64.
"""

from typing import Literal, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from utils.exceptions import DataError, NumericError, UndefinedLossError

NUM_GRADES = 3


class FocalParams(BaseModel):
    """Per-class weights alpha and focusing parameter gamma."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: Tuple[float, float, float] = (0.8, 4.0, 5.0)
    gamma: float = Field(default=2.0, ge=0)

    @field_validator("alpha")
    @classmethod
    def _positive(cls, value):
        if any(a <= 0 for a in value):
            raise ValueError(f"focal alpha must be strictly positive, got {value}")
        return value


def _l2_normalize(z: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(z, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        rows = torch.nonzero(norms.squeeze(1) == 0).flatten().tolist()
        raise NumericError(f"zero-norm embedding rows: {rows}")
    return z / norms


def cosine_similarity_matrix(z: torch.Tensor) -> torch.Tensor:
    """S[i, j] = <z_i, z_j> / (|z_i| |z_j|); zero-norm rows are rejected."""
    if z.ndim != 2:
        raise DataError(f"expected an N x D matrix, got shape {tuple(z.shape)}")
    unit = _l2_normalize(z)
    return unit @ unit.T


def multi_positive_ntxent(
    z: torch.Tensor,
    group_ids: torch.Tensor,
    tau: float = 0.1,
    form: Literal["logsumexp", "direct"] = "logsumexp",
) -> torch.Tensor:
    """Mean over anchors of the multi-positive contrastive loss:

        -1/|P(i)| * sum_p log( exp(s_ip/tau) / sum_{k != i} exp(s_ik/tau) ).

    P(i) holds the other rows of anchor i's group; the denominator runs over every
    other row in the batch, positives included. Anchors without a positive are
    left out of the mean. ``form="direct"`` evaluates the ratio literally,
    ``"logsumexp"`` rewrites it as  logsumexp_{k != i}(s_ik/tau) - mean_p(s_ip/tau).
    """
    if tau <= 0:
        raise NumericError(f"temperature must be positive, got {tau}")
    n = z.shape[0]
    if n < 2:
        raise UndefinedLossError("contrastive loss needs at least two rows")
    group_ids = torch.as_tensor(group_ids, device=z.device).reshape(-1)
    if group_ids.shape[0] != n:
        raise DataError(f"{group_ids.shape[0]} group ids for {n} embeddings")

    logits = cosine_similarity_matrix(z) / tau
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    positive = (group_ids[:, None] == group_ids[None, :]) & ~self_mask
    n_pos = positive.sum(dim=1)
    anchors = n_pos > 0
    if not bool(anchors.any()):
        raise UndefinedLossError("every group is a singleton; no anchor has a positive")

    if form == "direct":
        exp = torch.exp(logits).masked_fill(self_mask, 0.0)
        ratio = exp / exp.sum(dim=1, keepdim=True)
        log_ratio = torch.log(ratio.masked_fill(~positive, 1.0))
        per_anchor = -(log_ratio * positive).sum(dim=1) / n_pos.clamp_min(1)
    elif form == "logsumexp":
        others = logits.masked_fill(self_mask, float("-inf"))
        denominator = torch.logsumexp(others, dim=1)
        mean_positive = (logits * positive).sum(dim=1) / n_pos.clamp_min(1)
        per_anchor = denominator - mean_positive
    else:
        raise ValueError(f"unknown form {form!r}")
    return per_anchor[anchors].mean()


def weighted_focal_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    params: FocalParams = FocalParams(),
) -> torch.Tensor:
    """Mean of  -alpha_y (1 - p_y)^gamma log p_y  with p_y = softmax(logits)[y]."""
    labels = torch.as_tensor(labels, device=logits.device).long().reshape(-1)
    if logits.ndim != 2 or logits.shape[1] != NUM_GRADES:
        raise DataError(
            f"expected N x {NUM_GRADES} logits, got shape {tuple(logits.shape)}"
        )
    if labels.shape[0] != logits.shape[0]:
        raise DataError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if bool(((labels < 0) | (labels >= NUM_GRADES)).any()):
        raise DataError(
            f"labels must lie in 0..{NUM_GRADES - 1}, got {labels.tolist()}"
        )

    log_p = F.log_softmax(logits, dim=1)
    log_py = log_p.gather(1, labels[:, None]).squeeze(1)
    alpha = torch.as_tensor(params.alpha, dtype=logits.dtype, device=logits.device)
    alpha = alpha[labels]
    if params.gamma == 0:
        modulating = torch.ones_like(log_py)
    else:
        # 1 - p_y from expm1, floored at the smallest normal float
        one_minus = (-torch.expm1(log_py)).clamp_min(torch.finfo(logits.dtype).tiny)
        modulating = one_minus.pow(params.gamma)
    return (-alpha * modulating * log_py).mean()


def smooth_l1(
    pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0
) -> torch.Tensor:
    """0.5 d^2 / beta below beta, |d| - 0.5 beta above; mean over every coordinate."""
    return F.smooth_l1_loss(pred, target, reduction="mean", beta=beta)
