"""
File Manager Utility
Handles image IO, hashing, and the run-input records written next to every output
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
from PIL import Image

from data.types import SliceImage

PathLike = Union[str, Path]


def write_pgm16(path: PathLike, pixels: np.ndarray) -> Path:
    """Write a 16-bit binary portable graymap (P5, maxval 65535)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pixels.dtype != np.uint16:
        raise ValueError(f"expected uint16 pixels, got {pixels.dtype}")
    # Pillow writes mode "I" as big-endian 16-bit P5
    Image.fromarray(pixels.astype(np.int32)).save(path, format="PPM")
    return path


def read_slice(path: PathLike) -> SliceImage:
    """Read a raw slice from a 16-bit PGM or a .npy array."""
    path = Path(path)
    if path.suffix == ".npy":
        return SliceImage(np.load(path))
    with Image.open(path) as img:
        pixels = np.asarray(img)
    return SliceImage(pixels.astype(np.uint16))


def read_image_size(path: PathLike) -> tuple:
    """(height, width) without decoding pixel data where the format allows it."""
    path = Path(path)
    if path.suffix == ".npy":
        shape = np.load(path, mmap_mode="r").shape
        return int(shape[0]), int(shape[1])
    with Image.open(path) as img:
        width, height = img.size
    return int(height), int(width)


def write_png8(path: PathLike, pixels: np.ndarray) -> Path:
    """Write an 8-bit grayscale PNG (lossless)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pixels.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {pixels.dtype}")
    Image.fromarray(pixels).save(path, format="PNG")
    return path


def read_png8(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")).copy()


def file_sha256(path: PathLike, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def json_sha256(payload: Any) -> str:
    """Hash of the canonical (sorted-key) JSON encoding."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path


def load_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


class FileManager:
    """Manages one command's output directory"""

    INPUTS_FILE = "inputs.json"

    def __init__(self, out_dir: PathLike):
        self.logger = logging.getLogger(__name__)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        target = self.out_dir.joinpath(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def record_inputs(
        self,
        command: str,
        inputs: Mapping[str, Optional[PathLike]],
        config_hash: Optional[str] = None,
        parameters: Optional[Dict[str, Any]] = None,
        filename: str = INPUTS_FILE,
    ) -> Path:
        """Write the hashes of every input so the run can be reconstructed"""
        hashed = {}
        for name, value in inputs.items():
            if value is None:
                continue
            p = Path(value)
            if p.is_file():
                hashed[name] = {"path": str(p), "sha256": file_sha256(p)}
            else:
                hashed[name] = {"path": str(p), "sha256": None}
        record = {
            "command": command,
            "config_hash": config_hash,
            "inputs": hashed,
            "parameters": parameters or {},
        }
        target = save_json(self.out_dir / filename, record)
        self.logger.debug(f"📄 Recorded inputs: {target}")
        return target
