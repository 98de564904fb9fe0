"""Small I/O helpers: atomic writes and lossless 8-bit image round-trips."""
from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import DecodeError
from .backends import DTYPE


def write_atomic(path: str | Path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def quantize(image: torch.Tensor) -> np.ndarray:
    """Map a [-1, 1] float image (3, H, W) to uint8 (H, W, 3)."""
    arr = image.detach().cpu().numpy()
    q = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.transpose(q, (1, 2, 0))


def dequantize(arr: np.ndarray) -> torch.Tensor:
    """Inverse of quantize: uint8 (H, W, 3) to float (3, H, W) in [-1, 1]."""
    x = np.transpose(arr.astype(np.float64), (2, 0, 1)) / 127.5 - 1.0
    return torch.tensor(x, dtype=DTYPE)


def requantize(image: torch.Tensor) -> torch.Tensor:
    """Snap a float image to the values an 8-bit save/load round trip yields."""
    return dequantize(quantize(image))


def save_image_png(path: str | Path, image: torch.Tensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = Image.fromarray(quantize(image), mode="RGB")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        buf.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_image_png(path: str | Path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DecodeError(f"{path}: expected RGB image, got mode {im.mode}")
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DecodeError(f"{path}: expected 3 channels, got shape {arr.shape}")
    return dequantize(arr)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
