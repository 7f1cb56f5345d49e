"""Tiny raster-export helpers shared by the CLI and the API."""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8_gray(array: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    arr = np.asarray(array, dtype=np.float64)
    lo = float(arr.min()) if lo is None else float(lo)
    hi = float(arr.max()) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    return np.clip(np.rint((arr - lo) / span * 255.0), 0, 255).astype(np.uint8)


def gray_png_bytes(array: np.ndarray, lo: float | None = None, hi: float | None = None) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8_gray(array, lo, hi), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def rgb_png_bytes(array: np.ndarray) -> bytes:
    arr = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_gray_png(array: np.ndarray, path: str | Path, lo=None, hi=None) -> None:
    Path(path).write_bytes(gray_png_bytes(array, lo, hi))


def save_rgb_png(array: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(rgb_png_bytes(array))


def png_b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64_png(data: str) -> bytes:
    return base64.b64decode(data.encode("ascii"))
