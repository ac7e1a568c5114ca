"""Canonical JSON and PNG helpers shared by checkpoints, datasets, and the CLI."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def canonical_dumps(obj) -> str:
    """Deterministic JSON text: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read JSON config {path}: {exc}") from exc


def read_image_rgb(path) -> np.ndarray:
    """Decode any PNG to a (3, H, W) float32 array in 0..255."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


def read_gray(path) -> np.ndarray:
    """Decode a PNG to a (H, W) float64 grayscale array in 0..255."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Decode a single-channel 8-bit PNG of class indices."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I", "I;16"):
                im = im.convert("L")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"mask {path} is not single-channel")
    return arr.astype(np.int32)


def write_gray_png(arr: np.ndarray, path) -> None:
    """Write a (H, W) array as an 8-bit grayscale PNG."""
    out = np.clip(np.asarray(arr), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="L").save(path)


def write_rgb_png(arr: np.ndarray, path) -> None:
    """Write a (3, H, W) array in 0..255 as an RGB PNG."""
    out = np.clip(np.asarray(arr), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="RGB").save(path)
