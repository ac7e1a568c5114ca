"""Semi-automated plume mask generation from OGI frame sequences.

Pipeline per frame: subtract the averaged pre-release background, stretch
contrast between two percentiles, adaptively threshold against the local
window mean, refine region boundaries with a watershed over a Sobel elevation
map, then keep regions above a size floor and clear rows at or below any
configured separation line (removing the release nozzle). Every knob lives in
LabelerConfig so per-sequence manual tuning is a reproducible config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import filters as skfilters
from skimage import segmentation as skseg

from .errors import ConfigError, DataError
from .ioutil import load_json, read_gray, write_gray_png

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class LabelerConfig:
    contrast_low_pct: float = 2.0
    contrast_high_pct: float = 98.0
    thresh_block: int = 75          # odd window size, pixels
    thresh_offset: float = 40.0     # intensity units above the local mean
    min_region_size: int = 64       # pixels
    separation_y: tuple[int, ...] = ()
    class_id: int = 1

    def validate(self) -> None:
        if self.thresh_block < 3 or self.thresh_block % 2 == 0:
            raise ConfigError("thresh_block must be odd and >= 3")
        if not (0 <= self.contrast_low_pct < self.contrast_high_pct <= 100):
            raise ConfigError("percentiles must satisfy 0 <= low < high <= 100")
        if self.min_region_size < 0:
            raise ConfigError("min_region_size must be >= 0")
        if not (1 <= self.class_id <= 255):
            raise ConfigError("class_id must be in 1..255")
        if any(y < 0 for y in self.separation_y):
            raise ConfigError("separation_y entries must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LabelerConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown labeler config key: {k}")
        if "separation_y" in d:
            d = dict(d, separation_y=tuple(d["separation_y"]))
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "LabelerConfig":
        d = load_json(path)
        return cls.from_dict(d.get("labeler", d))


def _check_stack(frames: list[np.ndarray], what: str) -> None:
    if not frames:
        raise DataError(f"{what}: need at least one frame")
    shape = np.asarray(frames[0]).shape
    for i, f in enumerate(frames):
        f = np.asarray(f)
        if f.ndim != 2:
            raise DataError(f"{what}: frame {i} is not a 2-D grayscale image")
        if f.shape != shape:
            raise DataError(
                f"{what}: frame {i} is {f.shape}, expected {shape}")


def average_background(frames: list[np.ndarray]) -> np.ndarray:
    """Per-pixel arithmetic mean of the pre-release frames, in float64."""
    _check_stack(frames, "average_background")
    acc = np.zeros(np.asarray(frames[0]).shape, dtype=np.float64)
    for f in frames:
        acc += np.asarray(f, dtype=np.float64)
    return acc / len(frames)


def subtract_enhance(frame: np.ndarray, background: np.ndarray,
                     cfg: LabelerConfig) -> np.ndarray:
    """Absolute difference, then a percentile linear stretch to 0..255."""
    cfg.validate()
    frame = np.asarray(frame, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if frame.shape != background.shape:
        raise DataError(
            f"frame {frame.shape} vs background {background.shape}")
    diff = np.abs(frame - background)
    lo = np.percentile(diff, cfg.contrast_low_pct)
    hi = np.percentile(diff, cfg.contrast_high_pct)
    if hi - lo < 1e-12:  # degenerate stretch: clamp everything, no NaN
        return np.zeros_like(diff)
    return np.clip((diff - lo) / (hi - lo), 0.0, 1.0) * 255.0


def _box_mean(img: np.ndarray, block: int) -> np.ndarray:
    """Windowed mean with mirrored (symmetric) borders via an integral image."""
    r = block // 2
    pad = np.pad(img.astype(np.float64), r, mode="symmetric")
    integral = np.zeros((pad.shape[0] + 1, pad.shape[1] + 1), dtype=np.float64)
    integral[1:, 1:] = pad.cumsum(0).cumsum(1)
    h, w = img.shape
    s = (integral[block:block + h, block:block + w]
         - integral[:h, block:block + w]
         - integral[block:block + h, :w]
         + integral[:h, :w])
    return s / (block * block)


def adaptive_threshold(img: np.ndarray, block: int, offset: float) -> np.ndarray:
    """Foreground = pixels more than `offset` above their local window mean."""
    if block < 3 or block % 2 == 0:
        raise ConfigError("block must be odd and >= 3")
    img = np.asarray(img, dtype=np.float64)
    return img > _box_mean(img, block) + offset


def watershed_refine(enhanced: np.ndarray, binary: np.ndarray) -> np.ndarray:
    """Flood a Sobel elevation map from eroded-foreground / sure-background
    markers; returns integer region labels (0 = background)."""
    enhanced = np.asarray(enhanced, dtype=np.float64)
    binary = np.asarray(binary, dtype=bool)
    if enhanced.shape != binary.shape:
        raise DataError("enhanced image and binary mask extents disagree")
    elevation = skfilters.sobel(enhanced)
    sure_fg = ndimage.binary_erosion(binary, structure=_EIGHT)
    sure_bg = ~ndimage.binary_dilation(binary, structure=_EIGHT)
    fg_labels, n = ndimage.label(sure_fg, structure=_EIGHT)
    if n == 0:
        return np.zeros(binary.shape, dtype=np.int32)
    markers = np.zeros(binary.shape, dtype=np.int32)
    markers[sure_bg] = 1
    markers[sure_fg] = fg_labels[sure_fg] + 1
    ws = skseg.watershed(elevation, markers)
    return np.maximum(ws - 1, 0).astype(np.int32)


def region_filter(labels: np.ndarray, cfg: LabelerConfig) -> np.ndarray:
    """Clear rows at or below each separation line, then keep connected
    regions whose area reaches min_region_size; output values are 0/class_id."""
    cfg.validate()
    fg = np.asarray(labels) > 0
    for y in cfg.separation_y:
        fg[min(y, fg.shape[0]):, :] = False
    comp, n = ndimage.label(fg, structure=_EIGHT)
    out = np.zeros(fg.shape, dtype=np.uint8)
    if n == 0:
        return out
    areas = np.bincount(comp.ravel())
    keep = np.zeros(n + 1, dtype=bool)
    keep[1:] = areas[1:] >= cfg.min_region_size
    out[keep[comp]] = cfg.class_id
    return out


def run_pipeline(background_frames: list[np.ndarray], frames: list[np.ndarray],
                 cfg: LabelerConfig) -> list[np.ndarray]:
    """Full mask-generation pass over a frame sequence; deterministic."""
    cfg.validate()
    _check_stack(list(background_frames) + list(frames), "run_pipeline")
    background = average_background(background_frames)
    masks = []
    for frame in frames:
        enhanced = subtract_enhance(frame, background, cfg)
        binary = adaptive_threshold(enhanced, cfg.thresh_block, cfg.thresh_offset)
        labels = watershed_refine(enhanced, binary)
        masks.append(region_filter(labels, cfg))
    return masks


# ---------------------------------------------------------------------------
# directory front end used by the CLI

def load_frames(directory) -> list[np.ndarray]:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise DataError(f"no PNG frames found in {directory}")
    return [read_gray(p) for p in paths]


def label_directory(frames_dir, background_dir, cfg: LabelerConfig,
                    out_dir) -> list[Path]:
    """Label every frame PNG and write one mask PNG per frame."""
    frames = load_frames(frames_dir)
    names = [p.name for p in sorted(Path(frames_dir).glob("*.png"))]
    masks = run_pipeline(load_frames(background_dir), frames, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, mask in zip(names, masks):
        path = out_dir / name
        write_gray_png(mask, path)
        written.append(path)
    return written
