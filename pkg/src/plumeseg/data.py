"""Dataset manifest with deterministic splits, PNG sample I/O, the training
augmentation recipe, and a synthetic plume generator for desk-scale runs.

On-disk layout: root/{train,val,test}/images/*.png with masks alongside in
masks/, plus root/classes.txt (one name per line, index = line number). A
flat tree (root/images, root/masks) is split 80/10/10 by a seeded shuffle.
Masks are single-channel 8-bit PNGs whose pixel value is the class index;
255 marks ignored pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .ioutil import (canonical_dumps, load_json, read_image_rgb, read_mask,
                     write_gray_png, write_rgb_png)

IGNORE_INDEX = 255


@dataclass(frozen=True)
class ClassMap:
    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names or self.names[0] != "background":
            raise DataError("class index 0 must be named 'background'")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @classmethod
    def mr_default(cls) -> "ClassMap":
        return cls(("background",) + tuple(str(r) for r in range(10, 101, 10)))

    @classmethod
    def cr_default(cls) -> "ClassMap":
        return cls(("background", "gas"))

    @classmethod
    def default_for(cls, num_classes: int) -> "ClassMap":
        if num_classes == 11:
            return cls.mr_default()
        if num_classes == 2:
            return cls.cr_default()
        return cls(("background",) + tuple(f"class{i}" for i in range(1, num_classes)))

    @classmethod
    def from_file(cls, path) -> "ClassMap":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        names = tuple(ln.strip() for ln in lines if ln.strip())
        return cls(names)

    def to_file(self, path) -> None:
        Path(path).write_text("\n".join(self.names) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SampleEntry:
    image: str              # path relative to the manifest root
    mask: str
    split: str              # train | val | test
    class_hint: int | None = None


@dataclass
class Manifest:
    root: str
    entries: list[SampleEntry] = field(default_factory=list)

    def split(self, name: str) -> list[SampleEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        out = {"train": 0, "val": 0, "test": 0}
        for e in self.entries:
            out[e.split] += 1
        return out

    def image_path(self, e: SampleEntry) -> Path:
        return Path(self.root) / e.image

    def mask_path(self, e: SampleEntry) -> Path:
        return Path(self.root) / e.mask

    def to_dict(self) -> dict:
        return {"root": self.root,
                "entries": [{"image": e.image, "mask": e.mask, "split": e.split,
                             "class_hint": e.class_hint} for e in self.entries]}

    def save(self, path) -> None:
        Path(path).write_text(canonical_dumps(self.to_dict()) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        d = load_json(path)
        return cls(root=d["root"],
                   entries=[SampleEntry(**e) for e in d["entries"]])


@dataclass
class Sample:
    image: np.ndarray   # (3, H, W) float32 in 0..255
    mask: np.ndarray    # (H, W) int32 class indices, 255 = ignore

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape:
            raise DataError("image and mask extents disagree")


def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    return n_train, n_val, n - n_train - n_val


def _pair_up(img_dir: Path, mask_dir: Path, root: Path) -> list[tuple[str, str]]:
    pairs = []
    for img in sorted(img_dir.glob("*.png")):
        mask = mask_dir / img.name
        if not mask.is_file():
            raise DataError(f"missing mask for image: {img}")
        pairs.append((str(img.relative_to(root)), str(mask.relative_to(root))))
    return pairs


def scan_and_split(root, seed: int = 0) -> Manifest:
    """Index a dataset tree into a manifest with deterministic splits.

    A flat tree (images/ + masks/ at the root) is enumerated lexicographically,
    shuffled with the seed, and assigned 80/10/10. A pre-split tree keeps its
    on-disk train/val/test assignment.
    """
    root = Path(root)
    manifest = Manifest(root=str(root))
    if (root / "images").is_dir():
        pairs = _pair_up(root / "images", root / "masks", root)
        if not pairs:
            raise DataError(f"no images found under {root / 'images'}")
        order = np.random.default_rng(seed).permutation(len(pairs))
        n_train, n_val, _ = _split_counts(len(pairs))
        for rank, idx in enumerate(order):
            split = ("train" if rank < n_train
                     else "val" if rank < n_train + n_val else "test")
            img, mask = pairs[idx]
            manifest.entries.append(SampleEntry(img, mask, split))
        manifest.entries.sort(key=lambda e: e.image)
        return manifest
    if any((root / s).is_dir() for s in ("train", "val", "test")):
        for split in ("train", "val", "test"):
            sdir = root / split
            if not sdir.is_dir():
                continue
            for img, mask in _pair_up(sdir / "images", sdir / "masks", root):
                manifest.entries.append(SampleEntry(img, mask, split))
        if not manifest.entries:
            raise DataError(f"no samples found under {root}")
        return manifest
    raise DataError(f"{root} has neither images/ nor train|val|test/ subtrees")


def load_sample(manifest: Manifest, entry: SampleEntry, num_classes: int,
                ignore_index: int = IGNORE_INDEX) -> Sample:
    image = read_image_rgb(manifest.image_path(entry))
    mask = read_mask(manifest.mask_path(entry))
    bad = (mask >= num_classes) & (mask != ignore_index)
    if np.any(bad):
        raise DataError(
            f"mask {manifest.mask_path(entry)} holds value "
            f"{int(mask[bad][0])} >= num_classes {num_classes}")
    return Sample(image=image, mask=mask.astype(np.int32))


def save_mask(mask: np.ndarray, path) -> None:
    write_gray_png(np.asarray(mask).astype(np.uint8), path)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    base_scale: tuple[int, int] = (640, 480)    # (width, height)
    ratio_range: tuple[float, float] = (0.5, 2.0)
    crop_size: tuple[int, int] = (512, 512)     # (height, width)
    pad_value: float = 0.0
    ignore_index: int = IGNORE_INDEX

    def validate(self) -> None:
        if self.ratio_range[0] >= self.ratio_range[1]:
            raise DataError("ratio_range must satisfy low < high")
        if min(self.crop_size) < 1 or min(self.base_scale) < 1:
            raise DataError("crop/base extents must be positive")


def _nearest_axis(src: int, dst: int) -> np.ndarray:
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    return np.clip(np.rint(coords), 0, src - 1).astype(np.int64)


def resize_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    if (out_h, out_w) == (h, w):
        return mask.copy()
    iy = _nearest_axis(h, out_h)
    ix = _nearest_axis(w, out_w)
    return mask[iy[:, None], ix[None, :]]


def resize_image_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return T.bilinear_resize(T.as_tensor(image), out_h, out_w).data


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random-resize (aspect preserving) then pad and random-crop.

    The scale target is the base scale times a ratio drawn uniformly from the
    ratio range; the image is fit inside it. Padding uses 0 for the image and
    ignore_index for the mask so padded pixels never score.
    """
    cfg.validate()
    _, h, w = sample.image.shape
    ratio = rng.uniform(*cfg.ratio_range)
    tw = max(1, int(round(cfg.base_scale[0] * ratio)))
    th = max(1, int(round(cfg.base_scale[1] * ratio)))
    s = min(tw / w, th / h)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    image = resize_image_bilinear(sample.image, nh, nw)
    mask = resize_mask_nearest(sample.mask, nh, nw)

    ch, cw = cfg.crop_size
    ph, pw = max(ch - nh, 0), max(cw - nw, 0)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)),
                       constant_values=cfg.pad_value)
        mask = np.pad(mask, ((0, ph), (0, pw)),
                      constant_values=cfg.ignore_index)
    oy = int(rng.integers(0, image.shape[1] - ch + 1))
    ox = int(rng.integers(0, image.shape[2] - cw + 1))
    return Sample(image=image[:, oy:oy + ch, ox:ox + cw].astype(np.float32),
                  mask=mask[oy:oy + ch, ox:ox + cw])


# ---------------------------------------------------------------------------
# synthetic plume generator

@dataclass(frozen=True)
class SynthConfig:
    amplitude_per_class: float = 12.0
    noise_sigma: float = 2.0
    background_range: tuple[float, float] = (40.0, 110.0)
    mask_fraction: float = 0.2   # mask = plume field above this fraction of peak
    max_blobs: int = 4
    blob_sigma_range: tuple[float, float] = (0.08, 0.22)  # fraction of extent


def _plume_field(rng: np.random.Generator, h: int, w: int,
                 cfg: "SynthConfig") -> np.ndarray:
    """Sum of 1..max_blobs anisotropic Gaussian bumps, peak normalized to 1."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    s_lo, s_hi = cfg.blob_sigma_range
    for _ in range(int(rng.integers(1, cfg.max_blobs + 1))):
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        sy = rng.uniform(s_lo, s_hi) * h
        sx = rng.uniform(s_lo, s_hi) * w
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        field += rng.uniform(0.6, 1.0) * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    return field / field.max()


def _background(rng: np.random.Generator, h: int, w: int,
                cfg: SynthConfig) -> np.ndarray:
    lo, hi = cfg.background_range
    top = rng.uniform(lo, hi)
    bottom = rng.uniform(lo, hi)
    grad = np.linspace(top, bottom, h)[:, None] * np.ones((1, w))
    return grad


def synth_plume(rng: np.random.Generator, class_index: int,
                size: tuple[int, int] = (64, 64),
                cfg: SynthConfig = SynthConfig()) -> Sample:
    """One synthetic OGI-style frame: graded noisy background plus a plume
    whose peak brightness grows linearly with the class index. class 0 is
    pure background with an empty mask."""
    h, w = size
    img = _background(rng, h, w, cfg)
    mask = np.zeros((h, w), dtype=np.int32)
    if class_index > 0:
        field = _plume_field(rng, h, w, cfg)
        img = img + cfg.amplitude_per_class * class_index * field
        mask[field > cfg.mask_fraction * field.max()] = class_index
    img = img + rng.normal(0.0, cfg.noise_sigma, size=(h, w))
    img = np.clip(img, 0.0, 255.0)
    return Sample(image=np.repeat(img[None], 3, axis=0).astype(np.float32),
                  mask=mask)


def synth_sequence(rng: np.random.Generator, amplitude: float, n_frames: int,
                   n_background: int, size: tuple[int, int] = (128, 128),
                   cfg: SynthConfig = SynthConfig()):
    """Frame sequence sharing one static background, as a labeler workload.

    Returns (background_frames, frames, truth_masks); masks are binary 0/1.
    """
    h, w = size
    base = _background(rng, h, w, cfg)
    bg_frames = [base + rng.normal(0.0, cfg.noise_sigma, (h, w))
                 for _ in range(n_background)]
    frames, masks = [], []
    for _ in range(n_frames):
        field = _plume_field(rng, h, w, cfg)
        frame = base + amplitude * field + rng.normal(0.0, cfg.noise_sigma, (h, w))
        frames.append(np.clip(frame, 0.0, 255.0))
        masks.append((field > cfg.mask_fraction * field.max()).astype(np.int32))
    return [np.clip(f, 0.0, 255.0) for f in bg_frames], frames, masks


def write_synth_dataset(root, count: int, num_classes: int, size: int,
                        seed: int, cfg: SynthConfig = SynthConfig()) -> Manifest:
    """Generate a dataset tree (train/val/test layout) of synthetic samples."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    classes = ClassMap.default_for(num_classes)
    samples = []
    for i in range(count):
        k = i % num_classes
        samples.append((k, synth_plume(rng, k, (size, size), cfg)))
    order = rng.permutation(count)
    n_train, n_val, _ = _split_counts(count)
    manifest = Manifest(root=str(root))
    for rank, idx in enumerate(order):
        split = ("train" if rank < n_train
                 else "val" if rank < n_train + n_val else "test")
        k, sample = samples[idx]
        name = f"{idx:05d}_c{k}.png"
        img_rel = f"{split}/images/{name}"
        mask_rel = f"{split}/masks/{name}"
        write_rgb_png(sample.image, root / img_rel)
        save_mask(sample.mask, root / mask_rel)
        manifest.entries.append(SampleEntry(img_rel, mask_rel, split, class_hint=k))
    manifest.entries.sort(key=lambda e: e.image)
    classes.to_file(root / "classes.txt")
    manifest.save(root / "manifest.json")
    return manifest
