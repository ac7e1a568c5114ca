"""Full segmentation network: build, inference, accounting, checkpoints.

FLOP accounting convention: one multiply-accumulate counts as one FLOP, and
only the differentiable forward path is counted (convolutions, linear maps,
attention products, the final factorization update plus reconstruction). The
no-grad factorization solver steps are reported separately and excluded from
the headline total; normalization and activation arithmetic is not counted.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, StageConfig, default_stages
from .errors import ConfigError, FormatError
from .ioutil import canonical_dumps
from .layers import Binding, ParamStore

IMAGENET_MEAN = (123.675, 116.28, 103.53)
IMAGENET_STD = (58.395, 57.12, 57.375)

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_MAGIC = b"GASF"
_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=default_stages)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    num_classes: int = 11
    ignore_index: int = 255
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.stages) != 4:
            raise ConfigError("stages must hold exactly four entries")
        for i, s in enumerate(self.stages):
            s.validate(f"stages[{i}]")
        self.decoder.validate()
        if self.decoder.num_classes is not None \
                and self.decoder.num_classes != self.num_classes:
            raise ConfigError("decoder.num_classes disagrees with num_classes")
        dims = [s.embed_dim for s in self.stages]
        if self.stages[3].embed_dim != max(dims):
            raise ConfigError("stages[3].embed_dim must be the widest stage")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("mean/std must each hold three values")
        if any(v <= 0 for v in self.std):
            raise ConfigError("std entries must be positive")

    def to_dict(self) -> dict:
        return {
            "stages": [{
                "patch_kernel": s.patch_kernel, "patch_stride": s.patch_stride,
                "patch_pad": s.patch_pad, "embed_dim": s.embed_dim,
                "depth": s.depth, "heads": s.heads, "reduction": s.reduction,
                "mlp_ratio": s.mlp_ratio,
            } for s in self.stages],
            "decoder": {
                "input_stages": list(self.decoder.input_stages),
                "ham_channels": self.decoder.ham_channels,
                "nmf_rank": self.decoder.nmf_rank,
                "nmf_steps_train": self.decoder.nmf_steps_train,
                "nmf_steps_eval": self.decoder.nmf_steps_eval,
                "nmf_eps": self.decoder.nmf_eps,
                "nmf_eval_seed": self.decoder.nmf_eval_seed,
            },
            "num_classes": self.num_classes,
            "ignore_index": self.ignore_index,
            "mean": list(self.mean),
            "std": list(self.std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"stages", "decoder", "num_classes", "ignore_index", "mean", "std"}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown model config key: {k}")
        stages = tuple(StageConfig(**s) for s in d.get("stages", []))
        dec = d.get("decoder", {})
        if "input_stages" in dec:
            dec = dict(dec, input_stages=tuple(dec["input_stages"]))
        cfg = cls(
            stages=stages if stages else default_stages(),
            decoder=DecoderConfig(**dec),
            num_classes=d.get("num_classes", 11),
            ignore_index=d.get("ignore_index", 255),
            mean=tuple(d.get("mean", IMAGENET_MEAN)),
            std=tuple(d.get("std", IMAGENET_STD)),
        )
        cfg.validate()
        return cfg


def tiny_config(num_classes: int = 3, dims=(8, 16, 24, 32), depths=(1, 1, 1, 1),
                heads=(1, 2, 2, 4), reductions=(8, 4, 2, 1),
                ham_channels: int = 32, nmf_rank: int = 4,
                nmf_steps_train: int = 1, input_stages=(1, 2, 3, 4)) -> ModelConfig:
    """Desk-scale configuration for tests and gradient checks."""
    return ModelConfig(
        stages=default_stages(dims=dims, depths=depths, heads=heads,
                              reductions=reductions),
        decoder=DecoderConfig(input_stages=tuple(input_stages),
                              ham_channels=ham_channels, nmf_rank=nmf_rank,
                              nmf_steps_train=nmf_steps_train),
        num_classes=num_classes,
        mean=(0.0, 0.0, 0.0), std=(60.0, 60.0, 60.0),
    )


class Model:
    """Built network holding named parameters plus encoder/decoder wiring."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.store, rng, cfg.stages)
        self.decoder = Decoder(self.store, rng,
                               tuple(s.embed_dim for s in cfg.stages),
                               cfg.decoder, cfg.num_classes)
        self._mean = np.array(cfg.mean, dtype=dtype).reshape(3, 1, 1)
        self._std = np.array(cfg.std, dtype=dtype).reshape(3, 1, 1)

    # ------------------------------------------------------------- forward

    def normalize(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=self.store.dtype)
        return (x - self._mean.astype(x.dtype)) / self._std.astype(x.dtype)

    def forward(self, image, binding: Binding | None = None, train: bool = False,
                nmf_seed: int | None = None, capture_weights: bool = False) -> T.Tensor:
        """Raw 0..255 (3,H,W) image to class logits at the decode grid."""
        if binding is None:
            binding = Binding()
        x = image if isinstance(image, T.Tensor) else T.Tensor(self.normalize(image))
        feats = self.encoder.encode(x, binding, capture_weights)
        return self.decoder.decode(feats, binding, train=train, nmf_seed=nmf_seed)

    def infer(self, image: np.ndarray):
        """Label map (H, W) plus per-class probabilities (K, H, W).

        Arbitrary extents are padded with zeros (after normalization) up to
        multiples of 32 and the logits are cropped back.
        """
        img = np.asarray(image)
        _, h, w = img.shape
        x = self.normalize(img)
        ph = (-h) % 32
        pw = (-w) % 32
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, ph), (0, pw)))
        logits = self.forward(T.Tensor(x))
        up = T.bilinear_resize(logits, h + ph, w + pw)
        probs = T.softmax_lastdim(T.transpose(up, (1, 2, 0)))
        probs = np.transpose(probs.data, (2, 0, 1))[:, :h, :w]
        labels = np.argmax(probs, axis=0).astype(np.int64)
        return labels, probs


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(cfg, seed=seed, dtype=dtype)


def count_params(model: Model) -> int:
    """Exact number of trainable scalars."""
    return model.store.total_size()


# ---------------------------------------------------------------------------
# analytic FLOP accounting

@dataclass
class FlopReport:
    entries: list[tuple[str, int]]
    solver_macs: int  # no-grad factorization iterations, excluded from total
    input_size: tuple[int, int]
    convention: str = ("MACs on the differentiable forward path; 1 MAC = 1 FLOP; "
                       "norm/activation arithmetic and no-grad solver steps excluded")

    @property
    def total(self) -> int:
        return sum(m for _, m in self.entries)

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def by_module(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, macs in self.entries:
            key = ".".join(name.split(".")[:2])
            out[key] = out.get(key, 0) + macs
        return out


def _conv_out(h: int, k: int, s: int, p: int) -> int:
    return (h + 2 * p - k) // s + 1


def count_flops(model: Model, input_size: tuple[int, int] = (512, 512)) -> FlopReport:
    """Analytic per-layer MAC count for a single forward pass."""
    cfg = model.cfg
    h, w = input_size
    entries: list[tuple[str, int]] = []
    cin = 3
    grids = []
    for i, s in enumerate(cfg.stages):
        name = f"encoder.stage{i + 1}"
        h = _conv_out(h, s.patch_kernel, s.patch_stride, s.patch_pad)
        w = _conv_out(w, s.patch_kernel, s.patch_stride, s.patch_pad)
        n = h * w
        c = s.embed_dim
        entries.append((f"{name}.embed", s.patch_kernel ** 2 * cin * c * n))
        r = s.reduction
        m = _conv_out(h, r, r, 0) * _conv_out(w, r, r, 0) if r > 1 else n
        attn = n * c * c          # q
        if r > 1:
            attn += r * r * c * c * m  # reduction conv
        attn += 2 * m * c * c     # k, v
        attn += 2 * n * m * c     # scores and context products
        attn += n * c * c         # output projection
        hidden = c * s.mlp_ratio
        ffn = 2 * n * c * hidden + 9 * hidden * n
        entries.append((f"{name}.blocks", s.depth * (attn + ffn)))
        grids.append((h, w))
        cin = c

    dec = cfg.decoder
    th, tw = grids[dec.input_stages[0] - 1]
    n = th * tw
    ham = dec.ham_channels
    rank = dec.nmf_rank
    concat = sum(cfg.stages[i - 1].embed_dim for i in dec.input_stages)
    entries.append(("decoder.squeeze", concat * ham * n))
    entries.append(("decoder.hamburger.lower", ham * ham * n))
    step = 2 * rank * ham * n + 2 * rank * rank * n + 2 * ham * rank * rank
    entries.append(("decoder.hamburger.nmf_final_step", step))
    entries.append(("decoder.hamburger.reconstruction", ham * rank * n))
    entries.append(("decoder.hamburger.upper", ham * ham * n))
    entries.append(("decoder.align", ham * ham * n))
    entries.append(("decoder.classifier", ham * cfg.num_classes * n))
    solver = (dec.nmf_steps_eval - 1) * step
    return FlopReport(entries=entries, solver_macs=solver, input_size=input_size)


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "GASF" | u32 version | u32 header_len | header JSON (canonical, utf-8)
# then tensor records until EOF:
#   u32 name_len | name utf-8 | u8 dtype tag (0=f32, 1=f64) | u8 rank
#   | rank x u32 dims | little-endian payload
# Optimizer moments use the reserved "optim:" name prefix.

def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def _read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise FormatError("checkpoint truncated while reading record header")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(fh, name_len, "record name").decode("utf-8")
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "record dtype/rank"))
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag} for tensor {name}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "record dims"))
    dtype = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize, f"payload of {name}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return name, arr.astype(_TAG_DTYPES[tag])


def save_checkpoint(model: Model, path, iteration: int = 0,
                    optimizer: "dict[str, dict[str, np.ndarray]] | None" = None) -> None:
    header = canonical_dumps({
        "config": model.cfg.to_dict(),
        "iteration": int(iteration),
        "has_optimizer": optimizer is not None,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in model.store:
            _write_record(fh, p.name, p.data)
        if optimizer is not None:
            for pname, slots in optimizer.items():
                for slot, arr in slots.items():
                    _write_record(fh, f"optim:{slot}:{pname}", np.asarray(arr))


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    iteration: int
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, dict[str, np.ndarray]] | None


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file completely; raises FormatError on any damage."""
    import json

    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise FormatError("bad magic bytes; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        optim: dict[str, dict[str, np.ndarray]] = {}
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            name, arr = rec
            if name.startswith("optim:"):
                _, slot, pname = name.split(":", 2)
                optim.setdefault(pname, {})[slot] = arr
            else:
                tensors[name] = arr
    cfg = ModelConfig.from_dict(header["config"])
    has_opt = bool(header.get("has_optimizer"))
    return Checkpoint(version=version, config=cfg,
                      iteration=int(header.get("iteration", 0)),
                      tensors=tensors, optimizer=optim if has_opt else None)


def load_checkpoint(path, num_classes: int | None = None,
                    reinit_head_if_class_mismatch: bool = False,
                    head_seed: int = 0) -> Model:
    """Rebuild a model from a checkpoint, bit-exactly.

    When num_classes differs from the stored head and reinit is enabled, the
    classifier layer is freshly initialized and every other tensor is loaded;
    with reinit disabled the mismatch is a config error.
    """
    ck = read_checkpoint(path)
    cfg = ck.config
    mismatch = num_classes is not None and num_classes != cfg.num_classes
    if mismatch:
        if not reinit_head_if_class_mismatch:
            raise ConfigError(
                f"checkpoint has {cfg.num_classes} classes, requested "
                f"{num_classes}; enable head reinit to transfer")
        dec = replace(cfg.decoder, num_classes=None)
        cfg = replace(cfg, num_classes=num_classes, decoder=dec)
    model = Model(cfg, seed=head_seed)
    head_prefix = "decoder.classifier."
    for p in model.store:
        if mismatch and p.name.startswith(head_prefix):
            continue  # keep the fresh init
        if p.name not in ck.tensors:
            raise FormatError(f"checkpoint is missing tensor {p.name}")
        arr = ck.tensors[p.name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"tensor {p.name} has shape {arr.shape}, expected {p.data.shape}")
        p.data = np.ascontiguousarray(arr, dtype=model.store.dtype)
    return model
