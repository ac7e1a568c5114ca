"""Decoder head: squeeze concatenated pyramid features, refine global context
through a low-rank non-negative factorization, align, and classify per pixel.

The factorization X ~ D C (all entries >= 0) is solved by multiplicative
updates from a seeded uniform init. Gradients flow only through the final
update step plus the reconstruction; the earlier steps run outside the tape,
which keeps backprop away from the fixed-point iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .layers import Binding, Conv2d, GroupNorm, ParamStore


@dataclass(frozen=True)
class DecoderConfig:
    input_stages: tuple[int, ...] = (1, 2, 3, 4)  # 1-based indices into F1..F4
    ham_channels: int = 256
    nmf_rank: int = 64
    nmf_steps_train: int = 6
    nmf_steps_eval: int = 7
    nmf_eps: float = 1e-6
    nmf_eval_seed: int = 0
    num_classes: int | None = None  # resolved against the model config

    def validate(self) -> None:
        if not self.input_stages:
            raise ConfigError("decoder.input_stages must not be empty")
        if sorted(set(self.input_stages)) != list(self.input_stages):
            raise ConfigError("decoder.input_stages must be sorted and unique")
        if any(i < 1 or i > 4 for i in self.input_stages):
            raise ConfigError("decoder.input_stages entries must be in 1..4")
        if self.ham_channels < 1:
            raise ConfigError("decoder.ham_channels must be positive")
        if self.nmf_rank < 1:
            raise ConfigError("decoder.nmf_rank must be >= 1")
        if self.nmf_steps_train < 1 or self.nmf_steps_eval < 1:
            raise ConfigError("decoder.nmf_steps must be >= 1")
        if self.nmf_eps <= 0:
            raise ConfigError("decoder.nmf_eps must be > 0")


@dataclass
class NmfFactors:
    """Dictionary (d x R) and codes (R x n), non-negative after every update."""
    dictionary: np.ndarray
    codes: np.ndarray
    errors: list[float] = field(default_factory=list)

    @property
    def reconstruction(self) -> np.ndarray:
        return self.dictionary @ self.codes


def _nmf_step(x, d_mat, c_mat, eps):
    c_mat = c_mat * (d_mat.T @ x) / (d_mat.T @ d_mat @ c_mat + eps)
    d_mat = d_mat * (x @ c_mat.T) / (d_mat @ (c_mat @ c_mat.T) + eps)
    return d_mat, c_mat


def nmf_decompose(x: np.ndarray, rank: int, steps: int, eps: float = 1e-6,
                  seed: int = 0, record_errors: bool = False) -> NmfFactors:
    """Multiplicative-update NMF of a non-negative d x n matrix.

    Codes update first, then the dictionary; the Frobenius reconstruction
    error is non-increasing across full steps.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("nmf_decompose expects a 2-D matrix")
    if np.any(x < 0):
        raise DataError("nmf input must be elementwise non-negative")
    d, n = x.shape
    if rank > min(d, n):
        raise ConfigError(f"rank {rank} exceeds min(d, n) = {min(d, n)}")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    d_mat = rng.uniform(0.0, 1.0, size=(d, rank))
    c_mat = rng.uniform(0.0, 1.0, size=(rank, n))
    out = NmfFactors(d_mat, c_mat)
    for _ in range(steps):
        d_mat, c_mat = _nmf_step(x, d_mat, c_mat, eps)
        if record_errors:
            out.errors.append(float(np.linalg.norm(x - d_mat @ c_mat)))
    out.dictionary, out.codes = d_mat, c_mat
    return out


class Hamburger:
    """Linear map, rectify, factorize-and-reconstruct, map back, residual."""

    def __init__(self, store, rng, name, channels, cfg: DecoderConfig):
        self.cfg = cfg
        self.channels = channels
        self.lower = Conv2d(store, rng, f"{name}.lower", channels, channels, 1)
        self.upper = Conv2d(store, rng, f"{name}.upper", channels, channels, 1)

    def forward(self, x: T.Tensor, b: Binding, train: bool, nmf_seed: int) -> T.Tensor:
        if x.shape[0] != self.channels:
            raise ShapeError(
                f"hamburger expects {self.channels} channels, got {x.shape[0]}")
        c, h, w = x.shape
        cfg = self.cfg
        z = T.relu(self.lower.forward(x, b))
        zm = T.reshape(z, (c, h * w))

        steps = cfg.nmf_steps_train if train else cfg.nmf_steps_eval
        rng = np.random.default_rng(nmf_seed)
        dt = zm.data.dtype
        d_mat = rng.uniform(0.0, 1.0, size=(c, cfg.nmf_rank)).astype(dt)
        c_mat = rng.uniform(0.0, 1.0, size=(cfg.nmf_rank, h * w)).astype(dt)
        for _ in range(steps - 1):  # solver steps, outside the tape
            d_mat, c_mat = _nmf_step(zm.data, d_mat, c_mat, dt.type(cfg.nmf_eps))

        # final update recorded on the tape: gradients see one step only
        dp = T.Tensor(d_mat)
        cp = T.Tensor(c_mat)
        num_c = T.matmul(T.transpose(dp, (1, 0)), zm)
        den_c = T.Tensor(d_mat.T @ d_mat @ c_mat + dt.type(cfg.nmf_eps))
        c_new = T.div(T.mul(cp, num_c), den_c)
        num_d = T.matmul(zm, T.transpose(c_new, (1, 0)))
        den_d = T.add(T.matmul(dp, T.matmul(c_new, T.transpose(c_new, (1, 0)))),
                      T.as_tensor(cfg.nmf_eps, dt))
        d_new = T.div(T.mul(dp, num_d), den_d)
        recon = T.reshape(T.matmul(d_new, c_new), (c, h, w))

        y = self.upper.forward(recon, b)
        return T.relu(T.add(x, y))


class Decoder:
    """Resize selected stages to the first one's grid, squeeze, refine, classify."""

    def __init__(self, store: ParamStore, rng, stage_dims: tuple[int, ...],
                 cfg: DecoderConfig, num_classes: int, name: str = "decoder"):
        cfg.validate()
        if cfg.num_classes is not None and cfg.num_classes != num_classes:
            raise ConfigError(
                f"decoder.num_classes={cfg.num_classes} disagrees with "
                f"model num_classes={num_classes}")
        self.cfg = cfg
        self.num_classes = num_classes
        self.in_dims = tuple(stage_dims[i - 1] for i in cfg.input_stages)
        ham = cfg.ham_channels
        self.squeeze = Conv2d(store, rng, f"{name}.squeeze", sum(self.in_dims), ham, 1)
        self.hamburger = Hamburger(store, rng, f"{name}.hamburger", ham, cfg)
        # no bias: the following group norm subtracts per-group means, which
        # would cancel a per-channel shift exactly
        self.align = Conv2d(store, rng, f"{name}.align", ham, ham, 1, bias=False)
        self.align_norm = GroupNorm(store, f"{name}.align_norm", ham,
                                    math.gcd(32, ham))
        self.classifier = Conv2d(store, rng, f"{name}.classifier", ham,
                                 num_classes, 1)

    def decode(self, features: list[T.Tensor], b: Binding, train: bool = False,
               nmf_seed: int | None = None) -> T.Tensor:
        if len(features) < max(self.cfg.input_stages):
            raise ConfigError(
                f"decoder needs stages {self.cfg.input_stages}, got "
                f"{len(features)} features")
        sel = [features[i - 1] for i in self.cfg.input_stages]
        for f, d in zip(sel, self.in_dims):
            if f.shape[0] != d:
                raise ShapeError(
                    f"stage feature has {f.shape[0]} channels, expected {d}")
        _, th, tw = sel[0].shape
        x = T.concat([T.bilinear_resize(f, th, tw) for f in sel], axis=0)
        x = T.relu(self.squeeze.forward(x, b))
        if nmf_seed is None:
            nmf_seed = self.cfg.nmf_eval_seed
        x = self.hamburger.forward(x, b, train, nmf_seed)
        x = T.relu(self.align_norm.forward(self.align.forward(x, b), b))
        return self.classifier.forward(x, b)
