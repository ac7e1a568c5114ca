"""Cross-entropy training with decoupled-decay Adam and warmup + polynomial
learning-rate decay, plus confusion-matrix evaluation over manifest splits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentConfig, Manifest, Sample, load_sample, augment
from .errors import ConfigError, NumericsError
from .layers import Binding, KIND_WEIGHT, Param
from .metrics import MetricsReport, confusion_accumulate, metrics_from_confusion, new_confusion
from .model import Model

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# learning-rate schedule

@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 6e-5
    warmup_iters: int = 1500
    warmup_start_factor: float = 1e-6
    total_iters: int = 160_000
    poly_power: float = 1.0
    min_lr: float = 0.0

    def validate(self) -> None:
        if self.warmup_iters >= self.total_iters:
            raise ConfigError("warmup_iters must be < total_iters")
        if self.base_lr <= 0 or self.warmup_start_factor <= 0:
            raise ConfigError("base_lr and warmup_start_factor must be positive")
        if self.min_lr < 0 or self.poly_power <= 0:
            raise ConfigError("min_lr must be >= 0 and poly_power > 0")


def lr_at(iteration: int, cfg: ScheduleConfig) -> float:
    """Linear ramp to base_lr over the warmup, then polynomial decay to min_lr."""
    cfg.validate()
    if iteration < 0 or iteration > cfg.total_iters:
        raise ConfigError(
            f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if iteration < cfg.warmup_iters:
        f = cfg.warmup_start_factor
        return cfg.base_lr * (f + (1.0 - f) * iteration / cfg.warmup_iters)
    frac = (iteration - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters)
    return (cfg.base_lr - cfg.min_lr) * (1.0 - frac) ** cfg.poly_power + cfg.min_lr


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: list[Param], grads: dict[str, np.ndarray],
               state: OptimState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.01) -> OptimState:
    """One decoupled-weight-decay Adam step, in place on the parameter arrays.

    Normalization parameters and biases are exempt from weight decay.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape mismatch for {p.name}")
        if weight_decay and p.kind == KIND_WEIGHT:
            p.data *= (1.0 - lr * weight_decay)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.data, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (lr * step).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# loss

def cross_entropy(logits: T.Tensor, target: np.ndarray,
                  ignore_index: int = 255) -> T.Tensor:
    """Mean per-pixel cross entropy; logits are bilinearly resized to the
    target extents first. All-ignored targets give zero loss with a warning."""
    th, tw = np.asarray(target).shape
    logits = T.bilinear_resize(logits, th, tw)
    if not np.any(np.asarray(target) != ignore_index):
        log.warning("cross_entropy: every pixel is ignored; loss defined as 0")
    return T.cross_entropy_logits(logits, target, ignore_index)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    val_every: int | None = None   # default: total_iters // 10
    log_path: str | None = None

    def resolved_val_every(self) -> int:
        if self.val_every is not None:
            return self.val_every
        return max(1, self.schedule.total_iters // 10)


@dataclass
class TrainLog:
    lines: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    val_miou: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, line: str, path: str | None) -> None:
        self.lines.append(line)
        if path:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def _forward_loss(model: Model, sample: Sample, tape: T.GradTape,
                  binding: Binding, nmf_seed: int) -> T.Tensor:
    logits = model.forward(sample.image, binding, train=True, nmf_seed=nmf_seed)
    return cross_entropy(logits, sample.mask, model.cfg.ignore_index)


def train(model: Model, manifest: Manifest, hyper: TrainConfig,
          seed: int = 0) -> TrainLog:
    """Iteration loop: sample, augment, forward, backprop, Adam step at the
    scheduled rate; validates every total/10 iterations. Deterministic given
    the seed. Aborts with diagnostics if the loss goes non-finite."""
    sched = hyper.schedule
    sched.validate()
    entries = manifest.split("train")
    if not entries:
        raise ConfigError("manifest has no training samples")
    rng = np.random.default_rng(seed)
    params = list(model.store)
    state = OptimState()
    out = TrainLog()
    val_every = hyper.resolved_val_every()
    if hyper.log_path:
        Path(hyper.log_path).parent.mkdir(parents=True, exist_ok=True)

    for it in range(sched.total_iters):
        lr = lr_at(it, sched)
        picks = [entries[int(i)] for i in
                 rng.integers(0, len(entries), size=hyper.batch_size)]
        batch = []
        for e in picks:
            s = load_sample(manifest, e, model.cfg.num_classes,
                            model.cfg.ignore_index)
            if hyper.augment is not None:
                s = augment(s, hyper.augment, rng)
            batch.append(s)
        seeds = [int(rng.integers(0, 2 ** 63)) for _ in batch]
        try:
            with T.GradTape() as tape:
                binding = Binding(tape)
                total = None
                for s, ns in zip(batch, seeds):
                    l = _forward_loss(model, s, tape, binding, ns)
                    total = l if total is None else T.add(total, l)
                loss = T.scale(total, 1.0 / len(batch))
                bound = [binding.get(p) for p in params]
                gl = tape.gradients(loss, bound)
        except NumericsError as exc:
            raise NumericsError(
                f"non-finite loss at iteration {it} (lr={lr:.3e}): {exc}") from exc
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            norms = {p.name: float(np.linalg.norm(g))
                     for p, g in zip(params, gl)}
            worst = max(norms, key=norms.get)
            raise NumericsError(
                f"non-finite loss at iteration {it} (lr={lr:.3e}, "
                f"largest grad {worst}={norms[worst]:.3e})")
        grads = {p.name: g for p, g in zip(params, gl)}
        adamw_step(params, grads, state, lr, hyper.betas, hyper.adam_eps,
                   hyper.weight_decay)
        out.losses.append(loss_val)
        out.append(f"{it},{lr:.10e},{loss_val:.6f}", hyper.log_path)
        if (it + 1) % val_every == 0 or (it + 1) == sched.total_iters:
            report = evaluate(model, manifest, "val")
            out.val_miou.append((it + 1, report.miou, report.mfscore))
            out.append(f"{it + 1},{report.miou:.6f},{report.mfscore:.6f}",
                       hyper.log_path)
    return out


def evaluate(model: Model, manifest: Manifest, split: str = "val") -> MetricsReport:
    """Whole-image inference over a split, confusion matrix, derived metrics."""
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"manifest split '{split}' is empty")
    cm = new_confusion(model.cfg.num_classes)
    for e in entries:
        s = load_sample(manifest, e, model.cfg.num_classes,
                        model.cfg.ignore_index)
        labels, _ = model.infer(s.image)
        confusion_accumulate(cm, labels, s.mask, model.cfg.ignore_index)
    return metrics_from_confusion(cm)
