"""AdamW training loop with cosine / warmup-linear schedules and global-norm clipping.

Randomness is derived per epoch from ``SeedSequence([seed, epoch, stream])``
(stream 0 shuffles, stream 1 drives dropout), so a run is a deterministic
function of (config, dataset, seed) and any epoch can be replayed alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import Dataset
from .errors import ConfigError, NumericError, UsageError
from .models import LayerStack, model_forward

log = logging.getLogger(__name__)

SCHEDULES = ("cosine", "warmup_linear", "constant")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    decay_exclusions: str = "bias,norm"   # comma list from {bias, norm}, or none
    schedule: str = "cosine"
    warmup_steps: int = 0
    lr_min: float = 0.0
    clip_norm: float = 0.0                # 0 disables clipping
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.lr < 0 or self.lr_min < 0 or self.adam_eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr, lr_min and weight_decay must be >= 0; adam_eps > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.warmup_steps < 0 or self.clip_norm < 0:
            raise ConfigError("warmup_steps and clip_norm must be >= 0")
        self.excluded_groups()

    def excluded_groups(self) -> set:
        raw = self.decay_exclusions.strip()
        if raw in ("", "none"):
            return set()
        groups = {s.strip() for s in raw.split(",")}
        if not groups <= {"bias", "norm"}:
            raise ConfigError(f"decay_exclusions may only name bias and norm, got {raw!r}")
        return groups


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


# -- schedules ---------------------------------------------------------------

def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    step = min(max(step, 0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def warmup_linear_lr(step: int, warmup: int, total: int, lr_max: float) -> float:
    if warmup > total:
        raise ConfigError(f"warmup_steps={warmup} exceeds total steps {total}")
    if step < warmup:
        return lr_max * step / warmup
    if step >= total:
        return 0.0
    return max(0.0, lr_max * (total - step) / (total - warmup))


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "cosine":
        return cosine_lr(step, total, cfg.lr, cfg.lr_min)
    if cfg.schedule == "warmup_linear":
        return warmup_linear_lr(step, cfg.warmup_steps, total, cfg.lr)
    return cfg.lr


# -- optimizer ---------------------------------------------------------------

def clip_global_norm(grads, max_norm: float) -> float:
    """Scale the arrays in ``grads`` in place so their joint L2 norm is <= max_norm.

    Returns the factor applied (1.0 when no clipping was needed).
    """
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return 1.0
    factor = max_norm / total
    for g in grads:
        g *= factor
    return factor


def adamw_step(params, state: OptimizerState, cfg: TrainConfig, lr_t: float,
               no_decay=frozenset()) -> None:
    """One AdamW update over ``params`` ((name, Tensor) pairs) using their ``.grad``.

    Weight decay is decoupled (``theta -= lr * wd * theta``) and skipped for
    names in ``no_decay``.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at optimizer step {t}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay and name not in no_decay:
            p.data -= lr_t * cfg.weight_decay * p.data
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# -- loop --------------------------------------------------------------------

@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    accuracy: float
    lr_trace: list
    losses: list


@dataclass
class EvalReport:
    accuracy: float
    mean_loss: float
    per_class: dict
    n: int


def epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def no_decay_names(stack: LayerStack, cfg: TrainConfig) -> set:
    groups = cfg.excluded_groups()
    return {n for n, g in stack.groups.items() if g in groups}


def train_epoch(stack: LayerStack, dataset: Dataset, cfg: TrainConfig, state: OptimizerState,
                epoch: int, total_steps: int, metrics=None) -> EpochReport:
    """One pass over ``dataset`` in a seeded order; writes a line per step to ``metrics``."""
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    order = epoch_rng(cfg.seed, epoch, 0).permutation(len(dataset))
    drop_rng = epoch_rng(cfg.seed, epoch, 1)
    params = stack.parameters()
    skip = no_decay_names(stack, cfg)
    losses, lrs, correct = [], [], 0
    for start in range(0, len(dataset), cfg.batch_size):
        batch = dataset.batch(order[start:start + cfg.batch_size])
        lr_t = lr_at(cfg, state.step, total_steps)
        stack.zero_grad()
        logits = model_forward(stack, batch, training=True, rng=drop_rng)
        loss = ag.cross_entropy(logits, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {epoch}, step {state.step}, lr {lr_t}")
        ag.backward(loss)
        if cfg.clip_norm > 0:
            clip_global_norm([p.grad for _, p in params if p.grad is not None], cfg.clip_norm)
        adamw_step(params, state, cfg, lr_t, skip)
        hits = int((logits.data.argmax(axis=1) == batch.labels).sum())
        correct += hits
        losses.append(value)
        lrs.append(lr_t)
        if metrics is not None:
            metrics.write(f"{state.step}\t{epoch}\t{lr_t!r}\t{value!r}\t{hits / len(batch)!r}\n")
    return EpochReport(epoch, float(np.mean(losses)), correct / len(dataset), lrs, losses)


METRICS_HEADER = "# step\tepoch\tlr\tloss\tacc\n"


def fit(stack: LayerStack, train: Dataset, cfg: TrainConfig, metrics=None) -> list[EpochReport]:
    """Run ``cfg.epochs`` epochs from a fresh optimizer state."""
    total = cfg.epochs * steps_per_epoch(len(train), cfg.batch_size)
    if cfg.schedule == "warmup_linear" and cfg.warmup_steps > total:
        raise ConfigError(f"warmup_steps={cfg.warmup_steps} exceeds total steps {total}")
    state = OptimizerState()
    if metrics is not None:
        metrics.write(METRICS_HEADER)
    reports = []
    for epoch in range(cfg.epochs):
        rep = train_epoch(stack, train, cfg, state, epoch, total, metrics)
        log.info("epoch %d  loss %.4f  acc %.4f", epoch, rep.mean_loss, rep.accuracy)
        reports.append(rep)
    return reports


def evaluate(stack: LayerStack, dataset: Dataset, batch_size: int = 256) -> EvalReport:
    """Eval-mode accuracy and loss.  Argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    preds, total_loss = [], 0.0
    with ag.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
            logits = model_forward(stack, batch, training=False)
            total_loss += ag.cross_entropy(logits, batch.labels).item() * len(batch)
            preds.append(logits.data.argmax(axis=1))
    pred = np.concatenate(preds)
    labels = dataset.labels
    per_class = {}
    for c in range(dataset.n_classes):
        sel = labels == c
        per_class[c] = float((pred[sel] == c).mean()) if sel.any() else float("nan")
    return EvalReport(float((pred == labels).mean()), total_loss / len(dataset), per_class, len(dataset))
