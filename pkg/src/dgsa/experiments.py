"""Seeded robustness comparisons between attention variants on the synthetic tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import load_run_config
from .data import make_dataset, oracle_accuracy
from .models import build_model, count_params
from .training import evaluate, fit

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    variant: str
    level: float
    seed: int
    test_accuracy: float
    oracle_accuracy: float | None
    params: int


def noise_overrides(task: str, level: float) -> dict[str, str]:
    if task == "text":
        return {"noise": "spurious_tokens", "noise_rate": repr(float(level))}
    return {"noise": "gaussian", "noise_sigma": repr(float(level))}


def run_one(preset: str, variant: str, level: float, seed: int, extra=None) -> RunResult:
    """Train ``variant`` on ``preset`` at one noise level.  ``seed`` sets both
    the training seed and the data seed, so each seed is a fresh dataset draw."""
    base = load_run_config(preset)
    overrides = {"variant": variant, "seed": str(seed), "data_seed": str(seed)}
    overrides.update(noise_overrides(base.model.task, level))
    overrides.update(extra or {})
    cfg = base.with_overrides(overrides)
    train, test = make_dataset(cfg.data)
    stack = build_model(cfg.model, np.random.default_rng(np.random.SeedSequence([seed])))
    fit(stack, train, cfg.train)
    acc = evaluate(stack, test).accuracy
    log.info("%s level=%s seed=%d acc=%.4f", variant, level, seed, acc)
    return RunResult(variant, level, seed, acc, oracle_accuracy(test, cfg.data), count_params(stack)[0])


def sweep(preset: str, variants, levels, seeds, extra=None) -> list[RunResult]:
    return [run_one(preset, v, lvl, s, extra) for lvl in levels for s in seeds for v in variants]


def format_table(results: list[RunResult]) -> str:
    lines = ["variant\tlevel\tseed\ttest_acc\toracle\tparams"]
    for r in results:
        oracle = "n/a" if r.oracle_accuracy is None else f"{r.oracle_accuracy:.4f}"
        lines.append(f"{r.variant}\t{r.level!r}\t{r.seed}\t{r.test_accuracy:.4f}\t{oracle}\t{r.params}")
    return "\n".join(lines)
