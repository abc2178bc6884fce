"""Command line: ``dgsa {train,eval,gradcheck,rollout,synth}``.

Exit codes: 0 ok, 1 usage/config, 2 data/format/I-O, 3 numeric failure.
Set ``DGSA_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import schema
from .config import RunConfig, load_run_config, parse_overrides
from .data import (DatasetSpec, make_dataset, oracle_accuracy, template_stats, write_idx, write_tsv)
from .errors import DataError, DgsaError, NumericError, UsageError
from .models import (ModelConfig, build_model, count_params, load_checkpoint, model_forward,
                     save_checkpoint)
from .rollout import export_heatmap, head_average, rollout_accumulate
from .training import evaluate, fit

log = logging.getLogger("dgsa")


def _init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed]))


def _config_from_args(args) -> RunConfig:
    overrides = parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    return load_run_config(args.config, overrides)


def _print_eval(rep, label=""):
    print(f"{label}accuracy {rep.accuracy:.6f}  loss {rep.mean_loss:.6f}  n {rep.n}")
    print("  class  accuracy")
    for c, acc in rep.per_class.items():
        print(f"  {c:5d}  {acc:.6f}")


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_dataset(cfg.data)
    stack = build_model(cfg.model, _init_rng(cfg.train.seed))
    total, groups = count_params(stack)
    log.info("model %s/%s with %d parameters %s", cfg.model.variant, cfg.model.task, total, groups)
    with open(out / "metrics.tsv", "w", newline="\n") as metrics:
        reports = fit(stack, train, cfg.train, metrics)
    save_checkpoint(out / "model.ckpt", stack, cfg.canonical())
    (out / "config.cfg").write_text(cfg.canonical(), encoding="utf-8")
    train_eval = evaluate(stack, train)
    test_eval = evaluate(stack, test) if len(test) else None
    summary = {
        "params": total,
        "final_epoch_loss": reports[-1].mean_loss,
        "final_epoch_accuracy": reports[-1].accuracy,
        "train_accuracy": train_eval.accuracy,
        "test_accuracy": None if test_eval is None else test_eval.accuracy,
        "oracle_test_accuracy": oracle_accuracy(test, cfg.data) if len(test) else None,
        "model_hash": cfg.model.hash(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {cfg.model.variant}/{cfg.model.task} ({total} params) -> {out}")
    _print_eval(train_eval, "train ")
    if test_eval is not None:
        _print_eval(test_eval, "test  ")
    return 0


# -- eval --------------------------------------------------------------------

def _hash_diff(a: ModelConfig, b: ModelConfig) -> str:
    pa = schema.parse_lines(a.canonical())
    pb = schema.parse_lines(b.canonical())
    lines = [f"  checkpoint hash {a.hash()}", f"  config hash     {b.hash()}"]
    for k in sorted(pa):
        if pa[k] != pb.get(k):
            lines.append(f"  {k}: checkpoint={pa[k]} config={pb.get(k)}")
    return "\n".join(lines)


def _with_noise(spec: DatasetSpec, level: float) -> DatasetSpec:
    pairs = {k: schema.format_value(v) for k, v in spec.__dict__.items()}
    if spec.data_kind in ("synth_text", "csv_text"):
        pairs.update(noise="spurious_tokens", noise_rate=repr(level))
    else:
        pairs.update(noise="gaussian", noise_sigma=repr(level))
    return schema.build(DatasetSpec, pairs)


def cmd_eval(args) -> int:
    stack, run_text = load_checkpoint(args.checkpoint)
    stored = RunConfig.from_pairs(schema.parse_lines(run_text, "checkpoint"))
    overrides = parse_overrides(args.set)
    cfg = load_run_config(args.config, overrides) if args.config else stored.with_overrides(overrides)
    if cfg.model.hash() != stack.cfg.hash():
        raise DataError("checkpoint does not match config; refusing to evaluate\n"
                        + _hash_diff(stack.cfg, cfg.model))
    levels = [None]
    if args.noise_sweep:
        try:
            levels = [float(x) for x in args.noise_sweep.split(",")]
        except ValueError:
            raise UsageError(f"--noise-sweep expects comma-separated numbers") from None
    if levels == [None]:
        train, test = make_dataset(cfg.data)
        _print_eval(evaluate(stack, train if args.split == "train" else test), f"{args.split} ")
        return 0
    print("noise_level\taccuracy\tloss\toracle")
    for level in levels:
        spec = _with_noise(cfg.data, level)
        train, test = make_dataset(spec)
        ds = train if args.split == "train" else test
        rep = evaluate(stack, ds)
        oracle = oracle_accuracy(ds, spec)
        print(f"{level!r}\t{rep.accuracy:.6f}\t{rep.mean_loss:.6f}\t"
              f"{'n/a' if oracle is None else f'{oracle:.6f}'}")
    return 0


# -- gradcheck ---------------------------------------------------------------

TINY = {"depth": 2, "d_model": 8, "heads": 2, "vocab_size": 11, "max_seq_len": 4,
        "image_size": 4, "patch_size": 2, "dtype": "float64", "dropout_p": 0.0}


def tiny_model_config(cfg: ModelConfig) -> ModelConfig:
    """Shrink ``cfg`` to gradcheck size, keeping every structural switch."""
    pairs = {k: schema.format_value(v) for k, v in cfg.__dict__.items()}
    pairs.update({k: schema.format_value(v) for k, v in TINY.items()})
    return schema.build(ModelConfig, pairs)


def gradcheck_model(mcfg: ModelConfig, seed: int = 0, h: float = 1e-5, tol: float = 1e-4):
    """Finite-difference check of every parameter of a float64 model on a fixed batch.

    Parameters are jittered with N(0, 0.1^2) after init so the zero-initialised
    gate and unit norm gains are checked away from their symmetric start.
    """
    rng = np.random.default_rng(seed)
    stack = build_model(mcfg, rng)
    for t in stack.params.values():
        t.data += rng.normal(0.0, 0.1, size=t.shape)
    B = 2
    from .models import Batch
    if mcfg.task == "text":
        batch = Batch(rng.integers(0, mcfg.vocab_size, size=(B, mcfg.max_seq_len)),
                      rng.integers(0, mcfg.n_classes, size=B))
    else:
        batch = Batch(rng.random((B, mcfg.channels, mcfg.image_size, mcfg.image_size)),
                      rng.integers(0, mcfg.n_classes, size=B))
    names, leaves = zip(*stack.parameters())

    def loss():
        return ag.cross_entropy(model_forward(stack, batch, training=False), batch.labels)

    report = ag.gradcheck(loss, leaves, h=h, tol=tol, names=names)
    return report, stack.groups


def cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args)
    mcfg = cfg.model if args.full_size else tiny_model_config(cfg.model)
    if mcfg.dtype != "float64":
        mcfg = schema.build(ModelConfig, {**{k: schema.format_value(v) for k, v in mcfg.__dict__.items()},
                                          "dtype": "float64"})
    report, groups = gradcheck_model(mcfg, cfg.train.seed, args.h, args.tol)
    per_group = {}
    for name, err in report.max_rel_error.items():
        g = groups[name.rstrip("'")]
        per_group[g] = max(per_group.get(g, 0.0), err)
    print(f"gradcheck {mcfg.variant}/{mcfg.task}  h={args.h}  tol={args.tol}")
    for g in sorted(per_group):
        flag = "ok" if per_group[g] < args.tol else "FAIL"
        print(f"  {g:10s} max rel err {per_group[g]:.3e}  {flag}")
    if args.verbose:
        for name, err in report.max_rel_error.items():
            print(f"    {name:28s} {err:.3e}")
    if not report.passed:
        print(f"gradcheck FAILED: worst {report.worst:.3e} >= {args.tol}")
        return NumericError.exit_code
    print(f"gradcheck passed: worst {report.worst:.3e}")
    return 0


# -- rollout -----------------------------------------------------------------

def cmd_rollout(args) -> int:
    stack, run_text = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_pairs(schema.parse_lines(run_text, "checkpoint"))
    train, test = make_dataset(cfg.data)
    ds = train if args.split == "train" else test
    if not 0 <= args.sample < len(ds):
        raise UsageError(f"sample {args.sample} outside [0, {len(ds)})")
    batch = ds.batch([args.sample])
    captured = []
    with ag.no_grad():
        logits = model_forward(stack, batch, training=False, capture=captured)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layer_maps = []
    written = []
    for l, maps in enumerate(captured, 1):
        signed = head_average(maps.fused[0])
        layer_maps.append(signed)
        written += export_heatmap(signed, out / f"layer_{l}.csv", "csv")
        written += export_heatmap(signed, out / f"layer_{l}.pgm", "pgm", signed=True)
    roll = rollout_accumulate(layer_maps)
    written += export_heatmap(roll, out / "rollout.csv", "csv")
    written += export_heatmap(roll, out / "rollout.pgm", "pgm")
    if stack.cfg.task == "vision":
        grid = stack.cfg.image_size // stack.cfg.patch_size
        focus = roll[0, 1:].reshape(grid, grid)
    else:
        keep = np.ones(roll.shape[0]) if batch.mask is None else batch.mask[0].astype(float)
        focus = (keep / keep.sum()) @ roll
    written += export_heatmap(focus, out / "focus.csv", "csv")
    written += export_heatmap(focus, out / "focus.pgm", "pgm")
    pred = int(logits.data[0].argmax())
    print(f"sample {args.sample} ({args.split}) label {int(batch.labels[0])} predicted {pred}")
    for p in written:
        print(f"  wrote {p}")
    return 0


# -- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    spec = cfg.data
    if spec.data_kind not in ("synth_text", "synth_vision"):
        raise UsageError(f"synth needs a synthetic data_kind, got {spec.data_kind}")
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_dataset(spec)
    for split, ds in (("train", train), ("test", test)):
        if spec.data_kind == "synth_text":
            texts = [" ".join(f"w{int(t)}" for t in row) for row in ds.inputs]
            write_tsv(out / f"{split}.tsv", ds.labels, texts)
        else:
            pixels = np.floor(ds.inputs * 255.0 + 0.5).astype(np.uint8)
            write_idx(out / f"{split}-images.idx", pixels)
            write_idx(out / f"{split}-labels.idx", ds.labels.astype(np.uint8))
    lines = [f"data_kind {spec.data_kind}", f"noise {spec.noise}",
             f"noise_level {spec.rate if spec.data_kind == 'synth_text' else spec.sigma!r}",
             f"oracle_train_accuracy {oracle_accuracy(train, spec)!r}",
             f"oracle_test_accuracy {oracle_accuracy(test, spec)!r}"]
    if spec.data_kind == "synth_vision":
        stats = template_stats(spec.n_classes, spec.image_size, spec.channels)
        lines.append(f"template_min_sq_distance {stats['min_sq_distance']!r}")
    report = "\n".join(lines) + "\n"
    (out / "oracle.txt").write_text(report)
    (out / "spec.cfg").write_text(schema.canonical(spec))
    print(report, end="")
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgsa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="config file path or preset name (text-tiny, vision-tiny, ...)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the training seed")

    p = sub.add_parser("train", help="train a model and write metrics + checkpoint")
    config_args(p)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="config to validate the checkpoint against")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--noise-sweep", metavar="LEVELS",
                   help="comma-separated noise levels (rate for text, sigma for vision)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model instance")
    config_args(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--full-size", action="store_true", help="check the configured size as-is")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("rollout", help="export per-layer maps and attention rollout")
    p.add_argument("checkpoint")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("synth", help="materialise a synthetic dataset with its oracle report")
    config_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DGSA_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else UsageError.exit_code
    try:
        return args.func(args)
    except DgsaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
