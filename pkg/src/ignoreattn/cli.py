"""Command-line entry point: ``ignoreattn {train,eval,gradcheck,cam,synth}``.

Exit codes: 0 ok, 1 other failure, 2 config, 3 data, 4 numeric, 5 checkpoint.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import statistics
import sys
from pathlib import Path

import numpy as np

from . import cam, checkpoint, config, gradcheck
from .data import (LabeledImages, load_cifar_binary, normalize, split_train_val, synth_generate,
                   write_cifar_binary)
from .errors import CheckpointError, ConfigError, DataError, IgnoreAttnError, NumericError
from .models import Model
from .train import fit, evaluate

log = logging.getLogger("ignoreattn")

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_top1", "val_top5")
SUMMARY_COLUMNS = ("row", "best_epoch", "val_loss", "val_top1", "val_top5")
SYNTH_TEST_OFFSET = 1000


# ------------------------------------------------------------------ data

def load_pool(cfg: config.RunConfig) -> LabeledImages:
    """Training pool (before the validation split)."""
    if cfg.dataset == "synth":
        pool = synth_generate(cfg.synth_spec(), "train")
    else:
        if not cfg.train_files:
            raise DataError(f"dataset {cfg.dataset} needs train_files")
        pool = load_cifar_binary(cfg.train_files, cfg.dataset, "train")
    if cfg.n_train is not None:
        if cfg.n_train > len(pool):
            raise DataError(f"n_train={cfg.n_train} exceeds the {len(pool)} available images")
        pool = pool.take(np.arange(cfg.n_train))
    return pool


def load_splits(cfg: config.RunConfig) -> tuple[LabeledImages, LabeledImages]:
    pool = load_pool(cfg)
    if cfg.n_val >= len(pool):
        raise DataError(f"n_val={cfg.n_val} leaves no training images out of {len(pool)}")
    return split_train_val(pool, cfg.n_val, cfg.split_seed)


def load_test(cfg: config.RunConfig) -> LabeledImages:
    if cfg.dataset == "synth":
        return synth_generate(cfg.synth_spec(cfg.synth_seed + SYNTH_TEST_OFFSET), "test")
    if not cfg.test_files:
        raise DataError(f"dataset {cfg.dataset} needs test_files")
    return load_cifar_binary(cfg.test_files, cfg.dataset, "test")


# ------------------------------------------------------------------ csv

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ train

def train_seed(cfg: config.RunConfig, seed: int, train_set, val_set, run_dir: Path) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    model = Model(cfg.model_config(), seed)
    norm = train_set.norm_stats()
    rows, best = [], {"top1": math.inf}
    metrics_path = run_dir / "metrics.csv"
    ckpt_path = run_dir / "best.ckpt"
    write_csv(metrics_path, METRIC_COLUMNS, [])

    def on_epoch(rec, model, state):
        rows.append((rec.epoch, rec.lr, rec.train_loss, rec.val_loss, rec.val_top1, rec.val_top5))
        write_csv(metrics_path, METRIC_COLUMNS, rows)
        if rec.val_top1 < best["top1"]:
            best.update(top1=rec.val_top1, record=rec)
            ck = checkpoint.from_model(model, seed=seed, epoch=rec.epoch + 1, velocities=state.velocities,
                                       rng_state=state.rng_state, norm=norm, run_config=cfg.to_text())
            checkpoint.save(ckpt_path, ck)

    history = fit(model, train_set, val_set, cfg.train_config(seed), cfg.augment_config(), norm, on_epoch)
    if history.diverged:
        raise NumericError(f"seed {seed}: training diverged after {len(history.records)} epoch(s)")
    return {"seed": seed, "record": best.get("record")}


def _summary_rows(results) -> list[tuple]:
    rows = []
    for r in results:
        rec = r["record"]
        if rec is None:
            rows.append((f"seed_{r['seed']}", -1, math.nan, math.nan, math.nan))
        else:
            rows.append((f"seed_{r['seed']}", rec.epoch, rec.val_loss, rec.val_top1, rec.val_top5))
    cols = list(zip(*[row[2:] for row in rows]))
    means = tuple(statistics.fmean(c) for c in cols)
    stds = tuple(statistics.stdev(c) if len(c) > 1 else math.nan for c in cols)
    rows.append(("mean", "", *means))
    rows.append(("std", "", *stds))
    return rows


def cmd_train(args) -> int:
    cfg = config.load(args.config, args.set)
    train_set, val_set = load_splits(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{k} = {v}\n" for k, v in cfg.to_text().items())
    log.info("train=%d val=%d attention=%s", len(train_set), len(val_set), cfg.attention)
    results = []
    for seed in cfg.seeds:
        results.append(train_seed(cfg, seed, train_set, val_set, out / f"seed_{seed}"))
    rows = _summary_rows(results)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows)
    mean, std = rows[-2], rows[-1]
    print(f"{cfg.attention}: best val top-1 {mean[3]:.2f} +/- {std[3]:.2f} over {len(results)} seed(s)")
    return 0


# ------------------------------------------------------------------ eval

def _checkpoint_run_config(ck: checkpoint.Checkpoint, overrides) -> config.RunConfig:
    if ck.run_config is None:
        raise CheckpointError("checkpoint carries no run config; cannot reconstruct its data")
    values = dict(ck.run_config)
    values.update(config.parse_overrides(overrides))
    return config.from_mapping(values)


def _check_compatible(model: Model, data: LabeledImages) -> LabeledImages:
    """Reject data the checkpoint cannot score; relabel the class count to the model's."""
    if tuple(data.images.shape[1:]) != tuple(model.config.input_shape):
        raise CheckpointError(f"checkpoint expects images {model.config.input_shape}, "
                              f"data has {data.images.shape[1:]}")
    k = model.config.num_classes
    if data.labels.max() >= k:
        raise CheckpointError(f"checkpoint has {k} classes, data has label {data.labels.max()}")
    return LabeledImages(data.images, data.labels, k, data.split)


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    model = ck.build_model()
    if args.files:
        data = load_cifar_binary(args.files, args.variant, args.split)
    else:
        cfg = _checkpoint_run_config(ck, args.set)
        data = load_test(cfg) if args.split == "test" else load_splits(cfg)[args.split == "val"]
    data = _check_compatible(model, data)
    m = evaluate(model, data, ck.norm)
    print(f"split={args.split} n={len(data)} loss={m['loss']:.6f} top1={m['top1']:.2f} top5={m['top5']:.2f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(Path(args.out), ("split", "n", "loss", "top1", "top5"),
                  [(args.split, len(data), m["loss"], m["top1"], m["top5"])])
    return 0


# ------------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    try:
        names = gradcheck.select(args.scope)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    failed = 0
    print(f"{'case':<24} {'max rel err':>12}  result")
    for name in names:
        res = gradcheck.run_case(name, args.trials, args.seed)
        failed += not res.passed
        print(f"{res.name:<24} {res.max_rel_error:>12.3e}  {'ok' if res.passed else 'FAIL'}")
    print(f"{len(names) - failed}/{len(names)} passed (tolerance {gradcheck.TOLERANCE:g})")
    return 4 if failed else 0


# ------------------------------------------------------------------ cam

CAM_COLUMNS = ("index", "label", "class_index", "source", "border_width", "border_mean", "interior_mean")


def cmd_cam(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    model = ck.build_model()
    data = load_cifar_binary(args.images, args.variant, "cam")
    if args.limit is not None:
        data = data.take(np.arange(min(args.limit, len(data))))
    data = _check_compatible(model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(data)):
        raw = data.images[i]
        x = normalize(raw[None], ck.norm)[0]
        if args.target == "label":
            cls = int(data.labels[i])
        else:
            cls = int(np.argmax(model(x[None], "eval").value[0]))
        heat = cam.grad_cam(model, x, cls, args.layer)
        cam.export_image(heat.values, out / f"cam_{i:04d}.pgm", image=raw)
        try:
            resp, source = cam.ignoring_response(model)[0], "ignoring_response"
        except ValueError:
            resp, source = heat.values, "heatmap"
        stats = cam.ignore_mask_stats(resp, args.border)
        rows.append((i, int(data.labels[i]), cls, source, stats.border_width,
                     stats.border_mean, stats.interior_mean))
    write_csv(out / "regions.csv", CAM_COLUMNS, rows)
    print(f"wrote {2 * len(rows)} images and regions.csv to {out}")
    return 0


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    cfg = config.load(args.config, args.set)
    spec = cfg.synth_spec(args.seed)
    if spec.hw != 32:
        raise ConfigError("CIFAR-format export needs synth_hw = 32")
    data = synth_generate(spec, args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_cifar_binary(args.out, data, "cifar10")
    print(f"wrote {len(data)} images to {args.out}")
    return 0


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ignoreattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    t = sub.add_parser("train", help="train one model per seed")
    with_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1/top-5 error of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.add_argument("--files", nargs="+", help="CIFAR binary files to evaluate instead")
    e.add_argument("--variant", choices=("cifar10", "cifar100"), default="cifar10")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override the checkpoint's stored run config (e.g. data paths)")
    e.add_argument("--out", help="CSV file for the metrics row")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="compare backward rules with finite differences")
    g.add_argument("--scope", default="all", help="all, primitives, blocks or comma-separated case names")
    g.add_argument("--trials", type=int, default=gradcheck.TRIALS)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("cam", help="Grad-CAM heatmaps and border/interior statistics")
    c.add_argument("checkpoint")
    c.add_argument("images", nargs="+", help="CIFAR binary file(s)")
    c.add_argument("--out", required=True)
    c.add_argument("--layer")
    c.add_argument("--target", choices=("pred", "label"), default="pred")
    c.add_argument("--border", type=int, default=4)
    c.add_argument("--limit", type=int)
    c.add_argument("--variant", choices=("cifar10", "cifar100"), default="cifar10")
    c.set_defaults(func=cmd_cam)

    s = sub.add_parser("synth", help="write the planted-distractor dataset in CIFAR format")
    with_config(s)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="defaults to synth_seed")
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IgnoreAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
