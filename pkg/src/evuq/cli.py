"""``evuq`` command line: data generation, training, grid maps, AUROC and FGSM sweeps.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 training divergence, 5 artifact format.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from evuq import __version__, _kernels, data, metrics, trainer
from evuq.autodiff import TrainingError
from evuq.config import ConfigError, TrainConfig
from evuq.data import DataError, GridSpec
from evuq.models import CheckpointError, load_checkpoint, restore_models, save_models

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_FORMAT = 0, 2, 3, 4, 5

CHECKPOINT_NAME = "model.ckpt"
MANIFEST_NAME = "manifest.txt"
DEFAULT_GRID = "-15,15,-15,15,200"
N_OOD = 1000
N_BOUNDARY = 1000

log = logging.getLogger("evuq")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run manifest
# --------------------------------------------------------------------------

def read_manifest(path) -> dict:
    out = {}
    p = Path(path)
    if p.exists():
        for line in p.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def write_manifest(path, entries: dict):
    """Atomic rewrite of a flat ``key=value`` file, keys in insertion order."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")
    tmp.replace(path)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n_per_class < 1:
        raise UsageError("--n-per-class must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = data.gen_gaussian_mixture(args.n_per_class, args.seed)
    train, test = data.train_test_split(ds, args.seed)
    data.save_csv(train, out / "train.csv")
    data.save_csv(test, out / "test.csv")
    data.save_csv(data.gen_uniform_ood(N_OOD, args.seed), out / "ood_far.csv")
    data.save_csv(data.boundary_strip_sampler(N_BOUNDARY, args.seed), out / "boundary.csv")
    print(f"wrote train ({len(train)}), test ({len(test)}), ood_far ({N_OOD}), boundary ({N_BOUNDARY}) to {out}")
    return EXIT_OK


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.load(path)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    data_dir = Path(args.data)
    train_set = data.load_csv(data_dir / "train.csv")
    test_set = data.load_csv(data_dir / "test.csv")
    if train_set.labels is None or test_set.labels is None:
        raise DataError("train.csv and test.csv need a label column")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    digest = cfg.digest()

    head = "softmax" if args.model == "l2" else "evidence"
    c = trainer.build_classifier(cfg, head=head, input_dim=train_set.dim, k=train_set.k)
    history = []
    models, optimizers = {"classifier": c}, {}
    wenn = None
    if args.model == "l2":
        trainer.train_baseline_softmax(c, train_set, cfg, history)
        trainer.write_epoch_csv(history, out / "trainlog.csv")
    elif args.model == "enn":
        trainer.train_baseline_enn(c, train_set, cfg, history)
        trainer.write_epoch_csv(history, out / "trainlog.csv")
    else:
        trainer.pretrain_enn(c, train_set, cfg, history)
        trainer.write_epoch_csv(history, out / "pretrain.csv")
        g, d = trainer.build_gan(cfg, data_dim=train_set.dim)
        wenn = trainer.train_wenn(c, g, d, train_set, cfg)
        wenn.log.write_csv(out / "trainlog.csv")
        models.update(generator=g, critic=d)
        optimizers = {"classifier": wenn.opt_classifier, "generator": wenn.opt_generator,
                      "critic": wenn.opt_critic}

    meta = {"config_hash": digest, "model": args.model, "seed": cfg.seed, "tool_version": __version__}
    if wenn is not None:
        meta["g_iterations"] = len(wenn.log)
    save_models(out / CHECKPOINT_NAME, models, optimizers, meta)

    headline = {"test_accuracy": metrics.accuracy(c, test_set)}
    scores = metrics.uncertainty_scores(c, test_set.features)
    headline["test_mean_entropy"] = float(scores["entropy"].mean())
    if c.is_evidential:
        headline["test_mean_vacuity"] = float(scores["vacuity"].mean())
    far_path = data_dir / "ood_far.csv"
    if far_path.exists():
        far = metrics.uncertainty_scores(c, data.load_csv(far_path).features)
        headline["far_mean_entropy"] = float(far["entropy"].mean())
        if c.is_evidential:
            headline["far_mean_vacuity"] = float(far["vacuity"].mean())
            headline["auroc_vac_test_vs_far"] = metrics.auroc(scores["vacuity"], far["vacuity"])
    if wenn is not None:
        headline["final_dist"] = float(wenn.log.records[-1].dist)
        headline["converged_at"] = wenn.log.converged_at if wenn.log.converged_at is not None else "none"

    manifest = {"config_hash": digest, "seed": cfg.seed, "model": args.model, "tool_version": __version__,
                "checkpoint": CHECKPOINT_NAME, "trainlog": "trainlog.csv", "config": "config.txt"}
    if wenn is not None:
        manifest["pretrain_log"] = "pretrain.csv"
    for k, v in headline.items():
        manifest[f"metric.{k}"] = _fmt(v)
    manifest["wall_clock_s"] = f"{time.perf_counter() - t0:.1f}"
    write_manifest(out / MANIFEST_NAME, manifest)
    for k, v in headline.items():
        print(f"{k}: {_fmt(v)}")
    return EXIT_OK


def _classifier_from(path):
    ckpt = load_checkpoint(path)
    models = restore_models(ckpt)
    if "classifier" not in models:
        raise CheckpointError(f"{path}: no classifier in checkpoint")
    return models["classifier"]


def cmd_eval_grid(args) -> int:
    try:
        grid = GridSpec.parse(args.grid)
    except ValueError as exc:
        raise UsageError(f"--grid: {exc}") from None
    c = _classifier_from(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = metrics.uncertainty_maps(c, grid)
    for name, values in maps.items():
        metrics.export_heatmap(values, out / f"{name}.csv", out / f"{name}.pgm", grid)
    print("wrote " + ", ".join(sorted(maps)) + f" maps ({grid.rx}x{grid.ry}) to {out}")
    return EXIT_OK


def cmd_auroc(args) -> int:
    c = _classifier_from(args.checkpoint)
    if args.score == "vac" and not c.is_evidential:
        raise UsageError("vacuity undefined for softmax head")
    key = "vacuity" if args.score == "vac" else "entropy"
    id_set = data.load_csv(args.id)
    ood_set = data.load_csv(args.ood)
    value = metrics.auroc(metrics.uncertainty_scores(c, id_set.features)[key],
                          metrics.uncertainty_scores(c, ood_set.features)[key])
    print(f"{value:.4f}")
    manifest_path = Path(args.checkpoint).with_name(MANIFEST_NAME)
    entries = read_manifest(manifest_path)
    entries[f"auroc.{args.score}.{Path(args.id).stem}_vs_{Path(args.ood).stem}"] = f"{value:.4f}"
    write_manifest(manifest_path, entries)
    return EXIT_OK


def _parse_eps(text):
    try:
        eps = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--eps: not a number list: {text!r}") from None
    if not eps:
        raise UsageError("--eps needs at least one value")
    if any(e < 0 or e > 0.5 for e in eps):
        raise UsageError("--eps values must lie in [0, 0.5]")
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise UsageError("--eps values must be non-decreasing")
    return eps


def cmd_fgsm_sweep(args) -> int:
    eps = _parse_eps(args.eps)
    c = _classifier_from(args.checkpoint)
    ds = data.load_csv(args.data)
    if ds.labels is None:
        raise UsageError(f"{args.data}: FGSM needs labels")
    rows = metrics.fgsm_sweep(c, ds, eps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    metrics.write_sweep_csv(rows, args.out)
    for r in rows:
        print(f"eps={r.epsilon:g} accuracy={r.accuracy:.4f} mean_entropy={r.mean_entropy:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evuq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"evuq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write train/test/ood_far/boundary CSVs")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-per-class", type=int, default=1000)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train an l2 / enn / wenn model")
    s.add_argument("--model", choices=("l2", "enn", "wenn"), required=True)
    s.add_argument("--config", help="key=value config file (defaults if omitted)")
    s.add_argument("--data", required=True, help="directory holding train.csv and test.csv")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-grid", help="uncertainty heatmaps over a 2-D grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", default=DEFAULT_GRID, help="xmin,xmax,ymin,ymax,res")
    s.set_defaults(func=cmd_eval_grid)

    s = sub.add_parser("auroc", help="OOD-detection AUROC of an uncertainty score")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--ood", required=True)
    s.add_argument("--score", choices=("vac", "ent"), default="vac")
    s.set_defaults(func=cmd_auroc)

    s = sub.add_parser("fgsm-sweep", help="accuracy and entropy under FGSM perturbations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--eps", default="0,0.1,0.2,0.3,0.4,0.5")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fgsm_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("EVUQ_THREADS")
    if threads:
        _kernels.set_threads(threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"evuq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"evuq: training diverged (phase={exc.phase}, iteration={exc.iteration}): {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, DataError) as exc:
        print(f"evuq: bad artifact: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"evuq: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
