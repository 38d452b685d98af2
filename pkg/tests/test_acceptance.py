"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that ``conftest.py`` prints in the
terminal summary, so the pass/fail table shows up even without ``-s``.
The synthetic runs share session fixtures: one data directory, two WENN
trainings (also used for the reproducibility check), a plain ENN and an
L2 softmax baseline, all on ``configs/synthetic.conf``.
"""
import csv
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import test_autodiff as tad
from evuq import autodiff as ad
from evuq import cli, data, losses, metrics, sl, trainer
from evuq.autodiff import Tensor
from evuq.config import TrainConfig
from evuq.models import load_checkpoint, restore_models
from helpers import gradcheck

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_CONFIG = ROOT / "configs" / "synthetic.conf"
RESULTS = {}

pytestmark = pytest.mark.acceptance


def verdict(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def _evuq(*args):
    res = subprocess.run([sys.executable, "-m", "evuq", *map(str, args)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return res


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    _evuq("gen-data", "--out", root / "data", "--seed", 0)
    out = {"data": root / "data"}
    for name, model in (("wenn", "wenn"), ("wenn_again", "wenn"), ("enn", "enn"), ("l2", "l2")):
        _evuq("train", "--model", model, "--config", REFERENCE_CONFIG, "--data", root / "data",
              "--out", root / name)
        out[name] = root / name
    return out


def _classifier(run_dir):
    return restore_models(load_checkpoint(run_dir / "model.ckpt"))["classifier"]


@pytest.fixture(scope="session")
def scores(runs):
    sets = {name: data.load_csv(runs["data"] / f"{name}.csv").features
            for name in ("test", "ood_far", "boundary")}
    sets["core"] = data.class_core_points(1000, 0)
    return {model: {k: metrics.uncertainty_scores(_classifier(runs[model]), x) for k, x in sets.items()}
            for model in ("wenn", "enn", "l2")}


# ---------------------------------------------------------------------------
# closed forms and oracles
# ---------------------------------------------------------------------------

def test_c01_closed_forms():
    cases = [((1, 1, 1), 1.0, 0.0), ((50, 50, 50), 0.02, 0.98), ((50, 1, 1), 3 / 52, 0.0)]
    worst = max(max(abs(sl.vacuity(a) - v), abs(sl.dissonance(a) - d)) for a, v, d in cases)
    verdict(1, worst < 1e-9, f"max |error| {worst:.1e} over 3 exemplar opinions (tol 1e-9)")


def test_c02_enn_loss_monte_carlo():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        alpha = 1.0 + rng.exponential(4.0, size=3) * (rng.uniform(size=3) < 0.8)
        y = np.eye(3)[rng.integers(3)]
        closed = losses.enn_sq_loss(Tensor(alpha[None, :]), y[None, :]).value
        p = rng.dirichlet(alpha, size=100_000)
        sq = np.sum((y - p) ** 2, axis=1)
        se = sq.std(ddof=1) / np.sqrt(sq.size)
        worst = max(worst, abs(closed - sq.mean()) / se)
    elapsed = time.perf_counter() - t0
    verdict(2, worst <= 3 and elapsed < 30,
            f"worst deviation {worst:.2f} SE over 20 pairs x 1e5 draws (tol 3 SE), {elapsed:.1f}s")


def test_c03_gradcheck_everything():
    t0 = time.perf_counter()
    errors = {name: gradcheck(fn, inputs) for name, (inputs, fn) in tad.PRIMITIVE_CASES.items()}
    missing = set(ad.PRIMITIVES) - set(tad.PRIMITIVE_CASES)
    failed = [name for name, e in errors.items() if not e < 1e-3]
    second = ["mul", "div", "matmul", "relu", "softplus", "sigmoid", "l2_norm_rows", "logsumexp_rows",
              "mul_rows"]
    net_checks = [tad.test_regularized_enn_loss_gradcheck, tad.test_cross_entropy_gradcheck,
                  tad.test_critic_loss_gradcheck_second_order, tad.test_gradient_penalty_alone_second_order,
                  tad.test_generator_objective_gradcheck]
    for name in second:
        try:
            tad.test_primitive_second_order(name)
        except AssertionError:
            failed.append(f"{name} (second order)")
    for act in ("relu", "softplus"):
        try:
            tad.test_enn_loss_gradcheck(act)
        except AssertionError:
            failed.append(f"enn_sq_loss/{act}")
    for check in net_checks:
        try:
            check()
        except AssertionError:
            failed.append(check.__name__)
    elapsed = time.perf_counter() - t0
    n = len(errors) + len(second) + 2 + len(net_checks)
    verdict(3, not failed and not missing and elapsed < 60,
            f"{n} checks, worst primitive rel err {max(errors.values()):.1e} (tol 1e-3), "
            f"failed={failed or 'none'}, uncovered={sorted(missing) or 'none'}, {elapsed:.1f}s")


def _pairwise_auroc(neg, pos):
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_c04_auroc_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(200):
        n0, n1 = rng.integers(1, 26, size=2)
        levels = rng.integers(2, 12)
        neg = rng.integers(0, levels, n0).astype(float)
        pos = rng.integers(0, levels, n1).astype(float)
        mismatches += metrics.auroc(neg, pos) != _pairwise_auroc(neg, pos)
    verdict(4, mismatches == 0, f"{mismatches} mismatches in 200 tie-heavy instances (exact equality)")


# ---------------------------------------------------------------------------
# synthetic experiment
# ---------------------------------------------------------------------------

def test_c05_synthetic_wenn(runs, scores):
    s = scores["wenn"]
    test = data.load_csv(runs["data"] / "test.csv")
    acc = metrics.accuracy(_classifier(runs["wenn"]), test)
    vac_id, vac_far = s["test"]["vacuity"].mean(), s["ood_far"]["vacuity"].mean()
    auc = metrics.auroc(s["test"]["vacuity"], s["ood_far"]["vacuity"])
    wall = float(cli.read_manifest(runs["wenn"] / "manifest.txt")["wall_clock_s"])
    ok = acc >= 0.85 and vac_id < 0.2 and vac_far > 0.8 and auc >= 0.95 and wall <= 600
    verdict(5, ok, f"acc {acc:.3f} (>=0.85), ID vac {vac_id:.3f} (<0.2), far vac {vac_far:.3f} (>0.8), "
                   f"AUROC {auc:.3f} (>=0.95), train {wall:.0f}s (<=600)")


def test_c06_three_way_contrast(scores):
    gap = scores["wenn"]["ood_far"]["vacuity"].mean() - scores["enn"]["ood_far"]["vacuity"].mean()
    ent = scores["l2"]["ood_far"]["entropy"].mean()
    verdict(6, gap >= 0.3 and ent < 0.5,
            f"far vac WENN-ENN {gap:.3f} (>=0.3), L2 far entropy {ent:.3f} (<0.5)")


def test_c07_boundary_vs_ood(scores):
    s = scores["wenn"]
    auc_vac = metrics.auroc(s["boundary"]["vacuity"], s["ood_far"]["vacuity"])
    auc_ent = metrics.auroc(s["boundary"]["entropy"], s["ood_far"]["entropy"])
    verdict(7, auc_vac >= 0.90 and auc_vac - auc_ent >= 0.10,
            f"AUROC vac {auc_vac:.3f} (>=0.90), vac-ent margin {auc_vac - auc_ent:.3f} (>=0.10)")


def test_c08_dissonance_locality(scores):
    s = scores["wenn"]
    strip, core = s["boundary"]["dissonance"].mean(), s["core"]["dissonance"].mean()
    verdict(8, strip - core >= 0.2, f"strip {strip:.3f} vs core {core:.3f}, gap {strip - core:.3f} (>=0.2)")


def test_c09_dist_trend(runs):
    with open(runs["wenn"] / "trainlog.csv", newline="") as fh:
        dist = np.array([float(row["dist"]) for row in csv.DictReader(fh)])
    ma = trainer.moving_average(dist / np.abs(dist).max(), 50)
    max_iters = TrainConfig.load(REFERENCE_CONFIG).max_g_iters
    converged = cli.read_manifest(runs["wenn"] / "manifest.txt")["metric.converged_at"]
    fired = converged != "none" and int(converged) + 1 < max_iters
    ratio = ma[-1] / ma[0]
    verdict(9, ratio <= 0.5 and fired,
            f"final/initial MA {ratio:.3f} (<=0.5), converged at {converged} of max {max_iters}, "
            f"{dist.size} iterations logged")


def test_c10_fgsm_trend(runs):
    test = data.load_csv(runs["data"] / "test.csv")
    rows = metrics.fgsm_sweep(_classifier(runs["wenn"]), test, [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    acc = [r.accuracy for r in rows]
    ent = [r.mean_entropy for r in rows]
    acc_up = max(b - a for a, b in zip(acc, acc[1:]))
    ent_down = max(a - b for a, b in zip(ent, ent[1:]))
    verdict(10, acc_up <= 0.03 and ent_down <= 0.05,
            f"accuracy {acc[0]:.3f}->{acc[-1]:.3f} (max rise {acc_up:+.3f}, tol 0.03), "
            f"entropy {ent[0]:.3f}->{ent[-1]:.3f} (max drop {ent_down:+.3f}, tol 0.05)")


def test_c11_reproducible(runs):
    same = {f: (runs["wenn"] / f).read_bytes() == (runs["wenn_again"] / f).read_bytes()
            for f in ("trainlog.csv", "model.ckpt", "pretrain.csv")}
    verdict(11, all(same.values()), "bit-identical: " + ", ".join(f"{f}={v}" for f, v in same.items()))
