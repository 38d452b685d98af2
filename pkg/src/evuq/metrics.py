"""Evaluation: accuracy, uncertainty maps, AUROC, box statistics, FGSM sweeps, export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from evuq import _kernels, sl
from evuq.data import Dataset, GridSpec, gen_grid
from evuq.models import Classifier, fgsm_perturb

SCORE_KINDS = ("vacuity", "dissonance", "entropy")
SET_LABELS = ("ID", "OOD", "boundary")


@dataclass
class ScoreSet:
    label: str
    kind: str
    scores: np.ndarray

    def __post_init__(self):
        if self.label not in SET_LABELS:
            raise ValueError(f"unknown set label {self.label!r}")
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if self.scores.size == 0:
            raise ValueError("score set is empty")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def _raw(s):
    arr = s.scores if isinstance(s, ScoreSet) else np.asarray(s, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("AUROC needs non-empty score sets")
    return arr


def auroc(negative, positive) -> float:
    """P(pos > neg) + 0.5 P(tie), via midranks (Mann-Whitney U). Higher score = more OOD."""
    neg, pos = _raw(negative), _raw(positive)
    ranks = _kernels.midranks(np.concatenate([neg, pos]))
    n_pos = pos.size
    u = ranks[neg.size:].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * neg.size))


def auroc_pairwise(negative, positive) -> float:
    """O(n*m) reference count of the same quantity."""
    neg, pos = _raw(negative), _raw(positive)
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_low: float
    whisker_high: float
    outliers: list = field(default_factory=list)


def boxplot_stats(scores) -> BoxStats:
    """Quartiles by linear interpolation; whiskers reach the most extreme data within 1.5 IQR."""
    x = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("boxplot_stats needs data")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo) & (x <= hi)]
    outliers = x[(x < lo) | (x > hi)].tolist()
    return BoxStats(float(x[0]), float(q1), float(med), float(q3), float(x[-1]),
                    float(inside[0]), float(inside[-1]), outliers)


def accuracy(c: Classifier, ds: Dataset) -> float:
    out = c.predict(ds.features)
    return float(np.mean(np.argmax(out, axis=1) == ds.labels))


def probabilities(c: Classifier, x: np.ndarray) -> np.ndarray:
    out = c.predict(x)
    return sl.expected_probability(out) if c.is_evidential else out


def uncertainty_scores(c: Classifier, x: np.ndarray) -> dict:
    """Per-sample scores from one forward pass; vacuity/dissonance only for evidential heads."""
    out = c.predict(x)
    if not c.is_evidential:
        return {"entropy": sl.normalized_entropy(out)}
    return {
        "entropy": sl.normalized_entropy(sl.expected_probability(out)),
        "vacuity": sl.vacuity(out),
        "dissonance": sl.dissonance(out),
    }


def uncertainty_maps(c: Classifier, grid: GridSpec) -> dict:
    """Scores over the grid, each reshaped to ``(ry, rx)`` with row 0 at ``y_min``."""
    pts = gen_grid(grid)
    return {k: v.reshape(grid.ry, grid.rx) for k, v in uncertainty_scores(c, pts).items()}


@dataclass
class SweepRow:
    epsilon: float
    accuracy: float
    mean_entropy: float


def fgsm_sweep(c: Classifier, test_set: Dataset, epsilons) -> list:
    eps = [float(e) for e in epsilons]
    if any(e < 0 or e > 0.5 for e in eps):
        raise ValueError("epsilons must lie in [0, 0.5]")
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be non-decreasing")
    rows = []
    for e in eps:
        x_adv = fgsm_perturb(c, test_set.features, test_set.labels, e)
        p = probabilities(c, x_adv)
        acc = float(np.mean(np.argmax(p, axis=1) == test_set.labels))
        rows.append(SweepRow(e, acc, float(np.mean(sl.normalized_entropy(p)))))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "accuracy", "mean_entropy"])
        for r in rows:
            w.writerow([f"{r.epsilon:g}", f"{r.accuracy:.6f}", f"{r.mean_entropy:.6f}"])


# --------------------------------------------------------------------------
# heatmap export
# --------------------------------------------------------------------------

def _pgm_levels(values: np.ndarray) -> np.ndarray:
    clipped = np.clip(values, 0.0, 1.0)
    return np.array([int(Decimal(repr(float(v) * 255)).quantize(Decimal(1), ROUND_HALF_UP))
                     for v in clipped.ravel()]).reshape(values.shape)


def export_heatmap(values, path_csv, path_pgm, grid: GridSpec | None = None):
    """CSV rows in scan order (first row = ``y_min``) and plain P2 PGM with the top row = ``y_max``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or not np.all(np.isfinite(values)):
        raise ValueError("heatmap values must be a finite 2-D array")
    ry, rx = values.shape
    spec = str(grid) if grid is not None else f"rows={ry},cols={rx}"
    with open(path_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# grid {spec}\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in values:
            w.writerow([repr(float(v)) for v in row])
    levels = _pgm_levels(values)[::-1]
    lines = ["P2", f"{rx} {ry}", "255"] + [" ".join(str(v) for v in row) for row in levels]
    Path(path_pgm).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_heatmap_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        rows = [[float(c) for c in row] for row in csv.reader(fh)]
    return header, np.array(rows)
