"""Synthetic 2-D data, OOD / boundary / grid samplers and CSV I/O."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIGMA2 = 4.0
CIRCUMRADIUS = 4.0
FAR_BOX = (-20.0, 20.0, -20.0, 20.0)
FAR_MIN_RADIUS = 12.0
SUPPORT_RADIUS = 8.0
POSTERIOR_GAP = 0.1


class DataError(ValueError):
    """Malformed data file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class RaggedRowError(DataError):
    pass


class NonNumericError(DataError):
    pass


class LabelRangeError(DataError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    k: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise DataError("dataset needs a non-empty N x L feature matrix")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or inf")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise DataError("one label per row required")
            if self.labels.min() < 0 or self.labels.max() >= self.k:
                raise LabelRangeError(f"labels must lie in [0, {self.k})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, self.k, dict(self.meta))


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    rx: int
    ry: int | None = None

    def __post_init__(self):
        if self.ry is None:
            object.__setattr__(self, "ry", self.rx)
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid ranges need min < max")
        if self.rx < 2 or self.ry < 2:
            raise ValueError("grid resolution must be at least 2 per axis")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """``"xmin,xmax,ymin,ymax,res"``."""
        parts = text.split(",")
        if len(parts) != 5:
            raise ValueError(f"grid spec needs 5 comma-separated fields, got {text!r}")
        x0, x1, y0, y1 = (float(p) for p in parts[:4])
        return cls(x0, x1, y0, y1, int(parts[4]))

    def __str__(self):
        return f"{self.x_min:g},{self.x_max:g},{self.y_min:g},{self.y_max:g},{self.rx}x{self.ry}"


def class_means(radius=CIRCUMRADIUS) -> np.ndarray:
    """Vertices of an equilateral triangle centred on the origin."""
    return np.array([
        [0.0, radius],
        [-radius * math.sqrt(3) / 2, -radius / 2],
        [radius * math.sqrt(3) / 2, -radius / 2],
    ])


def gen_gaussian_mixture(n_per_class: int, seed: int, sigma2=SIGMA2) -> Dataset:
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    means = class_means()
    sd = math.sqrt(sigma2)
    feats = np.concatenate([mu + sd * rng.standard_normal((n_per_class, 2)) for mu in means])
    labels = np.repeat(np.arange(3), n_per_class)
    meta = {"generator": f"gaussian_mixture(sigma2={sigma2:g},radius={CIRCUMRADIUS:g})", "seed": seed}
    return Dataset(feats, labels, 3, meta)


def train_test_split(ds: Dataset, seed: int, test_fraction=0.2):
    """Stratified split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.k):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return ds.subset(np.sort(np.concatenate(train_idx))), ds.subset(np.sort(np.concatenate(test_idx)))


def gen_uniform_ood(n: int, seed: int, box=FAR_BOX, min_radius=FAR_MIN_RADIUS) -> np.ndarray:
    """Uniform points over ``box`` with the disk ``||x|| < min_radius`` rejected."""
    x0, x1, y0, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {box}")
    corner = max(math.hypot(x, y) for x in (x0, x1) for y in (y0, y1))
    if min_radius >= corner:
        raise ValueError("rejection disk covers the whole box")
    rng = np.random.default_rng(seed)
    out = np.empty((0, 2))
    while out.shape[0] < n:
        cand = np.column_stack([rng.uniform(x0, x1, 2 * n), rng.uniform(y0, y1, 2 * n)])
        cand = cand[np.hypot(cand[:, 0], cand[:, 1]) >= min_radius]
        out = np.concatenate([out, cand])
    return out[:n].astype(np.float32)


def analytic_posteriors(x: np.ndarray, sigma2=SIGMA2) -> np.ndarray:
    """Class posteriors of the balanced, tied-variance mixture."""
    x = np.asarray(x, dtype=np.float64)
    d2 = ((x[:, None, :] - class_means()[None, :, :]) ** 2).sum(axis=2)
    logits = -d2 / (2 * sigma2)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def in_boundary_strip(x: np.ndarray, gap=POSTERIOR_GAP, radius=SUPPORT_RADIUS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    top2 = np.sort(analytic_posteriors(x), axis=1)[:, -2:]
    return ((top2[:, 1] - top2[:, 0]) < gap) & (np.hypot(x[:, 0], x[:, 1]) <= radius)


def boundary_strip_sampler(n: int, seed: int, max_rounds=1000) -> np.ndarray:
    """Points inside the data support where the top-two analytic posteriors nearly tie."""
    rng = np.random.default_rng(seed)
    out = np.empty((0, 2))
    for _ in range(max_rounds):
        if out.shape[0] >= n:
            return out[:n].astype(np.float32)
        r = SUPPORT_RADIUS * np.sqrt(rng.uniform(0, 1, 4 * n + 16))
        th = rng.uniform(0, 2 * math.pi, r.size)
        cand = np.column_stack([r * np.cos(th), r * np.sin(th)])
        out = np.concatenate([out, cand[in_boundary_strip(cand)]])
    if out.shape[0] >= n:
        return out[:n].astype(np.float32)
    raise RuntimeError(f"boundary sampler found only {out.shape[0]} of {n} points")


def class_core_points(n_per_class: int, seed: int, radius=1.0) -> np.ndarray:
    """Uniform points within ``radius`` of each class mean."""
    rng = np.random.default_rng(seed)
    pts = []
    for mu in class_means():
        r = radius * np.sqrt(rng.uniform(0, 1, n_per_class))
        th = rng.uniform(0, 2 * math.pi, n_per_class)
        pts.append(mu + np.column_stack([r * np.cos(th), r * np.sin(th)]))
    return np.concatenate(pts).astype(np.float32)


def gen_grid(spec: GridSpec) -> np.ndarray:
    """Row-major scan: x varies fastest, starting from ``(x_min, y_min)``."""
    xs = np.linspace(spec.x_min, spec.x_max, spec.rx)
    ys = np.linspace(spec.y_min, spec.y_max, spec.ry)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _fmt(v: float) -> str:
    # 9 significant digits round-trip any float32
    return f"{float(np.float32(v)):.9g}"


def save_csv(ds, path):
    """Header ``f0,...,f{L-1}[,label]``; accepts a Dataset or a bare feature matrix."""
    if isinstance(ds, Dataset):
        feats, labels = ds.features, ds.labels
    else:
        feats, labels = np.asarray(ds, dtype=np.float32), None
    header = [f"f{i}" for i in range(feats.shape[1])] + (["label"] if labels is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(feats):
            cells = [_fmt(v) for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            w.writerow(cells)


def load_csv(path, k=3) -> Dataset:
    """Read a feature CSV; a missing ``label`` column yields an unlabeled set."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file", line=1)
    header = rows[0]
    has_label = header[-1] == "label"
    n_feat = len(header) - int(has_label)
    expected = [f"f{i}" for i in range(n_feat)]
    if header[:n_feat] != expected or n_feat < 1:
        raise DataError(f"{path}: unexpected header {header}", line=1)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RaggedRowError(f"{path}: expected {len(header)} cells, got {len(row)}", line=lineno)
        try:
            feats.append([float(c) for c in row[:n_feat]])
        except ValueError as exc:
            raise NonNumericError(f"{path}: non-numeric feature ({exc})", line=lineno) from None
        if has_label:
            try:
                lab = int(row[-1])
            except ValueError:
                raise NonNumericError(f"{path}: non-integer label {row[-1]!r}", line=lineno) from None
            if not 0 <= lab < k:
                raise LabelRangeError(f"{path}: label {lab} outside [0, {k})", line=lineno)
            labels.append(lab)
    if not feats:
        raise DataError(f"{path}: no data rows", line=2)
    return Dataset(np.array(feats), np.array(labels) if has_label else None, k, {"source": str(path)})
