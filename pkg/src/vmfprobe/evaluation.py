"""Rank statistics, AUROC, Mann-Whitney tests, replicate-variance baselines and a k-NN probe."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

EXACT_MW_LIMIT = 12  # exact enumeration when n_a + n_b <= this


class UndefinedCorrelation(ValueError):
    """Correlation requested for an input with zero variance."""


class InsufficientGroup(ValueError):
    pass


class DegenerateStandardization(UserWarning):
    pass


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _pair(x, y)
    return pearson(rankdata(x), rankdata(y))


def auroc(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    lab = np.asarray(labels).ravel().astype(bool)
    if s.size != lab.size:
        raise ValueError("scores and labels differ in length")
    n_pos = int(lab.sum())
    n_neg = lab.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[lab].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _u_statistic(ranks_a: np.ndarray, n_a: int) -> float:
    return float(ranks_a.sum() - n_a * (n_a + 1) / 2.0)


def mann_whitney_u(group_a, group_b) -> tuple[float, float]:
    """U statistic of ``group_a`` and a two-sided p-value.

    Exact enumeration over all rank assignments for ``n_a + n_b <= 12``;
    otherwise a normal approximation with tie and continuity correction.
    """
    a = np.asarray(group_a, dtype=np.float64).ravel()
    b = np.asarray(group_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    ranks = rankdata(np.concatenate([a, b]))
    u = _u_statistic(ranks[:n_a], n_a)
    centre = n_a * n_b / 2.0
    dev = abs(u - centre)

    if n <= EXACT_MW_LIMIT:
        extreme = total = 0
        for idx in itertools.combinations(range(n), n_a):
            total += 1
            if abs(_u_statistic(ranks[list(idx)], n_a) - centre) >= dev - 1e-9:
                extreme += 1
        return u, extreme / total

    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(((counts**3) - counts).sum()) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = max(dev - 0.5, 0.0) / math.sqrt(var)
    return u, min(1.0, math.erfc(z / math.sqrt(2.0)))


def bootstrap_group_test(kappas_correct, kappas_wrong, iterations: int = 50, draw: int = 100, seed: int = 0) -> list[float]:
    """Mann-Whitney p-values over ``iterations`` resamples of ``draw`` per group (with replacement)."""
    a = np.asarray(kappas_correct, dtype=np.float64).ravel()
    b = np.asarray(kappas_wrong, dtype=np.float64).ravel()
    if iterations < 1 or draw < 1:
        raise ValueError("iterations and draw must be >= 1")
    small = min(a.size, b.size)
    if small < draw:
        raise InsufficientGroup(
            f"group sizes {a.size} and {b.size} are below draw={draw}; lower draw to at most {small}"
        )
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(iterations):
        sa = a[rng.integers(0, a.size, draw)]
        sb = b[rng.integers(0, b.size, draw)]
        out.append(mann_whitney_u(sa, sb)[1])
    return out


def replicate_variance_uncertainty(predictions) -> float | np.ndarray:
    """Population variance across ``M`` replicates, averaged over dimensions.

    ``predictions`` is ``(M, D)`` for one input or ``(n, M, D)`` for a batch.
    """
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim not in (2, 3):
        raise ValueError("predictions must be (M, D) or (n, M, D)")
    if p.shape[-2] < 2:
        raise ValueError("need at least 2 replicates")
    v = p.var(axis=-2).mean(axis=-1)
    return float(v) if p.ndim == 2 else v


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _neighbours(train: np.ndarray, test: np.ndarray, k: int, chunk: int = 1024):
    """Indices and distances of the ``k`` nearest train rows (stable on ties)."""
    idx_out, dist_out = [], []
    for s in range(0, test.shape[0], chunk):
        d = np.sqrt(_sq_dists(test[s : s + chunk], train))
        idx = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx_out.append(idx)
        dist_out.append(np.take_along_axis(d, idx, axis=1))
    return np.concatenate(idx_out), np.concatenate(dist_out)


def _check_knn(train_feats, test_feats, k):
    tr = np.asarray(train_feats, dtype=np.float64)
    te = np.asarray(test_feats, dtype=np.float64)
    tr = tr.reshape(tr.shape[0], -1)
    te = te.reshape(te.shape[0], -1)
    if not 1 <= k <= tr.shape[0]:
        raise ValueError(f"k={k} must be between 1 and the train size {tr.shape[0]}")
    if tr.shape[1] != te.shape[1]:
        raise ValueError("train and test feature widths differ")
    return tr, te


def knn_predict(train_feats, train_labels, test_feats, k: int = 5) -> np.ndarray:
    """Majority vote over ``k`` Euclidean neighbours.

    Vote ties go to the label with the smallest summed neighbour distance,
    then to the lowest label id.
    """
    tr, te = _check_knn(train_feats, test_feats, k)
    labels = np.asarray(train_labels).ravel()
    idx, dist = _neighbours(tr, te, k)
    out = np.empty(te.shape[0], dtype=labels.dtype)
    for i in range(te.shape[0]):
        nl = labels[idx[i]]
        cands = np.unique(nl)
        votes = np.array([(nl == c).sum() for c in cands])
        sums = np.array([dist[i][nl == c].sum() for c in cands])
        order = np.lexsort((cands, sums, -votes))
        out[i] = cands[order[0]]
    return out


def knn_distance_score(train_feats, test_feats, k: int = 5) -> np.ndarray:
    """Mean distance to the ``k`` nearest train rows; larger means more anomalous."""
    tr, te = _check_knn(train_feats, test_feats, k)
    return _neighbours(tr, te, k)[1].mean(axis=1)


def kappa_feature_concat(features, kappas, reference_kappas=None) -> np.ndarray:
    """Append z-scored ``kappas`` as an extra column.

    Standardization uses ``reference_kappas`` (default: ``kappas`` itself).
    A constant reference warns and appends raw values.
    """
    k = np.asarray(kappas, dtype=np.float64).ravel()
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(k.size, -1) if f.size else np.zeros((k.size, 0))
    if f.shape[0] != k.size:
        raise ValueError("features and kappas differ in length")
    ref = k if reference_kappas is None else np.asarray(reference_kappas, dtype=np.float64).ravel()
    sd = ref.std()
    if sd > 0:
        col = (k - ref.mean()) / sd
    else:
        warnings.warn("constant kappa column; appending unstandardized values", DegenerateStandardization)
        col = k
    return np.concatenate([f, col[:, None]], axis=1)


@dataclass
class MetricsReport:
    spearman_by_corruption: dict = field(default_factory=dict)
    pearson_by_corruption: dict = field(default_factory=dict)
    mean_kappa_by_severity: dict = field(default_factory=dict)  # (kind, severity) -> value
    auroc: dict = field(default_factory=dict)  # score name -> value
    mw_p_values: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, table in (("spearman", self.spearman_by_corruption), ("pearson", self.pearson_by_corruption)):
            for k, v in table.items():
                if not (math.isnan(v) or -1.0 <= v <= 1.0):
                    raise ValueError(f"{name}[{k}] = {v} outside [-1, 1]")
        for k, v in self.auroc.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"auroc[{k}] = {v} outside [0, 1]")
        if any(not 0.0 <= p <= 1.0 for p in self.mw_p_values):
            raise ValueError("p-value outside [0, 1]")

    def to_dict(self) -> dict:
        nested: dict = {}
        for (kind, sev), v in self.mean_kappa_by_severity.items():
            nested.setdefault(kind, {})[str(sev)] = v
        return {
            "spearman_by_corruption": self.spearman_by_corruption,
            "pearson_by_corruption": self.pearson_by_corruption,
            "mean_kappa_by_severity": nested,
            "auroc": self.auroc,
            "mw_p_values": list(self.mw_p_values),
            "summary": self.summary,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "key", "severity", "value"])
        for (kind, sev), v in sorted(self.mean_kappa_by_severity.items()):
            w.writerow(["mean_kappa", kind, sev, repr(float(v))])
        rows = []
        rows += [(f"spearman.{k}", v) for k, v in self.spearman_by_corruption.items()]
        rows += [(f"pearson.{k}", v) for k, v in self.pearson_by_corruption.items()]
        rows += [(f"auroc.{k}", v) for k, v in self.auroc.items()]
        rows += [(f"mw_p.{i}", v) for i, v in enumerate(self.mw_p_values)]
        rows += [(f"summary.{k}", v) for k, v in self.summary.items() if isinstance(v, (int, float))]
        for key, v in sorted(rows):
            w.writerow(["summary", key, "", repr(float(v))])
        return buf.getvalue()

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.json").write_text(self.to_json())
        (directory / "metrics.csv").write_text(self.to_csv())
        return directory
