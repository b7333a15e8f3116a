"""Subject brain-graph construction from regional time series.

Edges fuse three pairwise statistics of the regional signals: Pearson
correlation, Spearman rank correlation and a max-normalized Minkowski
similarity.  Node features are taken as given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .numeric import DTYPE, ShapeError

EDGE_METRICS = ("pearson", "spearman", "minkowski")

# fMRI and sMRI node features used with real data, in column order.
FMRI_FEATURES = ("ALFF", "fALFF", "global_FCD", "local_FCD", "longRange_FCD", "FOCA", "ReHo")
SMRI_FEATURES = ("SurfArea", "GrayVol", "ThickAvg", "ThickStd", "MeanCurv")
REAL_FEATURES = FMRI_FEATURES + SMRI_FEATURES


class DegenerateSeriesError(ValueError):
    """A time series is constant, so a correlation with it is undefined."""

    def __init__(self, message: str, region: int | None = None):
        super().__init__(message)
        self.region = region


class InvalidDistanceError(ValueError):
    pass


@dataclass
class BrainGraph:
    X: np.ndarray
    E: np.ndarray
    A: np.ndarray
    label: int | None = None
    subject_id: str | None = None
    feature_names: list[str] = field(default_factory=list)

    @property
    def n_regions(self) -> int:
        return self.E.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


# -- scalar pair statistics ----------------------------------------------------


def _pair(s_i, s_j, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(s_i, dtype=DTYPE).ravel()
    b = np.asarray(s_j, dtype=DTYPE).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"series lengths differ: {a.size} vs {b.size}")
    if a.size < min_len:
        raise ShapeError(f"need at least {min_len} time points, got {a.size}")
    return a, b


def pearson(s_i, s_j) -> float:
    a, b = _pair(s_i, s_j, 2)
    da = a - a.mean()
    db = b - b.mean()
    ssa = np.sum(da * da)
    ssb = np.sum(db * db)
    for region, ss in ((0, ssa), (1, ssb)):
        if ss == 0.0:
            raise DegenerateSeriesError(f"series {region} has zero variance", region)
    # one square root of the product keeps rational hand cases exact
    return float(np.clip(np.sum(da * db) / np.sqrt(ssa * ssb), -1.0, 1.0))


def spearman(s_i, s_j) -> float:
    """Rank-difference Spearman correlation; ties get average ranks."""
    a, b = _pair(s_i, s_j, 3)
    for region, s in ((0, a), (1, b)):
        if np.all(s == s[0]):
            raise DegenerateSeriesError(f"series {region} is constant", region)
    d = rankdata(a) - rankdata(b)
    k = a.size
    return float(1.0 - 6.0 * np.sum(d * d) / (k * (k * k - 1)))


def minkowski(s_i, s_j, p: float = 2.0) -> float:
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    a, b = _pair(s_i, s_j, 1)
    return float(np.sum(np.abs(a - b) ** p) ** (1.0 / p))


# -- whole-matrix versions ------------------------------------------------------


def _check_series(ts: np.ndarray, min_len: int) -> np.ndarray:
    ts = np.asarray(ts, dtype=DTYPE)
    if ts.ndim != 2:
        raise ShapeError(f"time series must be N x K, got shape {ts.shape}")
    if ts.shape[1] < min_len:
        raise ShapeError(f"need at least {min_len} time points, got {ts.shape[1]}")
    return ts


def _first_constant_row(ts: np.ndarray) -> int | None:
    const = np.all(ts == ts[:, :1], axis=1)
    return int(np.argmax(const)) if const.any() else None


def pearson_matrix(ts) -> np.ndarray:
    ts = _check_series(ts, 2)
    row = _first_constant_row(ts)
    if row is not None:
        raise DegenerateSeriesError(f"region {row} has zero variance", row)
    c = ts - ts.mean(axis=1, keepdims=True)
    c /= np.sqrt(np.sum(c * c, axis=1, keepdims=True))
    return np.clip(c @ c.T, -1.0, 1.0)


def spearman_matrix(ts) -> np.ndarray:
    ts = _check_series(ts, 3)
    row = _first_constant_row(ts)
    if row is not None:
        raise DegenerateSeriesError(f"region {row} is constant", row)
    ranks = rankdata(ts, axis=1)
    k = ts.shape[1]
    sq = np.sum(ranks * ranks, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * ranks @ ranks.T
    return 1.0 - 6.0 * d2 / (k * (k * k - 1))


def minkowski_matrix(ts, p: float = 2.0) -> np.ndarray:
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    ts = _check_series(ts, 1)
    return cdist(ts, ts, metric="minkowski", p=p)


def minkowski_to_similarity(D) -> np.ndarray:
    """Map distances to [0, 1] similarities: 1 - D / max off-diagonal D."""
    D = np.asarray(D, dtype=DTYPE)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {D.shape}")
    if np.any(D < 0):
        raise InvalidDistanceError("distance matrix has negative entries")
    n = D.shape[0]
    off = ~np.eye(n, dtype=bool)
    top = D[off].max() if n > 1 else 0.0
    if top == 0.0:
        sim = np.ones_like(D)
    else:
        sim = 1.0 - D / top
    sim[~off] = 0.0
    return sim


def fuse_edges(*matrices: np.ndarray) -> np.ndarray:
    """Elementwise sum of the metric matrices with the diagonal zeroed."""
    if not matrices:
        raise ValueError("fuse_edges needs at least one matrix")
    shape = np.shape(matrices[0])
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ShapeError(f"edge matrices must be square, got {shape}")
    for m in matrices[1:]:
        if np.shape(m) != shape:
            raise ShapeError(f"edge matrix shapes differ: {shape} vs {np.shape(m)}")
    E = np.sum([np.asarray(m, dtype=DTYPE) for m in matrices], axis=0)
    # exact symmetry regardless of matmul rounding
    E = 0.5 * (E + E.T)
    np.fill_diagonal(E, 0.0)
    return E


def edge_matrix(ts, metrics=EDGE_METRICS, p: float = 2.0) -> np.ndarray:
    parts = []
    for name in metrics:
        if name == "pearson":
            parts.append(pearson_matrix(ts))
        elif name == "spearman":
            parts.append(spearman_matrix(ts))
        elif name == "minkowski":
            parts.append(minkowski_to_similarity(minkowski_matrix(ts, p)))
        else:
            raise ValueError(f"unknown edge metric {name!r}; choose from {EDGE_METRICS}")
    return fuse_edges(*parts)


def build_graph(
    time_series,
    node_features,
    label: int | None = None,
    subject_id: str | None = None,
    feature_names=None,
    metrics=EDGE_METRICS,
    p: float = 2.0,
) -> BrainGraph:
    ts = np.asarray(time_series, dtype=DTYPE)
    X = np.asarray(node_features, dtype=DTYPE)
    if X.ndim != 2 or ts.ndim != 2 or X.shape[0] != ts.shape[0]:
        raise ShapeError(
            f"time series has shape {ts.shape} but node features have shape {X.shape}"
        )
    E = edge_matrix(ts, metrics, p)
    n = E.shape[0]
    A = np.ones((n, n)) - np.eye(n)
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    return BrainGraph(X=X.copy(), E=E, A=A, label=label, subject_id=subject_id, feature_names=names)
