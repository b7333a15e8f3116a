"""Focal-loss training with Adam, stratified k-fold evaluation and ablations."""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .gat import ModelConfig, ModelParams, _stack, backward_batch, forward_batch, init_params, predict_proba
from .graph import BrainGraph
from .numeric import ConfigError, ParamTensor, RngStream, zero_grads

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 150
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    folds: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ConfigError(f"focal_alpha must lie in [0, 1], got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.batch_size < 1 or self.epochs < 0 or self.folds < 2:
            raise ConfigError("batch_size >= 1, epochs >= 0 and folds >= 2 are required")

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss ------------------------------------------------------------------------


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Mean binary focal cross-entropy; ``p`` is the predicted positive probability."""
    return focal_loss_and_grad(p, y, alpha, gamma)[0]


def focal_loss_and_grad(p, y, alpha: float = 0.25, gamma: float = 2.0) -> tuple[float, np.ndarray]:
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if p.size == 0:
        raise ConfigError("focal loss of an empty batch")
    if p.shape != y.shape:
        raise ConfigError(f"{p.size} predictions but {y.size} labels")
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    q = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    pos = alpha * y * (1.0 - q) ** gamma * np.log(q)
    neg = (1.0 - alpha) * (1.0 - y) * q ** gamma * np.log1p(-q)
    loss = -np.sum(pos + neg) / n
    # d/dq of each term; gamma = 0 drops the power-rule part
    dpos = alpha * y * ((1.0 - q) ** gamma / q - gamma * (1.0 - q) ** (gamma - 1) * np.log(q) if gamma else 1.0 / q)
    dneg = (1.0 - alpha) * (1.0 - y) * (
        gamma * q ** (gamma - 1) * np.log1p(-q) - q ** gamma / (1.0 - q) if gamma else -1.0 / (1.0 - q)
    )
    grad = -(dpos + dneg) / n
    return float(loss), np.where(inside, grad, 0.0)


def binary_cross_entropy(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params: list[ParamTensor]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in params:
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: list[ParamTensor], state: Adam) -> None:
    state.step(params)


# -- metrics ---------------------------------------------------------------------


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    acc: float
    sen: float
    spe: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_metrics(predictions, labels) -> Metrics:
    """Confusion counts and ACC/SEN/SPE/F1.

    ``predictions`` are positive-class probabilities (thresholded at 0.5) or
    hard 0/1 labels.  Any ratio with a zero denominator is 0.
    """
    pred = (np.asarray(predictions, dtype=np.float64).ravel() >= 0.5).astype(int)
    y = np.asarray(labels).ravel().astype(int)
    if pred.size != y.size or y.size == 0:
        raise ConfigError(f"need equal, nonzero lengths; got {pred.size} and {y.size}")
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    sen = _ratio(tp, tp + fn)
    prec = _ratio(tp, tp + fp)
    return Metrics(
        tp=tp, fp=fp, tn=tn, fn=fn,
        acc=_ratio(tp + tn, y.size),
        sen=sen,
        spe=_ratio(tn, tn + fp),
        f1=_ratio(2 * prec * sen, prec + sen),
    )


# -- training loop --------------------------------------------------------------


def fit_feature_scaler(graphs: list[BrainGraph]) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([g.X for g in graphs])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def batch_loss_and_backward(graphs: list[BrainGraph], params: ModelParams, cfg: TrainConfig) -> float:
    X, E, A = _stack(graphs)
    y = np.array([g.label for g in graphs], dtype=np.float64)
    cache: dict = {}
    probs = forward_batch(X, E, A, params, cache)
    loss, gp1 = focal_loss_and_grad(probs[:, 1], y, cfg.focal_alpha, cfg.focal_gamma)
    gprobs = np.zeros_like(probs)
    gprobs[:, 1] = gp1
    backward_batch(gprobs, params, cache)
    return loss


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: list[float] = field(default_factory=list)


def train_model(
    graphs: list[BrainGraph], cfg: TrainConfig, mcfg: ModelConfig, rng: RngStream
) -> TrainResult:
    """Mini-batch Adam on the mean focal loss; returns final params and per-epoch mean loss."""
    if not graphs:
        raise ConfigError("empty training set")
    labels = {g.label for g in graphs}
    if None in labels:
        raise ConfigError("every training graph needs a label")
    if len(graphs) > 1 and len(labels) < 2:
        raise ConfigError(f"training set holds only class {labels.pop()}; both classes are required")
    params = init_params(mcfg, rng.child(0))
    params.feature_mean, params.feature_std = fit_feature_scaler(graphs)
    opt = Adam.from_config(cfg)
    weights = params.parameters()
    shuffler = rng.child(1)
    trace = []
    for epoch in range(cfg.epochs):
        order = shuffler.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [graphs[i] for i in order[start:start + cfg.batch_size]]
            zero_grads(weights)
            losses.append(batch_loss_and_backward(batch, params, cfg))
            opt.step(weights)
        trace.append(float(np.mean(losses)))
        if epoch % 25 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.6f", epoch, trace[-1])
    return TrainResult(params, trace)


def evaluate(graphs: list[BrainGraph], params: ModelParams) -> Metrics:
    probs = predict_proba(graphs, params)
    return compute_metrics(probs[:, 1], [g.label for g in graphs])


# -- cross-validation ----------------------------------------------------------


def stratified_folds(labels, folds: int, rng: RngStream) -> list[np.ndarray]:
    """Test-index arrays for each fold; class counts per fold differ by at most 1."""
    y = np.asarray(labels).astype(int)
    classes, counts = np.unique(y, return_counts=True)
    if folds < 2:
        raise ConfigError(f"need at least 2 folds, got {folds}")
    # every training split must still hold both classes, and no fold may be empty;
    # fewer than `folds` subjects per class is allowed so leave-one-out works
    if len(classes) < 2 or counts.min() < 2 or y.size < folds:
        raise ConfigError(
            f"{folds}-fold CV needs >= 2 subjects per class and >= {folds} subjects; counts are "
            + ", ".join(f"class {c}: {n}" for c, n in zip(classes, counts))
        )
    buckets: list[list[int]] = [[] for _ in range(folds)]
    offset = 0
    for c in classes:
        idx = np.flatnonzero(y == c)
        idx = idx[rng.child(int(c)).permutation(idx.size)]
        # deal round-robin, continuing where the previous class stopped so fold sizes stay balanced
        for r, i in enumerate(idx):
            buckets[(offset + r) % folds].append(int(i))
        offset += idx.size
    return [np.array(sorted(b), dtype=int) for b in buckets]


@dataclass
class FoldResult:
    fold: int
    metrics: Metrics
    loss_trace: list[float]
    test_index: list[int]

    def to_dict(self) -> dict:
        return {"fold": self.fold, **self.metrics.to_dict(), "loss_trace": self.loss_trace,
                "test_index": self.test_index}


SCORES = ("acc", "sen", "spe", "f1")


def summarize(results: list[FoldResult]) -> dict[str, dict[str, float]]:
    out = {}
    for key in SCORES:
        vals = np.array([getattr(r.metrics, key) for r in results])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


@dataclass
class CVResult:
    folds: list[FoldResult]
    summary: dict[str, dict[str, float]]


def kfold_cv(graphs: list[BrainGraph], cfg: TrainConfig, mcfg: ModelConfig, rng: RngStream | None = None) -> CVResult:
    rng = rng or RngStream(cfg.seed)
    splits = stratified_folds([g.label for g in graphs], cfg.folds, rng.child(0))
    results = []
    for k, test_idx in enumerate(splits):
        test_set = set(test_idx.tolist())
        train = [g for i, g in enumerate(graphs) if i not in test_set]
        test = [graphs[i] for i in test_idx]
        res = train_model(train, cfg, mcfg, rng.child(1 + k))
        m = evaluate(test, res.params)
        log.info("fold %d: acc=%.3f sen=%.3f spe=%.3f f1=%.3f", k, m.acc, m.sen, m.spe, m.f1)
        results.append(FoldResult(k, m, res.loss_trace, test_idx.tolist()))
    return CVResult(results, summarize(results))


# -- ablation grids -------------------------------------------------------------


@dataclass
class GridPoint:
    xi: float
    heads: int
    edge_features: bool
    edge_metrics: tuple[str, ...] | None = None
    feature_mask: tuple[int, ...] | None = None

    def label(self) -> str:
        parts = [f"xi={self.xi:g}", f"T={self.heads}", f"edges={'on' if self.edge_features else 'off'}"]
        if self.edge_metrics is not None:
            parts.append("metrics=" + "+".join(self.edge_metrics))
        if self.feature_mask is not None:
            parts.append("features=" + ",".join(map(str, self.feature_mask)))
        return " ".join(parts)


def ablation_grid(xi=(0.5,), heads=(3,), edge_features=(True,), edge_metrics=(None,), feature_masks=(None,)):
    return [GridPoint(*combo) for combo in itertools.product(xi, heads, edge_features, edge_metrics, feature_masks)]


def ablation_sweep(
    graphs_for,
    grid: list[GridPoint],
    cfg: TrainConfig,
    mcfg: ModelConfig,
) -> list[dict]:
    """One k-fold run per grid point, all from the same base seed.

    ``graphs_for(edge_metrics)`` returns the graph list built with that metric
    subset (``None`` meaning the default fusion); graphs are reused across
    points that share a subset.
    """
    rows = []
    built: dict = {}
    for point in grid:
        key = point.edge_metrics
        if key not in built:
            built[key] = graphs_for(key)
        graphs = built[key]
        n_features = mcfg.n_features
        if point.feature_mask is not None:
            cols = list(point.feature_mask)
            graphs = [replace(g, X=g.X[:, cols]) for g in graphs]
            n_features = len(cols)
        point_cfg = replace(mcfg, xi=point.xi, heads=point.heads,
                            edge_features_enabled=point.edge_features, n_features=n_features)
        cv = kfold_cv(graphs, cfg, point_cfg, RngStream(cfg.seed))
        row = {"grid_point": point.label(), "xi": point.xi, "heads": point.heads,
               "edge_features": point.edge_features,
               "edge_metrics": "+".join(point.edge_metrics) if point.edge_metrics else "default",
               "feature_mask": ",".join(map(str, point.feature_mask)) if point.feature_mask else "all"}
        for key_, stats in cv.summary.items():
            row[f"{key_}_mean"] = stats["mean"]
            row[f"{key_}_std"] = stats["std"]
        row["folds"] = [f.metrics.to_dict() for f in cv.folds]
        rows.append(row)
    return rows
