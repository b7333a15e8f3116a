"""Edge-weighted multi-head graph attention network with mean-pool readout.

The batched path works on stacks of graphs: node features (B, N, F), edge
matrices (B, N, N) and adjacency (B, N, N).  Per-layer weights keep all heads
in one array, ``W`` of shape (T, F_in, F_out) and ``a`` of shape
(T, 2 * F_out), so every head is evaluated in the same numpy call.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import sparse as sp
from .graph import BrainGraph
from .numeric import (
    ConfigError,
    ParamTensor,
    RngStream,
    glorot_uniform,
    leaky_relu,
    relu,
    sigmoid,
    softmax_rows,
    softmax_rows_backward,
)


@dataclass
class ModelConfig:
    n_features: int
    heads: int = 3
    hidden: tuple[int, ...] = (16, 16, 16)
    xi: float = 0.5
    edge_features_enabled: bool = True
    sparse_interaction_enabled: bool = True
    leaky_slope: float = 0.2
    eps: float = sp.EPS
    conv_layers: int = 2
    kernel_size: int = 3
    conv_bias: bool = True
    conv_init: str = "identity"
    conv_gain: float = 4.0
    conv_center: float = 1.0
    self_attention: bool = True
    final_heads: str = "concat"
    n_classes: int = 2

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.n_features < 1 or not self.hidden or min(self.hidden) < 1:
            raise ConfigError("feature and hidden dimensions must be >= 1")
        if not 0.0 <= self.xi <= 1.0:
            raise ConfigError(f"xi must lie in [0, 1], got {self.xi}")
        if self.final_heads not in ("concat", "mean"):
            raise ConfigError(f"final_heads must be 'concat' or 'mean', got {self.final_heads!r}")

    @property
    def readout_dim(self) -> int:
        last = self.hidden[-1]
        return last if self.final_heads == "mean" else self.heads * last

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GatLayerParams:
    W: ParamTensor
    a: ParamTensor

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[2]

    def head(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(W_t, a_t) views for a single head."""
        return self.W.value[t], self.a.value[t]


@dataclass
class ModelParams:
    config: ModelConfig
    conv: sp.AsymConvParams
    layers: list[GatLayerParams]
    fc_W: ParamTensor
    fc_b: ParamTensor
    # per-feature standardization fitted on the training split
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None

    def parameters(self) -> list[ParamTensor]:
        out = list(self.conv.parameters())
        for layer in self.layers:
            out += [layer.W, layer.a]
        return out + [self.fc_W, self.fc_b]

    def copy(self) -> "ModelParams":
        clone = init_params(self.config, RngStream(0))
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.value = src.value.copy()
        clone.feature_mean = None if self.feature_mean is None else self.feature_mean.copy()
        clone.feature_std = None if self.feature_std is None else self.feature_std.copy()
        return clone


def init_params(config: ModelConfig, rng: RngStream) -> ModelParams:
    if config.conv_init == "identity":
        conv = sp.AsymConvParams.identity(config.conv_layers, config.kernel_size, config.conv_gain, config.conv_center)
    else:
        conv = sp.AsymConvParams.init(rng.child(0), config.conv_layers, config.kernel_size, config.conv_bias)
    layers = []
    f_in = config.n_features
    T = config.heads
    for l, f_out in enumerate(config.hidden):
        sub = rng.child(1 + l)
        W = np.stack([glorot_uniform(f_in, f_out, sub.child(2 * t)) for t in range(T)])
        a = np.stack([glorot_uniform(2 * f_out, 1, sub.child(2 * t + 1))[:, 0] for t in range(T)])
        layers.append(GatLayerParams(ParamTensor(f"gat{l}.W", W), ParamTensor(f"gat{l}.a", a)))
        f_in = T * f_out
    fc = rng.child(1 + len(config.hidden))
    fc_W = ParamTensor("fc.W", glorot_uniform(config.readout_dim, config.n_classes, fc))
    fc_b = ParamTensor("fc.b", np.zeros((1, config.n_classes)))
    return ModelParams(config, conv, layers, fc_W, fc_b)


# -- single-head building blocks ---------------------------------------------------


def attention_support(A_s: np.ndarray, self_loops: bool = True) -> np.ndarray:
    """Neighbourhood mask: j with A_s[i, j] = 1, plus i itself when self_loops."""
    mask = A_s > 0
    if self_loops:
        mask = mask | np.eye(A_s.shape[-1], dtype=bool)
    return mask


def edge_weights(E_s: np.ndarray, enabled: bool = True) -> np.ndarray:
    """Logit multipliers: E_s off the diagonal, 1 on it; all ones when disabled."""
    if not enabled:
        return np.ones_like(E_s)
    n = E_s.shape[-1]
    eye = np.eye(n, dtype=bool)
    return np.where(eye, 1.0, E_s)


def attention_coefficients(
    H: np.ndarray,
    W: np.ndarray,
    a: np.ndarray,
    E_s: np.ndarray,
    A_s: np.ndarray,
    slope: float = 0.2,
    edge_features: bool = True,
    self_loops: bool = True,
) -> np.ndarray:
    """Row-softmax attention over each node's neighbourhood for one head.

    logit_ij = LeakyReLU(a . [W h_i || W h_j]) * e_ij
    """
    P = H @ W
    f_out = W.shape[-1]
    a = np.ravel(a)
    raw = (P @ a[:f_out])[:, None] + (P @ a[f_out:])[None, :]
    logits = leaky_relu(raw, slope) * edge_weights(E_s, edge_features)
    return softmax_rows(logits, attention_support(A_s, self_loops))


def head_update(H: np.ndarray, W: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """ReLU of the attention-weighted sum of transformed features (self term included in alpha)."""
    return relu(alpha @ (H @ W))


def multi_head_layer(
    H: np.ndarray,
    layer: GatLayerParams,
    E_s: np.ndarray,
    A_s: np.ndarray,
    slope: float = 0.2,
    edge_features: bool = True,
    self_loops: bool = True,
) -> np.ndarray:
    outs = []
    for t in range(layer.heads):
        W, a = layer.head(t)
        alpha = attention_coefficients(H, W, a, E_s, A_s, slope, edge_features, self_loops)
        outs.append(head_update(H, W, alpha))
    return np.concatenate(outs, axis=-1)


def global_avg_pool(H: np.ndarray) -> np.ndarray:
    if H.shape[-2] < 1:
        raise ConfigError("cannot pool a graph with no nodes")
    return H.mean(axis=-2)


# -- batched forward / backward ------------------------------------------------------


def _stack(graphs: list[BrainGraph]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.stack([g.X for g in graphs])
    E = np.stack([g.E for g in graphs])
    A = np.stack([g.A for g in graphs])
    return X, E, A


def standardize(X: np.ndarray, params: ModelParams) -> np.ndarray:
    if params.feature_mean is None:
        return X
    return (X - params.feature_mean) / params.feature_std


def prepare_edges(E: np.ndarray, A: np.ndarray, params: ModelParams, cache: dict | None = None):
    """Edge multipliers and attention support for a batch of graphs."""
    cfg = params.config
    if not cfg.edge_features_enabled:
        # no edge information at all: dense topology, unit multipliers
        return np.ones_like(E), A.astype(np.float64)
    if cfg.sparse_interaction_enabled:
        sg = sp.sparsify(E, A, params.conv, cfg.xi, cfg.eps, cache)
        return edge_weights(sg.E_s), sg.A_s
    E_s = np.where(A > 0, sigmoid(E), 0.0)
    return edge_weights(E_s), A.astype(np.float64)


def _layer_forward(H, layer: GatLayerParams, Et, mask, slope, mean_heads: bool):
    W = layer.W.value
    a = layer.a.value
    f_out = W.shape[2]
    P = H[:, None] @ W[None]  # (B, T, N, Fo)
    a_src, a_dst = a[:, :f_out], a[:, f_out:]
    s_src = (P @ a_src[:, :, None])[..., 0]
    s_dst = (P @ a_dst[:, :, None])[..., 0]
    raw = s_src[..., :, None] + s_dst[..., None, :]
    lr = leaky_relu(raw, slope)
    alpha = softmax_rows(lr * Et[:, None], mask[:, None])
    Z = alpha @ P
    out = relu(Z)
    if mean_heads:
        Hn = out.mean(axis=1)
    else:
        B, T, N, Fo = out.shape
        Hn = out.transpose(0, 2, 1, 3).reshape(B, N, T * Fo)
    return Hn, (H, P, raw, lr, alpha, Z)


def _layer_backward(gH_out, layer: GatLayerParams, Et, slope, mean_heads: bool, cache, need_edges: bool):
    H, P, raw, lr, alpha, Z = cache
    B, T, N, Fo = Z.shape
    if mean_heads:
        gout = np.broadcast_to(gH_out[:, None] / T, Z.shape)
    else:
        gout = gH_out.reshape(B, N, T, Fo).transpose(0, 2, 1, 3)
    gZ = gout * (Z > 0)
    galpha = gZ @ np.swapaxes(P, -1, -2)
    gP = np.swapaxes(alpha, -1, -2) @ gZ
    glogit = softmax_rows_backward(galpha, alpha)
    gEt = (glogit * lr).sum(axis=1) if need_edges else None
    graw = glogit * Et[:, None] * np.where(raw > 0, 1.0, slope)
    gs_src = graw.sum(axis=-1)
    gs_dst = graw.sum(axis=-2)
    a = layer.a.value
    gP = gP + gs_src[..., None] * a[None, :, None, :Fo] + gs_dst[..., None] * a[None, :, None, Fo:]
    layer.a.grad[:, :Fo] += (gs_src[..., None, :] @ P).sum(axis=0)[:, 0]
    layer.a.grad[:, Fo:] += (gs_dst[..., None, :] @ P).sum(axis=0)[:, 0]
    layer.W.grad += (np.swapaxes(H, -1, -2)[:, None] @ gP).sum(axis=0)
    gH = (gP @ np.swapaxes(layer.W.value, -1, -2)[None]).sum(axis=1)
    return gH, gEt


def forward_batch(X, E, A, params: ModelParams, cache: dict | None = None) -> np.ndarray:
    """Class probabilities (B, n_classes) for a stack of graphs."""
    cfg = params.config
    if X.shape[-1] != cfg.n_features:
        raise ConfigError(f"model expects {cfg.n_features} node features, got {X.shape[-1]}")
    if E.shape[-1] != X.shape[-2] or A.shape != E.shape:
        raise ConfigError(f"inconsistent graph shapes X{X.shape} E{E.shape} A{A.shape}")
    sparse_cache: dict = {}
    Et, A_s = prepare_edges(E, A, params, sparse_cache)
    mask = attention_support(A_s, cfg.self_attention)
    H = standardize(X, params)
    layer_caches = []
    n_layers = len(params.layers)
    for l, layer in enumerate(params.layers):
        mean_heads = cfg.final_heads == "mean" and l == n_layers - 1
        H, lc = _layer_forward(H, layer, Et, mask, cfg.leaky_slope, mean_heads)
        layer_caches.append(lc)
    z = global_avg_pool(H)
    logits = z @ params.fc_W.value + params.fc_b.value
    probs = softmax_rows(logits)
    if cache is not None:
        cache.update(sparse=sparse_cache, Et=Et, layers=layer_caches, H_last=H, z=z, probs=probs)
    return probs


def backward_batch(grad_probs: np.ndarray, params: ModelParams, cache: dict) -> None:
    """Accumulate parameter gradients given dLoss/dprobs for the cached batch."""
    cfg = params.config
    glogits = softmax_rows_backward(grad_probs, cache["probs"])
    z = cache["z"]
    params.fc_W.grad += z.T @ glogits
    params.fc_b.grad += glogits.sum(axis=0, keepdims=True)
    gz = glogits @ params.fc_W.value.T
    N = cache["H_last"].shape[-2]
    gH = np.broadcast_to(gz[:, None, :] / N, cache["H_last"].shape)
    trains_conv = cfg.edge_features_enabled and cfg.sparse_interaction_enabled
    gEt_total = None
    n_layers = len(params.layers)
    for l in reversed(range(n_layers)):
        mean_heads = cfg.final_heads == "mean" and l == n_layers - 1
        gH, gEt = _layer_backward(
            gH, params.layers[l], cache["Et"], cfg.leaky_slope, mean_heads, cache["layers"][l], trains_conv
        )
        if gEt is not None:
            gEt_total = gEt if gEt_total is None else gEt_total + gEt
    if trains_conv:
        n = gEt_total.shape[-1]
        gE_s = np.where(np.eye(n, dtype=bool), 0.0, gEt_total)
        sp.sparsify_backward(gE_s, params.conv, cache["sparse"])


def model_forward(graph: BrainGraph, params: ModelParams) -> np.ndarray:
    """Class probabilities for a single graph."""
    X, E, A = _stack([graph])
    return forward_batch(X, E, A, params)[0]


def predict_proba(graphs: list[BrainGraph], params: ModelParams, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(graphs), batch_size):
        X, E, A = _stack(graphs[start:start + batch_size])
        out.append(forward_batch(X, E, A, params))
    return np.concatenate(out) if out else np.zeros((0, 2))
