"""Sparse interaction: asymmetric convolution over the edge matrix,
thresholding, zero-preserving row normalization and sparse adjacency.

All functions accept stacked edge matrices of shape (..., N, N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import (
    ConfigError,
    ParamTensor,
    RngStream,
    conv2d_zeropad,
    conv2d_zeropad_backward,
    glorot_uniform,
    sigmoid,
    sigmoid_backward,
)

EPS = 1e-12
XI_GRID = (0.0, 0.3, 0.5, 0.7, 1.0)


@dataclass
class AsymConvParams:
    k_row: list[ParamTensor]
    k_col: list[ParamTensor]
    k_all: list[ParamTensor]
    bias: list[ParamTensor] | None = None

    @property
    def n_layers(self) -> int:
        return len(self.k_all)

    @property
    def kernel_size(self) -> int:
        return self.k_all[0].shape[0]

    def parameters(self) -> list[ParamTensor]:
        out = []
        for layer in range(self.n_layers):
            out += [self.k_row[layer], self.k_col[layer], self.k_all[layer]]
            if self.bias is not None:
                out.append(self.bias[layer])
        return out

    @classmethod
    def init(cls, rng: RngStream, n_layers: int = 2, kernel_size: int = 3, bias: bool = True) -> "AsymConvParams":
        k = kernel_size
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {k}")
        if n_layers < 1:
            raise ConfigError(f"need at least one conv layer, got {n_layers}")
        rows, cols, alls = [], [], []
        for layer in range(n_layers):
            sub = rng.child(layer)
            rows.append(ParamTensor(f"conv{layer}.row", glorot_uniform(1, k, sub.child(0), fan=(k, k))))
            cols.append(ParamTensor(f"conv{layer}.col", glorot_uniform(k, 1, sub.child(1), fan=(k, k))))
            alls.append(ParamTensor(f"conv{layer}.all", glorot_uniform(k, k, sub.child(2), fan=(k * k, k * k))))
        biases = [ParamTensor(f"conv{l}.bias", np.zeros((1, 1))) for l in range(n_layers)] if bias else None
        return cls(rows, cols, alls, biases)

    @classmethod
    def identity(cls, n_layers: int = 2, kernel_size: int = 3, gain: float = 4.0, center: float = 1.0) -> "AsymConvParams":
        """Centre-tap kernels: layer 1 is sigmoid(gain * (E - center)), later
        layers sigmoid(gain * (x - 0.5)), so H >= 0.5 exactly where E >= center."""
        params = cls.zeros(n_layers, kernel_size, bias=True)
        c = kernel_size // 2
        for layer in range(n_layers):
            params.k_all[layer].value[c, c] = gain
            params.bias[layer].value[...] = -gain * (center if layer == 0 else 0.5)
        return params

    @classmethod
    def zeros(cls, n_layers: int = 2, kernel_size: int = 3, bias: bool = True) -> "AsymConvParams":
        k = kernel_size
        return cls(
            [ParamTensor(f"conv{l}.row", np.zeros((1, k))) for l in range(n_layers)],
            [ParamTensor(f"conv{l}.col", np.zeros((k, 1))) for l in range(n_layers)],
            [ParamTensor(f"conv{l}.all", np.zeros((k, k))) for l in range(n_layers)],
            [ParamTensor(f"conv{l}.bias", np.zeros((1, 1))) for l in range(n_layers)] if bias else None,
        )


# -- asymmetric convolution block --------------------------------------------------


def asym_conv_block(E: np.ndarray, params: AsymConvParams, cache: list | None = None) -> np.ndarray:
    """Stack of sigmoid(conv_1xk + conv_kx1 + conv_kxk) layers; output in (0, 1)."""
    x = np.asarray(E, dtype=np.float64)
    for layer in range(params.n_layers):
        z = (
            conv2d_zeropad(x, params.k_row[layer])
            + conv2d_zeropad(x, params.k_col[layer])
            + conv2d_zeropad(x, params.k_all[layer])
        )
        if params.bias is not None:
            z = z + params.bias[layer].value
        out = sigmoid(z)
        if cache is not None:
            cache.append((x, out))
        x = out
    return x


def asym_conv_block_backward(grad: np.ndarray, params: AsymConvParams, cache: list) -> np.ndarray:
    """Accumulate kernel grads; return the gradient w.r.t. the input edge matrix."""
    g = grad
    for layer in reversed(range(params.n_layers)):
        x, out = cache[layer]
        gz = sigmoid_backward(g, out)
        g = np.zeros_like(x)
        for kern in (params.k_row[layer], params.k_col[layer], params.k_all[layer]):
            gx, gk = conv2d_zeropad_backward(gz, x, kern)
            kern.grad += gk
            g += gx
        if params.bias is not None:
            params.bias[layer].grad += gz.sum()
    return g


# -- thresholding and normalization --------------------------------------------------


def _check_xi(xi: float) -> None:
    if not 0.0 <= xi <= 1.0:
        raise ConfigError(f"threshold xi must lie in [0, 1], got {xi}")


def threshold_mask(H: np.ndarray, xi: float) -> np.ndarray:
    _check_xi(xi)
    return H >= xi


def threshold_sparsify(H: np.ndarray, xi: float) -> np.ndarray:
    """Keep entries with H >= xi, zero the rest."""
    return np.where(threshold_mask(H, xi), H, 0.0)


def zero_softmax_rows(M: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Row normalization (e^m - 1)^2 / (sum_k (e^m_k - 1)^2 + eps); maps 0 to 0."""
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    q = np.expm1(M) ** 2
    return q / (q.sum(axis=-1, keepdims=True) + eps)


def zero_softmax_rows_backward(grad: np.ndarray, M: np.ndarray, out: np.ndarray, eps: float = EPS) -> np.ndarray:
    q_sum = (np.expm1(M) ** 2).sum(axis=-1, keepdims=True)
    gq = (grad - np.sum(grad * out, axis=-1, keepdims=True)) / (q_sum + eps)
    return gq * 2.0 * np.expm1(M) * np.exp(M)


def derive_sparse_adjacency(E_s: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.where(E_s > 0, A, 0.0)


# -- full mechanism ---------------------------------------------------------------


@dataclass
class SparseGraph:
    E_s: np.ndarray
    A_s: np.ndarray
    xi: float


def sparsify(E, A, params: AsymConvParams, xi: float, eps: float = EPS, cache: dict | None = None) -> SparseGraph:
    """conv block -> threshold -> zero-softmax -> adjacency.

    The diagonal is dropped before normalization: self-loops are handled by
    the attention layer, not by the edge matrix.
    """
    _check_xi(xi)
    conv_cache: list = []
    H = asym_conv_block(E, params, conv_cache)
    n = H.shape[-1]
    keep = threshold_mask(H, xi) & ~np.eye(n, dtype=bool)
    M = np.where(keep, H, 0.0)
    E_s = zero_softmax_rows(M, eps)
    A_s = derive_sparse_adjacency(E_s, np.broadcast_to(A, E_s.shape))
    if cache is not None:
        cache.update(conv=conv_cache, keep=keep, M=M, E_s=E_s, eps=eps)
    return SparseGraph(E_s=E_s, A_s=A_s, xi=xi)


def sparsify_backward(grad_E_s: np.ndarray, params: AsymConvParams, cache: dict) -> np.ndarray:
    """Kernel grads flow through retained entries; the keep mask is held fixed."""
    gM = zero_softmax_rows_backward(grad_E_s, cache["M"], cache["E_s"], cache["eps"])
    gH = np.where(cache["keep"], gM, 0.0)
    return asym_conv_block_backward(gH, params, cache["conv"])
