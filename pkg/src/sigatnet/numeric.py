"""Dense float64 kernels with explicit backward rules.

Every differentiable op comes as a pair: ``op(...)`` computes the forward
value and ``op_backward(grad_out, ...)`` maps the upstream gradient back onto
the op's inputs.  Arrays may carry leading batch axes; the last two axes are
the matrix axes.  The model code composes these pairs by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is outside its allowed range."""


class EvaluationError(RuntimeError):
    """A scalar objective evaluated to a non-finite number."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise EvaluationError(f"{what} contains non-finite values")
    return x


@dataclass
class ParamTensor:
    """A trainable array together with its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


class RngStream:
    """Counter-based (Philox) random stream addressable by a key path.

    ``RngStream(seed).child(i)`` gives an independent stream that depends only
    on ``seed`` and the path, never on how many draws the parent has made.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, key: int) -> "RngStream":
        return RngStream(self.seed, self.path + (key,))

    def uniform(self, low, high, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


# -- matmul ------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back onto ``shape``."""
    while x.ndim > len(shape):
        x = x.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and x.shape[axis] != 1:
            x = x.sum(axis=axis, keepdims=True)
    return x


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    ga = grad @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ grad
    return _sum_to(ga, a.shape), _sum_to(gb, b.shape)


# -- elementwise activations -------------------------------------------------


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    if slope < 0:
        raise ConfigError(f"leaky_relu slope must be >= 0, got {slope}")
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad: np.ndarray, x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return grad * np.where(x > 0, 1.0, slope)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Backward rule written in terms of the forward *output*."""
    return grad * out * (1.0 - out)


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax along the last axis; entries where ``mask`` is False get 0."""
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    ex = np.exp(x - m)
    s = ex.sum(axis=-1, keepdims=True)
    return ex / np.where(s > 0, s, 1.0)


def softmax_rows_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return out * (grad - np.sum(grad * out, axis=-1, keepdims=True))


# -- zero-padded 2-D cross-correlation ---------------------------------------


def _kernel_offsets(kshape: tuple[int, int]) -> tuple[int, int]:
    kh, kw = kshape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel dimensions must be odd, got {kh}x{kw}")
    return kh // 2, kw // 2


def _value(kernel) -> np.ndarray:
    return kernel.value if isinstance(kernel, ParamTensor) else np.asarray(kernel, dtype=DTYPE)


def conv2d_zeropad(x: np.ndarray, kernel) -> np.ndarray:
    """Same-size cross-correlation of the last two axes of ``x``.

    out[i, j] = sum_{u, v} K[u, v] * x[i + u - ch, j + v - cw], with x read as
    zero outside its bounds.
    """
    k = _value(kernel)
    if k.ndim != 2:
        raise ConfigError(f"kernel must be 2-D, got shape {k.shape}")
    ch, cw = _kernel_offsets(k.shape)
    n, m = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(ch, ch), (cw, cw)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x, dtype=DTYPE)
    for u in range(k.shape[0]):
        for v in range(k.shape[1]):
            if k[u, v] != 0.0:
                out += k[u, v] * xp[..., u:u + n, v:v + m]
    return out


def conv2d_zeropad_backward(grad: np.ndarray, x: np.ndarray, kernel):
    """Return (grad wrt x, grad wrt kernel); kernel grad sums over batch axes."""
    k = _value(kernel)
    ch, cw = _kernel_offsets(k.shape)
    n, m = x.shape[-2:]
    lead = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, lead + [(ch, ch), (cw, cw)])
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(k)
    for u in range(k.shape[0]):
        for v in range(k.shape[1]):
            gk[u, v] = np.sum(grad * xp[..., u:u + n, v:v + m])
            gxp[..., u:u + n, v:v + m] += k[u, v] * grad
    gx = gxp[..., ch:ch + n, cw:cw + m]
    return gx, gk


# -- initialization ----------------------------------------------------------


def glorot_uniform(rows: int, cols: int, rng: RngStream, fan: tuple[int, int] | None = None) -> np.ndarray:
    """Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).

    ``fan`` overrides (fan_in, fan_out) when they differ from the matrix shape,
    as for convolution kernels.
    """
    if rows < 1 or cols < 1:
        raise ConfigError(f"glorot_uniform needs rows, cols >= 1, got {rows}x{cols}")
    fan_in, fan_out = fan if fan is not None else (rows, cols)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(rows, cols))


# -- finite-difference gradient check -----------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], float],
    params: Sequence[ParamTensor],
    h: float = 1e-5,
    backward: Callable[[], None] | None = None,
    max_entries: int | None = None,
    rng: RngStream | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` evaluates the scalar objective from the current parameter values.
    ``backward`` (if given) must leave the analytic gradient in each
    ``param.grad``; it is called once after zeroing.  With ``max_entries``
    only that many randomly chosen entries per tensor are perturbed.
    """
    if h <= 0:
        raise ConfigError(f"step h must be > 0, got {h}")
    zero_grads(params)
    base = f()
    if not np.isfinite(base):
        raise EvaluationError("objective is not finite at the base point")
    if backward is not None:
        backward()
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            chooser = rng or RngStream(0)
            idx = np.sort(chooser.generator.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"objective is not finite when perturbing {p.name}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, float(relative_error(np.array(gflat[i]), np.array(numeric))))
    return worst
