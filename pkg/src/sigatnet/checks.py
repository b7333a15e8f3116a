"""Finite-difference verification of every hand-written backward rule.

Each check builds a scalar readout ``sum(op(x) * R)`` (or the model loss) and
compares the analytic gradient against central differences.  Checks are only
meaningful at differentiable points, so instances whose ReLU/LeakyReLU inputs
or threshold inputs sit within ``KINK_MARGIN`` steps of a kink are skipped in
favour of the next seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from . import sparse as sp
from .gat import ModelConfig, backward_batch, forward_batch, init_params
from .graph import build_graph
from .numeric import ParamTensor, RngStream, grad_check
from .training import focal_loss_and_grad

OP_STEP = 1e-5
# the model-level objectives have many near-zero gradient entries, where
# roundoff noise grows like 1/h; 1e-4 keeps it well under the 1e-4 bar
MODEL_STEP = 1e-4
KINK_MARGIN = 10.0
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _readout(out: np.ndarray, R: np.ndarray) -> float:
    return float(np.sum(out * R))


def _unary_check(name, forward, backward, x: np.ndarray, rng: RngStream) -> CheckResult:
    t0 = time.perf_counter()
    p = ParamTensor(name, x)
    R = rng.normal(size=x.shape)

    def f():
        return _readout(forward(p.value), R)

    def bw():
        p.grad += backward(R, p.value)

    err = grad_check(f, [p], OP_STEP, bw)
    return CheckResult(name, err, time.perf_counter() - t0)


def _away_from_zero(x: np.ndarray, margin: float) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = RngStream(seed)
    results = []
    margin = KINK_MARGIN * OP_STEP

    a = ParamTensor("matmul.a", rng.child(0).normal(size=(4, 3)))
    b = ParamTensor("matmul.b", rng.child(1).normal(size=(3, 5)))
    R = rng.child(2).normal(size=(4, 5))
    t0 = time.perf_counter()

    def f_mm():
        return _readout(nc.matmul(a.value, b.value), R)

    def bw_mm():
        ga, gb = nc.matmul_backward(R, a.value, b.value)
        a.grad += ga
        b.grad += gb

    results.append(CheckResult("matmul", grad_check(f_mm, [a, b], OP_STEP, bw_mm), time.perf_counter() - t0))

    x = _away_from_zero(rng.child(3).normal(size=(5, 6)), margin)
    results.append(_unary_check(
        "leaky_relu", lambda v: nc.leaky_relu(v, 0.2),
        lambda g, v: nc.leaky_relu_backward(g, v, 0.2), x, rng.child(4)))
    results.append(_unary_check("relu", nc.relu, nc.relu_backward, x, rng.child(5)))
    results.append(_unary_check(
        "sigmoid", nc.sigmoid, lambda g, v: nc.sigmoid_backward(g, nc.sigmoid(v)),
        rng.child(6).normal(size=(5, 6)), rng.child(7)))
    results.append(_unary_check(
        "softmax_rows", nc.softmax_rows, lambda g, v: nc.softmax_rows_backward(g, nc.softmax_rows(v)),
        rng.child(8).normal(size=(4, 7)), rng.child(9)))

    for i, shape in enumerate(((1, 3), (3, 1), (3, 3))):
        sub = rng.child(20 + i)
        xin = ParamTensor("conv.input", sub.child(0).normal(size=(6, 5)))
        kern = ParamTensor("conv.kernel", sub.child(1).normal(size=shape))
        Rc = sub.child(2).normal(size=(6, 5))
        t0 = time.perf_counter()

        def f_conv(xin=xin, kern=kern, Rc=Rc):
            return _readout(nc.conv2d_zeropad(xin.value, kern), Rc)

        def bw_conv(xin=xin, kern=kern, Rc=Rc):
            gx, gk = nc.conv2d_zeropad_backward(Rc, xin.value, kern)
            xin.grad += gx
            kern.grad += gk

        err = grad_check(f_conv, [xin, kern], OP_STEP, bw_conv)
        results.append(CheckResult(f"conv2d_zeropad {shape[0]}x{shape[1]}", err, time.perf_counter() - t0))

    # sparsity pattern held fixed, as it is behind the threshold mask
    # a row with one kept entry has output q / (q + eps) ~ 1 and an eps-sized
    # gradient that differences cannot resolve, so keep at least two per row
    keep = rng.child(31).uniform(0, 1, (5, 6)) > 0.4
    keep[:, :2] = True
    M = np.abs(rng.child(30).normal(size=(5, 6))) + margin
    results.append(_unary_check(
        "zero_softmax_rows", lambda v: sp.zero_softmax_rows(np.where(keep, v, 0.0)),
        lambda g, v: keep * sp.zero_softmax_rows_backward(
            g, np.where(keep, v, 0.0), sp.zero_softmax_rows(np.where(keep, v, 0.0))),
        M, rng.child(32)))

    p = ParamTensor("focal.p", rng.child(40).uniform(0.05, 0.95, (1, 12)))
    y = (rng.child(41).uniform(0, 1, 12) > 0.5).astype(float)
    t0 = time.perf_counter()

    def f_focal():
        return focal_loss_and_grad(p.value, y, 0.25, 2.0)[0]

    def bw_focal():
        p.grad += focal_loss_and_grad(p.value, y, 0.25, 2.0)[1].reshape(p.shape)

    results.append(CheckResult("focal_loss", grad_check(f_focal, [p], OP_STEP, bw_focal), time.perf_counter() - t0))
    return results


def sparsify_check(seed: int = 0, n: int = 8, xi: float = 0.5, max_tries: int = 50) -> CheckResult:
    """Kernel and bias gradients of ``sum(E_s * R)`` through the sparse block."""
    t0 = time.perf_counter()
    for attempt in range(max_tries):
        rng = RngStream(seed, (attempt,))
        E = rng.child(0).normal(size=(n, n))
        E = 0.5 * (E + E.T)
        np.fill_diagonal(E, 0.0)
        A = np.ones((n, n)) - np.eye(n)
        params = sp.AsymConvParams.init(rng.child(1), 2, 3, bias=True)
        for b in params.bias:
            b.value[...] = rng.child(2).normal(scale=0.3)
        R = rng.child(3).normal(size=(n, n))
        H = sp.asym_conv_block(E, params)
        if np.min(np.abs(H - xi)) <= KINK_MARGIN * MODEL_STEP:
            continue
        keep = (H >= xi) & ~np.eye(n, dtype=bool)
        if keep.sum() < 3 or (~keep).sum() < n + 3:
            continue
        cache: dict = {}

        def f():
            return _readout(sp.sparsify(E, A, params, xi).E_s, R)

        def bw():
            sp.sparsify(E, A, params, xi, cache=cache)
            sp.sparsify_backward(R, params, cache)

        err = grad_check(f, params.parameters(), MODEL_STEP, bw)
        return CheckResult("sparsify kernels", err, time.perf_counter() - t0)
    raise RuntimeError("no smooth sparsify instance found")


def _model_instance(seed: int, n: int, f: int, heads: int, batch: int):
    rng = RngStream(seed)
    graphs = [
        build_graph(rng.child(10 + i).normal(size=(n, 40)), rng.child(100 + i).normal(size=(n, f)), i % 2)
        for i in range(batch)
    ]
    X = np.stack([g.X for g in graphs])
    E = np.stack([g.E for g in graphs])
    A = np.stack([g.A for g in graphs])
    y = np.array([g.label for g in graphs], dtype=float)
    cfg = ModelConfig(n_features=f, heads=heads, xi=0.5)
    params = init_params(cfg, rng.child(1))
    # move the conv block off its structured initial point
    for p in params.conv.parameters():
        p.value += rng.child(2).normal(scale=0.05, size=p.shape)
    return X, E, A, y, params


def _smooth(cache: dict, xi: float, margin: float) -> bool:
    """True when no ReLU/LeakyReLU input or threshold input is within margin of its kink."""
    for _, _, raw, _, _, Z in cache["layers"]:
        if np.min(np.abs(raw)) <= margin or np.min(np.abs(Z)) <= margin:
            return False
    conv = cache["sparse"].get("conv")
    return not (conv and np.min(np.abs(conv[-1][1] - xi)) <= margin)


def model_check(seed: int = 0, n: int = 8, f: int = 5, heads: int = 2, batch: int = 1, max_tries: int = 100) -> CheckResult:
    """Full focal-loss gradient through the whole network."""
    t0 = time.perf_counter()
    for attempt in range(max_tries):
        X, E, A, y, params = _model_instance(seed + 1000 * attempt, n, f, heads, batch)
        cache: dict = {}
        forward_batch(X, E, A, params, cache)
        if not _smooth(cache, params.config.xi, KINK_MARGIN * MODEL_STEP):
            continue

        def loss():
            probs = forward_batch(X, E, A, params)
            return focal_loss_and_grad(probs[:, 1], y)[0]

        def bw():
            c: dict = {}
            probs = forward_batch(X, E, A, params, c)
            _, gp1 = focal_loss_and_grad(probs[:, 1], y)
            gprobs = np.zeros_like(probs)
            gprobs[:, 1] = gp1
            backward_batch(gprobs, params, c)

        err = grad_check(loss, params.parameters(), MODEL_STEP, bw)
        return CheckResult(f"model loss ({n} nodes, F={f}, T={heads})", err, time.perf_counter() - t0)
    raise RuntimeError("no smooth model instance found")


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + [sparsify_check(seed), model_check(seed)]
