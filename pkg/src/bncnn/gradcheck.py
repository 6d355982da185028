"""Central finite-difference verification of every hand-written backward.

Layer-level checks differentiate the scalar loss sum(y^2)/2 through one
layer; whole-net checks differentiate the net's own softmax loss with
respect to every parameter coordinate and the input. Checks run in
float64 (float32 finite differences are too noisy to be trustworthy).

Relative error uses |a - n| / max(|a|, |n|, floor); the floor keeps
near-zero gradients from dividing roundoff by roundoff. Coordinates
sitting on a relu kink (|preactivation| < KINK_EPS) are skipped at the
layer level, since the two-sided difference straddles the kink there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .netdef import NetDef, parse

DEFAULT_STEP = 1e-5
KINK_EPS = 1e-4
REL_FLOOR = 1e-3

LAYER_KINDS = ("conv", "fc", "relu", "pool_max", "pool_avg", "bn_batch",
               "bn_global", "dropout", "eltwise_add", "softmax_loss")


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def fd_gradient(f, x: np.ndarray, step: float = DEFAULT_STEP,
                coords=None) -> np.ndarray:
    """Central finite differences of scalar f with respect to coords of x
    (every coordinate when coords is None).

    Perturbs x in place and restores it; x must be float64. Unchecked
    coordinates come back as NaN so callers can mask them.
    """
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
        grad = np.zeros_like(x, dtype=np.float64)
    else:
        grad = np.full_like(x, np.nan, dtype=np.float64)
    gflat = grad.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def _sq_loss(y: np.ndarray) -> float:
    return float(0.5 * np.sum(y.astype(np.float64) ** 2))


def _max_err(analytic, numeric, mask=None) -> float:
    err = relative_error(analytic, numeric)
    if mask is not None:
        err = err[mask]
    return float(err.max()) if err.size else 0.0


def check_layer(kind: str, seed: int = 0, step: float = DEFAULT_STEP,
                tolerance: float = 1e-4) -> CheckResult:
    """Finite-difference check of one layer kind in isolation."""
    rng = np.random.default_rng(seed)
    errs: list[float] = []
    checked = 0

    def compare(analytic, f, x, mask=None):
        nonlocal checked
        numeric = fd_gradient(f, x, step)
        errs.append(_max_err(analytic, numeric, mask))
        checked += x.size if mask is None else int(np.count_nonzero(mask))

    if kind == "conv":
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3)) * 0.5
        b = rng.normal(size=4) * 0.1
        run = lambda: L.conv_forward(x, w, b, 3, 1, 1)
        y, cache = run()
        dy = y.copy()  # dL/dy for L = sum(y^2)/2
        dx, dw, db = L.conv_backward(dy, cache)
        f = lambda: _sq_loss(run()[0])
        compare(dx, f, x)
        compare(dw, f, w)
        compare(db, f, b)
    elif kind == "fc":
        x = rng.normal(size=(4, 3, 2, 2))
        w = rng.normal(size=(5, 12)) * 0.5
        b = rng.normal(size=5) * 0.1
        run = lambda: L.fc_forward(x, w, b)
        y, cache = run()
        dx, dw, db = L.fc_backward(y.copy(), cache)
        f = lambda: _sq_loss(run()[0])
        compare(dx, f, x)
        compare(dw, f, w)
        compare(db, f, b)
    elif kind == "relu":
        x = rng.normal(size=(3, 4, 5, 5))
        y, cache = L.relu_forward(x)
        dx = L.relu_backward(y.copy(), cache)
        f = lambda: _sq_loss(L.relu_forward(x)[0])
        compare(dx, f, x, mask=np.abs(x) > KINK_EPS)
    elif kind in ("pool_max", "pool_avg"):
        mode = kind.split("_")[1]
        x = _well_separated_input(rng, (2, 3, 6, 6), min_gap=50 * step)
        run = lambda: L.pool_forward(x, mode, 2, 2)
        y, cache = run()
        dx = L.pool_backward(y.copy(), cache)
        compare(dx, lambda: _sq_loss(run()[0]), x)
    elif kind in ("bn_batch", "bn_global"):
        x = rng.normal(size=(4, 3, 2, 2)) * 2 + 1
        st = _fresh_bn_state(3, rng)
        st.mode = L.BATCH_STATS if kind == "bn_batch" else L.GLOBAL_STATS
        training = kind == "bn_batch"

        def run():
            rm, rv = st.running_mean.copy(), st.running_var.copy()
            y, cache = L.bn_forward(x, st, training=training)
            st.running_mean[...] = rm  # keep f pure across FD evaluations
            st.running_var[...] = rv
            return y, cache

        y, cache = run()
        dx, dgamma, dbeta = L.bn_backward(y.copy(), cache, st)
        f = lambda: _sq_loss(run()[0])
        compare(dx, f, x)
        compare(dgamma, f, st.gamma.value)
        compare(dbeta, f, st.beta.value)
    elif kind == "dropout":
        x = rng.normal(size=(4, 3, 4, 4))
        run = lambda: L.dropout_forward(x, 0.4, True, np.random.default_rng(7))
        y, cache = run()
        dx = L.dropout_backward(y.copy(), cache)
        compare(dx, lambda: _sq_loss(run()[0]), x)
    elif kind == "eltwise_add":
        a = rng.normal(size=(2, 3, 4, 4))
        bb = rng.normal(size=(2, 3, 4, 4))
        y, cache = L.eltwise_add_forward(a, bb)
        da, db_ = L.eltwise_add_backward(y.copy(), cache)
        f = lambda: _sq_loss(L.eltwise_add_forward(a, bb)[0])
        compare(da, f, a)
        compare(db_, f, bb)
    elif kind == "softmax_loss":
        logits = rng.normal(size=(6, 5, 1, 1))
        labels = rng.integers(0, 5, size=6)
        _, _, cache = L.softmax_loss_forward(logits, labels)
        dlogits = L.softmax_loss_backward(1.0, cache)
        f = lambda: L.softmax_loss_forward(logits, labels)[0]
        compare(dlogits, f, logits)
    else:
        raise ValueError(f"unknown layer kind '{kind}'")
    return CheckResult(kind, max(errs), checked, tolerance)


def _fresh_bn_state(channels: int, rng) -> L.BatchNormState:
    gamma = L.Param.zeros_like(rng.normal(1.0, 0.2, size=channels))
    beta = L.Param.zeros_like(rng.normal(0.0, 0.2, size=channels))
    return L.BatchNormState(
        gamma, beta,
        running_mean=rng.normal(size=channels),
        running_var=rng.uniform(0.5, 1.5, size=channels),
        eps=1e-5, momentum=0.1)


def _well_separated_input(rng, shape, min_gap: float, kernel: int = 2,
                          stride: int = 2) -> np.ndarray:
    """Random input whose pooling argmaxes cannot flip under FD steps."""
    n, c, h, w = shape
    for _ in range(100):
        x = rng.normal(size=shape)
        cols = T.im2col(x.reshape(n * c, 1, h, w), kernel, stride, 0)
        top2 = np.sort(cols, axis=0)[-2:, :]
        if (top2[1] - top2[0]).min() > min_gap:
            return x
    raise RuntimeError("could not draw a well-separated input")


def check_net(net: NetDef, seed: int = 0, step: float = DEFAULT_STEP,
              tolerance: float = 1e-3, batch: int = 2,
              sample: int = 0) -> list[CheckResult]:
    """Whole-net check: every parameter tensor plus the input batch.

    Gradients of the net's softmax loss are compared against central
    differences in float64, coordinate by coordinate. sample > 0 checks
    at most that many coordinates per tensor (drawn deterministically
    from the seed) so large nets stay tractable; sample=0 is exhaustive.
    """
    rng = np.random.default_rng(seed)
    params = L.init_params(net, seed=seed, dtype=np.float64)
    c, h, w = net.input_shape
    x = rng.normal(size=(batch, c, h, w))
    classes = _class_count(net)
    labels = rng.integers(0, classes, size=batch)
    coord_rng = np.random.default_rng(seed + 2)

    def coords_for(arr):
        if not sample or arr.size <= sample:
            return None
        return np.sort(coord_rng.choice(arr.size, size=sample, replace=False))

    def loss() -> float:
        rm = {n: (st.running_mean.copy(), st.running_var.copy())
              for n, st in params.bn.items()}
        value, _, _ = L.net_forward(net, params, x, labels, training=True,
                                    rng=np.random.default_rng(seed + 1))
        for n, st in params.bn.items():
            st.running_mean[...], st.running_var[...] = rm[n]
        return value

    params.zero_grads()
    _, _, tape = _forward_training(net, params, x, labels, seed)
    L.net_backward(tape, params)
    results = []
    for name, p in params.params.items():
        numeric = fd_gradient(loss, p.value, step, coords=coords_for(p.value))
        mask = ~np.isnan(numeric)
        err = _max_err(p.grad[mask], numeric[mask])
        results.append(CheckResult(name, err, int(mask.sum()), tolerance))
    numeric = fd_gradient(loss, x, step, coords=coords_for(x))
    params.zero_grads()
    _, _, tape = _forward_training(net, params, x, labels, seed)
    dx = L.net_backward(tape, params)
    mask = ~np.isnan(numeric)
    results.append(CheckResult("<input>", _max_err(dx[mask], numeric[mask]),
                               int(mask.sum()), tolerance))
    return results


def _forward_training(net, params, x, labels, seed):
    rm = {n: (st.running_mean.copy(), st.running_var.copy())
          for n, st in params.bn.items()}
    out = L.net_forward(net, params, x, labels, training=True,
                        rng=np.random.default_rng(seed + 1))
    for n, st in params.bn.items():
        st.running_mean[...], st.running_var[...] = rm[n]
    return out


def _class_count(net: NetDef) -> int:
    for spec in reversed(net.layers):
        if spec.kind == "fc":
            return spec.params["out_features"]
    raise ValueError("net has no fc classifier")


CONV_BN_RELU_FC_NET = """\
name gradcheck_chain
input data 3 8 8
layer c1 conv data c1o out_channels=4 kernel=3 stride=1 pad=1 bias_flag=1
layer c1_bn bn c1o c1b eps=1e-5 momentum=0.1
layer r1 relu c1b r1o
layer p1 pool r1o p1o mode=max kernel=2 stride=2
layer f1 fc p1o f1o out_features=5 bias_flag=1
layer loss softmax_loss f1o+label lossv
"""


def chain_net() -> NetDef:
    """Small conv-bn-relu-pool-fc-softmax net for whole-net checks."""
    return parse(CONV_BN_RELU_FC_NET)


def residual_net() -> NetDef:
    """One-stage residual net for whole-net checks."""
    from .transform import generate_resnet
    return generate_resnet([1], base_width=4, classes=3, input_shape=(3, 16, 16))
