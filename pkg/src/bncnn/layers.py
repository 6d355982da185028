"""Layer math (forward and backward) and whole-net execution.

Batch normalization supports two statistics modes:

* ``batch_stats`` — training normalizes with the current mini-batch's
  biased moments and folds them into the running estimates
  (exponential update; the running variance gets the m/(m-1) unbiased
  correction).
* ``global_stats`` — normalization always uses the stored running
  moments and never updates them. This is the fine-tuning escape hatch
  for batch sizes too small for robust statistics.

At inference (training=False) every bn layer behaves like global_stats.
Backwards are hand-written; the gradcheck module verifies each one
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .netdef import LABEL_BLOB, NetDef, infer_shapes

BATCH_STATS = "batch_stats"
GLOBAL_STATS = "global_stats"


class ContractError(RuntimeError):
    """A call violated a tape/state contract (reuse, mismatch, missing rng)."""


class StatsError(ValueError):
    """Batch statistics requested over fewer than two elements."""


class RuntimeUnsupportedError(RuntimeError):
    """Layer kind is parseable but has no runtime (lrn must be rewritten away)."""


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray

    @classmethod
    def zeros_like(cls, value: np.ndarray) -> "Param":
        return cls(value, np.zeros_like(value), np.zeros_like(value))


@dataclass
class BatchNormState:
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float
    momentum: float
    mode: str = BATCH_STATS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"momentum must be in (0, 1], got {self.momentum}")


class ParamSet:
    """All learnable parameters plus per-bn-layer state, keyed by layer name.

    ``params`` maps '<layer>.weight' / '.bias' / '.gamma' / '.beta' to
    Param triples (value, grad, momentum buffer); ``bn`` maps bn layer
    names to their BatchNormState. Insertion order is deterministic, so
    snapshots and logs are bit-reproducible.
    """

    def __init__(self, dtype=T.DTYPE_TRAIN):
        self.params: dict[str, Param] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.dtype = dtype

    def add(self, name: str, value: np.ndarray) -> Param:
        p = Param.zeros_like(np.ascontiguousarray(value, dtype=self.dtype))
        self.params[name] = p
        return p

    def zero_grads(self):
        for p in self.params.values():
            p.grad[...] = 0

    def scale_grads(self, factor: float):
        for p in self.params.values():
            p.grad *= self.dtype(factor)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Every float array that defines training state, in stable order."""
        out: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            out[name] = p.value
            out[name + ".m"] = p.momentum
        for name, st in self.bn.items():
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return out


def init_params(net: NetDef, seed: int, dtype=T.DTYPE_TRAIN,
                bn_mode: str = BATCH_STATS) -> ParamSet:
    """He-style init: conv/fc weights ~ N(0, 2/fan_in), biases 0,
    bn gamma=1, beta=0, running stats (0, 1)."""
    shapes = infer_shapes(net, batch=1)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    ps = ParamSet(dtype)
    for spec in net.layers:
        bot = shapes[spec.bottoms[0]]
        if spec.kind == "conv":
            f, k = spec.params["out_channels"], spec.params["kernel"]
            fan_in = bot.c * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, bot.c, k, k))
            ps.add(spec.name + ".weight", w)
            if spec.params["bias_flag"]:
                ps.add(spec.name + ".bias", np.zeros(f))
        elif spec.kind == "fc":
            f = spec.params["out_features"]
            fan_in = bot.c * bot.h * bot.w
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, fan_in))
            ps.add(spec.name + ".weight", w)
            if spec.params["bias_flag"]:
                ps.add(spec.name + ".bias", np.zeros(f))
        elif spec.kind == "bn":
            c = bot.c
            gamma = ps.add(spec.name + ".gamma", np.ones(c))
            beta = ps.add(spec.name + ".beta", np.zeros(c))
            ps.bn[spec.name] = BatchNormState(
                gamma, beta,
                running_mean=np.zeros(c, dtype=dtype),
                running_var=np.ones(c, dtype=dtype),
                eps=spec.params["eps"], momentum=spec.params["momentum"],
                mode=bn_mode)
    return ps


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def _bn_axes(x: np.ndarray) -> tuple:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise T.ShapeError(f"bn expects [N,C,H,W] or [N,F], got {x.shape}")


def _per_channel(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def bn_forward(x: np.ndarray, state: BatchNormState, training: bool):
    """Returns (y, cache); cache feeds bn_backward.

    Training in batch_stats mode normalizes with the batch's biased
    moments and updates the running estimates; any other combination
    normalizes with the running moments and leaves them untouched.
    """
    axes = _bn_axes(x)
    channels = x.shape[1]
    if state.gamma.value.shape[0] != channels:
        raise T.ShapeError(
            f"bn state has {state.gamma.value.shape[0]} channels, "
            f"input has {channels}")
    gamma = _per_channel(state.gamma.value, x)
    beta = _per_channel(state.beta.value, x)
    use_batch = training and state.mode == BATCH_STATS
    if use_batch:
        m = x.size // channels
        if m < 2:
            raise StatsError(f"batch statistics need m >= 2 elements, got {m}")
        mean, var = T.moments(x, axes)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
        xhat = (x - _per_channel(mean, x)) * _per_channel(inv_std, x)
        correction = x.dtype.type(m / (m - 1))
        mom = x.dtype.type(state.momentum)
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = ((1 - mom) * state.running_var
                                  + mom * correction * var)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + x.dtype.type(state.eps))
        xhat = (x - _per_channel(state.running_mean, x)) * _per_channel(inv_std, x)
    y = gamma * xhat + beta
    cache = {"xhat": xhat, "inv_std": inv_std, "axes": axes,
             "batch_mode": use_batch, "m": x.size // channels}
    return y, cache


def bn_backward(dy: np.ndarray, cache: dict, state: BatchNormState):
    """Returns (dx, dgamma, dbeta) for a matching bn_forward cache."""
    if not isinstance(cache, dict) or "xhat" not in cache:
        raise ContractError("bn_backward needs the cache from bn_forward")
    xhat = cache["xhat"]
    if xhat.shape != dy.shape:
        raise ContractError(
            f"bn cache shape {xhat.shape} does not match dy {dy.shape}")
    axes = cache["axes"]
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    scale = _per_channel(state.gamma.value * cache["inv_std"], dy)
    if cache["batch_mode"]:
        mean_dy = dy.mean(axis=axes)
        mean_dy_xhat = (dy * xhat).mean(axis=axes)
        dx = scale * (dy - _per_channel(mean_dy, dy)
                      - xhat * _per_channel(mean_dy_xhat, dy))
    else:
        dx = scale * dy
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Plumbing layers
# ---------------------------------------------------------------------------

def conv_forward(x, w, b, kernel, stride, pad):
    n = x.shape[0]
    f = w.shape[0]
    cols = T.im2col(x, kernel, stride, pad)
    out_flat = T.matmul(w.reshape(f, -1), cols)
    if b is not None:
        out_flat = out_flat + b[:, None]
    ohw = out_flat.shape[1] // n
    oh = ow = int(round(np.sqrt(ohw)))
    if oh * ow != ohw:  # non-square outputs: recompute exactly
        oh = (x.shape[2] + 2 * pad - kernel) // stride + 1
        ow = (x.shape[3] + 2 * pad - kernel) // stride + 1
    y = out_flat.reshape(f, n, oh, ow).transpose(1, 0, 2, 3)
    cache = {"cols": cols, "x_shape": x.shape, "w": w, "has_bias": b is not None,
             "kernel": kernel, "stride": stride, "pad": pad}
    return np.ascontiguousarray(y), cache


def conv_backward(dy, cache):
    f = dy.shape[1]
    dy_flat = dy.transpose(1, 0, 2, 3).reshape(f, -1)
    dw = T.matmul(dy_flat, cache["cols"].T).reshape(cache["w"].shape)
    db = dy_flat.sum(axis=1) if cache["has_bias"] else None
    dcols = T.matmul(cache["w"].reshape(f, -1).T, dy_flat)
    dx = T.col2im(dcols, cache["x_shape"], cache["kernel"], cache["stride"],
                  cache["pad"])
    return dx, dw, db


def fc_forward(x, w, b):
    n = x.shape[0]
    flat = x.reshape(n, -1)
    y = T.matmul(flat, w.T)
    if b is not None:
        y = y + b
    cache = {"flat": flat, "x_shape": x.shape, "w": w, "has_bias": b is not None}
    return y.reshape(n, w.shape[0], 1, 1), cache


def fc_backward(dy, cache):
    n = dy.shape[0]
    dy2 = dy.reshape(n, -1)
    dw = T.matmul(dy2.T, cache["flat"])
    db = dy2.sum(axis=0) if cache["has_bias"] else None
    dx = T.matmul(dy2, cache["w"]).reshape(cache["x_shape"])
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, {"mask": mask}


def relu_backward(dy, cache):
    return dy * cache["mask"]


def pool_forward(x, mode, kernel, stride):
    n, c, h, w = x.shape
    cols = T.im2col(x.reshape(n * c, 1, h, w), kernel, stride, 0)
    if mode == "max":
        arg = cols.argmax(axis=0)
        out = cols[arg, np.arange(cols.shape[1])]
    else:
        out = cols.mean(axis=0, dtype=np.float64).astype(x.dtype)
        arg = None
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    y = out.reshape(n * c, oh, ow).reshape(n, c, oh, ow)
    cache = {"arg": arg, "mode": mode, "cols_shape": cols.shape,
             "x_shape": x.shape, "kernel": kernel, "stride": stride}
    return y, cache


def pool_backward(dy, cache):
    n, c, h, w = cache["x_shape"]
    dy_flat = dy.reshape(-1)
    dcols = np.zeros(cache["cols_shape"], dtype=dy.dtype)
    if cache["mode"] == "max":
        dcols[cache["arg"], np.arange(dcols.shape[1])] = dy_flat
    else:
        dcols[...] = dy_flat / dy.dtype.type(cache["kernel"] ** 2)
    dx = T.col2im(dcols, (n * c, 1, h, w), cache["kernel"], cache["stride"], 0)
    return dx.reshape(n, c, h, w)


def eltwise_add_forward(a, b):
    if a.shape != b.shape:
        raise T.ShapeError(f"eltwise_add shapes differ: {a.shape} vs {b.shape}")
    return a + b, {}


def eltwise_add_backward(dy, cache):
    return dy, dy


def dropout_forward(x, ratio, training, rng):
    """Inverted dropout: kept units scaled by 1/(1-ratio); identity at inference."""
    if not training or ratio == 0.0:
        return x, {"mask": None, "ratio": ratio}
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = x.dtype.type(1.0 - ratio)
    mask = (rng.random(x.shape) >= ratio).astype(x.dtype) / keep
    return x * mask, {"mask": mask, "ratio": ratio}


def dropout_backward(dy, cache):
    if cache["mask"] is None:
        return dy
    return dy * cache["mask"]


def softmax_loss_forward(logits, labels):
    """Softmax + mean cross-entropy over the batch. Returns (loss, probs, cache)."""
    n = logits.shape[0]
    flat = logits.reshape(n, -1)
    labels = np.asarray(labels).reshape(n).astype(np.int64)
    if labels.min() < 0 or labels.max() >= flat.shape[1]:
        raise ValueError(
            f"label out of range [0, {flat.shape[1]}): {labels.min()}..{labels.max()}")
    shifted = flat - flat.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-log_probs[np.arange(n), labels].sum() / n)
    cache = {"probs": probs, "labels": labels, "logits_shape": logits.shape}
    return loss, probs, cache


def softmax_loss_backward(dloss, cache):
    probs, labels = cache["probs"], cache["labels"]
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits *= probs.dtype.type(dloss / n)
    return dlogits.reshape(cache["logits_shape"])


def accuracy_forward(logits, labels):
    n = logits.shape[0]
    flat = logits.reshape(n, -1)
    labels = np.asarray(labels).reshape(n)
    return float((flat.argmax(axis=1) == labels).sum() / n)


# ---------------------------------------------------------------------------
# Whole-net execution
# ---------------------------------------------------------------------------

@dataclass
class LayerTape:
    """Per-layer forward caches, consumed exactly once by net_backward."""
    entries: list = field(default_factory=list)  # (LayerSpec, cache)
    net: NetDef | None = None
    input_blob_grad: np.ndarray | None = None
    consumed: bool = False


def net_forward(net: NetDef, params: ParamSet, batch: np.ndarray,
                labels=None, training: bool = False, rng=None):
    """Execute layers in listed order.

    Returns (loss, blobs, tape); loss is None when the net has no
    softmax_loss head or labels are absent, tape is None unless
    training=True. Inference never mutates params or bn state.
    """
    blobs: dict[str, np.ndarray] = {net.input_blob: batch}
    if labels is not None:
        blobs[LABEL_BLOB] = np.asarray(labels)
    tape = LayerTape(net=net) if training else None
    loss = None
    for spec in net.layers:
        x = blobs[spec.bottoms[0]]
        cache = None
        if spec.kind == "conv":
            w = params.params[spec.name + ".weight"].value
            b = (params.params[spec.name + ".bias"].value
                 if spec.params["bias_flag"] else None)
            y, cache = conv_forward(x, w, b, spec.params["kernel"],
                                    spec.params["stride"], spec.params["pad"])
        elif spec.kind == "fc":
            w = params.params[spec.name + ".weight"].value
            b = (params.params[spec.name + ".bias"].value
                 if spec.params["bias_flag"] else None)
            y, cache = fc_forward(x, w, b)
        elif spec.kind == "bn":
            y, cache = bn_forward(x, params.bn[spec.name], training)
        elif spec.kind == "relu":
            y, cache = relu_forward(x)
        elif spec.kind == "pool":
            y, cache = pool_forward(x, spec.params["mode"],
                                    spec.params["kernel"], spec.params["stride"])
        elif spec.kind == "dropout":
            y, cache = dropout_forward(x, spec.params["ratio"], training, rng)
        elif spec.kind == "eltwise_add":
            y, cache = eltwise_add_forward(x, blobs[spec.bottoms[1]])
        elif spec.kind == "softmax_loss":
            if LABEL_BLOB not in blobs:
                y = None
            else:
                loss, _, cache = softmax_loss_forward(x, blobs[spec.bottoms[1]])
                y = np.asarray(loss, dtype=x.dtype).reshape(1, 1, 1, 1)
        elif spec.kind == "accuracy":
            y = None
            if LABEL_BLOB in blobs:
                y = np.asarray(accuracy_forward(x, blobs[spec.bottoms[1]]),
                               dtype=x.dtype).reshape(1, 1, 1, 1)
        elif spec.kind == "lrn":
            raise RuntimeUnsupportedError(
                f"layer '{spec.name}': lrn is unsupported at runtime; "
                f"run the batch-norm rewrite to remove it")
        else:  # pragma: no cover - validate() rejects unknown kinds
            raise RuntimeUnsupportedError(spec.kind)
        if y is not None:
            blobs[spec.top] = y
        if tape is not None and cache is not None:
            tape.entries.append((spec, cache))
    return loss, blobs, tape


def net_backward(tape: LayerTape, params: ParamSet) -> np.ndarray | None:
    """Backpropagate from the loss; gradients accumulate into params.

    Returns the gradient with respect to the input blob. A tape may be
    consumed only once.
    """
    if tape is None or tape.consumed:
        raise ContractError("tape missing or already consumed")
    tape.consumed = True
    net = tape.net
    dblobs: dict[str, np.ndarray] = {}

    def push(blob, grad):
        if blob in dblobs:
            dblobs[blob] = dblobs[blob] + grad
        else:
            dblobs[blob] = grad

    for spec, cache in reversed(tape.entries):
        if spec.kind == "softmax_loss":
            push(spec.bottoms[0], softmax_loss_backward(1.0, cache))
            continue
        if spec.top not in dblobs:
            continue  # dead branch (e.g. feeds only an accuracy head)
        dy = dblobs.pop(spec.top)
        if spec.kind == "conv":
            dx, dw, db = conv_backward(dy, cache)
            params.params[spec.name + ".weight"].grad += dw
            if db is not None:
                params.params[spec.name + ".bias"].grad += db
            push(spec.bottoms[0], dx)
        elif spec.kind == "fc":
            dx, dw, db = fc_backward(dy, cache)
            params.params[spec.name + ".weight"].grad += dw
            if db is not None:
                params.params[spec.name + ".bias"].grad += db
            push(spec.bottoms[0], dx)
        elif spec.kind == "bn":
            st = params.bn[spec.name]
            dx, dgamma, dbeta = bn_backward(dy, cache, st)
            st.gamma.grad += dgamma
            st.beta.grad += dbeta
            push(spec.bottoms[0], dx)
        elif spec.kind == "relu":
            push(spec.bottoms[0], relu_backward(dy, cache))
        elif spec.kind == "pool":
            push(spec.bottoms[0], pool_backward(dy, cache))
        elif spec.kind == "dropout":
            push(spec.bottoms[0], dropout_backward(dy, cache))
        elif spec.kind == "eltwise_add":
            da, db_ = eltwise_add_backward(dy, cache)
            push(spec.bottoms[0], da)
            push(spec.bottoms[1], db_)
    tape.input_blob_grad = dblobs.get(net.input_blob)
    return tape.input_blob_grad


# ---------------------------------------------------------------------------
# Stat-matched identity calibration
# ---------------------------------------------------------------------------

def calibrate_identity_bn(net: NetDef, params: ParamSet, batches) -> None:
    """Set every bn layer to reconstruct its input exactly.

    Runs the net on the calibration batches with bn forced to identity,
    measures each bn input's per-channel moments, then sets
    running stats to those moments and gamma=sqrt(var+eps), beta=mean,
    so that global-statistics normalization is the identity map. This
    makes a freshly transformed net compute the same function as its
    untransformed twin.
    """
    per_layer: dict[str, list[np.ndarray]] = {name: [] for name in params.bn}
    # Measurement pass runs with bn as an exact no-op (var+eps == 1) so the
    # recorded moments match the untransformed activations.
    for st in params.bn.values():
        st.gamma.value[...] = 1
        st.beta.value[...] = 0
        st.running_mean[...] = 0
        st.running_var[...] = 1 - st.eps
    bn_bottom = {spec.name: spec.bottoms[0]
                 for spec in net.layers if spec.kind == "bn"}
    for batch in batches:
        _, blobs, _ = net_forward(net, params, batch, training=False)
        for name, bottom in bn_bottom.items():
            per_layer[name].append(blobs[bottom])
    for name, st in params.bn.items():
        stacked = np.concatenate(per_layer[name], axis=0)
        mean, var = T.moments(stacked, _bn_axes(stacked))
        st.running_mean[...] = mean
        st.running_var[...] = var
        st.gamma.value[...] = np.sqrt(var + stacked.dtype.type(st.eps))
        st.beta.value[...] = mean
