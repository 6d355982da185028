"""SGD training loop: momentum, linear lr decay, accumulation, snapshots,
and automatic divergence restart.

Gradient accumulation (iter_size) enlarges the gradient batch but NOT the
batch each bn layer sees: every forward pass computes bn statistics over
its own batch_size samples only, so iter_size cannot compensate for a
too-small batch. Training a net with batch-statistics bn layers refuses
to start when batch_size is below min_bn_batch unless explicitly allowed
or the bn layers run on global statistics.

Runs are bit-deterministic: identical config and data produce identical
logs and snapshots. On divergence (non-finite loss/gradients, or a loss
spiking above divergence_factor times the recent median) training rewinds
to the last snapshot and continues under a new shuffle seed, at most
max_restarts times. The delivered model is always the final snapshot; no
best-validation selection happens anywhere.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from collections import deque
from dataclasses import dataclass, field, fields
from fractions import Fraction

import numpy as np

from . import layers as L
from . import tensor as T
from .data import epoch_permutation
from .netdef import NetDef


class SolverError(ValueError):
    pass


class BatchSizeRefusal(SolverError):
    """batch_size too small for batch-statistics bn layers."""


class DivergenceError(RuntimeError):
    """Single divergence event (non-finite loss/gradient or loss spike)."""


class TrainingDiverged(RuntimeError):
    """Training aborted: divergence persisted past max_restarts."""


class SnapshotError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    base_lr: float
    max_iter: int
    batch_size: int
    iter_size: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    min_bn_batch: int = 16
    allow_small_batch: bool = False
    global_stats: bool = False
    snapshot_every: int = 200
    seed: int = 1
    # converged desk losses sit near zero, where hard batches spike ~20x
    # the median; the factor must sit well above that noise band
    divergence_window: int = 50
    divergence_factor: float = 50.0
    max_restarts: int = 3
    eval_every: int = 1  # epochs between validation passes; 0 disables

    def __post_init__(self):
        if self.base_lr <= 0:
            raise SolverError(f"base_lr must be positive, got {self.base_lr}")
        if self.max_iter < 0:
            raise SolverError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.batch_size < 1 or self.iter_size < 1:
            raise SolverError("batch_size and iter_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise SolverError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise SolverError("weight_decay must be >= 0")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.iter_size

    def digest(self) -> bytes:
        text = "\n".join(f"{f.name}={getattr(self, f.name)!r}"
                         for f in fields(self))
        return hashlib.sha256(text.encode()).digest()


def lr_at(cfg: SolverConfig, it: int) -> float:
    """Linear decay: base_lr * (1 - it/max_iter), computed exactly rationally
    so lr_at(i) + lr_at(max_iter - i) equals base_lr to within one ulp."""
    if not 0 <= it <= cfg.max_iter:
        raise SolverError(f"iteration {it} outside [0, {cfg.max_iter}]")
    return float(Fraction(cfg.base_lr) * (cfg.max_iter - it) / cfg.max_iter)


def sgd_step(params: L.ParamSet, lr: float, cfg: SolverConfig) -> None:
    """v <- momentum*v + lr*(g + wd*w); w <- w - v.

    Weight decay applies to conv/fc weights only, never to biases or to
    bn gamma/beta. bn running statistics are not the optimizer's to touch.
    Gradients must already be averaged over iter_size.
    """
    for name, p in params.params.items():
        if not np.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient in '{name}'")
        g = p.grad
        if cfg.weight_decay and name.endswith(".weight"):
            g = g + p.value.dtype.type(cfg.weight_decay) * p.value
        p.momentum[...] = (p.momentum.dtype.type(cfg.momentum) * p.momentum
                           + p.momentum.dtype.type(lr) * g)
        p.value -= p.momentum


def detect_divergence(history, current: float, factor: float, window: int) -> bool:
    """True iff current is non-finite, or the window is full and current
    exceeds factor times the median recent loss."""
    if not np.isfinite(current):
        return True
    if len(history) < window:
        return False
    return current > factor * float(np.median(list(history)))


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"BNFS"
SNAPSHOT_VERSION = 1


@dataclass
class Snapshot:
    iter: int
    config_digest: bytes
    base_seed: int
    epoch_order_seed: int
    tensors: dict[str, np.ndarray]
    version: int = SNAPSHOT_VERSION


def make_snapshot(cfg: SolverConfig, state: "TrainState") -> Snapshot:
    tensors = {name: np.array(arr, dtype=np.float32, copy=True)
               for name, arr in state.params.state_tensors().items()}
    return Snapshot(state.iter, cfg.digest(), state.base_seed,
                    state.epoch_order_seed, tensors)


def save_snapshot(path: str, snap: Snapshot) -> None:
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<I", snap.version))
    buf.write(struct.pack("<Q", snap.iter))
    if len(snap.config_digest) != 32:
        raise SnapshotError("config digest must be 32 bytes")
    buf.write(snap.config_digest)
    rng_words = (snap.base_seed, snap.epoch_order_seed)
    buf.write(struct.pack("<Q", len(rng_words)))
    for word in rng_words:
        buf.write(struct.pack("<Q", word & 0xFFFFFFFFFFFFFFFF))
    buf.write(struct.pack("<I", len(snap.tensors)))
    for name, arr in snap.tensors.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    checksum = hashlib.sha256(payload).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(checksum)


def load_snapshot(path: str) -> Snapshot:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise SnapshotError(f"'{path}' too short to be a snapshot")
    payload, checksum = blob[:-8], blob[-8:]
    if hashlib.sha256(payload).digest()[:8] != checksum:
        raise SnapshotError(f"'{path}' failed integrity check")
    buf = io.BytesIO(payload)
    if buf.read(4) != SNAPSHOT_MAGIC:
        raise SnapshotError(f"'{path}' is not a snapshot file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    (it,) = struct.unpack("<Q", buf.read(8))
    digest = buf.read(32)
    (n_words,) = struct.unpack("<Q", buf.read(8))
    words = struct.unpack(f"<{n_words}Q", buf.read(8 * n_words))
    (count,) = struct.unpack("<I", buf.read(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", buf.read(4))
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", buf.read(4))
        dims = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n_elems = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(buf.read(4 * n_elems), dtype="<f4")
        tensors[name] = data.reshape(dims).copy()
    return Snapshot(it, digest, words[0], words[1], tensors)


def apply_snapshot(params: L.ParamSet, snap: Snapshot) -> None:
    """Overwrite every state tensor from the snapshot, bit-exactly."""
    state = params.state_tensors()
    for name, arr in state.items():
        if name not in snap.tensors:
            raise SnapshotError(f"snapshot missing tensor '{name}'")
        stored = snap.tensors[name]
        if stored.shape != arr.shape:
            raise SnapshotError(
                f"snapshot tensor '{name}' shape {stored.shape} != {arr.shape}")
        arr[...] = stored.astype(arr.dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    iter: int
    params: L.ParamSet
    base_seed: int
    epoch_order_seed: int
    loss_history: deque = field(default_factory=lambda: deque(maxlen=1))
    restarts: int = 0


def restart_from(snap: Snapshot, new_seed: int, net: NetDef,
                 bn_mode: str = L.BATCH_STATS) -> TrainState:
    """Rebuild training state from a snapshot under a different shuffle seed.

    Parameters, momentum buffers, bn running stats and the iteration index
    restore bit-exactly; only the epoch shuffle seed changes, so the
    remaining epochs visit images in a different order.
    """
    if new_seed == snap.epoch_order_seed:
        raise SolverError(
            f"restart seed {new_seed} must differ from the snapshot's")
    params = L.init_params(net, seed=0, bn_mode=bn_mode)
    apply_snapshot(params, snap)
    return TrainState(snap.iter, params, snap.base_seed, new_seed)


@dataclass
class RestartEvent:
    at_iter: int
    resumed_iter: int
    new_seed: int


@dataclass
class TrainResult:
    final_snapshot: Snapshot
    final_path: str
    log_path: str
    restarts: int
    restart_events: list[RestartEvent]


def _iteration_rng(epoch_seed: int, it: int, sub: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(epoch_seed), int(it), int(sub)])))


def _format_float(x: float) -> str:
    return repr(float(x))


def train(net: NetDef, cfg: SolverConfig, train_data, out_dir: str,
          val_data=None, loss_hook=None) -> TrainResult:
    """Run the full training loop; delivers the final snapshot.

    loss_hook(iter, loss) -> loss, when given, may rewrite the per-iteration
    loss before divergence detection (test instrumentation).
    """
    from .evaluation import evaluate  # local import: evaluation uses layers only

    bn_layers = [l.name for l in net.layers if l.kind == "bn"]
    if (bn_layers and not cfg.global_stats and not cfg.allow_small_batch
            and cfg.batch_size < cfg.min_bn_batch):
        raise BatchSizeRefusal(
            f"batch_size {cfg.batch_size} is below min_bn_batch "
            f"{cfg.min_bn_batch} for batch-statistics bn layers "
            f"[{', '.join(bn_layers)}]; raise the batch size, enable "
            f"global statistics, or set allow_small_batch")
    c, h, w = net.input_shape
    for handle in (train_data, val_data):
        crop = getattr(handle, "crop", None)
        if crop is not None and (crop != h or crop != w):
            raise SolverError(
                f"dataset crop {crop}px does not match the net's "
                f"{h}x{w} input; set the pipeline crop accordingly")
    n = len(train_data)
    if n < cfg.effective_batch:
        raise SolverError(
            f"dataset of {n} samples cannot fill one effective batch "
            f"of {cfg.effective_batch}")
    iters_per_epoch = n // cfg.effective_batch

    os.makedirs(out_dir, exist_ok=True)
    bn_mode = L.GLOBAL_STATS if cfg.global_stats else L.BATCH_STATS
    params = L.init_params(net, cfg.seed, dtype=T.DTYPE_TRAIN, bn_mode=bn_mode)
    state = TrainState(0, params, cfg.seed, cfg.seed,
                       deque(maxlen=cfg.divergence_window))
    restart_events: list[RestartEvent] = []

    def snap_path(it):
        return os.path.join(out_dir, f"snapshot_iter_{it:07d}.bnfs")

    last_snapshot = snap_path(0)
    save_snapshot(last_snapshot, make_snapshot(cfg, state))
    log_path = os.path.join(out_dir, "train_log.csv")
    log = open(log_path, "w", encoding="utf-8", newline="\n")
    log.write("iter,epoch,lr,train_loss,val_top1,val_top5\n")

    def handle_divergence(at_iter: int):
        state.restarts += 1
        if state.restarts > cfg.max_restarts:
            log.close()
            raise TrainingDiverged(
                f"diverged at iteration {at_iter}; gave up after "
                f"{cfg.max_restarts} restarts (last snapshot: {last_snapshot})")
        snap = load_snapshot(last_snapshot)
        if snap.config_digest != cfg.digest():
            log.close()
            raise SnapshotError("snapshot config digest mismatch on restart")
        new_seed = cfg.seed + state.restarts
        restored = restart_from(snap, new_seed, net, bn_mode=bn_mode)
        state.iter = restored.iter
        state.params = restored.params
        state.epoch_order_seed = new_seed
        state.loss_history.clear()
        restart_events.append(RestartEvent(at_iter, restored.iter, new_seed))

    perm_cache: tuple | None = None
    try:
        while state.iter < cfg.max_iter:
            it = state.iter
            epoch = it // iters_per_epoch
            slot = it % iters_per_epoch
            key = (epoch, state.epoch_order_seed)
            if perm_cache is None or perm_cache[0] != key:
                perm_cache = (key, epoch_permutation(n, epoch,
                                                     state.epoch_order_seed))
            indices = perm_cache[1][slot * cfg.effective_batch:
                                    (slot + 1) * cfg.effective_batch]
            state.params.zero_grads()
            loss_sum = 0.0
            for sub in range(cfg.iter_size):
                rng = _iteration_rng(state.epoch_order_seed, it, sub)
                chunk = indices[sub * cfg.batch_size:(sub + 1) * cfg.batch_size]
                x, y = train_data.train_batch(chunk, rng)
                loss, _, tape = L.net_forward(net, state.params, x, y,
                                              training=True, rng=rng)
                L.net_backward(tape, state.params)
                loss_sum += loss
            loss = loss_sum / cfg.iter_size
            if loss_hook is not None:
                loss = loss_hook(it, loss)
            if detect_divergence(state.loss_history, loss,
                                 cfg.divergence_factor, cfg.divergence_window):
                handle_divergence(it)
                continue
            state.loss_history.append(loss)
            if cfg.iter_size > 1:
                state.params.scale_grads(1.0 / cfg.iter_size)
            lr = lr_at(cfg, it)
            try:
                sgd_step(state.params, lr, cfg)
            except DivergenceError:
                handle_divergence(it)
                continue
            state.iter = it + 1

            val1 = val5 = ""
            epoch_done = state.iter % iters_per_epoch == 0
            finished_epoch = (state.iter // iters_per_epoch) - 1
            if (epoch_done and val_data is not None and cfg.eval_every
                    and (finished_epoch + 1) % cfg.eval_every == 0):
                result = evaluate(net, state.params, val_data, cfg.batch_size)
                val1 = _format_float(result.top1_error)
                val5 = _format_float(result.top5_error)
            log.write(f"{it},{epoch},{_format_float(lr)},"
                      f"{_format_float(loss)},{val1},{val5}\n")
            if cfg.snapshot_every and state.iter % cfg.snapshot_every == 0:
                last_snapshot = snap_path(state.iter)
                save_snapshot(last_snapshot, make_snapshot(cfg, state))
    finally:
        if not log.closed:
            log.close()

    final = make_snapshot(cfg, state)
    final_path = os.path.join(out_dir, "final.bnfs")
    save_snapshot(final_path, final)
    return TrainResult(final, final_path, log_path, state.restarts,
                       restart_events)
