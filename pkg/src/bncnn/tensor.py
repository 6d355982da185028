"""Dense array primitives: matmul, im2col/col2im, axis moments, top-k.

Tensors are plain numpy arrays. Training runs in float32; a float64 path
exists for finite-difference gradient checking (pass float64 arrays and
every kernel stays in float64). All kernels are deterministic: rerunning
the same program on the same machine produces bit-identical results.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE_TRAIN = np.float32
DTYPE_CHECK = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def tensor(data, dtype=DTYPE_TRAIN) -> np.ndarray:
    """Build a contiguous array of the framework's dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a [M,K] and b [K,N]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Unfold receptive fields of x [N,C,H,W] into a [C*K*K, N*OH*OW] matrix.

    Column j holds one receptive field; columns are ordered batch-major,
    then output row, then output column. Rows are ordered channel-major,
    then kernel row, then kernel column, so a single column of a 1x1xKxK
    input with a KxK kernel is the row-major flattening of the input.
    Padded positions read as zero.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col needs [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kernel, stride, pad)
    ow = _conv_out_size(w, kernel, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kernel} (stride {stride}, pad {pad}) does not fit "
            f"input {h}x{w}"
        )
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, oh, ow, k, k)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kernel * kernel, n * oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, x_shape: tuple, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back onto an [N,C,H,W] grid."""
    n, c, h, w = x_shape
    oh = _conv_out_size(h, kernel, stride, pad)
    ow = _conv_out_size(w, kernel, stride, pad)
    if cols.shape != (c * kernel * kernel, n * oh * ow):
        raise ShapeError(
            f"col2im expected {(c * kernel * kernel, n * oh * ow)}, got {cols.shape}"
        )
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, kernel, kernel, n, oh, ow)
    for ki in range(kernel):
        for kj in range(kernel):
            patch = cols6[:, ki, kj].transpose(1, 0, 2, 3)  # (n, c, oh, ow)
            padded[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += patch
    if pad:
        return np.ascontiguousarray(padded[:, :, pad:pad + h, pad:pad + w])
    return padded


def moments(x: np.ndarray, reduce_axes: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Mean and biased (divide-by-m) variance over reduce_axes.

    Accumulates in float64 and casts back to x.dtype; output keeps the
    non-reduced axes.
    """
    axes = tuple(reduce_axes)
    if not axes:
        raise ShapeError("moments needs at least one reduction axis")
    if x.size == 0:
        raise ShapeError("moments of an empty tensor")
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} invalid for shape {x.shape}")
    mean64 = x.mean(axis=axes, dtype=np.float64)
    centered = x.astype(np.float64) - np.expand_dims(mean64, axes)
    var64 = np.mean(centered * centered, axis=axes)
    return mean64.astype(x.dtype), var64.astype(x.dtype)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of a 1-D array, descending.

    Ties break toward the lower index.
    """
    if scores.ndim != 1:
        raise ShapeError(f"topk_indices needs a 1-D array, got {scores.shape}")
    if not 1 <= k <= scores.shape[0]:
        raise ValueError(f"k={k} out of range for length {scores.shape[0]}")
    order = np.argsort(-scores, kind="stable")
    return order[:k]
