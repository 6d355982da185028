"""Top-k error metrics, single-crop validation, and training-curve export.

Published ILSVRC-2012 single-crop reference errors for the full-scale
models ship as a static data table (reference_results.csv). They come
from multi-week GPU runs over 1.2M images and are NOT reproducible with
this package's desk-scale CPU training; they exist for documentation and
comparison only.
"""

from __future__ import annotations

import csv
import importlib.resources
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .netdef import NetDef
from .tensor import topk_indices


class EvalError(ValueError):
    pass


@dataclass
class EvalResult:
    top1_error: float
    top5_error: float
    sample_count: int

    def __post_init__(self):
        if not 0 <= self.top5_error <= self.top1_error <= 1:
            raise EvalError(
                f"inconsistent errors top1={self.top1_error} "
                f"top5={self.top5_error}")


def topk_error(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is absent from the k best scores.

    Ties order by lower index first (inherited from topk_indices).
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise EvalError(f"scores must be [N, K], got {scores.shape}")
    n, classes = scores.shape
    if not 1 <= k <= classes:
        raise EvalError(f"k={k} out of range for {classes} classes")
    labels = np.asarray(labels).reshape(n)
    if labels.min() < 0 or labels.max() >= classes:
        raise EvalError(f"label outside [0, {classes})")
    misses = 0
    for row, label in zip(scores, labels):
        if label not in topk_indices(row, k):
            misses += 1
    return misses / n


def _logits_blob(net: NetDef) -> str:
    for spec in net.layers:
        if spec.kind in ("softmax_loss", "accuracy"):
            return spec.bottoms[0]
    raise EvalError("net has no loss or accuracy head to evaluate")


def evaluate(net: NetDef, params: L.ParamSet, dataset, batch: int,
             on_batch=None) -> EvalResult:
    """Single centered crop per image, one forward pass each, full split.

    bn layers run on their stored running statistics; nothing mutates.
    on_batch(count), when given, is called once per forward pass with the
    number of images in it (instrumentation hook).
    """
    n = len(dataset)
    if n == 0:
        raise EvalError("cannot evaluate an empty split")
    crop = getattr(dataset, "crop", None)
    _, h, w = net.input_shape
    if crop is not None and (crop != h or crop != w):
        raise EvalError(
            f"dataset crop {crop}px does not match the net's {h}x{w} input")
    logits_name = _logits_blob(net)
    top1_misses = 0
    top5_misses = 0
    for start in range(0, n, batch):
        indices = range(start, min(start + batch, n))
        x, labels = dataset.eval_batch(indices)
        _, blobs, _ = L.net_forward(net, params, x, labels, training=False)
        if on_batch is not None:
            on_batch(x.shape[0])
        logits = blobs[logits_name].reshape(x.shape[0], -1)
        classes = logits.shape[1]
        top1_misses += round(topk_error(logits, labels, 1) * x.shape[0])
        top5_misses += round(topk_error(logits, labels, min(5, classes))
                             * x.shape[0])
    return EvalResult(top1_misses / n, top5_misses / n, n)


# ---------------------------------------------------------------------------
# Reference table
# ---------------------------------------------------------------------------

@dataclass
class ReferenceEntry:
    arch: str
    ours_top1: float
    ours_top5: float
    original_top1: float | None
    original_top5: float | None


@dataclass
class ReferenceTable:
    entries: dict[str, ReferenceEntry]

    def __getitem__(self, arch: str) -> ReferenceEntry:
        return self.entries[arch]


def reference_numbers() -> ReferenceTable:
    """Published single-crop validation errors of the full-scale models.

    Informational constants; desk-scale training cannot reproduce them.
    """
    raw = importlib.resources.files("bncnn").joinpath(
        "reference_results.csv").read_text(encoding="utf-8")
    entries = {}
    for row in csv.DictReader(raw.splitlines()):
        entries[row["arch"]] = ReferenceEntry(
            row["arch"],
            float(row["ours_top1"]), float(row["ours_top5"]),
            float(row["original_top1"]) if row["original_top1"] else None,
            float(row["original_top5"]) if row["original_top5"] else None)
    return ReferenceTable(entries)


def format_error(fraction: float) -> str:
    """Render a fractional error the way the reference table prints: '39.9%'."""
    return f"{fraction * 100:.1f}%"


# ---------------------------------------------------------------------------
# Log parsing and curve export
# ---------------------------------------------------------------------------

LOG_HEADER = "iter,epoch,lr,train_loss,val_top1,val_top5"


@dataclass
class LogRow:
    iter: int
    epoch: int
    lr: float
    train_loss: float
    val_top1: float | None
    val_top5: float | None


def parse_log(text: str) -> list[LogRow]:
    """Parse a solver CSV log; numeric fields round-trip losslessly."""
    lines = text.splitlines()
    if not lines:
        return []
    if lines[0] != LOG_HEADER:
        raise EvalError(f"line 1: bad log header {lines[0]!r}")
    rows: list[LogRow] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise EvalError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            rows.append(LogRow(
                int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]),
                float(parts[4]) if parts[4] else None,
                float(parts[5]) if parts[5] else None))
        except ValueError as exc:
            raise EvalError(f"line {lineno}: {exc}")
    return rows


def emit_curve(rows: list[LogRow], out_path: str) -> int:
    """Write the two-axis training curve (validation error + lr schedule).

    One row per validation measurement: ``iter,lr,val_top1``, with both
    columns copied unmodified from the log. Returns the row count.
    """
    count = 0
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iter,lr,val_top1\n")
        for row in rows:
            if row.val_top1 is None:
                continue
            fh.write(f"{row.iter},{row.lr!r},{row.val_top1!r}\n")
            count += 1
    return count
