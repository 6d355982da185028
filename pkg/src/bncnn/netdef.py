"""Plain-text network-definition language: parse, validate, shape-infer, serialize.

The format is line oriented, one statement per line, '#' starts a comment:

    name <identifier>
    input <blob> <C> <H> <W>
    layer <name> <kind> <bottom[+bottom2]> <top> [key=value ...]

Layers must be listed in a valid execution order: every bottom must be
the input blob, the reserved blob ``label`` (supplied by the data source
for loss/accuracy heads), or the top of an earlier layer. Blobs are
single-writer and never written in place, so layer names and top names
are both unique.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

LABEL_BLOB = "label"

KINDS = (
    "conv", "fc", "relu", "pool", "bn", "dropout", "lrn",
    "eltwise_add", "softmax_loss", "accuracy",
)

TWO_BOTTOM_KINDS = ("eltwise_add", "softmax_loss", "accuracy")

# kind -> {param: validator}; validators raise ValueError on bad values
_INT_POS = ("int", lambda v: v >= 1)
_INT_NONNEG = ("int", lambda v: v >= 0)
_FLAG = ("int", lambda v: v in (0, 1))
_FLOAT_POS = ("float", lambda v: v > 0)
_FLOAT_UNIT_OPEN = ("float", lambda v: 0 < v <= 1)   # (0, 1]
_FLOAT_RATIO = ("float", lambda v: 0 <= v < 1)       # [0, 1)
_FLOAT_ANY = ("float", lambda v: True)
_POOL_MODE = ("str", lambda v: v in ("max", "avg"))

PARAM_SPECS = {
    "conv": {
        "out_channels": _INT_POS, "kernel": _INT_POS, "stride": _INT_POS,
        "pad": _INT_NONNEG, "bias_flag": _FLAG,
    },
    "fc": {"out_features": _INT_POS, "bias_flag": _FLAG},
    "pool": {"mode": _POOL_MODE, "kernel": _INT_POS, "stride": _INT_POS},
    "bn": {"eps": _FLOAT_POS, "momentum": _FLOAT_UNIT_OPEN},
    "dropout": {"ratio": _FLOAT_RATIO},
    "lrn": {"local_size": _INT_POS, "alpha": _FLOAT_ANY, "beta": _FLOAT_ANY},
    "relu": {}, "eltwise_add": {}, "softmax_loss": {}, "accuracy": {},
}


class NetDefError(ValueError):
    """Parse or validation failure; carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass
class Shape4:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.n, self.c, self.h, self.w) < 1:
            raise NetDefError(f"non-positive shape {self.astuple()}")

    def astuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)


@dataclass
class LayerSpec:
    name: str
    kind: str
    bottoms: list[str]
    top: str
    params: dict = field(default_factory=dict)

    def copy(self) -> "LayerSpec":
        return LayerSpec(self.name, self.kind, list(self.bottoms), self.top,
                         dict(self.params))


@dataclass
class NetDef:
    name: str
    input_blob: str
    input_shape: tuple[int, int, int]  # (C, H, W), batch dim supplied at run time
    layers: list[LayerSpec] = field(default_factory=list)

    def copy(self) -> "NetDef":
        return NetDef(self.name, self.input_blob, self.input_shape,
                      [l.copy() for l in self.layers])

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def consumers(self, blob: str) -> list[LayerSpec]:
        return [l for l in self.layers if blob in l.bottoms]

    def producer(self, blob: str) -> LayerSpec | None:
        for l in self.layers:
            if l.top == blob:
                return l
        return None


def _coerce_param(kind: str, key: str, raw, line=None):
    ptype, check = PARAM_SPECS[kind][key]
    try:
        if ptype == "int":
            value = int(raw)
            if isinstance(raw, str) and "." in raw:
                raise ValueError
        elif ptype == "float":
            value = float(raw)
        else:
            value = str(raw)
    except (TypeError, ValueError):
        raise NetDefError(f"param {key}={raw!r} is not a valid {ptype}", line)
    if not check(value):
        raise NetDefError(f"param {key}={raw} out of range for {kind}", line)
    return value


def _validate_layer(spec: LayerSpec, line=None) -> LayerSpec:
    if spec.kind not in KINDS:
        raise NetDefError(f"unknown layer kind '{spec.kind}'", line)
    want_two = spec.kind in TWO_BOTTOM_KINDS
    if len(spec.bottoms) != (2 if want_two else 1):
        raise NetDefError(
            f"{spec.kind} layer '{spec.name}' needs "
            f"{2 if want_two else 1} bottom(s), got {len(spec.bottoms)}", line)
    allowed = PARAM_SPECS[spec.kind]
    for key in spec.params:
        if key not in allowed:
            raise NetDefError(f"unknown param '{key}' for kind {spec.kind}", line)
    for key in allowed:
        if key not in spec.params:
            raise NetDefError(f"missing param '{key}' for {spec.kind} "
                              f"layer '{spec.name}'", line)
    spec.params = {k: _coerce_param(spec.kind, k, v, line)
                   for k, v in spec.params.items()}
    return spec


def validate(net: NetDef, lines: dict | None = None) -> NetDef:
    """Check naming, dataflow and per-kind params; raise NetDefError on failure."""
    lines = lines or {}
    seen_layers: set[str] = set()
    blobs: set[str] = {net.input_blob, LABEL_BLOB}
    for spec in net.layers:
        line = lines.get(spec.name)
        _validate_layer(spec, line)
        if spec.name in seen_layers:
            raise NetDefError(f"duplicate layer name '{spec.name}'", line)
        seen_layers.add(spec.name)
        for b in spec.bottoms:
            if b not in blobs:
                raise NetDefError(
                    f"layer '{spec.name}' reads undefined blob '{b}'", line)
        if spec.top in blobs:
            raise NetDefError(
                f"layer '{spec.name}' rewrites existing blob '{spec.top}' "
                f"(in-place layers are not allowed)", line)
        blobs.add(spec.top)
    return net


def parse(text: str) -> NetDef:
    """Parse the .ndef text format into a validated NetDef."""
    name = None
    input_blob = None
    input_shape = None
    layers: list[LayerSpec] = []
    lines_of: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        fields = stripped.split()
        stmt = fields[0]
        if stmt == "name":
            if name is not None:
                raise NetDefError("duplicate 'name' statement", lineno)
            if len(fields) != 2:
                raise NetDefError("usage: name <identifier>", lineno)
            name = fields[1]
        elif stmt == "input":
            if input_blob is not None:
                raise NetDefError("duplicate 'input' statement", lineno)
            if len(fields) != 5:
                raise NetDefError("usage: input <blob> <C> <H> <W>", lineno)
            try:
                dims = tuple(int(f) for f in fields[2:5])
            except ValueError:
                raise NetDefError("input dimensions must be integers", lineno)
            if min(dims) < 1:
                raise NetDefError("input dimensions must be positive", lineno)
            input_blob, input_shape = fields[1], dims
        elif stmt == "layer":
            if len(fields) < 5:
                raise NetDefError(
                    "usage: layer <name> <kind> <bottoms> <top> [k=v ...]", lineno)
            lname, kind, bottoms_field, top = fields[1:5]
            params = {}
            for tok in fields[5:]:
                if "=" not in tok:
                    raise NetDefError(f"malformed param '{tok}' (need k=v)", lineno)
                key, val = tok.split("=", 1)
                if key in params:
                    raise NetDefError(f"duplicate param '{key}'", lineno)
                params[key] = val
            layers.append(LayerSpec(lname, kind, bottoms_field.split("+"), top, params))
            if lname not in lines_of:
                lines_of[lname] = lineno
        else:
            raise NetDefError(f"unknown statement '{stmt}'", lineno)
    if name is None:
        raise NetDefError("missing 'name' statement")
    if input_blob is None:
        raise NetDefError("missing 'input' statement")
    net = NetDef(name, input_blob, input_shape, layers)
    return validate(net, lines_of)


def _format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def serialize(net: NetDef) -> str:
    """Canonical text: fixed field order, params sorted by key, LF endings.

    parse(serialize(net)) is structurally identical to net, and two
    structurally equal nets serialize to byte-identical text.
    """
    c, h, w = net.input_shape
    out = [f"name {net.name}", f"input {net.input_blob} {c} {h} {w}"]
    for spec in net.layers:
        parts = [
            "layer", spec.name, spec.kind, "+".join(spec.bottoms), spec.top,
        ]
        parts += [f"{k}={_format_value(spec.params[k])}"
                  for k in sorted(spec.params)]
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


def infer_shapes(net: NetDef, batch: int) -> dict[str, Shape4]:
    """Shape of every blob for the given batch size.

    conv/pool output spatial size is floor((S + 2*pad - kernel)/stride) + 1;
    fc collapses to (batch, out_features, 1, 1); bn/relu/dropout/lrn preserve
    shape; eltwise_add requires equal input shapes; loss/accuracy tops are
    scalar placeholders.
    """
    if batch < 1:
        raise NetDefError(f"batch must be positive, got {batch}")
    c, h, w = net.input_shape
    shapes: dict[str, Shape4] = {
        net.input_blob: Shape4(batch, c, h, w),
        LABEL_BLOB: Shape4(batch, 1, 1, 1),
    }
    for spec in net.layers:
        bot = shapes[spec.bottoms[0]]
        if spec.kind == "conv":
            p = spec.params
            oh = (bot.h + 2 * p["pad"] - p["kernel"]) // p["stride"] + 1
            ow = (bot.w + 2 * p["pad"] - p["kernel"]) // p["stride"] + 1
            if oh < 1 or ow < 1:
                raise NetDefError(
                    f"layer '{spec.name}': kernel {p['kernel']} does not fit "
                    f"{bot.h}x{bot.w} input")
            top = Shape4(batch, p["out_channels"], oh, ow)
        elif spec.kind == "pool":
            p = spec.params
            oh = (bot.h - p["kernel"]) // p["stride"] + 1
            ow = (bot.w - p["kernel"]) // p["stride"] + 1
            if oh < 1 or ow < 1:
                raise NetDefError(
                    f"layer '{spec.name}': kernel {p['kernel']} does not fit "
                    f"{bot.h}x{bot.w} input")
            top = Shape4(batch, bot.c, oh, ow)
        elif spec.kind == "fc":
            top = Shape4(batch, spec.params["out_features"], 1, 1)
        elif spec.kind == "eltwise_add":
            other = shapes[spec.bottoms[1]]
            if bot.astuple() != other.astuple():
                raise NetDefError(
                    f"layer '{spec.name}': eltwise inputs differ "
                    f"{bot.astuple()} vs {other.astuple()}")
            top = dataclasses.replace(bot)
        elif spec.kind in ("softmax_loss", "accuracy"):
            top = Shape4(1, 1, 1, 1)
        else:  # relu, bn, dropout, lrn: shape preserving
            top = dataclasses.replace(bot)
        shapes[spec.top] = top
    return shapes
