"""Architecture surgery: mechanical batch-norm insertion plus net generators.

The rewrite pass applies five rules, in order:

  R1  insert a bn layer between each conv and a directly-following relu
      (R1b: a conv whose sole consumer is an eltwise_add also gets one)
  R2  the same for fc layers
  R3  delete every lrn layer, splicing its bottom to its consumers
  R4  delete every dropout layer, splicing
  R5  optionally prepend a bn layer on the network input and rewire all
      former consumers of the input blob

New layers are named ``<predecessor>_bn`` and produce a blob of the same
name; they default to eps=1e-5, momentum=0.1. A final classifier layer
feeding only loss/accuracy heads receives no bn. Conv biases are kept
even when a bn follows, so the rewrite is purely insertive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .netdef import LayerSpec, NetDef, validate

BN_DEFAULTS = {"eps": 1e-5, "momentum": 0.1}


class RewriteError(ValueError):
    pass


class AlreadyTransformedError(RewriteError):
    pass


@dataclass
class InsertedBn:
    name: str
    predecessor: str  # layer name for R1/R1b/R2, input blob name for R5


@dataclass
class RemovedLayer:
    name: str
    kind: str
    spec: LayerSpec    # full copy, so the edit can be replayed backwards
    index: int         # position in the input net's layer list


@dataclass
class RewriteReport:
    inserted: list[InsertedBn] = field(default_factory=list)
    removed: list[RemovedLayer] = field(default_factory=list)
    input_bn_added: bool = False


def _blob_names(net: NetDef) -> set[str]:
    names = {net.input_blob, "label"}
    names.update(l.top for l in net.layers)
    return names


def _make_bn(name: str, bottom: str) -> LayerSpec:
    return LayerSpec(name, "bn", [bottom], name, dict(BN_DEFAULTS))


def insert_batchnorm(net: NetDef, add_input_bn: bool) -> tuple[NetDef, RewriteReport]:
    """Apply rules R1-R5 to a bn-free net; returns the new net and an audit report."""
    if any(l.kind == "bn" for l in net.layers):
        raise AlreadyTransformedError(
            f"net '{net.name}' already transformed: contains bn layers")
    out = net.copy()
    report = RewriteReport()
    taken = {l.name for l in out.layers} | _blob_names(out)

    def claim_bn_name(pred: str) -> str:
        bn_name = f"{pred}_bn"
        if bn_name in taken:
            raise RewriteError(f"cannot insert bn: name '{bn_name}' already in use")
        taken.add(bn_name)
        return bn_name

    # R1 / R1b / R2: scan the weighted layers in listed order
    for spec in list(out.layers):
        if spec.kind not in ("conv", "fc"):
            continue
        consumers = out.consumers(spec.top)
        relus = [c for c in consumers if c.kind == "relu"]
        feeds_add_only = (
            spec.kind == "conv" and len(consumers) == 1
            and consumers[0].kind == "eltwise_add"
        )
        if not relus and not feeds_add_only:
            continue
        bn_name = claim_bn_name(spec.name)
        bn = _make_bn(bn_name, spec.top)
        out.layers.insert(out.layers.index(spec) + 1, bn)
        rewire = relus if relus else consumers
        for consumer in rewire:
            consumer.bottoms = [bn.top if b == spec.top else b
                                for b in consumer.bottoms]
        report.inserted.append(InsertedBn(bn_name, spec.name))

    # R3 + R4: delete lrn and dropout, splicing bottom to consumers
    original_index = {l.name: i for i, l in enumerate(net.layers)}
    for kind in ("lrn", "dropout"):
        for spec in [l for l in out.layers if l.kind == kind]:
            for consumer in out.consumers(spec.top):
                consumer.bottoms = [spec.bottoms[0] if b == spec.top else b
                                    for b in consumer.bottoms]
            out.layers = [l for l in out.layers if l is not spec]
            report.removed.append(
                RemovedLayer(spec.name, kind, net.layer(spec.name).copy(),
                             original_index[spec.name]))

    # R5: bn on the input data, replacing dataset mean subtraction
    if add_input_bn:
        bn_name = claim_bn_name(out.input_blob)
        bn = _make_bn(bn_name, out.input_blob)
        for layer in out.layers:
            layer.bottoms = [bn.top if b == out.input_blob else b
                             for b in layer.bottoms]
        out.layers.insert(0, bn)
        report.inserted.append(InsertedBn(bn_name, out.input_blob))
        report.input_bn_added = True

    return validate(out), report


def undo_rewrite(net: NetDef, report: RewriteReport) -> NetDef:
    """Replay a rewrite report backwards: remove inserted bns, re-add removed layers.

    Straight-line splices only (each removed layer's consumers all sit
    after it), which holds for every net this pass produces.
    """
    work = net.copy()
    for ins in report.inserted:
        bn = work.layer(ins.name)
        for consumer in work.consumers(bn.top):
            consumer.bottoms = [bn.bottoms[0] if b == bn.top else b
                                for b in consumer.bottoms]
        work.layers = [l for l in work.layers if l is not bn]
    for removed in sorted(report.removed, key=lambda r: r.index):
        spec = removed.spec.copy()
        work.layers.insert(removed.index, spec)
        for layer in work.layers[removed.index + 1:]:
            layer.bottoms = [spec.top if b == spec.bottoms[0] else b
                             for b in layer.bottoms]
    return validate(work)


def weighted_depth(net: NetDef) -> int:
    """Main-path weighted layer count, the number in 'resnet-N' style names.

    Counts conv and fc layers; 1x1 shortcut projections (layers named
    '*_proj') are excluded, following the usual residual-net convention.
    """
    return sum(1 for l in net.layers
               if l.kind == "fc"
               or (l.kind == "conv" and not l.name.endswith("_proj")))


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

class _Builder:
    """Accumulates layers; tops are named after their layers."""

    def __init__(self, name: str, input_blob: str, input_shape, with_bn: bool):
        self.net = NetDef(name, input_blob, tuple(input_shape), [])
        self.with_bn = with_bn
        if with_bn:
            self.blob = self._raw(f"{input_blob}_bn", "bn", [input_blob],
                                  dict(BN_DEFAULTS))
        else:
            self.blob = input_blob

    def _raw(self, name, kind, bottoms, params=None) -> str:
        self.net.layers.append(LayerSpec(name, kind, bottoms, name, params or {}))
        return name

    def add(self, name, kind, params=None, bottom=None) -> str:
        self.blob = self._raw(name, kind, [bottom or self.blob], params)
        return self.blob

    def conv(self, name, out_channels, kernel, stride, pad, bottom=None) -> str:
        out = self.add(name, "conv", {
            "out_channels": out_channels, "kernel": kernel,
            "stride": stride, "pad": pad, "bias_flag": 1}, bottom)
        if self.with_bn:
            out = self.add(f"{name}_bn", "bn", dict(BN_DEFAULTS))
        return out

    def fc(self, name, out_features, bn_after=False) -> str:
        out = self.add(name, "fc", {"out_features": out_features, "bias_flag": 1})
        if bn_after and self.with_bn:
            out = self.add(f"{name}_bn", "bn", dict(BN_DEFAULTS))
        return out

    def heads(self, logits: str):
        self._raw("loss", "softmax_loss", [logits, "label"])
        self._raw("acc", "accuracy", [logits, "label"])

    def build(self) -> NetDef:
        return validate(self.net)


def _scaled(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


ALEXNET_CONVS = ((96, 11, 4, 0), (256, 5, 1, 2), (384, 3, 1, 1),
                 (384, 3, 1, 1), (256, 3, 1, 1))
VGG_BLOCKS = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))


def generate_plain(arch: str, scale: float, classes: int,
                   input_shape, with_bn: bool) -> NetDef:
    """AlexNet- or VGG-style net, classic form or its batch-norm variant.

    with_bn=False keeps lrn (alexnet) and dropout and serves as rewrite
    input; with_bn=True emits the post-rewrite topology directly, so
    insert_batchnorm(generate_plain(..., False), True) and
    generate_plain(..., True) must agree structurally.
    """
    if arch not in ("alexnet", "vgg"):
        raise ValueError(f"unknown plain architecture '{arch}'")
    b = _Builder(arch, "data", input_shape, with_bn)
    if arch == "alexnet":
        for i, (ch, k, s, p) in enumerate(ALEXNET_CONVS, start=1):
            b.conv(f"conv{i}", _scaled(ch, scale), k, s, p)
            b.add(f"relu{i}", "relu")
            if i in (1, 2):
                if not with_bn:
                    b.add(f"lrn{i}", "lrn",
                          {"local_size": 5, "alpha": 1e-4, "beta": 0.75})
                b.add(f"pool{i}", "pool", {"mode": "max", "kernel": 3, "stride": 2})
        b.add("pool5", "pool", {"mode": "max", "kernel": 3, "stride": 2})
        fc_width = _scaled(4096, scale)
    else:
        for bi, (ch, reps) in enumerate(VGG_BLOCKS, start=1):
            for ri in range(1, reps + 1):
                b.conv(f"conv{bi}_{ri}", _scaled(ch, scale), 3, 1, 1)
                b.add(f"relu{bi}_{ri}", "relu")
            b.add(f"pool{bi}", "pool", {"mode": "max", "kernel": 2, "stride": 2})
        fc_width = _scaled(4096, scale)
    for i in (6, 7):
        b.fc(f"fc{i}", fc_width, bn_after=True)
        b.add(f"relu{i}", "relu")
        if not with_bn:
            b.add(f"drop{i}", "dropout", {"ratio": 0.5})
    logits = b.fc("fc8", classes)
    b.heads(logits)
    return b.build()


def generate_resnet(stage_blocks, base_width: int, classes: int,
                    input_shape, block_type: str = "basic") -> NetDef:
    """Residual net: stem conv-bn-relu-pool, stages of blocks, global avg pool, fc.

    Every conv is followed by bn by construction. Shortcuts project with a
    1x1 conv (plus bn) when the block changes shape. block_type 'basic' is
    two 3x3 convs; 'bottleneck' is 1x1/3x3/1x1 with 4x expansion.
    """
    if not stage_blocks:
        raise ValueError("stage_blocks must be nonempty")
    if block_type not in ("basic", "bottleneck"):
        raise ValueError(f"unknown block type '{block_type}'")
    if base_width < 1 or classes < 1:
        raise ValueError("base_width and classes must be positive")
    expansion = 1 if block_type == "basic" else 4
    c, h, w = input_shape

    def shrink(size, kernel, stride, pad):
        out = (size + 2 * pad - kernel) // stride + 1
        if out < 1:
            raise RewriteError(
                f"spatial size underflow: {size}px too small for the stem/stages")
        return out

    b = _Builder("resnet", "data", input_shape, with_bn=True)
    b.conv("conv1", base_width, 7, 2, 3)
    b.add("relu1", "relu")
    b.add("pool1", "pool", {"mode": "max", "kernel": 3, "stride": 2})
    h = shrink(shrink(h, 7, 2, 3), 3, 2, 0)
    w = shrink(shrink(w, 7, 2, 3), 3, 2, 0)
    channels = base_width

    for si, blocks in enumerate(stage_blocks, start=1):
        width = base_width * (2 ** (si - 1))
        for bi in range(1, blocks + 1):
            p = f"s{si}b{bi}"
            stride = 2 if (si > 1 and bi == 1) else 1
            entry = b.blob
            if block_type == "basic":
                b.conv(f"{p}_conv1", width, 3, stride, 1, bottom=entry)
                b.add(f"{p}_relu1", "relu")
                main = b.conv(f"{p}_conv2", width, 3, 1, 1)
            else:
                b.conv(f"{p}_conv1", width, 1, 1, 0, bottom=entry)
                b.add(f"{p}_relu1", "relu")
                b.conv(f"{p}_conv2", width, 3, stride, 1)
                b.add(f"{p}_relu2", "relu")
                main = b.conv(f"{p}_conv3", width * expansion, 1, 1, 0)
            out_ch = width * expansion
            if stride != 1 or channels != out_ch:
                short = b.conv(f"{p}_proj", out_ch, 1, stride, 0, bottom=entry)
            else:
                short = entry
            b.blob = b._raw(f"{p}_add", "eltwise_add", [main, short])
            b.add(f"{p}_relu_out", "relu")
            channels = out_ch
            h = shrink(h, 1, stride, 0) if stride != 1 else h
            w = shrink(w, 1, stride, 0) if stride != 1 else w
    if h != w:
        raise RewriteError(f"non-square feature map {h}x{w} at global pooling")
    b.add("gap", "pool", {"mode": "avg", "kernel": h, "stride": 1})
    logits = b.fc("fc", classes)
    b.heads(logits)
    net = b.build()
    net.name = f"resnet{weighted_depth(net)}"
    return net
