import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bncnn.netdef import (LayerSpec, NetDef, NetDefError, infer_shapes, parse,
                          serialize, validate)

MINIMAL = ("name n\n"
           "input data 3 8 8\n"
           "layer c1 conv data c1o out_channels=4 kernel=3 stride=1 pad=1 bias_flag=1\n")


class TestParse:
    def test_minimal_program(self):
        net = parse(MINIMAL)
        assert net.name == "n"
        assert net.input_blob == "data"
        assert net.input_shape == (3, 8, 8)
        assert len(net.layers) == 1
        assert net.layers[0].params == {
            "out_channels": 4, "kernel": 3, "stride": 1, "pad": 1, "bias_flag": 1}

    def test_comments_and_blank_lines(self):
        net = parse("# header\n\nname n\n  # indented comment\n"
                    "input data 1 2 2\n")
        assert net.name == "n"

    def test_dangling_bottom_cites_line(self):
        text = MINIMAL + "layer r1 relu ghost r1o\n"
        with pytest.raises(NetDefError, match="line 4.*ghost"):
            parse(text)

    def test_unknown_kind(self):
        with pytest.raises(NetDefError, match="unknown layer kind"):
            parse("name n\ninput data 1 2 2\nlayer x warp data xo\n")

    def test_duplicate_layer_name(self):
        text = MINIMAL + "layer c1 relu c1o r1o\n"
        with pytest.raises(NetDefError, match="duplicate layer name"):
            parse(text)

    def test_missing_required_param(self):
        with pytest.raises(NetDefError, match="missing param 'kernel'"):
            parse("name n\ninput data 1 4 4\n"
                  "layer c conv data co out_channels=2 stride=1 pad=0 bias_flag=0\n")

    def test_unknown_param_rejected(self):
        with pytest.raises(NetDefError, match="unknown param"):
            parse("name n\ninput data 1 4 4\nlayer r relu data ro wild=1\n")

    def test_in_place_rejected(self):
        with pytest.raises(NetDefError, match="in-place"):
            parse("name n\ninput data 1 4 4\nlayer r relu data data\n")

    def test_two_bottoms_only_for_paired_kinds(self):
        with pytest.raises(NetDefError, match="needs 1 bottom"):
            parse("name n\ninput data 1 4 4\nlayer r relu data+data ro\n")
        with pytest.raises(NetDefError, match="needs 2 bottom"):
            parse("name n\ninput data 1 4 4\nlayer e eltwise_add data eo\n")

    def test_label_blob_is_predefined(self):
        net = parse("name n\ninput data 1 4 4\n"
                    "layer f fc data fo out_features=3 bias_flag=1\n"
                    "layer loss softmax_loss fo+label lossv\n")
        assert net.layers[1].bottoms == ["fo", "label"]

    def test_missing_header_statements(self):
        with pytest.raises(NetDefError, match="missing 'name'"):
            parse("input data 1 2 2\n")
        with pytest.raises(NetDefError, match="missing 'input'"):
            parse("name n\n")


class TestSerialize:
    def test_roundtrip_structural_equality(self):
        net = parse(MINIMAL)
        assert parse(serialize(net)) == net

    def test_canonical_param_order(self):
        line = serialize(parse(MINIMAL)).splitlines()[2]
        assert line.endswith("bias_flag=1 kernel=3 out_channels=4 pad=1 stride=1")

    def test_structurally_equal_nets_byte_identical(self):
        messy = ("name n\n# c\ninput data 3 8 8\n"
                 "layer c1 conv data c1o pad=1 bias_flag=1 stride=1 "
                 "kernel=3 out_channels=4\n")
        assert serialize(parse(messy)) == serialize(parse(MINIMAL))

    def test_eltwise_bottoms_joined_with_plus(self):
        net = parse("name n\ninput data 2 4 4\n"
                    "layer r1 relu data r1o\nlayer r2 relu data r2o\n"
                    "layer e eltwise_add r1o+r2o eo\n")
        assert "eltwise_add r1o+r2o eo" in serialize(net)

    def test_float_params_roundtrip(self):
        net = parse("name n\ninput data 1 4 4\n"
                    "layer b bn data bo eps=0.00001 momentum=0.1\n")
        assert "eps=1e-05 momentum=0.1" in serialize(net)
        assert parse(serialize(net)) == net


# random small valid chain nets for the round-trip property
_KIND_POOL = st.sampled_from(["relu", "bn", "dropout", "conv", "pool"])


@st.composite
def small_nets(draw):
    n_layers = draw(st.integers(1, 6))
    layers = []
    bottom = "data"
    c, h, w = 3, 16, 16
    for i in range(n_layers):
        kind = draw(_KIND_POOL)
        name = f"l{i}"
        params = {}
        if kind == "conv":
            c = draw(st.integers(1, 4))
            params = {"out_channels": c, "kernel": 3, "stride": 1, "pad": 1,
                      "bias_flag": draw(st.integers(0, 1))}
        elif kind == "pool":
            if h < 2:
                kind = "relu"
            else:
                params = {"mode": draw(st.sampled_from(["max", "avg"])),
                          "kernel": 2, "stride": 2}
                h //= 2
                w //= 2
        if kind == "bn":
            params = {"eps": draw(st.sampled_from([1e-5, 1e-3])),
                      "momentum": draw(st.sampled_from([0.1, 0.5, 1.0]))}
        elif kind == "dropout":
            params = {"ratio": draw(st.sampled_from([0.0, 0.25, 0.5]))}
        layers.append(LayerSpec(name, kind, [bottom], f"b{i}", params))
        bottom = f"b{i}"
    return validate(NetDef("hnet", "data", (3, 16, 16), layers))


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(small_nets())
    def test_parse_serialize_roundtrip(self, net):
        assert parse(serialize(net)) == net

    @settings(max_examples=30, deadline=None)
    @given(small_nets(), st.integers(1, 8))
    def test_infer_shapes_total_and_deterministic(self, net, batch):
        first = infer_shapes(net, batch)
        second = infer_shapes(net, batch)
        assert first == second
        assert first[net.input_blob].n == batch


class TestInferShapes:
    def test_conv_preserving_spatial(self):
        shapes = infer_shapes(parse(MINIMAL), 2)
        assert shapes["c1o"].astuple() == (2, 4, 8, 8)

    def test_alexnet_stem(self):
        net = parse("name n\ninput data 3 227 227\n"
                    "layer c conv data co out_channels=96 kernel=11 stride=4 "
                    "pad=0 bias_flag=1\n")
        assert infer_shapes(net, 1)["co"].astuple() == (1, 96, 55, 55)

    def test_relu_preserves_shape(self):
        net = parse(MINIMAL + "layer r relu c1o ro\n")
        shapes = infer_shapes(net, 3)
        assert shapes["ro"] == shapes["c1o"]

    def test_fc_collapses(self):
        net = parse(MINIMAL + "layer f fc c1o fo out_features=5 bias_flag=0\n")
        assert infer_shapes(net, 2)["fo"].astuple() == (2, 5, 1, 1)

    def test_eltwise_shape_mismatch(self):
        net = parse("name n\ninput data 2 4 4\n"
                    "layer c conv data co out_channels=3 kernel=1 stride=1 "
                    "pad=0 bias_flag=0\n"
                    "layer r relu data ro\n"
                    "layer e eltwise_add co+ro eo\n")
        with pytest.raises(NetDefError, match="eltwise inputs differ"):
            infer_shapes(net, 1)

    def test_non_positive_output_size(self):
        net = parse("name n\ninput data 1 4 4\n"
                    "layer p pool data po mode=max kernel=5 stride=1\n")
        with pytest.raises(NetDefError, match="does not fit"):
            infer_shapes(net, 1)

    def test_label_shape(self):
        assert infer_shapes(parse(MINIMAL), 4)["label"].astuple() == (4, 1, 1, 1)
