import numpy as np
import pytest

from ulid.autodiff import Tensor, check_gradients
from ulid.backbone import (ConvStackSpec, SpecParseError, build_backbone, default_spec, fig3_spec,
                           format_rf_table, forward_backbone, receptive_field)

SMALL = "c3x3/2@4 r3x3/2@4 r3x3/2@8"


def rf_column(spec):
    return [row["rf"][1] for row in receptive_field(spec)]


def test_fig3_receptive_fields():
    assert rf_column(fig3_spec()) == [3, 7, 15, 31, 63]


def test_hand_computed_receptive_fields():
    assert rf_column(ConvStackSpec.parse("c1x1/1@1")) == [1]
    assert rf_column(ConvStackSpec.parse("c5x5/1@4 c3x3/2@4")) == [5, 7]
    rows = receptive_field(ConvStackSpec.parse("c3x3/2@4 r3x3/2@4"))
    # residual block: two 3x3 convs, the first strided
    assert rows[-1]["rf"] == (3 + 2 * 2 + 2 * 4, 3 + 2 * 2 + 2 * 4)
    assert rows[-1]["jump"] == (4, 4)


def test_rf_table_mentions_every_layer():
    text = format_rf_table(receptive_field(fig3_spec(), 300), 300)
    assert text.count("\n") >= 5
    assert "63" in text


def test_spec_string_round_trip():
    spec = default_spec()
    again = ConvStackSpec.parse(spec.to_string())
    assert again.to_dict() == spec.to_dict()
    assert ConvStackSpec.from_dict(spec.to_dict()).to_string() == spec.to_string()
    assert spec.final_feature_dim == 128 and spec.time_stride == 16 and spec.min_length == 16


@pytest.mark.parametrize("text,where", [("c3x3/2@16 q3x3", 10), ("c3x3/@16", 4), ("", 0)])
def test_malformed_specs_report_position(text, where):
    with pytest.raises(SpecParseError) as err:
        ConvStackSpec.parse(text)
    assert err.value.pos == where


def test_default_spec_shapes():
    spec = default_spec()
    assert spec.output_shape(64, 300) == (4, 19)
    assert spec.output_length(16) == 1


def test_default_backbone_output_on_300_frames():
    net = build_backbone(default_spec(), 0)
    out = forward_backbone(net, np.random.default_rng(0).normal(size=(64, 300)).astype(np.float32))
    assert out.features.shape == (128, 19)


@pytest.mark.parametrize("length", [16, 17, 31, 200, 300, 1000])
def test_time_length_matches_stride_arithmetic(length):
    spec = ConvStackSpec.parse(SMALL + " r3x3/2@8")
    net = build_backbone(spec, 0)
    out = forward_backbone(net, np.zeros((64, length), dtype=np.float32))
    assert out.features.shape == (8, spec.output_length(length))
    if length == 16:
        assert out.features.shape[1] == 1


def test_too_short_input_names_minimum():
    net = build_backbone(default_spec(), 0)
    with pytest.raises(ValueError, match="minimum 16 frames"):
        forward_backbone(net, np.zeros((64, 15), dtype=np.float32))


def test_frequency_collapse_rejected():
    spec = ConvStackSpec.parse("c5x5/8p0x0 c5x5/8p0x0 c5x5/8p0x0")
    with pytest.raises(ValueError, match="frequency axis"):
        build_backbone(spec, 0)


def test_seeded_init_is_bit_identical():
    a, b = build_backbone(default_spec(), 7), build_backbone(default_spec(), 7)
    c = build_backbone(default_spec(), 8)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert any(sa[k].tobytes() != sc[k].tobytes() for k in sa if k.endswith("weight"))


def test_zero_init_residual_block_is_relu_of_shortcut():
    spec = ConvStackSpec.parse("c3x3/1@4 r3x3/1@4")
    net = build_backbone(spec, 0, np.float64, zero_init_residual=True).eval()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 64, 20)))
    h = net.layer1(x)
    np.testing.assert_allclose(net.layer2(h).data, np.maximum(h.data, 0), atol=1e-12)


def test_translation_by_one_jump_shifts_output_one_column():
    spec = ConvStackSpec.parse(SMALL)
    net = build_backbone(spec, 3, np.float64).eval()
    jump = spec.time_stride
    x = np.random.default_rng(1).normal(size=(64, 200))
    full = forward_backbone(net, x).features
    shifted = forward_backbone(net, x[:, jump:]).features
    edge = 3  # columns whose receptive field touches the zero padding
    np.testing.assert_allclose(shifted[:, edge:-edge], full[:, 1 + edge:1 + edge + shifted.shape[1] - 2 * edge],
                               atol=1e-5)


def test_variable_lengths_same_channels():
    net = build_backbone(ConvStackSpec.parse(SMALL), 0)
    a = forward_backbone(net, np.ones((64, 200), dtype=np.float32)).features
    b = forward_backbone(net, np.ones((64, 1000), dtype=np.float32)).features
    assert a.shape[0] == b.shape[0] and a.shape[1] < b.shape[1]


def test_backbone_gradients():
    spec = ConvStackSpec.parse("c3x3/2@2 r3x3/2@3")
    net = build_backbone(spec, 0, np.float64, n_freq=8)
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 8, 12)), requires_grad=True)
    probe = rng.normal(size=net(x).shape)
    rep = check_gradients(lambda: (net(x) * probe).sum(), dict(net.named_parameters(), x=x), tol=1e-6)
    assert rep.passed, rep.violations[:3]
