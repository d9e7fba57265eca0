import itertools
from fractions import Fraction

import numpy as np
import pytest

from srnnkit.cost import (
    Conv2dSpec,
    LayerCost,
    ModelFileError,
    RnnLayerSpec,
    arena_estimate,
    conv2d_mac_count,
    conv2d_param_count,
    cost_report,
    count_macs_empirical,
    count_spec_empirical,
    mac_ratio,
    param_ratio_asymptotic,
    parse_model,
    read_model,
    solve_symmetric_width,
    srnn_mac_count,
    srnn_param_count,
)
from srnnkit.params import RnnCellParams, SrnnParams


@pytest.mark.parametrize(
    "c_in, c, expected",
    [(19, 65, 14170), (37, 90, 27990), (57, 65, 16640)],
)
def test_srnn_params_published(c_in, c, expected):
    assert srnn_param_count(RnnLayerSpec(c_in, c, c)) == expected
    assert solve_symmetric_width(c_in, expected) == c


def test_4224_has_no_symmetric_width():
    assert solve_symmetric_width(29, 4224) is None
    hits = [(m, o) for m in range(1, 200) for o in range(1, 200) if srnn_param_count(RnnLayerSpec(29, m, o)) == 4224]
    # the only exact fit keeps C_out = C_in, so the printed widths remain unconfirmed
    assert hits == [(35, 29)]


@pytest.mark.parametrize(
    "spec, expected",
    [
        (Conv2dSpec(33, 56, 3, has_bias=False), 16632),
        (Conv2dSpec(19, 37, 1, has_bias=False), 703),
        (Conv2dSpec(1, 1, 1, has_bias=True), 2),
    ],
)
def test_conv_params(spec, expected):
    assert conv2d_param_count(spec) == expected


def test_param_ratio():
    assert param_ratio_asymptotic(3) == Fraction(4, 9)
    assert param_ratio_asymptotic(2) == 1
    assert param_ratio_asymptotic(1) == 4


def test_conv_macs():
    assert conv2d_mac_count(Conv2dSpec(1, 1, 1, True, 1, 1)) == 2
    assert conv2d_mac_count(Conv2dSpec(3, 5, 3, True, 4, 4)) == 2240
    assert conv2d_mac_count(Conv2dSpec(3, 5, 3, True, 8, 4)) == 4480


def test_conv_macs_stride():
    assert conv2d_mac_count(Conv2dSpec(2, 2, 3, False, 5, 5, stride=2)) == 36 * 9


def test_srnn_macs():
    assert srnn_mac_count(RnnLayerSpec(1, 1, 1)) == 8
    assert srnn_mac_count(RnnLayerSpec(1, 1, 1, bidirectional=True)) == 16
    spec = RnnLayerSpec(5, 7, 3, False, 4, 6)
    assert srnn_mac_count(spec) == srnn_param_count(spec) * 24


def test_mac_ratio_values():
    assert mac_ratio(64, 3) == Fraction(260, 577)
    assert float(mac_ratio(64, 3)) == pytest.approx(0.45061, abs=1e-5)
    assert mac_ratio(1, 1) == 4


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_mac_ratio_monotone_limit(k):
    cs = np.unique(np.logspace(0, 6, 200).astype(int))
    ratios = [mac_ratio(int(c), k) for c in cs]
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))
    assert abs(float(ratios[-1]) - 4 / k**2) < 1e-5


def test_empirical_scalar():
    cell = RnnCellParams.scalar(1.0, 0.5)
    assert count_macs_empirical("srnn", SrnnParams(cell, cell), (1, 1, 1)) == 8


def test_empirical_random_spec():
    spec = RnnLayerSpec(3, 5, 4, False, 6, 7)
    assert count_spec_empirical(spec) == srnn_mac_count(spec)
    assert count_spec_empirical(RnnLayerSpec(3, 5, 4, True, 6, 7)) == 2 * srnn_mac_count(spec)


def test_empirical_conv():
    spec = Conv2dSpec(3, 4, 3, True, 8, 8)
    assert count_spec_empirical(spec) == conv2d_mac_count(spec)


def test_empirical_grid_sample():
    rng = np.random.default_rng(0)
    for c_in, c_mid, c_out, h, w in rng.integers(1, 6, (40, 5)):
        for bidir in (False, True):
            spec = RnnLayerSpec(int(c_in), int(c_mid), int(c_out), bidir, int(h), int(w))
            assert count_spec_empirical(spec) == srnn_mac_count(spec)
    for (c_in, c_out, h, w), k, bias, s in itertools.product(rng.integers(1, 6, (5, 4)), (1, 3, 5), (True, False), (1, 2)):
        spec = Conv2dSpec(int(c_in), int(c_out), k, bias, int(h), int(w), s)
        assert count_spec_empirical(spec) == conv2d_mac_count(spec)


def test_layer_cost_arithmetic():
    a, b = LayerCost(10, 100), LayerCost(3, 7)
    assert a + b == LayerCost(13, 107)
    assert a - b == LayerCost(7, 93)
    assert b * 4 == LayerCost(12, 28)


def test_spec_validation():
    with pytest.raises(ValueError):
        RnnLayerSpec(0, 1, 1)
    with pytest.raises(ValueError):
        Conv2dSpec(1, 1, 0)


# -- model files -------------------------------------------------------------------


def test_bundled_table1():
    model = read_model("table1_heads.model")
    report = cost_report(model)
    params = {r["index"]: r["params"] for r in report.rows()}
    assert [params[i] for i in range(18, 23)] == [27990, 14170, 14170, 14170, 14170]
    assert params[9] == 16632 and params[10] == 703
    alts = {s.index: s for s in report.substitutions}
    assert alts[19].original.cost().parameters == 13072
    assert alts[19].replacement.cost().parameters == 14170


def test_compare_delta_is_formula_difference():
    model = parse_model("input 16 16 19\n1 -1 rnn 19 65 65 1\nalt 1 conv 19 19 3 1 bias n=4\n")
    (sub,) = cost_report(model, ("conv", "rnn")).substitutions
    rnn = RnnLayerSpec(19, 65, 65, True, 16, 16)
    conv = Conv2dSpec(19, 19, 3, True, 16, 16)
    assert sub.delta.parameters == srnn_param_count(rnn) - 4 * conv2d_param_count(conv)
    assert sub.delta.macs == srnn_mac_count(rnn) - 4 * conv2d_mac_count(conv)
    (flipped,) = cost_report(model, ("rnn", "conv")).substitutions
    assert flipped.delta.parameters == -sub.delta.parameters


def test_header_only_model():
    report = cost_report(parse_model("input 8 8 3\n"))
    assert report.total == LayerCost(0, 0)
    assert report.rows() == []


def test_single_conv_model():
    report = cost_report(parse_model("input 8 8 3\n0 -1 conv 3 4 3 1 nobias\n"))
    (row,) = report.rows()
    assert report.total == LayerCost(row["params"], row["macs"]) == LayerCost(108, 108 * 64)


def test_chain_shapes():
    model = parse_model("input 8 8 3\n0 -1 conv 3 4 3 2\n1 0 rnn 4 5 6 0 in=4x4x4\n")
    assert model.layers[1].output_shape == (4, 4, 6)


@pytest.mark.parametrize(
    "text, match",
    [
        ("input 8 8 3\n0 -1 pool 3 3\n", "line 2: unknown layer kind 'pool'"),
        ("input 8 8 3\n0 5 conv 3 3 3 1\n", "line 2: dangling from=5"),
        ("input 8 8 3\n0 -2 conv 3 3 3 1\n", "line 2: from=-2"),
        ("input 8 8 3\n0 -1 conv 4 3 3 1\n", "line 2: row 0 declares C_in=4"),
        ("input 8 8 3\n0 -1 conv 3 3 3 1 in=4x4x3\n", "line 2: row 0 declares input 4x4x3"),
        ("input 8 8 3\n\n0 -1 conv 3 3 x 1\n", "line 3"),
        ("0 -1 conv 3 3 3 1\n", "from=-1"),
        ("", "missing 'input"),
        ("input 8 8 3\nalt 4 conv 3 3 3 1\n", "line 2: alt refers to unknown row 4"),
    ],
)
def test_model_errors(text, match):
    with pytest.raises(ModelFileError, match=match):
        parse_model(text)


def test_csv_has_totals_and_deltas():
    csv = cost_report(read_model("table1_heads.model")).to_csv().splitlines()
    assert csv[0] == "index,from,n,input,layer,params,macs"
    total = next(line for line in csv if line.startswith("total"))
    assert total.split(",")[5] == "111239"
    assert sum(line.startswith("delta:") for line in csv) == 5


def test_arena_estimate_single_layer():
    model = parse_model("input 4 4 2\n0 -1 conv 2 3 3 1\n")
    assert arena_estimate(model, 4) == (32 + 48) * 4


def test_text_report_mentions_convention():
    text = cost_report(read_model("table1_heads.model")).to_text()
    assert "MAC convention" in text and "14170" in text
