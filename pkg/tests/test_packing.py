"""Packing plans: schedule correctness oracle, op counts, dw/pw asymmetry."""

import numpy as np
import pytest

from heplan.errors import ConstructionError, ParameterError
from heplan.packing import (LayerSpec, NetworkSpec, build_schedule,
                            execute_clear, extract_op_counts, input_slots,
                            layer_linear_oracle, output_slots, pack_input)


def rand_weights(layer, rng, lo=-7, hi=8):
    if layer.kind == "fc":
        return rng.integers(lo, hi, size=(layer.c_out, layer.c_in))
    cin = 1 if layer.kind == "dwconv" else layer.c_in
    return rng.integers(lo, hi, size=(layer.c_out, cin, layer.k_s, layer.k_s))


def run_layer(layer, n, seed=0):
    rng = np.random.default_rng(seed)
    w = rand_weights(layer, rng)
    x = rng.integers(0, 16, size=layer.in_size)
    sched = build_schedule(layer, n, w)
    got_row = execute_clear(sched, pack_input(layer, n, x))
    got = got_row[sched.out_slots]
    want = layer_linear_oracle(layer, w, x)
    return sched, got, want


CASES = [
    LayerSpec(0, "conv", c_in=1, c_out=4, x_w=8, x_h=8, k_s=3, s_s=1),
    LayerSpec(1, "conv", c_in=4, c_out=8, x_w=8, x_h=8, k_s=3, s_s=2),
    LayerSpec(2, "conv", c_in=8, c_out=8, x_w=4, x_h=4, k_s=3, s_s=1),
    LayerSpec(3, "dwconv", c_in=8, c_out=8, x_w=8, x_h=8, k_s=3, s_s=1),
    LayerSpec(4, "conv", c_in=8, c_out=16, x_w=8, x_h=8, k_s=1, s_s=1),
    LayerSpec(5, "fc", c_in=128, c_out=10, x_w=1, x_h=1),
    LayerSpec(6, "fc", c_in=64, c_out=64, x_w=1, x_h=1),
    LayerSpec(7, "conv", c_in=3, c_out=5, x_w=6, x_h=4, k_s=3, s_s=1),
    LayerSpec(8, "conv", c_in=2, c_out=2, x_w=5, x_h=5, k_s=5, s_s=2),
]


@pytest.mark.parametrize("layer", CASES, ids=lambda l: f"L{l.index}-{l.kind}")
def test_schedule_computes_the_linear_map(layer):
    for seed in (0, 1):
        _, got, want = run_layer(layer, 2048, seed=seed)
        assert np.array_equal(got, want)


def test_schedule_counts_match_formula():
    for layer in CASES:
        sched = build_schedule(layer, 2048, rand_weights(
            layer, np.random.default_rng(0)))
        assert sched.counts() == extract_op_counts(layer, 2048)


def test_fc_bsgs_counts_against_schedule_enumeration():
    layer = LayerSpec(0, "fc", c_in=64, c_out=64, x_w=1, x_h=1)
    counts = extract_op_counts(layer, 4096)
    sched = build_schedule(layer, 4096,
                           rand_weights(layer, np.random.default_rng(1)))
    assert counts == sched.counts()
    assert counts.simd_mults == 64
    assert counts.rotations == (8 - 1) + (8 - 1)
    assert counts.adds == 63


def test_trivial_1x1_single_channel_conv():
    layer = LayerSpec(0, "conv", c_in=1, c_out=1, x_w=8, x_h=8, k_s=1, s_s=1)
    counts = extract_op_counts(layer, 2048)
    assert counts.simd_mults == 1
    assert counts.rotations == 0
    assert counts.adds == 0


def test_depthwise_fewer_rotations_than_pointwise():
    dw = LayerSpec(0, "dwconv", c_in=16, c_out=16, x_w=8, x_h=8, k_s=3, s_s=1)
    pw = LayerSpec(1, "conv", c_in=16, c_out=16, x_w=8, x_h=8, k_s=1, s_s=1)
    c_dw = extract_op_counts(dw, 2048)
    c_pw = extract_op_counts(pw, 2048)
    assert c_dw.rotations < c_pw.rotations
    # same output size: 16 channels of 8x8
    assert dw.out_size == pw.out_size


def test_counts_deterministic_and_weight_independent():
    layer = CASES[1]
    rng = np.random.default_rng(9)
    s1 = build_schedule(layer, 2048, rand_weights(layer, rng))
    s2 = build_schedule(layer, 2048, rand_weights(layer, rng))
    assert s1.counts() == s2.counts()
    assert [op[:1] for op in s1.ops] == [op[:1] for op in s2.ops]


def test_packing_infeasible_raises():
    big = LayerSpec(0, "conv", c_in=64, c_out=64, x_w=32, x_h=32, k_s=3, s_s=1)
    with pytest.raises(ParameterError):
        extract_op_counts(big, 1024)


def test_layerspec_fc_normalization():
    fc = LayerSpec(0, "fc", c_in=10, c_out=4, x_w=9, x_h=9, k_s=7, s_s=3)
    assert fc.k_s == 1 and fc.s_s == 0 and fc.x_w == 1 and fc.x_h == 1


def test_network_spec_shape_chaining():
    layers = [
        LayerSpec(0, "conv", 1, 4, 8, 8, k_s=3, s_s=1),
        LayerSpec(1, "conv", 4, 8, 8, 8, k_s=3, s_s=2),
        LayerSpec(2, "fc", 8 * 4 * 4, 10, 1, 1),
    ]
    NetworkSpec(name="ok", layers=layers)  # no raise
    with pytest.raises(ConstructionError):
        NetworkSpec(name="bad", layers=[
            LayerSpec(0, "conv", 1, 4, 8, 8, k_s=3, s_s=1),
            LayerSpec(1, "conv", 8, 8, 8, 8, k_s=3, s_s=1),
        ])


def test_slot_maps_consistent():
    layer = CASES[1]
    n = 2048
    idx_in = input_slots(layer, n)
    assert len(set(idx_in.tolist())) == layer.in_size
    idx_out = output_slots(layer, n)
    assert len(set(idx_out.tolist())) == layer.out_size
    assert idx_in.max() < n // 2 and idx_out.max() < n // 2
