"""Matching layer, flow merge and refinement decoder behavior."""

import numpy as np
import pytest

from rgbtreg.autodiff import Tensor, tsum
from rgbtreg.correspondence import CorrespondencePair
from rgbtreg.errors import ContractError
from rgbtreg.flow import (
    FlowDecoder,
    FlowField,
    FlowRefineBlock,
    WeightedFlowMerge,
    downscale_flow,
    forward_backward_residual,
    grid_coords,
    hard_argmax_flow,
    matching_layer,
    merge_flows,
)
from rgbtreg.gradcheck import gradcheck
from rgbtreg.netops import upsample2x


def distinctive_features(rng, c, h, w, strength=10.0):
    """Feature maps whose per-position patterns are nearly orthogonal, so the
    best match is unambiguous."""
    return rng.normal(size=(c, h, w)) * strength


def test_matching_layer_recovers_integer_shift(rng):
    c, h, w = 32, 8, 8
    query = distinctive_features(rng, c, h, w)
    dy, dx = 2, 1
    # memory[p + (dy, dx)] == query[p], so the flow at p should be (dx, dy)
    memory = np.roll(query, shift=(dy, dx), axis=(1, 2))
    flow = matching_layer(Tensor(query), Tensor(memory), temperature=0.05).data
    rows, cols = slice(0, h - dy), slice(0, w - dx)
    np.testing.assert_allclose(flow[0][rows, cols], dx, atol=1e-6)
    np.testing.assert_allclose(flow[1][rows, cols], dy, atol=1e-6)


def test_matching_layer_agrees_with_hard_argmax(rng):
    c, h, w = 32, 8, 8
    query = distinctive_features(rng, c, h, w)
    memory = np.roll(query, shift=(-3, 2), axis=(1, 2))
    soft = matching_layer(Tensor(query), Tensor(memory), temperature=0.05).data
    hard = hard_argmax_flow(query, memory)
    np.testing.assert_allclose(soft, hard, atol=1e-4)


def test_matching_layer_default_temperature_is_sqrt_c(rng):
    feats_a = Tensor(rng.normal(size=(16, 4, 4)))
    feats_b = Tensor(rng.normal(size=(16, 4, 4)))
    default = matching_layer(feats_a, feats_b).data
    explicit = matching_layer(feats_a, feats_b, temperature=4.0).data
    np.testing.assert_array_equal(default, explicit)


def test_matching_layer_probability_rows_reach_all_positions(rng):
    """A uniform correlation gives the expected coordinate of the grid center."""
    const = Tensor(np.ones((4, 3, 3)))
    flow = matching_layer(const, const, temperature=1.0).data
    coords = grid_coords(3, 3)
    center = coords.mean(axis=0)
    base = coords.T.reshape(2, 3, 3)
    np.testing.assert_allclose(flow[0], center[0] - base[0], atol=1e-12)
    np.testing.assert_allclose(flow[1], center[1] - base[1], atol=1e-12)


def test_matching_layer_contract_errors(rng):
    a = Tensor(rng.normal(size=(4, 4, 4)))
    b = Tensor(rng.normal(size=(4, 5, 5)))
    with pytest.raises(ContractError):
        matching_layer(a, b)
    with pytest.raises(ContractError):
        matching_layer(a, a, temperature=0.0)


def test_matching_layer_gradcheck(rng):
    a = Tensor(rng.normal(size=(6, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(6, 3, 3)), requires_grad=True)
    mask = Tensor(rng.normal(size=(2, 3, 3)))
    for target in (a, b):
        ok, err = gradcheck(lambda: tsum(matching_layer(a, b) * mask), target, max_checks=25)
        assert ok, err


def test_merge_flows_endpoints(rng):
    a = Tensor(rng.normal(size=(2, 4, 4)))
    b = Tensor(rng.normal(size=(2, 4, 4)))
    only_a = merge_flows(a, b, Tensor(np.ones((1, 1, 1))), Tensor(np.zeros((1, 1, 1))))
    np.testing.assert_array_equal(only_a.data, a.data)
    half = merge_flows(a, b, Tensor(np.full((1, 1, 1), 0.5)), Tensor(np.full((1, 1, 1), 0.5)))
    np.testing.assert_allclose(half.data, 0.5 * (a.data + b.data), rtol=1e-12)


def test_merge_weights_receive_gradient(rng):
    merge = WeightedFlowMerge()
    a = Tensor(rng.normal(size=(2, 4, 4)))
    b = Tensor(rng.normal(size=(2, 4, 4)))
    ok, err = gradcheck(lambda: tsum(merge(a, b)), merge.weight_local)
    assert ok, err


def test_refine_block_at_init_is_exact_doubling(rng):
    block = FlowRefineBlock(rng, hidden=8)
    flow = Tensor(rng.normal(size=(2, 4, 4)))
    out = block(flow)
    want = (upsample2x(flow) * 2.0).data
    np.testing.assert_array_equal(out.data, want)


def test_refine_block_doubles_constant_flow_exactly(rng):
    block = FlowRefineBlock(rng, hidden=8)
    flow = Tensor(np.stack([np.full((4, 4), 1.0), np.full((4, 4), -0.5)]))
    out = block(flow).data
    np.testing.assert_allclose(out[0], 2.0, atol=1e-12)
    np.testing.assert_allclose(out[1], -1.0, atol=1e-12)


def test_refine_block_gradcheck(rng):
    block = FlowRefineBlock(rng, hidden=4)
    # give the zero-initialized conv some weights so its path is exercised
    block.conv3.w.data[:] = rng.normal(size=block.conv3.w.shape) * 0.1
    flow = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    mask = Tensor(rng.normal(size=(2, 6, 6)))
    ok, err = gradcheck(lambda: tsum(block(flow) * mask), flow, max_checks=18)
    assert ok, err


def test_decoder_pyramid_scales_and_shapes(rng):
    decoder = FlowDecoder(rng, hidden=8, levels=5)
    local = CorrespondencePair(
        v_to_t=Tensor(rng.normal(size=(16, 2, 3))), t_to_v=Tensor(rng.normal(size=(16, 2, 3)))
    )
    global_ = CorrespondencePair(
        v_to_t=Tensor(rng.normal(size=(16, 2, 3))), t_to_v=Tensor(rng.normal(size=(16, 2, 3)))
    )
    pyramid, trace = decoder(local, global_)
    assert pyramid.scales == [16, 8, 4, 2, 1]
    shapes = [lvl.shape for lvl in pyramid.levels]
    assert shapes == [(2, 4, 6), (2, 8, 12), (2, 16, 24), (2, 32, 48), (2, 64, 96)]
    assert trace["merged"].shape == (2, 2, 3)


def test_decoder_at_init_propagates_merged_flow(rng):
    """With zero-initialized refinement convs the full-resolution flow is the
    merged matching flow upsampled with values scaled by 32."""
    decoder = FlowDecoder(rng, hidden=8, levels=5)
    feats = Tensor(distinctive_features(rng, 16, 2, 2))
    pair = CorrespondencePair(v_to_t=feats, t_to_v=feats)
    pyramid, trace = decoder(pair, pair)
    merged = trace["merged"].data
    # identical features give a constant merged field, and every refinement
    # level at init just doubles it
    assert np.allclose(merged, merged[:, :1, :1])
    want = np.broadcast_to(merged[:, :1, :1] * 32, pyramid.finest().shape)
    np.testing.assert_allclose(pyramid.finest().data, want, atol=1e-9)


def test_forward_backward_residual_near_zero_for_consistent_pair(rng):
    c, h, w = 32, 8, 8
    query = distinctive_features(rng, c, h, w)
    pair = CorrespondencePair(v_to_t=Tensor(query), t_to_v=Tensor(query))
    residual = forward_backward_residual(pair)
    assert np.abs(residual).max() < 0.2


def test_flow_field_validates_shape():
    with pytest.raises(ContractError):
        FlowField(np.zeros((3, 4, 4)))
    field = FlowField(np.zeros((2, 4, 4)), scale=2)
    assert field.scale == 2


def test_downscale_flow_constant():
    field = FlowField(np.stack([np.full((8, 12), 4.0), np.full((8, 12), -2.0)]))
    down = downscale_flow(field, 2)
    assert down.scale == 2
    np.testing.assert_array_equal(down.data[0], np.full((4, 6), 2.0))
    np.testing.assert_array_equal(down.data[1], np.full((4, 6), -1.0))


def test_downscale_flow_matches_block_mean(rng):
    data = rng.normal(size=(2, 16, 24))
    down = downscale_flow(FlowField(data), 4)
    expected = data.reshape(2, 4, 4, 6, 4).mean(axis=(2, 4)) / 4.0
    np.testing.assert_allclose(down.data, expected, atol=1e-12)
    same = downscale_flow(FlowField(data), 1)
    np.testing.assert_array_equal(same.data, data)


def test_downscale_flow_requires_divisible_dims():
    with pytest.raises(ContractError):
        downscale_flow(FlowField(np.zeros((2, 9, 12))), 2)
