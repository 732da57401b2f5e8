"""Shape contracts, invariants and replay oracles for the band encoders."""

import numpy as np
import pytest

from rgbtreg.autodiff import Tensor, tsum
from rgbtreg.encoders import (
    ConvBlock,
    EncoderConfig,
    GlobalSelfEncoder,
    LocalFeatureEncoder,
    PyramidPoolTokens,
    TokenAttention,
    map_to_tokens,
    tokens_to_map,
)
from rgbtreg.errors import ConfigError, ContractError
from rgbtreg.gradcheck import gradcheck

from oracles import attention_stage_np, conv_block_np, conv_np, ppm_tokens_np

from conftest import toy_config

TOY = toy_config()


def test_config_defaults_validate():
    cfg = EncoderConfig().validate()
    assert cfg.stage_dims == (48, 96)
    assert cfg.corr_dims == (192, 384)
    assert cfg.heads == 4


def test_config_scaled_divides_channels():
    assert TOY.stage_dims == (6, 12)
    assert TOY.corr_dims == (24, 48)
    assert TOY.frb_hidden == 8
    assert TOY.heads == 2  # 6 is not divisible by 4
    assert EncoderConfig.scaled(4).heads == 4


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        EncoderConfig(stage_dims=(10, 96), heads=4).validate()


def test_config_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        EncoderConfig(self_ratios=((0, 2), (1,))).validate()


def test_token_map_round_trip(rng):
    x = Tensor(rng.normal(size=(5, 3, 4)))
    tokens = map_to_tokens(x)
    assert tokens.shape == (12, 5)
    back = tokens_to_map(tokens, 3, 4)
    np.testing.assert_array_equal(back.data, x.data)


def test_local_encoder_stage_shapes(rng):
    enc = LocalFeatureEncoder(rng, 3, TOY)
    s1, s2 = enc(Tensor(rng.normal(size=(3, 64, 96))))
    assert s1.shape == (6, 16, 24)
    assert s2.shape == (12, 8, 12)


def test_local_encoder_replay_oracle(rng):
    """Fixed weights, fixed input: the module must equal a straight-line
    numpy recomposition of its stages."""
    enc = LocalFeatureEncoder(rng, 3, TOY)
    p = {k: v.data for k, v in enc.named_params().items()}
    hf = rng.normal(size=(3, 32, 32)) * 0.2
    got = enc(Tensor(hf))[1].data

    x = conv_np(hf, p["embed1.w"], p["embed1.b"], stride=4, padding=0)
    x = conv_block_np(x, p, "block1", groups=x.shape[0])
    x = conv_np(x, p["embed2.w"], p["embed2.b"], stride=2, padding=3)
    x = conv_block_np(x, p, "block2", groups=x.shape[0])
    np.testing.assert_allclose(got, x, rtol=1e-9, atol=1e-10)


def test_conv_block_gradcheck(rng):
    block = ConvBlock(rng, 4, dw_kernel=3, mlp_ratio=2)
    x = Tensor(rng.normal(size=(4, 5, 5)), requires_grad=True)
    mask = Tensor(rng.normal(size=(4, 5, 5)))
    ok, err = gradcheck(lambda: tsum(block(x) * mask), x, max_checks=30)
    assert ok, err


def test_ppm_token_count_and_channels(rng):
    ppm = PyramidPoolTokens(rng, 5, (1, 2, 3))
    tokens = ppm(Tensor(rng.normal(size=(5, 12, 12))))
    assert tokens.shape == (1 + 4 + 9, 5)


def test_ppm_constant_map_gives_identical_tokens(rng):
    ppm = PyramidPoolTokens(rng, 4, (1, 2))
    tokens = ppm(Tensor(np.full((4, 8, 8), 0.7))).data
    np.testing.assert_allclose(tokens - tokens[0], 0.0, atol=1e-12)


def test_ppm_invariant_to_permutation_within_a_bin(rng):
    """Pooling averages each bin, so shuffling pixels inside one bin must
    leave every token unchanged."""
    ppm = PyramidPoolTokens(rng, 3, (2,))
    x = rng.normal(size=(3, 8, 8))
    shuffled = x.copy()
    # bin (0, 0) covers rows 0..3, cols 0..3; rotate its pixels
    block = shuffled[:, 0:4, 0:4].reshape(3, 16)
    shuffled[:, 0:4, 0:4] = np.roll(block, 5, axis=1).reshape(3, 4, 4)
    t1 = ppm(Tensor(x)).data
    t2 = ppm(Tensor(shuffled)).data
    np.testing.assert_allclose(t1, t2, atol=1e-12)


def test_ppm_matches_numpy_oracle(rng):
    ppm = PyramidPoolTokens(rng, 4, (1, 2, 4))
    p = {f"pool.{k}": v.data for k, v in ppm.named_params().items()}
    x = rng.normal(size=(4, 9, 9))
    got = ppm(Tensor(x)).data
    want = ppm_tokens_np(x, p, "pool", (1, 2, 4))
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_ppm_rejects_oversized_ratio(rng):
    ppm = PyramidPoolTokens(rng, 3, (4,))
    with pytest.raises(ContractError):
        ppm(Tensor(rng.normal(size=(3, 3, 8))))


def test_attention_single_memory_token_collapses_rows(rng):
    attn = TokenAttention(rng, 8, heads=2)
    queries = Tensor(rng.normal(size=(6, 8)))
    memory = Tensor(rng.normal(size=(1, 8)))
    out = attn(queries, memory).data
    np.testing.assert_allclose(out - out[0], 0.0, atol=1e-12)


def test_attention_rejects_bad_heads(rng):
    with pytest.raises(ConfigError):
        TokenAttention(rng, 6, heads=4)


def test_global_encoder_stage_shapes(rng):
    local = LocalFeatureEncoder(rng, 3, TOY)
    enc = GlobalSelfEncoder(rng, 3, TOY)
    img = Tensor(rng.normal(size=(3, 64, 96)) * 0.1)
    s1, s2 = enc(img, local(img))
    assert s1.shape == (6, 16, 24)
    assert s2.shape == (12, 8, 12)


def test_global_encoder_replay_oracle(rng):
    local = LocalFeatureEncoder(rng, 3, TOY)
    enc = GlobalSelfEncoder(rng, 3, TOY)
    p = {k: v.data for k, v in enc.named_params().items()}
    lf = rng.normal(size=(3, 32, 32)) * 0.2
    l1, l2 = local(Tensor(lf))
    got1, got2 = enc(Tensor(lf), (l1, l2))

    want1 = attention_stage_np(lf, p, "stage1", TOY.self_ratios[0], TOY.heads, infusion=l1.data)
    want2 = attention_stage_np(
        want1, p, "stage2", TOY.self_ratios[1], TOY.heads, infusion=l2.data
    )
    np.testing.assert_allclose(got1.data, want1, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(got2.data, want2, rtol=1e-9, atol=1e-9)


def test_global_encoder_rejects_mismatched_infusion(rng):
    enc = GlobalSelfEncoder(rng, 3, TOY)
    img = Tensor(rng.normal(size=(3, 64, 64)))
    bad = (Tensor(rng.normal(size=(6, 5, 5))), Tensor(rng.normal(size=(12, 8, 8))))
    with pytest.raises(ContractError):
        enc(img, bad)


def test_fitted_clamps_pool_grids_to_input():
    cfg = EncoderConfig().fitted(64, 64)
    assert cfg.self_ratios == ((12, 16), (6, 8))
    assert cfg.cross_ratios == ((3, 4), (1, 2))


def test_fitted_at_full_scale_changes_nothing():
    cfg = EncoderConfig()
    assert cfg.fitted(256, 320) == cfg


def test_fitted_rejects_tiny_inputs():
    with pytest.raises(ConfigError):
        EncoderConfig().fitted(16, 64)
