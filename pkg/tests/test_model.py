import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lpgflow import numerics as nx
from lpgflow.errors import ContractViolation, DimensionMismatch
from lpgflow.model import (DiT, LoraAdapter, attention_scores, count_trainable, init_prompt_tokens,
                           left_mass, lora_apply, lora_merge, patchify, pool_mask, rope_angles,
                           rope_apply, unpatchify)

from conftest import perturb, random_inputs, tiny_config


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 4]))
def test_patchify_roundtrip(gh, gw, c, p):
    x = np.random.default_rng(gh * 7 + gw).standard_normal((2, gh * p, gw * p, c)).astype(np.float32)
    tokens, pos = patchify(x, p)
    assert tokens.shape == (2, gh * gw, p * p * c)
    np.testing.assert_array_equal(unpatchify(tokens, p, gh * p, gw * p).data, x)
    # the first token is the top-left patch, flattened row-major
    np.testing.assert_array_equal(tokens.data[0, 0], x[0, :p, :p].reshape(-1))
    assert pos[-1].tolist() == [gh - 1, gw - 1]


def test_positions_run_continuously_across_seam():
    _, pos = patchify(np.zeros((1, 8, 16, 7)), 4)
    # 2 x 4 grid: right-half tokens keep counting columns from 2
    assert pos[:, 1].tolist() == [0, 1, 2, 3, 0, 1, 2, 3]


def test_pool_mask_averages_patches():
    m = np.zeros((1, 4, 8, 1))
    m[0, :, 4:] = 1
    m[0, 0, 4] = 0
    np.testing.assert_allclose(pool_mask(m, 4), [[0.0, 15 / 16]])


def explicit_rope(x, pos, base):
    """Rotate each (2j, 2j+1) pair by an angle built independently of the module."""
    hd = x.shape[-1]
    pairs = hd // 2
    n_row = pairs // 2
    n_col = pairs - n_row
    out = np.empty_like(x, dtype=np.float64)
    for t in range(x.shape[0]):
        for j in range(pairs):
            if j < n_row:
                theta = pos[t, 0] * base ** (-j / n_row)
            else:
                theta = pos[t, 1] * base ** (-(j - n_row) / n_col)
            a, b = x[t, 2 * j], x[t, 2 * j + 1]
            out[t, 2 * j] = a * np.cos(theta) - b * np.sin(theta)
            out[t, 2 * j + 1] = a * np.sin(theta) + b * np.cos(theta)
    return out


def test_rope_matches_explicit_rotation(rng):
    pos = np.array([[0, 0], [1, 3], [2, 5], [0, 7]])
    q, k = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    with nx.precision(np.float64):
        rq, rk = rope_apply(q, k, pos, base=100.0)
    np.testing.assert_allclose(rq.data, explicit_rope(q, pos, 100.0), atol=1e-12)
    np.testing.assert_allclose(rk.data, explicit_rope(k, pos, 100.0), atol=1e-12)


@given(st.integers(-5, 5), st.integers(-5, 5))
def test_rope_scores_depend_on_relative_position(dr, dc):
    rng = np.random.default_rng(0)
    q, k = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    with nx.precision(np.float64):
        def score(pq, pk):
            rq, _ = rope_apply(q, q, np.array([pq]))
            _, rk = rope_apply(k, k, np.array([pk]))
            return float((rq.data @ rk.data.T)[0, 0])
        assert score((3, 4), (1, 2)) == pytest.approx(score((3 + dr, 4 + dc), (1 + dr, 2 + dc)), abs=1e-9)


def test_rope_splits_rows_then_columns():
    ang = rope_angles(np.array([[2, 0], [0, 3]]), 8, base=100.0)
    np.testing.assert_allclose(ang[0], [2.0, 0.2, 0.0, 0.0])
    np.testing.assert_allclose(ang[1], [0.0, 0.0, 3.0, 0.3])


def test_lora_apply_matches_numpy(rng):
    x = rng.standard_normal((5, 6))
    w0, bias = rng.standard_normal((6, 4)), rng.standard_normal(4)
    a, b = rng.standard_normal((2, 6)), rng.standard_normal((4, 2))
    with nx.precision(np.float64):
        out = lora_apply(x, w0, a, b, 0.5, bias=bias).data
    np.testing.assert_allclose(out, x @ w0 + bias + 0.5 * x @ a.T @ b.T, atol=1e-12)


def test_lora_apply_rejects_mismatched_factors(rng):
    with pytest.raises(ContractViolation):
        lora_apply(np.ones((1, 4)), np.ones((4, 4)), np.ones((2, 4)), np.ones((4, 3)), 1.0)
    with pytest.raises(DimensionMismatch):
        lora_apply(np.ones((1, 4)), np.ones((4, 4)), np.ones((2, 5)), np.ones((4, 2)), 1.0)


def test_fresh_adapter_is_identity(rng, tiny):
    model = perturb(DiT(tiny, seed=3), rng)
    adapter = LoraAdapter.create(tiny, "colorize", rng)
    inputs = random_inputs(rng)
    np.testing.assert_array_equal(model(**inputs).data, model(**inputs, adapter=adapter).data)


def test_merge_sums_deltas(rng, tiny):
    model = perturb(DiT(tiny, seed=3), rng)
    ads = [LoraAdapter.create(tiny, t, rng, scale=s) for t, s in (("colorize", 1.0), ("deblur", 0.5))]
    for ad in ads:
        for _, b in ad.factors.values():
            b.data = rng.normal(0, 0.1, b.shape).astype(np.float32)
    merged = lora_merge(ads)
    assert merged.rank == 2 * tiny.lora_rank
    x = rng.standard_normal((3, tiny.hidden_dim)).astype(np.float32)
    site = "blocks.0.q"
    w0 = model.params[site + ".w"]
    expect = x @ w0.data + sum(ad.scale * x @ ad.factors[site][0].data.T @ ad.factors[site][1].data.T
                               for ad in ads)
    a, b = merged.factors[site]
    got = lora_apply(x, w0, a, b, merged.scale).data
    np.testing.assert_allclose(got, expect, atol=1e-5)


def test_merge_rejects_mismatched_widths(rng):
    a = LoraAdapter.create(tiny_config(), "colorize", rng)
    b = LoraAdapter.create(tiny_config(hidden_dim=32), "deblur", rng)
    with pytest.raises((ContractViolation, DimensionMismatch)):
        lora_merge([a, b])


def test_adapter_compatibility(rng, tiny):
    ad = LoraAdapter.create(tiny, "colorize", rng)
    ad.check_compatible(tiny)
    with pytest.raises(DimensionMismatch):
        ad.check_compatible(tiny_config(hidden_dim=32))
    with pytest.raises(DimensionMismatch):
        ad.check_compatible(tiny_config(num_layers=2))


def test_fresh_model_outputs(rng):
    inputs = random_inputs(rng)
    # velocity head: output projection and skip path both start at zero
    out = DiT(tiny_config(parameterization="velocity"))(**inputs)
    assert out.shape == inputs["z_t"].shape
    np.testing.assert_array_equal(out.data, 0.0)
    # data head: the z0 estimate starts as the masked latent
    out = DiT(tiny_config())(**inputs).data
    t = np.maximum(inputs["t"], 0.05)[:, None, None, None]
    np.testing.assert_allclose(out, (inputs["z_t"] - inputs["z0_masked"]) / t, rtol=1e-5, atol=1e-5)


def test_data_head_is_exact_on_known_pixels(rng):
    z0 = rng.uniform(0, 1, (2, 8, 16, 3)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    mask = np.zeros((2, 8, 16, 1), dtype=np.float32)
    mask[:, :, 8:] = 1
    t = np.array([0.3, 0.9])
    zt = (1 - t[:, None, None, None]) * z0 + t[:, None, None, None] * eps
    v = DiT(tiny_config())(zt, z0 * (1 - mask), mask, np.ones((2, 2), dtype=int), t).data
    np.testing.assert_allclose(v[:, :, :8], (eps - z0)[:, :, :8], atol=1e-4)


def test_forward_validates_inputs(rng, tiny):
    model = DiT(tiny)
    inputs = random_inputs(rng)
    bad = dict(inputs, mask=inputs["mask"][:, :, :4])
    with pytest.raises(ContractViolation):
        model(**bad)
    with pytest.raises(ContractViolation):
        model(**dict(inputs, t=np.array([0.5, 1.5])))


def test_load_state_dict_checks_shapes(tiny):
    model = DiT(tiny)
    state = DiT(tiny_config(hidden_dim=32)).state_dict()
    with pytest.raises(DimensionMismatch):
        model.load_state_dict(state)


def test_attention_rows_and_left_mass(rng, tiny):
    model = perturb(DiT(tiny, seed=1), rng, std=0.3)
    probs, lm = attention_scores(model, random_inputs(rng), layer=0, head=1)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
    assert lm.shape == (2, 4)   # 2 x 4 patch grid, right half has 4 tokens
    assert np.all((lm >= 0) & (lm <= 1))
    with pytest.raises(ContractViolation):
        attention_scores(model, random_inputs(rng), layer=3, head=0)


def test_left_mass_oracle():
    # 2 condition tokens then a 1 x 4 grid: columns 0,1 left, 2,3 right
    probs = np.zeros((6, 6))
    probs[4] = [0.1, 0.1, 0.2, 0.3, 0.2, 0.1]
    probs[5] = [0.0, 0.0, 0.0, 0.0, 0.5, 0.5]
    np.testing.assert_allclose(left_mass(probs, 2, 4), [0.5, 0.0])


def test_prompt_tokens_start_at_description_mean(tiny):
    table = np.arange(12, dtype=np.float32).reshape(4, 3)
    pt = init_prompt_tokens([1, 3], table, num_prompt_tokens=5)
    assert pt.count == 5
    np.testing.assert_allclose(pt.tokens.data, np.tile([6.0, 7.0, 8.0], (5, 1)))


def test_prompt_mode_extends_sequence(rng, tiny):
    model = perturb(DiT(tiny), rng)
    pt = init_prompt_tokens([1, 2], model.params["tok.embed"], tiny.num_prompt_tokens)
    rec = []
    model(**random_inputs(rng), prompt=pt, record=rec)
    att, n_cond = rec[0]
    assert n_cond == tiny.num_prompt_tokens + 3


def test_trainable_counts(rng, tiny):
    model = DiT(tiny)
    model.set_trainable(True)
    full = count_trainable(model)
    model.set_trainable(False)
    ad = LoraAdapter.create(tiny, "colorize", rng)
    lora = count_trainable(model, adapter=ad)
    assert lora == ad.num_parameters() < full
    d, r = tiny.hidden_dim, tiny.lora_rank
    f = d * tiny.mlp_ratio
    assert lora == tiny.num_layers * r * (4 * 2 * d + 2 * (d + f))
