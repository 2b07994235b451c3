import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from coca_lab.attention import (
    AttentionCache,
    AttentionParams,
    CausalSelfAttention,
    attention_forward,
    causal_mask_softmax,
    coca_scores_fused,
    coca_scores_naive,
    fold_relu_t,
    rope_scores_baseline,
)
from coca_lab.errors import ConfigError, InputError, RangeError, StateError
from coca_lab.rotary import apply_rotation, as_complex, build_rotary_table

from oracles import coca_score_first_principles, rotate_vec


def _params(d_model=16, heads=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    ws = [torch.randn(d_model, d_model, generator=g, dtype=dtype) / math.sqrt(d_model) for _ in range(4)]
    return AttentionParams(*ws, n_heads=heads)


def test_fold_examples():
    t = np.array([1.0, -3.0, 3.0, 1.0])  # halves (1,-3) and (3,1)
    np.testing.assert_array_equal(fold_relu_t(t), [2.0, 0.0, 2.0, 0.0])
    tt = torch.tensor([[-1.0, -1.0]])
    assert fold_relu_t(tt).tolist() == [[0.0, 0.0]]
    with pytest.raises(ConfigError):
        fold_relu_t(np.zeros(3))


@given(seed=st.integers(0, 2**31 - 1), half=st.integers(1, 16))
def test_property_effective_key_collinear_with_query(seed, half):
    r = np.random.default_rng(seed)
    q, t = r.standard_normal(2 * half), r.standard_normal(2 * half)
    key = q * fold_relu_t(t)
    zq, zk = as_complex(q), as_complex(key)
    nz = np.abs(zk) > 0
    ang = np.angle(zk[nz] * np.conj(zq[nz]))
    assert np.all(np.abs(ang) < 1e-12)


def test_params_validation():
    w = torch.zeros(6, 6)
    with pytest.raises(ConfigError):
        AttentionParams(w, w, w, w, n_heads=4)  # 6 % 4
    with pytest.raises(ConfigError):
        AttentionParams(w, w, w, w, n_heads=2)  # head_dim 3 is odd
    with pytest.raises(ConfigError):
        AttentionParams(w, w, w, torch.zeros(6, 5), n_heads=3)
    with pytest.raises(ConfigError):
        AttentionParams(w, w, w, w, n_heads=3, score_scale=0.0)
    assert AttentionParams(w, w, w, w, n_heads=3).score_scale == pytest.approx(math.sqrt(2))


def test_scores_fused_naive_and_first_principles(rng):
    d, s = 8, 6
    tab = build_rotary_table(d, 10000.0, s)
    q = torch.from_numpy(rng.standard_normal((1, s, 1, d)))
    t = torch.from_numpy(rng.standard_normal((1, s, 1, d)))
    q_rot = apply_rotation(q, tab)
    t_rot = apply_rotation(fold_relu_t(t), tab)
    fused = coca_scores_fused(q, q_rot, t_rot, 2.0)
    naive = coca_scores_naive(q, q_rot, t_rot, 2.0)
    torch.testing.assert_close(fused, naive, rtol=0, atol=1e-13)
    for m in range(s):
        for n in range(s):
            want = coca_score_first_principles(q[0, m, 0].numpy(), t[0, n, 0].numpy(), m, n, 2.0)
            assert fused[0, 0, m, n].item() == pytest.approx(want, abs=1e-12)


def test_fused_gradients_match_naive(rng):
    shape = (2, 5, 3, 8)
    args = [torch.from_numpy(rng.standard_normal(shape)).requires_grad_() for _ in range(3)]
    g = torch.from_numpy(rng.standard_normal((2, 3, 5, 5)))
    (coca_scores_fused(*args, 1.5) * g).sum().backward()
    fused = [a.grad.clone() for a in args]
    for a in args:
        a.grad = None
    (coca_scores_naive(*args, 1.5) * g).sum().backward()
    for f, a in zip(fused, args):
        torch.testing.assert_close(f, a.grad, rtol=0, atol=1e-12)


def test_fused_gradcheck(rng):
    args = [torch.from_numpy(rng.standard_normal((1, 3, 2, 4))).requires_grad_() for _ in range(3)]
    assert torch.autograd.gradcheck(lambda a, b, c: coca_scores_fused(a, b, c, 1.1), args)


def test_baseline_scores_are_rope_dot_products(rng):
    d = 6
    q = rng.standard_normal((4, 1, d))
    k = rng.standard_normal((4, 1, d))
    tab = build_rotary_table(d, 10000.0, 4)
    sc = rope_scores_baseline(apply_rotation(q, tab), apply_rotation(k, tab), 1.0)
    for m in range(4):
        for n in range(4):
            want = rotate_vec(q[m, 0], m) @ rotate_vec(k[n, 0], n)
            assert sc[0, m, n] == pytest.approx(want, abs=1e-12)


def test_causal_mask_softmax():
    scores = torch.zeros(1, 3, 3)
    p = causal_mask_softmax(scores)
    torch.testing.assert_close(p[0], torch.tensor([[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]]))
    p2 = causal_mask_softmax(torch.zeros(1, 1, 4), query_offset=3)
    torch.testing.assert_close(p2[0, 0], torch.full((4,), 0.25))
    with pytest.raises(InputError):
        causal_mask_softmax(scores, -1)


def _reference_attention(x, params, variant, base=10000.0):
    """Per-token loop with explicit keys; no caches, no fused kernels."""
    x = x.numpy()
    s, dm = x.shape
    h, d = params.n_heads, params.head_dim
    wq, wt, wv, wo = (w.numpy() for w in (params.w_q, params.w_t, params.w_v, params.w_o))
    out = np.zeros((s, dm))
    for m in range(s):
        ctx = []
        for p in range(h):
            sl = slice(p * d, (p + 1) * d)
            qm = (wq @ x[m])[sl]
            scores = []
            for n in range(m + 1):
                tn = (wt @ x[n])[sl]
                if variant == "coca":
                    scores.append(coca_score_first_principles(qm, tn, m, n, params.score_scale, base))
                else:
                    scores.append(rotate_vec(qm, m, base) @ rotate_vec(tn, n, base) / params.score_scale)
            w = np.exp(np.array(scores) - max(scores))
            w /= w.sum()
            ctx.append(sum(w[n] * (wv @ x[n])[sl] for n in range(m + 1)))
        out[m] = wo @ np.concatenate(ctx)
    return out


@pytest.mark.parametrize("variant", ["coca", "baseline"])
@pytest.mark.parametrize("contraction", ["fused", "naive"])
def test_layer_matches_per_token_reference(rng, variant, contraction):
    params = _params(12, 3, seed=1)
    x = torch.from_numpy(rng.standard_normal((5, 12)))
    tab = build_rotary_table(4, 10000.0, 8)
    y, cache = attention_forward(x, params, tab, variant=variant, contraction=contraction)
    np.testing.assert_allclose(y.numpy(), _reference_attention(x, params, variant), atol=1e-12)
    assert cache.length == 5


@pytest.mark.parametrize("variant", ["coca", "baseline"])
def test_incremental_equals_batch(rng, variant):
    params = _params()
    x = torch.from_numpy(rng.standard_normal((2, 10, 16)))
    tab = build_rotary_table(8, 10000.0, 10)
    full, _ = attention_forward(x, params, tab, variant=variant)
    cache, outs = None, []
    for chunk in (x[:, :3], x[:, 3:4], x[:, 4:10]):
        y, cache = attention_forward(chunk, params, tab, cache, variant)
        outs.append(y)
    torch.testing.assert_close(torch.cat(outs, 1), full, rtol=0, atol=1e-12)


def test_future_tokens_do_not_leak(rng):
    params = _params()
    tab = build_rotary_table(8, 10000.0, 8)
    x = torch.from_numpy(rng.standard_normal((1, 8, 16)))
    x2 = x.clone()
    x2[:, 5:] += 1.0
    y1, _ = attention_forward(x, params, tab)
    y2, _ = attention_forward(x2, params, tab)
    torch.testing.assert_close(y1[:, :5], y2[:, :5], rtol=0, atol=0)
    assert not torch.allclose(y1[:, 5:], y2[:, 5:])


def test_cache_is_immutable_and_checked(rng):
    params = _params()
    tab = build_rotary_table(8, 10000.0, 4)
    x = torch.from_numpy(rng.standard_normal((1, 3, 16)))
    _, c1 = attention_forward(x, params, tab)
    _, c2 = attention_forward(x[:, :1], params, tab, c1)
    assert c1.length == 3 and c2.length == 4
    with pytest.raises(RangeError):
        attention_forward(x[:, :1], params, tab, c2)
    with pytest.raises(StateError):
        attention_forward(x[:, :1], params, build_rotary_table(4, 10000.0, 8))
    with pytest.raises(StateError):
        attention_forward(torch.cat([x, x]), params, tab, c1)
    with pytest.raises(StateError):
        AttentionCache(torch.zeros(1, 2, 2, 8), torch.zeros(1, 3, 2, 8))
    with pytest.raises(ConfigError):
        attention_forward(x, params, tab, variant="alibi")


def test_module_wraps_functional(rng):
    torch.manual_seed(0)
    mod = CausalSelfAttention(16, 2, "coca").double()
    tab = build_rotary_table(8, 10000.0, 6)
    x = torch.from_numpy(rng.standard_normal((1, 6, 16)))
    y, _ = mod(x, tab)
    y2, _ = attention_forward(x, mod.params(), tab)
    torch.testing.assert_close(y, y2)
    mod.contraction = "naive"
    torch.testing.assert_close(mod(x, tab)[0], y, rtol=0, atol=1e-12)
    with pytest.raises(ConfigError):
        CausalSelfAttention(16, 2, "nope")
