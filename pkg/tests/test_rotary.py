import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from coca_lab.errors import ConfigError, RangeError
from coca_lab.rotary import RotaryTable, apply_rotation, as_complex, build_rotary_table, ntk_rescale, scaled_base


def test_frequencies_match_closed_form():
    tab = build_rotary_table(8, 10000.0, 4)
    want = [10000.0 ** (-2 * j / 8) for j in range(4)]
    np.testing.assert_allclose(tab.freqs, want, rtol=0, atol=1e-15)
    assert tab.freqs[0] == 1.0


def test_table_values():
    tab = build_rotary_table(4, 100.0, 3)
    for m in range(3):
        for j, th in enumerate([1.0, 0.1]):
            assert tab.cos_cache[m, j] == pytest.approx(math.cos(m * th), abs=1e-15)
            assert tab.sin_cache[m, j] == pytest.approx(math.sin(m * th), abs=1e-15)


def test_odd_dim_rejected():
    with pytest.raises(ConfigError):
        build_rotary_table(7)


def test_rotation_is_complex_multiplication(rng):
    tab = build_rotary_table(6, 10000.0, 10)
    x = rng.standard_normal((10, 2, 6))
    out = apply_rotation(x, tab, 0)
    z = as_complex(x) * np.exp(1j * np.arange(10)[:, None, None] * tab.freqs)
    np.testing.assert_allclose(as_complex(out), z, atol=1e-13)


def test_offset_and_capacity(rng):
    tab = build_rotary_table(4, 10000.0, 8)
    x = rng.standard_normal((8, 1, 4))
    full = apply_rotation(x, tab, 0)
    np.testing.assert_allclose(apply_rotation(x[5:], tab, 5), full[5:], atol=1e-15)
    with pytest.raises(RangeError):
        apply_rotation(x[:4], tab, 5)


def test_torch_matches_numpy(rng):
    tab = build_rotary_table(8, 10000.0, 12)
    x = rng.standard_normal((2, 12, 3, 8))
    out_t = apply_rotation(torch.from_numpy(x), tab, 0).numpy()
    np.testing.assert_allclose(out_t, apply_rotation(x, tab, 0), atol=1e-12)


@given(
    m=st.integers(0, 300), n=st.integers(0, 300), shift=st.integers(0, 300),
    seed=st.integers(0, 2**31 - 1), half=st.integers(1, 8),
)
def test_score_depends_on_relative_distance_only(m, n, shift, seed, half):
    d = 2 * half
    r = np.random.default_rng(seed)
    q, k = r.standard_normal(d), r.standard_normal(d)
    tab = build_rotary_table(d, 10000.0, 1000)

    def score(a, b):
        qa = apply_rotation(q[None, None], tab, a)[0, 0]
        kb = apply_rotation(k[None, None], tab, b)[0, 0]
        return qa @ kb

    assert score(m, n) == pytest.approx(score(m + shift, n + shift), abs=1e-9)


@given(seed=st.integers(0, 2**31 - 1), pos=st.integers(0, 500))
def test_rotation_preserves_pair_norms(seed, pos):
    x = np.random.default_rng(seed).standard_normal((1, 1, 16))
    tab = build_rotary_table(16, 10000.0, 501)
    out = apply_rotation(x, tab, pos)
    np.testing.assert_allclose(np.abs(as_complex(out)), np.abs(as_complex(x)), rtol=1e-12)


def test_ntk_scaling():
    d = 64
    assert scaled_base(10000.0, 4.0, d) == pytest.approx(10000.0 * 4.0 ** (d / (d - 2)))
    base = build_rotary_table(d, 10000.0, 64)
    big = ntk_rescale(base, 64, 256)
    assert big.base == pytest.approx(scaled_base(10000.0, 4.0, d))
    assert big.max_pos >= 256
    # lowest frequency is stretched by exactly kappa
    assert base.freqs[-1] / big.freqs[-1] == pytest.approx(4.0, rel=1e-12)
    same = ntk_rescale(base, 64, 64)
    np.testing.assert_array_equal(same.freqs, base.freqs)


def test_extended_keeps_frequencies():
    tab = build_rotary_table(8, 500.0, 4)
    ext = tab.extended(20)
    assert ext.max_pos == 20
    np.testing.assert_array_equal(ext.freqs, tab.freqs)
    np.testing.assert_allclose(ext.cos_cache[:4], tab.cos_cache)
    assert isinstance(ext, RotaryTable)
