import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from coca_lab.errors import InputError, RangeError
from coca_lab.evaluation import (
    DEFAULT_PASSKEY_SAMPLES,
    DEFAULT_STRIDE,
    SCORE_WINDOW,
    _windows,
    fillers_needed,
    gen_passkey_sample,
    greedy_generate,
    passkey_suite,
    ppl_curve,
    score_passkey,
    sliding_window_nll,
    sliding_window_ppl,
)
from coca_lab.model import init_model, lm_loss, preset
from coca_lab.templates import DESK, STANDARD, PASSKEY_MAX, PASSKEY_MIN
from coca_lab.tokenizer import encode


class UniformModel(torch.nn.Module):
    def __init__(self, vocab=259):
        super().__init__()
        self.vocab = vocab

    def forward(self, tokens, caches=None, use_cache=False):
        return torch.zeros(*tokens.shape, self.vocab), None


@pytest.fixture(scope="module")
def tiny():
    return init_model(preset("tiny", max_seq=32, seed=11)).eval()


def _doc(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, n)


def test_protocol_constants():
    assert DEFAULT_STRIDE == 256
    assert DEFAULT_PASSKEY_SAMPLES == 100
    assert SCORE_WINDOW == 64
    assert (PASSKEY_MIN, PASSKEY_MAX) == (10000, 99999)


@given(n=st.integers(2, 300), ctx=st.integers(2, 64), data=st.data())
def test_property_windows_score_each_target_at_most_once(n, ctx, data):
    if n < ctx:
        return
    stride = data.draw(st.integers(1, ctx))
    seen = []
    for b, e, first in _windows(n, ctx, stride):
        assert e - b <= ctx and b < first <= e
        seen += range(first, e)
    assert len(seen) == len(set(seen))
    if stride < ctx:
        assert sorted(seen) == list(range(1, n))
    else:
        # disjoint windows: every token except window starts
        assert sorted(seen) == [i for i in range(1, n) if i % ctx]


def test_uniform_model_gives_vocab_size():
    for stride in (1, 5, 16):
        assert sliding_window_ppl(UniformModel(), _doc(100), 16, stride) == pytest.approx(259)


def test_stride_equal_context_is_partition(tiny):
    doc = torch.as_tensor(_doc(96))
    ppl = sliding_window_ppl(tiny, doc, 32, 32)
    with torch.no_grad():
        ce = [lm_loss(tiny, doc[i : i + 32][None]).item() for i in range(0, 96, 32)]
    assert ppl == pytest.approx(math.exp(np.mean(ce)), rel=1e-6)


def test_stride_one_on_single_window_matches_direct(tiny):
    doc = torch.as_tensor(_doc(32, 1))
    with torch.no_grad():
        direct = lm_loss(tiny, doc[None]).item()
    total, count = sliding_window_nll(tiny, doc, 32, 1)
    assert count == 31
    assert total / count == pytest.approx(direct, rel=1e-6)


def test_batching_invariance(tiny):
    doc = _doc(150, 2)
    a = sliding_window_nll(tiny, doc, 32, 8, batch_size=1)
    b = sliding_window_nll(tiny, doc, 32, 8, batch_size=64)
    assert a[1] == b[1]
    assert abs(a[0] - b[0]) / a[1] < 1e-6


def test_sliding_window_errors(tiny):
    with pytest.raises(InputError):
        sliding_window_ppl(tiny, _doc(10), 32, 8)
    with pytest.raises(InputError):
        sliding_window_ppl(tiny, _doc(64), 32, 0)


def test_ppl_curve(tiny):
    docs = [_doc(128, i) for i in range(2)]
    curve = ppl_curve(tiny, docs[:1], [32], stride=16)
    assert curve.records[0]["ppl"] == pytest.approx(sliding_window_ppl(tiny, docs[0], 32, 16))
    c1 = ppl_curve(tiny, docs, [32, 64, 128])
    c2 = ppl_curve(tiny, docs, [128, 64, 32])
    assert c1.records == c2.records
    assert [r["context"] for r in c1.records] == [32, 64, 128]
    assert all(r["ppl"] > 0 and r["n_docs"] == 2 for r in c1.records)
    assert tiny.table is tiny.base_table
    with pytest.raises(InputError):
        ppl_curve(tiny, [], [32])


def test_minimal_prompt_has_one_filler_each_side():
    skeleton = len(encode(STANDARD.render(PASSKEY_MIN, 1, 0)))
    s = gen_passkey_sample(skeleton, np.random.default_rng(0))
    assert s.n_fillers == 2 and s.insert_index == 1
    assert s.text.count(STANDARD.filler) == 2
    with pytest.raises(InputError):
        gen_passkey_sample(skeleton - 1, np.random.default_rng(0))


@given(target=st.integers(400, 3000), seed=st.integers(0, 2**31 - 1))
def test_property_sample_structure(target, seed):
    s = gen_passkey_sample(target, np.random.default_rng(seed))
    assert len(s.prompt_tokens) >= target
    assert PASSKEY_MIN <= s.passkey <= PASSKEY_MAX
    assert s.text.count(str(s.passkey)) == 2
    assert s.text == STANDARD.render(s.passkey, s.insert_index, s.n_fillers - s.insert_index)
    assert 1 <= s.insert_index < s.n_fillers
    # one fewer filler would fall short of the target
    assert len(encode(STANDARD.render(s.passkey, 1, s.n_fillers - 2))) < target or s.n_fillers == 2
    again = gen_passkey_sample(target, np.random.default_rng(seed))
    assert again == s


def test_same_length_samples_differ_only_in_key_and_position():
    rng = np.random.default_rng(3)
    a, b = gen_passkey_sample(800, rng), gen_passkey_sample(800, rng)
    assert a.n_fillers == b.n_fillers
    strip = lambda s: s.text.replace(str(s.passkey), "K")
    assert sorted(strip(a).split("\n")) == sorted(strip(b).split("\n"))


def test_passkeys_uniform_chi_square():
    rng = np.random.default_rng(7)
    keys = np.array([gen_passkey_sample(400, rng).passkey for _ in range(1000)])
    counts = np.histogram(keys, bins=10, range=(PASSKEY_MIN, PASSKEY_MAX + 1))[0]
    assert stats.chisquare(counts).pvalue > 0.001


def test_insert_positions_uniform():
    rng = np.random.default_rng(8)
    s = [gen_passkey_sample(1200, rng) for _ in range(1000)]
    n = s[0].n_fillers
    counts = np.bincount([x.insert_index for x in s], minlength=n)[1:]
    assert len(counts) == n - 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_score_passkey_examples():
    assert score_passkey(encode("22841 is the pass key"), 22841)
    assert not score_passkey(encode("228.The grass is green. The sky is blue."), 22841)
    assert not score_passkey([], 22841)
    late = encode("x" * 64 + "22841")
    assert not score_passkey(late, 22841)
    assert score_passkey(encode("x" * 59 + "22841") + encode("tail" * 50), 22841)


def test_greedy_generate_matches_uncached(tiny):
    prompt = torch.as_tensor(_doc(10, 4))[None]
    gen = greedy_generate(tiny, prompt, 8)
    seq = prompt
    with torch.no_grad():
        for _ in range(8):
            nxt = tiny(seq)[0][:, -1].argmax(-1, keepdim=True)
            seq = torch.cat([seq, nxt], 1)
    assert torch.equal(gen, seq[:, 10:])


def test_passkey_suite_on_untrained_model(tiny):
    samples = []
    curve = passkey_suite(tiny, [64, 128], n_per_length=3, ntk_kappa=4.0, template=DESK, gen_tokens=8,
                          samples_out=samples)
    assert [r["length"] for r in curve.records] == [64, 128]
    assert all(0.0 <= r["accuracy"] <= 1.0 and r["n"] == 3 for r in curve.records)
    assert len(samples) == 6
    assert tiny.table is tiny.base_table
    again = passkey_suite(tiny, [64, 128], n_per_length=3, ntk_kappa=4.0, template=DESK, gen_tokens=8)
    assert again.records == curve.records
    with pytest.raises(RangeError):
        passkey_suite(tiny, [200], n_per_length=1, ntk_kappa=4.0, template=DESK)
    with pytest.raises(InputError):
        passkey_suite(tiny, [64], n_per_length=0, template=DESK)


def test_fillers_needed_monotone():
    ns = [fillers_needed(t, DESK) for t in range(60, 400, 7)]
    assert ns == sorted(ns)
