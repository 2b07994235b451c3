"""Sliding-window perplexity and passkey retrieval."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, RangeError
from .templates import STANDARD, PASSKEY_MAX, PASSKEY_MIN, PasskeyTemplate
from .tokenizer import decode, encode

DEFAULT_STRIDE = 256
DEFAULT_PASSKEY_SAMPLES = 100
SCORE_WINDOW = 64


def _windows(n_tokens: int, context_size: int, stride: int):
    """``(begin, end, first_target)`` per window; targets are ``[first_target, end)``."""
    out, prev_end = [], 0
    for begin in range(0, n_tokens, stride):
        end = min(begin + context_size, n_tokens)
        out.append((begin, end, max(prev_end, begin + 1)))
        prev_end = end
        if end == n_tokens:
            break
    return out


@torch.no_grad()
def sliding_window_nll(model, doc_tokens, context_size: int, stride: int = DEFAULT_STRIDE, batch_size: int = 8):
    """Total nats and number of scored tokens under strided evaluation.

    Windows start every ``stride`` tokens and span ``context_size``; each
    scores only the targets not scored by an earlier window. No token is
    scored twice; with ``stride == context_size`` the first token of every
    window has no context and is skipped.
    """
    doc = torch.as_tensor(np.asarray(doc_tokens, dtype=np.int64))
    n = doc.numel()
    if n < context_size:
        raise InputError(f"document of {n} tokens is shorter than context {context_size}")
    if not 1 <= stride <= context_size:
        raise InputError(f"stride must be in [1, {context_size}], got {stride}")
    if context_size < 2:
        raise InputError("context_size must be >= 2")
    wins = _windows(n, context_size, stride)
    total, count = 0.0, 0
    by_len = {}
    for w in wins:
        by_len.setdefault(w[1] - w[0], []).append(w)
    for length, group in by_len.items():
        for i in range(0, len(group), batch_size):
            chunk = group[i : i + batch_size]
            x = torch.stack([doc[b:e] for b, e, _ in chunk])
            logits, _ = model(x)
            logp = F.log_softmax(logits[:, :-1].double(), dim=-1)
            nll = -logp.gather(-1, x[:, 1:, None]).squeeze(-1)
            for row, (b, e, first) in enumerate(chunk):
                # position p in the window predicts absolute token b + p + 1
                sel = nll[row, first - b - 1 : e - b - 1]
                total += float(sel.sum())
                count += sel.numel()
    return total, count


def sliding_window_ppl(model, doc_tokens, context_size: int, stride: int = DEFAULT_STRIDE, batch_size: int = 8) -> float:
    total, count = sliding_window_nll(model, doc_tokens, context_size, stride, batch_size)
    return math.exp(total / count)


@dataclass
class PplCurve:
    records: list = field(default_factory=list)  # dicts: context, ppl, n_docs, variant, ntk_kappa

    def csv_rows(self):
        return [(r["context"], repr(r["ppl"])) for r in self.records]


def ppl_curve(
    model,
    docs: Sequence,
    context_sizes: Sequence[int],
    stride: int = DEFAULT_STRIDE,
    ntk_kappa: float = 1.0,
    batch_size: int = 8,
) -> PplCurve:
    """Perplexity per context size; per-doc mean nats are averaged before ``exp``.

    The stride is clamped to each context size. The model's rotary table is
    set for the largest size (with ``ntk_kappa``) and restored afterwards.
    """
    if len(docs) == 0:
        raise InputError("no documents to evaluate")
    sizes = sorted(set(int(c) for c in context_sizes))
    if not sizes:
        raise InputError("no context sizes given")
    prev_table, prev_kappa = model.table, model.ntk_kappa
    model.set_context(max(sizes), ntk_kappa)
    curve = PplCurve()
    try:
        for c in sizes:
            means = []
            for doc in docs:
                total, count = sliding_window_nll(model, doc, c, min(stride, c), batch_size)
                means.append(total / count)
            curve.records.append(
                dict(context=c, ppl=math.exp(float(np.mean(means))), n_docs=len(docs),
                     variant=model.cfg.variant, ntk_kappa=float(ntk_kappa))
            )
    finally:
        model.table, model.ntk_kappa = prev_table, prev_kappa
    return curve


@dataclass(frozen=True)
class PasskeySample:
    prompt_tokens: tuple
    passkey: int
    insert_index: int
    target_len: int
    n_fillers: int
    template: str

    @property
    def text(self) -> str:
        return decode(self.prompt_tokens)


def fillers_needed(target_len: int, template: PasskeyTemplate = STANDARD) -> int:
    """Fewest filler blocks (at least two) whose rendered prompt reaches ``target_len`` tokens."""
    def length(n):
        return len(encode(template.render(PASSKEY_MIN, 1, n - 1)))

    skeleton = length(1)
    if target_len < skeleton:
        raise InputError(f"target_len {target_len} below the {skeleton}-token one-filler prompt")
    n = 2
    while length(n) < target_len:
        n += 1
    return n


def gen_passkey_sample(target_len: int, rng: np.random.Generator, template: PasskeyTemplate = STANDARD) -> PasskeySample:
    """Fill with whole filler blocks until the prompt has at least ``target_len`` tokens.

    The key block goes at a uniformly random boundary between fillers, so at
    least one filler sits on each side.
    """
    n = fillers_needed(target_len, template)
    passkey = int(rng.integers(PASSKEY_MIN, PASSKEY_MAX + 1))
    insert = int(rng.integers(1, n))
    text = template.render(passkey, insert, n - insert)
    return PasskeySample(tuple(encode(text)), passkey, insert, target_len, n, template.name)


def score_passkey(generated_tokens, sample_or_key) -> bool:
    """True iff the five digits appear in the detokenised first 64 generated tokens."""
    key = sample_or_key.passkey if isinstance(sample_or_key, PasskeySample) else int(sample_or_key)
    head = list(generated_tokens)[:SCORE_WINDOW]
    return str(key) in decode(head)


@torch.no_grad()
def greedy_generate(model, prompts: torch.Tensor, n_new: int, stop=None) -> torch.Tensor:
    """Batched greedy continuation with the attention cache; returns ``[batch, n_new']``.

    ``stop(generated) -> bool`` may end generation early.
    """
    logits, caches = model(prompts, use_cache=True)
    out = []
    nxt = logits[:, -1].argmax(-1)
    for i in range(n_new):
        out.append(nxt)
        if i == n_new - 1 or (stop is not None and stop(torch.stack(out, 1))):
            break
        logits, caches = model(nxt[:, None], caches)
        nxt = logits[:, -1].argmax(-1)
    return torch.stack(out, 1) if out else prompts.new_zeros(prompts.shape[0], 0)


@dataclass
class PasskeyCurve:
    records: list = field(default_factory=list)  # dicts: length, n, accuracy, variant, ntk_kappa

    def csv_rows(self):
        return [(r["length"], r["n"], repr(r["accuracy"])) for r in self.records]


def passkey_suite(
    model,
    lengths: Sequence[int],
    n_per_length: int = DEFAULT_PASSKEY_SAMPLES,
    ntk_kappa: float = 1.0,
    seed: int = 0,
    template: PasskeyTemplate = STANDARD,
    gen_tokens: int = SCORE_WINDOW,
    batch_size: int = 25,
    samples_out: Optional[list] = None,
) -> PasskeyCurve:
    """Greedy passkey accuracy per target length.

    Lengths may not exceed ``max(ntk_kappa, 1) * max_seq``. The rotary table
    is rescaled for that length and grown to hold prompt plus generation.
    """
    if n_per_length < 1:
        raise InputError(f"n_per_length must be >= 1, got {n_per_length}")
    lengths = sorted(set(int(x) for x in lengths))
    cap = max(ntk_kappa, 1.0) * model.cfg.max_seq
    if lengths and lengths[-1] > cap:
        raise RangeError(f"length {lengths[-1]} exceeds rescaled capacity {cap:g}")
    prev_table, prev_kappa = model.table, model.ntk_kappa
    curve = PasskeyCurve()
    try:
        for length in lengths:
            rng = np.random.default_rng([seed, length])
            samples = [gen_passkey_sample(length, rng, template) for _ in range(n_per_length)]
            plen = len(samples[0].prompt_tokens)
            model.set_context(plen + gen_tokens, ntk_kappa)
            hits = 0
            for i in range(0, len(samples), batch_size):
                chunk = samples[i : i + batch_size]
                prompts = torch.tensor([s.prompt_tokens for s in chunk])
                keys = [str(s.passkey) for s in chunk]

                def found(gen, keys=keys):
                    return all(k in decode(row.tolist()) for k, row in zip(keys, gen))

                gen = greedy_generate(model, prompts, gen_tokens, stop=found)
                for s, row in zip(chunk, gen):
                    ok = score_passkey(row.tolist(), s)
                    hits += ok
                    if samples_out is not None:
                        samples_out.append(dict(length=length, passkey=s.passkey, insert_index=s.insert_index,
                                                output=decode(row.tolist()), correct=bool(ok)))
            curve.records.append(
                dict(length=length, n=n_per_length, accuracy=hits / n_per_length,
                     variant=model.cfg.variant, ntk_kappa=float(ntk_kappa))
            )
    finally:
        model.table, model.ntk_kappa = prev_table, prev_kappa
    return curve


__all__ = [
    "DEFAULT_PASSKEY_SAMPLES",
    "DEFAULT_STRIDE",
    "PasskeyCurve",
    "PasskeySample",
    "PplCurve",
    "SCORE_WINDOW",
    "fillers_needed",
    "gen_passkey_sample",
    "greedy_generate",
    "passkey_suite",
    "ppl_curve",
    "score_passkey",
    "sliding_window_nll",
    "sliding_window_ppl",
]
