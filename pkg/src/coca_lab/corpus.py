"""Synthetic token streams standing in for a pre-training mixture.

``copy``
    ``#KEY#`` then lowercase noise then ``@KEY`` and a newline. Keys are
    six uppercase letters, unique over the stream, and every episode fits in
    one window, so each query has exactly one earlier match in its window.
``keyvalue``
    Window-aligned episodes of exactly ``seq_len`` tokens:
    ``... key 12345. ... key? 12345. ...`` in the desk passkey surface form.
``lm_mix``
    75% word-level Markov text from a fixed synthetic language, 25%
    code-like segments with nested structure (fractions by segment count).
"""

from __future__ import annotations

import string

import numpy as np

from .errors import ConfigError, InputError
from .templates import DESK, FILLER_SENTENCES, PASSKEY_MAX, PASSKEY_MIN
from .tokenizer import encode

KINDS = ("copy", "keyvalue", "lm_mix")
LANGUAGE_SEED = 20231010
KEY_LEN = 6


def synth_corpus(kind: str, size_tokens: int, seed: int, seq_len: int = 64) -> np.ndarray:
    """Deterministic stream of exactly ``size_tokens`` byte tokens."""
    if kind not in KINDS:
        raise ConfigError(f"unknown corpus kind {kind!r}; choose from {KINDS}")
    if seq_len < 1 or size_tokens < seq_len:
        raise InputError(f"size_tokens {size_tokens} < seq_len {seq_len}")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    if kind == "copy":
        text = _copy_text(rng, size_tokens, seq_len)
    elif kind == "keyvalue":
        text = _keyvalue_text(rng, size_tokens, seq_len)
    else:
        text = _lm_mix_text(rng, size_tokens)
    out = np.frombuffer(text.encode("ascii"), dtype=np.uint8)[:size_tokens]
    return out.astype(np.int64)


def mixed_corpus(parts: dict, size_tokens: int, seed: int, seq_len: int = 64) -> np.ndarray:
    """Shuffle ``seq_len``-token blocks from several kinds in the given proportions."""
    if not parts or any(f <= 0 for f in parts.values()):
        raise ConfigError(f"mixture fractions must be positive, got {parts}")
    n_blocks = size_tokens // seq_len
    if n_blocks < 1:
        raise InputError(f"size_tokens {size_tokens} < seq_len {seq_len}")
    total = sum(parts.values())
    kinds = sorted(parts)
    counts = [int(round(n_blocks * parts[k] / total)) for k in kinds]
    counts[-1] = n_blocks - sum(counts[:-1])
    blocks = []
    for i, (k, c) in enumerate(zip(kinds, counts)):
        if c <= 0:
            continue
        stream = synth_corpus(k, c * seq_len, seed * 1000 + i, seq_len)
        blocks.append(stream.reshape(c, seq_len))
    allb = np.concatenate(blocks, axis=0)
    order = np.random.default_rng([seed, 99]).permutation(len(allb))
    return allb[order].reshape(-1)


def _copy_text(rng, size: int, seq_len: int) -> str:
    if seq_len < 2 * KEY_LEN + 6:
        raise InputError(f"copy episodes need seq_len >= {2 * KEY_LEN + 6}")
    letters = np.array(list(string.ascii_uppercase))
    noise = np.array(list(string.ascii_lowercase + "     "))
    used, parts, n = set(), [], 0
    max_gap = seq_len - (2 * KEY_LEN + 4)
    while n < size:
        key = "".join(rng.choice(letters, KEY_LEN))
        if key in used:
            continue
        used.add(key)
        gap = "".join(rng.choice(noise, int(rng.integers(0, max_gap + 1))))
        ep = f"#{key}#{gap}@{key}\n"
        parts.append(ep)
        n += len(ep)
    return "".join(parts)


def keyvalue_episode(rng, seq_len: int) -> str:
    """One episode of exactly ``seq_len`` characters with its query inside."""
    key = int(rng.integers(PASSKEY_MIN, PASSKEY_MAX + 1))
    key_line = DESK.key_line.format(key=key)
    qa = f"{DESK.question} {key}."
    if len(key_line) + len(qa) + 1 > seq_len:
        raise InputError(f"keyvalue episodes need seq_len >= {len(key_line) + len(qa) + 1}")

    def fillers(k):
        return [FILLER_SENTENCES[i] for i in rng.integers(0, len(FILLER_SENTENCES), k)]

    pre, mid = fillers(int(rng.integers(0, 4))), fillers(int(rng.integers(0, 4)))
    while True:
        body = DESK.sep.join(pre + [key_line] + mid + [qa])
        if len(body) <= seq_len:
            break
        (pre if pre and (not mid or rng.random() < 0.5) else mid).pop()
    while len(body) < seq_len:
        body += DESK.sep + fillers(1)[0]
    return body[:seq_len]


def _keyvalue_text(rng, size: int, seq_len: int) -> str:
    n_ep = -(-size // seq_len)
    return "".join(keyvalue_episode(rng, seq_len) for _ in range(n_ep))


class _Language:
    """Fixed synthetic vocabulary with sparse word-bigram transitions."""

    def __init__(self, seed: int = LANGUAGE_SEED, n_words: int = 400, fanout: int = 6):
        rng = np.random.default_rng(seed)
        alpha = string.ascii_lowercase
        # letter bigram chain gives words a consistent internal texture
        trans = rng.dirichlet(np.full(26, 0.3), size=26)
        words = set()
        while len(words) < n_words:
            c = int(rng.integers(26))
            w = [alpha[c]]
            for _ in range(int(rng.integers(1, 8))):
                c = int(rng.choice(26, p=trans[c]))
                w.append(alpha[c])
            words.add("".join(w))
        self.words = sorted(words)
        self.succ = rng.integers(0, n_words, size=(n_words, fanout))
        self.succ_p = rng.dirichlet(np.full(fanout, 0.5), size=n_words)
        self.start_p = rng.dirichlet(np.full(n_words, 0.2))

    def sentence(self, rng) -> str:
        w = int(rng.choice(len(self.words), p=self.start_p))
        out = [self.words[w]]
        for _ in range(int(rng.integers(4, 14))):
            w = int(self.succ[w, rng.choice(self.succ.shape[1], p=self.succ_p[w])])
            out.append(self.words[w])
        return " ".join(out) + ". "

    def code(self, rng) -> str:
        name = lambda: self.words[int(rng.integers(len(self.words)))][:6]  # noqa: E731
        a, b, f = name(), name(), name()
        k = int(rng.integers(0, 10))
        forms = (
            f"def {f}({a}, {b}):\n    return {a} + {b} * {k}\n",
            f"for i in range({k}):\n    {a}[i] = {b}[i] + {k}\n",
            f"if {a} > {k}:\n    {b} = ({a} - {k}) * 2\n",
            f"{f} = [{a}, {b}, {{'{a}': {k}}}]\n",
        )
        return forms[int(rng.integers(len(forms)))]


_LANGUAGE = None


def language() -> _Language:
    global _LANGUAGE
    if _LANGUAGE is None:
        _LANGUAGE = _Language()
    return _LANGUAGE


def _lm_mix_text(rng, size: int) -> str:
    lang = language()
    parts, n = [], 0
    while n < size:
        seg = lang.sentence(rng) if rng.random() < 0.75 else lang.code(rng)
        parts.append(seg)
        n += len(seg)
    return "".join(parts)


def verify_copy_stream(tokens, seq_len: int) -> int:
    """Count queries lacking exactly one earlier match within their window."""
    text = bytes(np.asarray(tokens, dtype=np.uint8)).decode("ascii")
    bad = 0
    for p in range(len(text)):
        if text[p] != "@" or p + 1 + KEY_LEN > len(text):
            continue
        q = text[p + 1 : p + 1 + KEY_LEN]
        lo = max(0, p + 1 + KEY_LEN - seq_len)
        window = text[lo:p]
        count = sum(1 for i in range(len(window) - KEY_LEN + 1) if window[i : i + KEY_LEN] == q)
        bad += count != 1
    return bad


__all__ = ["KINDS", "keyvalue_episode", "language", "mixed_corpus", "synth_corpus", "verify_copy_stream"]
