"""Byte-level tokenizer: ids 0-255 are raw UTF-8 bytes, then three specials."""

from __future__ import annotations

import numpy as np

PAD, BOS, EOS = 256, 257, 258
VOCAB_SIZE = 259


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    """Inverse of ``encode``; specials are dropped and bad UTF-8 is replaced."""
    raw = bytes(int(i) for i in np.asarray(ids).reshape(-1) if 0 <= int(i) < 256)
    return raw.decode("utf-8", errors="replace")


__all__ = ["BOS", "EOS", "PAD", "VOCAB_SIZE", "decode", "encode"]
