"""Rotary position embedding tables.

Pairs are laid out half-split: coordinate ``j`` is rotated together with
``j + d/2`` as the complex number ``x[j] + i*x[j + d/2]``. Tables are built in
float64 and cast to the activation dtype only when applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DimensionError, RangeError

DEFAULT_BASE = 10000.0


@dataclass(frozen=True, eq=False)
class RotaryTable:
    """Per-position cos/sin for every rotary frequency.

    ``cos_cache[p, j] == cos(p * freqs[j])``; shape ``[max_pos, head_dim // 2]``.
    Treat instances as immutable.
    """

    head_dim: int
    base: float
    max_pos: int
    freqs: np.ndarray
    cos_cache: np.ndarray
    sin_cache: np.ndarray
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_freqs(cls, freqs, max_pos: int, base: float = float("nan")) -> "RotaryTable":
        """Build a table from explicit frequencies (no monotonicity check).

        Useful for probes such as an all-zero table, which turns rotation into
        the identity.
        """
        freqs = np.asarray(freqs, dtype=np.float64).reshape(-1)
        if max_pos < 1:
            raise ConfigError(f"max_pos must be >= 1, got {max_pos}")
        angles = np.outer(np.arange(max_pos, dtype=np.float64), freqs)
        return cls(
            head_dim=2 * freqs.size,
            base=float(base),
            max_pos=int(max_pos),
            freqs=freqs,
            cos_cache=np.cos(angles),
            sin_cache=np.sin(angles),
        )

    def extended(self, max_pos: int) -> "RotaryTable":
        """Same frequencies, capacity grown to ``max_pos`` (never shrinks)."""
        if max_pos <= self.max_pos:
            return self
        return RotaryTable.from_freqs(self.freqs, max_pos, self.base)

    def torch_cache(self, start: int, stop: int, dtype, device=None):
        if start < 0 or stop > self.max_pos:
            raise RangeError(
                f"positions [{start}, {stop}) exceed rotary capacity {self.max_pos}"
            )
        key = (dtype, str(device))
        if key not in self._memo:
            self._memo[key] = (
                torch.from_numpy(self.cos_cache).to(dtype=dtype, device=device),
                torch.from_numpy(self.sin_cache).to(dtype=dtype, device=device),
            )
        cos, sin = self._memo[key]
        return cos[start:stop], sin[start:stop]


def build_rotary_table(head_dim: int, base: float = DEFAULT_BASE, max_pos: int = 2048) -> RotaryTable:
    """Frequencies ``base ** (-2j/d)`` for ``j < d/2`` and their position tables."""
    if head_dim < 2 or head_dim % 2:
        raise ConfigError(f"head_dim must be even and >= 2, got {head_dim}")
    if max_pos < 1:
        raise ConfigError(f"max_pos must be >= 1, got {max_pos}")
    if not base > 1:
        raise ConfigError(f"rotary base must be > 1, got {base}")
    j = np.arange(head_dim // 2, dtype=np.float64)
    freqs = float(base) ** (-2.0 * j / head_dim)
    return RotaryTable.from_freqs(freqs, max_pos, float(base))


def ntk_rescale(
    table: RotaryTable,
    train_len: int,
    target_len: int,
    exponent: float | None = None,
) -> RotaryTable:
    """NTK-aware base enlargement for running past the training length.

    ``base' = base * kappa ** exponent`` with ``kappa = target_len / train_len``
    and ``exponent = d / (d - 2)`` unless given. The rebuilt table holds at
    least ``target_len`` positions. ``kappa == 1`` returns the input table
    (grown if it is too short for ``target_len``).
    """
    if train_len < 1:
        raise RangeError(f"train_len must be >= 1, got {train_len}")
    if target_len < train_len:
        raise RangeError(f"target_len {target_len} < train_len {train_len}")
    kappa = target_len / train_len
    max_pos = max(table.max_pos, target_len)
    if kappa == 1.0:
        return table.extended(max_pos)
    d = table.head_dim
    if exponent is None:
        if d <= 2:
            raise ConfigError("default NTK exponent d/(d-2) is undefined for head_dim=2")
        exponent = d / (d - 2)
    new_base = table.base * kappa**exponent
    return build_rotary_table(d, new_base, max_pos)


def _rotate(x1, x2, cos, sin):
    return x1 * cos - x2 * sin, x1 * sin + x2 * cos


def apply_rotation(x, table: RotaryTable, offset: int = 0):
    """Rotate ``x`` of shape ``[..., seq, heads, head_dim]`` by its absolute positions.

    Row ``r`` along the ``seq`` axis sits at position ``offset + r``. Accepts a
    torch tensor (result keeps its dtype) or a numpy array (computed in float64).
    """
    if x.shape[-1] != table.head_dim:
        raise DimensionError(f"head_dim {x.shape[-1]} != table head_dim {table.head_dim}")
    if x.ndim < 3:
        raise DimensionError(f"expected [..., seq, heads, head_dim], got shape {tuple(x.shape)}")
    seq = x.shape[-3]
    if offset < 0 or offset + seq > table.max_pos:
        raise RangeError(
            f"positions [{offset}, {offset + seq}) exceed rotary capacity {table.max_pos}"
        )
    half = table.head_dim // 2
    if isinstance(x, np.ndarray):
        cos = table.cos_cache[offset : offset + seq, None, :]
        sin = table.sin_cache[offset : offset + seq, None, :]
        y1, y2 = _rotate(x[..., :half], x[..., half:], cos, sin)
        return np.concatenate([y1, y2], axis=-1)
    cos, sin = table.torch_cache(offset, offset + seq, x.dtype, x.device)
    cos, sin = cos[:, None, :], sin[:, None, :]
    y1, y2 = _rotate(x[..., :half], x[..., half:], cos, sin)
    return torch.cat([y1, y2], dim=-1)


def as_complex(x: np.ndarray) -> np.ndarray:
    """View head vectors ``[..., d]`` as ``[..., d/2]`` complex pairs."""
    x = np.asarray(x, dtype=np.float64)
    half = x.shape[-1] // 2
    return x[..., :half] + 1j * x[..., half:]


def scaled_base(base: float, kappa: float, head_dim: int) -> float:
    """Closed-form NTK base, exposed for reporting."""
    return base * kappa ** (head_dim / (head_dim - 2)) if kappa != 1 else base


__all__ = [
    "DEFAULT_BASE",
    "RotaryTable",
    "apply_rotation",
    "as_complex",
    "build_rotary_table",
    "ntk_rescale",
    "scaled_base",
]
