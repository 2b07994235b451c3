"""CoCA attention and the plain RoPE baseline.

CoCA replaces the key projection with constraint coefficients ``t``: the
projection is folded in half, averaged, clamped at zero and copied back to
both halves, so every complex pair of ``t`` is a non-negative real ``tau``.
The effective key for query ``m`` against position ``n`` is ``q_m o t_n``
(each query pair scaled by ``tau_nj``), hence collinear with the query before
rotation. Keys depend on the query and are never cached; the cache holds the
rotated folded ``t`` and the values.

Activations are ``[batch, seq, heads, head_dim]``; score tensors are
``[batch, heads, sq, sk]``. The leading batch axis is optional for the
score functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .errors import ConfigError, DimensionError, InputError, RangeError, StateError
from .rotary import RotaryTable, apply_rotation

VARIANTS = ("coca", "baseline")


@dataclass
class AttentionParams:
    """Projection weights in ``nn.Linear`` convention (``y = x @ W.T``)."""

    w_q: torch.Tensor
    w_t: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    n_heads: int
    score_scale: Optional[float] = None

    def __post_init__(self):
        d_model = self.w_q.shape[1]
        for name in ("w_q", "w_t", "w_v", "w_o"):
            if tuple(getattr(self, name).shape) != (d_model, d_model):
                raise ConfigError(f"{name} must be [{d_model}, {d_model}]")
        if self.n_heads < 1 or d_model % self.n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even, got {self.head_dim}")
        if self.score_scale is None:
            self.score_scale = math.sqrt(self.head_dim)
        if not self.score_scale > 0:
            raise ConfigError(f"score_scale must be positive, got {self.score_scale}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class AttentionCache:
    """Rotated folded ``t`` (rotated keys for the baseline) and values, ``[batch, past, heads, d]``."""

    folded_rotated_t: torch.Tensor
    past_values: torch.Tensor

    def __post_init__(self):
        if self.folded_rotated_t.shape != self.past_values.shape:
            raise StateError(
                f"cache tensors disagree: {tuple(self.folded_rotated_t.shape)} "
                f"vs {tuple(self.past_values.shape)}"
            )

    @property
    def length(self) -> int:
        return self.folded_rotated_t.shape[1]

    @classmethod
    def empty(cls, batch: int, n_heads: int, head_dim: int, dtype=torch.float32, device=None):
        z = torch.zeros(batch, 0, n_heads, head_dim, dtype=dtype, device=device)
        return cls(z, z.clone())

    def append(self, t_rot: torch.Tensor, v: torch.Tensor) -> "AttentionCache":
        return AttentionCache(
            torch.cat([self.folded_rotated_t, t_rot], dim=1),
            torch.cat([self.past_values, v], dim=1),
        )


def fold_relu_t(t_raw):
    """Average the two halves, clamp at zero, duplicate: ``out[j] = out[j + d/2] = relu((t[j] + t[j+d/2]) / 2)``."""
    d = t_raw.shape[-1]
    if d % 2:
        raise ConfigError(f"head_dim must be even, got {d}")
    half = d // 2
    if isinstance(t_raw, np.ndarray):
        tau = np.maximum((t_raw[..., :half] + t_raw[..., half:]) * 0.5, 0.0)
        return np.concatenate([tau, tau], axis=-1)
    tau = F.relu((t_raw[..., :half] + t_raw[..., half:]) * 0.5)
    return torch.cat([tau, tau], dim=-1)


def _batched(*xs):
    """Add a unit batch axis to 3-D inputs; report whether it was added."""
    ndim = {x.ndim for x in xs}
    if ndim == {3}:
        return [x[None] for x in xs], True
    if ndim == {4}:
        return list(xs), False
    raise DimensionError(f"expected [seq, heads, d] or [batch, seq, heads, d], got ndims {ndim}")


def _check_scores(q_rot, k_rot, q_raw=None):
    if q_raw is not None and tuple(q_raw.shape) != tuple(q_rot.shape):
        raise DimensionError(f"q_raw {tuple(q_raw.shape)} != q_rot {tuple(q_rot.shape)}")
    if q_rot.shape[0] != k_rot.shape[0] or q_rot.shape[2:] != k_rot.shape[2:]:
        raise DimensionError(f"queries {tuple(q_rot.shape)} and keys {tuple(k_rot.shape)} incompatible")


class _FusedCocaScores(torch.autograd.Function):
    """Routes the contraction through the kernel backends; backward included."""

    @staticmethod
    def forward(ctx, q_raw, q_rot, t_rot, scale, causal_offset, backend):
        arrays = [x.detach().contiguous().numpy() for x in (q_raw, q_rot, t_rot)]
        out = kernels.fused_scores(*arrays, scale, backend=backend, causal_offset=causal_offset)
        ctx.save_for_backward(q_raw, q_rot, t_rot)
        ctx.scale, ctx.causal_offset, ctx.backend = scale, causal_offset, backend
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad):
        arrays = [x.detach().contiguous().numpy() for x in ctx.saved_tensors]
        grads = kernels.fused_scores_backward(
            *arrays,
            grad.detach().contiguous().numpy(),
            ctx.scale,
            backend=ctx.backend,
            causal_offset=ctx.causal_offset,
        )
        g_qraw, g_qrot, g_t = (torch.from_numpy(g) for g in grads)
        return g_qraw, g_qrot, g_t, None, None, None


def coca_scores_fused(q_raw, q_rot, t_rot, score_scale: float, causal_offset: int = -1, backend=None):
    """CoCA scores without materialising the query-dependent keys.

    Works on torch tensors (differentiable, CPU only) or numpy arrays. With
    ``causal_offset >= 0``, scores for keys after query ``causal_offset + m``
    are left unspecified and must be masked.
    """
    (q_raw, q_rot, t_rot), squeeze = _batched(q_raw, q_rot, t_rot)
    _check_scores(q_rot, t_rot, q_raw)
    if isinstance(q_raw, np.ndarray):
        out = kernels.fused_scores(q_raw, q_rot, t_rot, score_scale, backend, causal_offset)
    else:
        if q_raw.device.type != "cpu":
            raise DimensionError("fused CoCA kernel runs on CPU tensors only")
        out = _FusedCocaScores.apply(q_raw, q_rot, t_rot, float(score_scale), int(causal_offset), backend)
    return out[0] if squeeze else out


def coca_scores_naive(q_raw, q_rot, t_rot, score_scale: float):
    """Oracle: build ``k[m, n] = q_raw[m] o t_rot[n]`` explicitly, then ``dot(q_rot[m], k[m, n])``."""
    (q_raw, q_rot, t_rot), squeeze = _batched(q_raw, q_rot, t_rot)
    _check_scores(q_rot, t_rot, q_raw)
    if isinstance(q_raw, np.ndarray):
        out = kernels.naive_scores(q_raw, q_rot, t_rot, score_scale)
    else:
        half = q_raw.shape[-1] // 2
        x, x2 = t_rot[..., :half], t_rot[..., half:]
        c_re = ((x + x2) * 0.5)[:, None]
        c_im = ((x2 - x) * 0.5)[:, None]
        a = q_raw[:, :, None, :, :half]
        a2 = q_raw[:, :, None, :, half:]
        keys = torch.cat([a * c_re - a2 * c_im, a * c_im + a2 * c_re], dim=-1)
        out = torch.einsum("bmhd,bmnhd->bhmn", q_rot, keys) / score_scale
    return out[0] if squeeze else out


def rope_scores_baseline(q_rot, k_rot, score_scale: float):
    """``scores[p, m, n] = dot(q_rot[m, p], k_rot[n, p]) / score_scale``."""
    (q_rot, k_rot), squeeze = _batched(q_rot, k_rot)
    _check_scores(q_rot, k_rot)
    if isinstance(q_rot, np.ndarray):
        out = np.einsum("bmhd,bnhd->bhmn", q_rot, k_rot) / score_scale
    else:
        out = torch.matmul(q_rot.transpose(1, 2), k_rot.permute(0, 2, 3, 1)) / score_scale
    return out[0] if squeeze else out


def causal_mask_softmax(scores, query_offset: int = 0):
    """Softmax over keys with keys after the query's absolute position removed.

    Query row ``m`` sits at absolute position ``query_offset + m``; key column
    ``n`` at position ``n``.
    """
    sq, sk = scores.shape[-2], scores.shape[-1]
    if query_offset < 0:
        raise InputError(f"query_offset {query_offset} masks every key of the first row")
    if isinstance(scores, np.ndarray):
        t = torch.from_numpy(scores)
        return causal_mask_softmax(t, query_offset).numpy()
    q_pos = torch.arange(sq, device=scores.device)[:, None] + query_offset
    k_pos = torch.arange(sk, device=scores.device)[None, :]
    masked = scores.masked_fill(k_pos > q_pos, float("-inf"))
    return torch.softmax(masked, dim=-1)


def _split(x, n_heads):
    b, s, _ = x.shape
    return x.view(b, s, n_heads, -1)


def attention_forward(
    x: torch.Tensor,
    params: AttentionParams,
    table: RotaryTable,
    cache: Optional[AttentionCache] = None,
    variant: str = "coca",
    contraction: str = "fused",
):
    """One attention layer over ``x`` ``[batch, seq, d_model]`` (or ``[seq, d_model]``).

    New tokens sit at absolute positions ``cache.length + r``. Returns
    ``(y, new_cache)``; the input cache is not modified.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != params.d_model:
        raise DimensionError(f"x must be [batch, seq, {params.d_model}], got {tuple(x.shape)}")
    b, s, _ = x.shape
    h, d = params.n_heads, params.head_dim
    if table.head_dim != d:
        raise StateError(f"rotary table head_dim {table.head_dim} != attention head_dim {d}")
    if cache is None:
        cache = AttentionCache.empty(b, h, d, x.dtype, x.device)
    if cache.folded_rotated_t.shape[0] != b or cache.folded_rotated_t.shape[2:] != (h, d):
        raise StateError(
            f"cache shape {tuple(cache.folded_rotated_t.shape)} inconsistent with batch {b}, heads {h}, d {d}"
        )
    past = cache.length
    if past + s > table.max_pos:
        raise RangeError(f"positions up to {past + s} exceed rotary capacity {table.max_pos}")

    q = _split(F.linear(x, params.w_q), h)
    t = _split(F.linear(x, params.w_t), h)
    v = _split(F.linear(x, params.w_v), h)
    if variant == "coca":
        t = fold_relu_t(t)
    q_rot = apply_rotation(q, table, past)
    t_rot = apply_rotation(t, table, past)
    new_cache = cache.append(t_rot, v)
    t_all, v_all = new_cache.folded_rotated_t, new_cache.past_values

    if variant == "baseline":
        scores = rope_scores_baseline(q_rot, t_all, params.score_scale)
    elif contraction == "fused":
        scores = coca_scores_fused(q, q_rot, t_all, params.score_scale, causal_offset=past)
    elif contraction == "naive":
        scores = coca_scores_naive(q, q_rot, t_all, params.score_scale)
    else:
        raise ConfigError(f"contraction must be 'fused' or 'naive', got {contraction!r}")
    probs = causal_mask_softmax(scores, past)
    ctx = torch.matmul(probs, v_all.transpose(1, 2))  # [b, h, s, d]
    y = F.linear(ctx.transpose(1, 2).reshape(b, s, h * d), params.w_o)
    return (y[0] if squeeze else y), new_cache


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, variant: str = "coca", score_scale=None):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.n_heads = n_heads
        self.variant = variant
        self.score_scale = score_scale
        self.contraction = "fused"
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_t = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_o = nn.Linear(d_model, d_model, bias=False)

    def params(self) -> AttentionParams:
        return AttentionParams(
            self.w_q.weight, self.w_t.weight, self.w_v.weight, self.w_o.weight,
            self.n_heads, self.score_scale,
        )

    def forward(self, x, table: RotaryTable, cache: Optional[AttentionCache] = None):
        return attention_forward(x, self.params(), table, cache, self.variant, self.contraction)


__all__ = [
    "AttentionCache",
    "AttentionParams",
    "CausalSelfAttention",
    "VARIANTS",
    "attention_forward",
    "causal_mask_softmax",
    "coca_scores_fused",
    "coca_scores_naive",
    "fold_relu_t",
    "rope_scores_baseline",
]
