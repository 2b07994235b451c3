"""Score-contraction kernels with a compiled core and a numpy fallback.

Two interchangeable backends implement the same contract:

``python``
    numpy; forms ``q_raw * q_rot`` then hands the contraction to BLAS.
``compiled``
    Cython extension ``_fused``; loops with per-head buffers only and skips
    causally masked keys. Leaner in memory, slower than BLAS on one core.

The backend is picked once at import from ``COCA_LAB_KERNEL`` (``auto``,
``python`` or ``compiled``); ``auto`` means ``python``, the faster one on the
shapes this package trains at (see ``coca-lab bench contraction``).
``COCA_LAB_THREADS`` caps the OpenMP threads of the compiled core.

All entry points take numpy arrays shaped ``[batch, seq, heads, d]`` and
return scores shaped ``[batch, heads, sq, sk]``. Coordinates ``j`` and
``j + d/2`` form one complex pair; with ``z(x)_j = x_j + i x_{j+d/2}``::

    score[m, n] = Re sum_j z(q_rot[m])_j conj(z(q_raw[m])_j) conj(z(t_rot[n])_j) (1+i)/2

For ``t`` folded to ``(tau, tau)`` and rotated at position ``n`` this equals
``sum_j tau_j |q_j|^2 cos((m - n) theta_j)``.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError, DimensionError
from . import _reference

try:
    from . import _fused as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _reference}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def _initial_backend() -> str:
    choice = os.environ.get("COCA_LAB_KERNEL", "auto").lower()
    if choice == "auto":
        return "python"
    if choice not in _BACKENDS:
        raise ConfigError(
            f"COCA_LAB_KERNEL={choice!r} unavailable; choose from {sorted(_BACKENDS)}"
        )
    return choice


_active = _initial_backend()


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def active_backend() -> str:
    return _active


def set_backend(name: str) -> str:
    """Switch the process-wide backend; returns the previous one."""
    global _active
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; have {available_backends()}")
    prev, _active = _active, name
    return prev


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("COCA_LAB_THREADS", "1")))
    except ValueError:
        raise ConfigError("COCA_LAB_THREADS must be an integer") from None


def _check(q_raw, q_rot, t_rot):
    for name, a in (("q_raw", q_raw), ("q_rot", q_rot), ("t_rot", t_rot)):
        if a.ndim != 4:
            raise DimensionError(f"{name} must be [batch, seq, heads, d], got {a.shape}")
    if q_raw.shape != q_rot.shape:
        raise DimensionError(f"q_raw {q_raw.shape} and q_rot {q_rot.shape} differ")
    b, _, h, d = q_raw.shape
    if d % 2:
        raise DimensionError(f"head_dim must be even, got {d}")
    if t_rot.shape[0] != b or t_rot.shape[2:] != (h, d):
        raise DimensionError(f"t_rot {t_rot.shape} incompatible with queries {q_raw.shape}")
    dtypes = {q_raw.dtype, q_rot.dtype, t_rot.dtype}
    if len(dtypes) != 1 or q_raw.dtype not in (np.float32, np.float64):
        raise DimensionError(f"operands must share float32 or float64 dtype, got {dtypes}")


def fused_scores(
    q_raw, q_rot, t_rot, scale: float, backend: str | None = None, causal_offset: int = -1
) -> np.ndarray:
    """CoCA scores ``[batch, heads, sq, sk]`` divided by ``scale``, without building keys.

    With ``causal_offset >= 0`` entries with ``n > causal_offset + m`` are
    unspecified (the compiled core skips them); callers must mask them.
    """
    _check(q_raw, q_rot, t_rot)
    impl = _BACKENDS[backend or _active]
    b, sq, h, _ = q_raw.shape
    out = np.empty((b, h, sq, t_rot.shape[1]), dtype=q_raw.dtype)
    impl.scores_forward(
        np.ascontiguousarray(q_raw),
        np.ascontiguousarray(q_rot),
        np.ascontiguousarray(t_rot),
        float(scale),
        out,
        num_threads(),
        causal_offset,
    )
    return out


def fused_scores_backward(
    q_raw, q_rot, t_rot, grad_out, scale: float, backend: str | None = None, causal_offset: int = -1
):
    """Gradients of ``fused_scores`` w.r.t. ``(q_raw, q_rot, t_rot)``.

    With ``causal_offset >= 0``, ``grad_out`` must be zero on masked entries.
    """
    _check(q_raw, q_rot, t_rot)
    impl = _BACKENDS[backend or _active]
    g_qraw = np.empty_like(q_raw)
    g_qrot = np.empty_like(q_rot)
    g_t = np.empty_like(t_rot)
    impl.scores_backward(
        np.ascontiguousarray(q_raw),
        np.ascontiguousarray(q_rot),
        np.ascontiguousarray(t_rot),
        np.ascontiguousarray(grad_out, dtype=q_raw.dtype),
        float(scale),
        g_qraw,
        g_qrot,
        g_t,
        num_threads(),
        causal_offset,
    )
    return g_qraw, g_qrot, g_t


def hadamard_keys(q_raw, t_rot):
    """Rotated query-dependent keys ``k[b, m, n] = q_raw[b, m] o t_rot[b, n]``.

    ``o`` scales each query pair by the pair's constraint coefficient
    ``z(t_rot)_j (1 - i)/2`` (which is ``tau_j e^{i n theta_j}`` for a folded,
    rotated ``t``). Output ``[batch, sq, sk, heads, d]``.
    """
    half = q_raw.shape[-1] // 2
    x, x2 = t_rot[..., :half], t_rot[..., half:]
    c_re = ((x + x2) * 0.5)[:, None]
    c_im = ((x2 - x) * 0.5)[:, None]
    a = q_raw[:, :, None, :, :half]
    a2 = q_raw[:, :, None, :, half:]
    return np.concatenate([a * c_re - a2 * c_im, a * c_im + a2 * c_re], axis=-1)


def naive_scores(q_raw, q_rot, t_rot, scale: float) -> np.ndarray:
    """Materialise the query-dependent keys, then dot each with its rotated query.

    Memory is ``O(batch * sq * sk * heads * d)`` by construction.
    """
    _check(q_raw, q_rot, t_rot)
    keys = hadamard_keys(q_raw, t_rot)
    out = np.einsum("bmhd,bmnhd->bhmn", q_rot, keys)
    out /= scale
    return out


__all__ = [
    "active_backend",
    "available_backends",
    "fused_scores",
    "fused_scores_backward",
    "hadamard_keys",
    "naive_scores",
    "num_threads",
    "set_backend",
]
