"""Order breaking near zero distance, long-term decay bounds, rotary borders, memory.

All analysis is in float64. Pairs ``(x_j, x_{j+d/2})`` are the complex
numbers ``z_j = x_j + i x_{j+d/2}``; for a query ``q`` and key ``k`` the
per-component RoPE score at relative distance ``s = m - n`` is

    a_j(s) = Re(h_j e^{i s theta_j}),  h_j = z(q)_j conj(z(k)_j)

so ``a_j(s) = |h_j| cos(theta0_j + s theta_j)`` with ``theta0_j = arg h_j``,
the angle from the key pair to the query pair.
"""

from __future__ import annotations

import json
import math
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import InputError
from .rotary import RotaryTable, apply_rotation, as_complex

# Slope sign tolerance, in units of relative distance s.
TIE_TOL_S = 1e-9


def initial_angles(q, k):
    """Signed angle from ``k_j`` to ``q_j`` in ``(-pi, pi]``; NaN where either pair is zero.

    Returns ``(theta0, defined)``.
    """
    h = as_complex(q) * np.conj(as_complex(k))
    defined = np.abs(h) > 0
    theta = np.angle(h)
    theta = np.where(theta <= -np.pi, np.pi, theta)
    return np.where(defined, theta, np.nan), defined


def _slope_sign(amp, phase, theta, tol_s=TIE_TOL_S):
    """Sign of ``d/ds amp cos(phase)`` = ``-theta amp sin(phase)``, zero within ``tol_s`` of an extremum."""
    sn = np.sin(phase)
    return np.where(np.abs(sn) <= np.abs(theta) * tol_s, 0, -np.sign(sn)).astype(int)


def _rotated_pairs(q, table: RotaryTable, positions):
    """``z(rotate(q, s))`` for every ``s`` in ``positions`` (non-negative), via the rotary tables."""
    positions = np.asarray(positions)
    tab = table.extended(int(positions.max()) + 1)
    x = np.broadcast_to(np.asarray(q, dtype=np.float64), (int(positions.max()) + 1, 1, q.shape[-1]))
    rot = apply_rotation(np.ascontiguousarray(x), tab, 0)[:, 0]
    return as_complex(rot[positions])


@dataclass
class OrderBreakReport:
    theta0: list
    thetas: list
    predicted_break_count: list
    measured_break_count: list
    direction: list  # +1: break for s > 0 (query after key), -1: for s < 0, 0: none
    argmax_index: list
    aggregate: list
    truncated: list = field(default_factory=list)

    def component_rows(self):
        return [
            (j, repr(self.theta0[j]), repr(self.predicted_break_count[j]), self.measured_break_count[j])
            for j in range(len(self.theta0))
        ]

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=float)


def _break_length(signs) -> int:
    """Leading run of non-decreasing slope (ties kept), as a distance."""
    bad = np.flatnonzero(signs < 0)
    run = int(bad[0]) if bad.size else len(signs)
    return max(run - 1, 0)


def order_break_scan(q, k, table: RotaryTable, s_max: int) -> OrderBreakReport:
    """Aggregate ``a(s) = dot(rotate(q, s), k)`` for ``s`` in ``[0, s_max]`` and per-component break lengths.

    A component's break length is the distance over which ``a_j`` keeps
    rising as the query moves away from the key, scanning both directions;
    a slope of exactly zero (``s theta_j == |theta0_j|``) still counts as
    rising, which gives ``floor(|theta0_j| / theta_j)``. ``argmax_index`` is
    the integer distance maximising ``a_j`` in the breaking direction, which
    can round up instead.
    """
    if s_max < 2:
        raise InputError(f"s_max must be >= 2, got {s_max}")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    s = np.arange(s_max + 1)
    zq_rot = _rotated_pairs(q, table, s)  # [S, d/2]
    zk = as_complex(k)
    per = np.real(zq_rot * np.conj(zk))  # a_j(s), s >= 0
    aggregate = per.sum(axis=1)
    theta0, defined = initial_angles(q, k)
    thetas = table.freqs
    amp = np.abs(as_complex(q) * np.conj(zk))
    pred, meas, dirs, argm, trunc = [], [], [], [], []
    for j in range(thetas.size):
        if not defined[j] or thetas[j] == 0:
            pred.append(0.0), meas.append(0), dirs.append(0), argm.append(0), trunc.append(False)
            continue
        # forward: phase theta0 + s theta; backward: theta0 - s theta, slope negated
        fwd = _slope_sign(amp[j], np.angle(zq_rot[:, j] * np.conj(zk[j])), thetas[j])
        bwd = -_slope_sign(amp[j], theta0[j] - s * thetas[j], thetas[j])
        lf, lb = _break_length(fwd), _break_length(bwd)
        length = max(lf, lb)
        direction = 0 if length == 0 else (1 if lf >= lb else -1)
        if direction >= 0:
            curve = per[:, j]
        else:
            curve = amp[j] * np.cos(theta0[j] - s * thetas[j])
        pred.append(abs(float(theta0[j])) / float(thetas[j]))
        meas.append(length)
        dirs.append(direction)
        # first lobe only: the peak closing the rising run
        argm.append(int(np.argmax(curve[: length + 2])) if direction else 0)
        trunc.append(length >= s_max - 1)
    return OrderBreakReport(
        theta0=[float(t) for t in np.nan_to_num(theta0)],
        thetas=[float(t) for t in thetas],
        predicted_break_count=pred,
        measured_break_count=meas,
        direction=dirs,
        argmax_index=argm,
        aggregate=[float(a) for a in aggregate],
        truncated=trunc,
    )


@dataclass
class DecayBoundReport:
    s: list
    lhs: list
    rhs_weak: list
    rhs_strong: list
    h_gaps: list
    l_gaps: list
    mode: str
    violations_weak: int
    violations_strong: int
    eq11_violations: int
    closed_form_max_err: float = 0.0
    metadata: dict = field(default_factory=dict)

    def curve_rows(self):
        return [
            (s, repr(a), repr(w), repr(st))
            for s, a, w, st in zip(self.s, self.lhs, self.rhs_weak, self.rhs_strong)
        ]

    def to_json(self) -> str:
        return json.dumps(asdict(self), default=float)


def _abel_sums(thetas, s):
    """``|S_{j+1}(s)|`` and ``|C_{j+1}(s)|`` summed over ``j``: shape ``[len(s)]`` each."""
    ang = np.outer(np.asarray(s, dtype=np.float64), thetas)
    S = np.cumsum(np.exp(1j * ang), axis=1)  # S[:, j] = sum_{k<=j} = S_{j+1}
    C = np.cumsum(np.cos(ang), axis=1)
    return np.abs(S).sum(axis=1), np.abs(C).sum(axis=1)


def _gaps(c):
    """``|c_{i+1} - c_i|`` for ``i < d/2`` with ``c_{d/2} = 0``; works on the last axis."""
    padded = np.concatenate([c, np.zeros(c.shape[:-1] + (1,), dtype=c.dtype)], axis=-1)
    return np.abs(np.diff(padded, axis=-1))


def effective_h(q, second, mode: str):
    """``h_j`` for a query and either a key (baseline) or folded ``t`` (coca)."""
    zq = as_complex(q)
    if mode == "baseline":
        return zq * np.conj(as_complex(second))
    if mode == "coca":
        # key pair = q pair scaled by tau_j >= 0, so h_j = tau_j |q_j|^2
        half = np.asarray(second).shape[-1] // 2
        tau = np.asarray(second, dtype=np.float64)[..., :half]
        return zq * np.conj(zq * tau)
    raise InputError(f"mode must be 'baseline' or 'coca', got {mode!r}")


@dataclass
class DecayBatchSummary:
    n: int
    max_excess_strong: float
    max_excess_weak: float
    violations_strong: int
    violations_weak: int
    eq11_violations: int
    eq11_max_excess: float


def decay_bound_batch(q, second, table: RotaryTable, s_values, mode: str = "coca", slack: float = 1e-9):
    """Vectorised bound check over ``N`` input pairs ``q, second`` of shape ``[N, d]``.

    ``a(s) = Re sum_j h_j e^{i s theta_j}`` is evaluated from the effective
    keys (not from the closed form), then compared with the Abel bounds.
    The strong bound is counted only in ``coca`` mode.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    second = np.atleast_2d(np.asarray(second, dtype=np.float64))
    h = effective_h(q, second, mode)  # [N, d/2]
    l = np.abs(h)
    s = np.asarray(s_values, dtype=np.float64)
    ang = np.outer(s, table.freqs)
    a = h.real @ np.cos(ang).T - h.imag @ np.sin(ang).T  # [N, S]
    sum_S, sum_C = _abel_sums(table.freqs, s)
    hg, lg = _gaps(h), _gaps(l)
    weak = hg.max(axis=1, keepdims=True) * sum_S[None]
    strong = lg.max(axis=1, keepdims=True) * sum_C[None]
    lhs = np.abs(a)
    ex_w = lhs - weak
    ex_s = lhs - strong
    eq11 = lg - hg
    return DecayBatchSummary(
        n=q.shape[0],
        max_excess_strong=float(ex_s.max()) if mode == "coca" else float("nan"),
        max_excess_weak=float(ex_w.max()),
        violations_strong=int((ex_s > slack).sum()) if mode == "coca" else 0,
        violations_weak=int((ex_w > slack).sum()),
        eq11_violations=int((eq11 > slack).sum()),
        eq11_max_excess=float(eq11.max()),
    )


def decay_bound_check(q, k_or_folded_t, table: RotaryTable, s_range, mode: str = "coca", slack: float = 1e-9) -> DecayBoundReport:
    """Per-distance ``|a(s)|`` against the weak (complex) and strong (cosine) Abel bounds.

    ``mode='coca'`` takes folded ``t`` as the second argument and also
    computes ``a(s)`` with the fused score kernel (query at position ``s``,
    ``t`` at position 0) to confirm ``a(s) = sum_j l_j cos(s theta_j)``.
    """
    q = np.asarray(q, dtype=np.float64)
    second = np.asarray(k_or_folded_t, dtype=np.float64)
    s = np.asarray(list(s_range), dtype=np.int64)
    h = effective_h(q, second, mode)
    l = np.abs(h)
    ang = np.outer(s.astype(np.float64), table.freqs)
    a = (h[None] * np.exp(1j * ang)).real.sum(axis=1)
    sum_S, sum_C = _abel_sums(table.freqs, s)
    hg, lg = _gaps(h), _gaps(l)
    weak = hg.max() * sum_S
    strong = lg.max() * sum_C
    closed_err = 0.0
    if mode == "coca":
        closed = (l[None] * np.cos(ang)).sum(axis=1)
        zq_rot = _rotated_pairs(q, table, np.abs(s))
        d = q.shape[-1]
        q_rot = np.concatenate([zq_rot.real, zq_rot.imag], axis=-1)
        n = len(s)
        kern = kernels.fused_scores(
            np.ascontiguousarray(np.broadcast_to(q, (1, n, 1, d))),
            np.ascontiguousarray(q_rot.reshape(1, n, 1, d)),
            np.ascontiguousarray(second.reshape(1, 1, 1, d)),
            1.0,
        )[0, 0, :, 0]
        # s < 0 rows rotate the key instead; cosine symmetry makes them equal
        closed_err = float(max(np.abs(kern - closed).max(), np.abs(a - closed).max())) if n else 0.0
    lhs = np.abs(a)
    return DecayBoundReport(
        s=[int(x) for x in s],
        lhs=lhs.tolist(),
        rhs_weak=weak.tolist(),
        rhs_strong=strong.tolist(),
        h_gaps=hg.tolist(),
        l_gaps=lg.tolist(),
        mode=mode,
        violations_weak=int((lhs - weak > slack).sum()),
        violations_strong=int((lhs - strong > slack).sum()) if mode == "coca" else 0,
        eq11_violations=int((lg - hg > slack).sum()),
        closed_form_max_err=closed_err,
        metadata={
            "boundary": "h_{d/2} = l_{d/2} = 0",
            "S_j": "sum_{k<j} exp(i s theta_k)",
            "C_j": "sum_{k<j} cos(s theta_k)",
            "slack": slack,
            "strong_bound_checked": mode == "coca",
        },
    )


@dataclass
class BorderEvent:
    s: int
    s_exact: float
    border: str  # "k", "-q" or "q"
    scanned: bool


def _border_name(k: int) -> str:
    if k == 0:
        return "k"
    return "-q" if k % 2 else "q"


def rotary_border_report(theta0: float, table: RotaryTable, s_max: int) -> dict:
    """Monotonicity reversals of ``a_j(s) = cos(theta0 - s theta_j)`` for ``s`` in ``[0, s_max]``.

    Here ``theta0`` is the angle of the key measured from the query (the
    query pair is the x-axis), i.e. ``-initial_angles(q, k)``. Reversals sit
    where the relative angle ``theta0 - s theta_j`` reaches ``-k pi``:
    the k-border for ``k = 0``, the ``-q`` border for odd ``k`` and the ``q``
    border for even ``k >= 2``. Each is reported at ``ceil(s*)`` and checked
    against a slope-sign scan built from the rotary tables.
    Returns ``{j: [BorderEvent, ...]}`` plus ``"agree"``.
    """
    if not -math.pi < theta0 <= math.pi:
        raise InputError(f"theta0 must be in (-pi, pi], got {theta0}")
    s = np.arange(s_max + 1)
    tab = table.extended(s_max + 1)
    out, agree = {}, True
    for j, th in enumerate(table.freqs):
        if th == 0:
            out[j] = []
            continue
        # scan: key pair at angle theta0 relative to a rotating query
        phase = theta0 - np.arctan2(tab.sin_cache[s, j], tab.cos_cache[s, j])
        signs = -_slope_sign(1.0, phase, th)  # d/ds cos(theta0 - s th) = th sin(...)
        scanned, last = [], None
        for i, sg in enumerate(signs):
            if sg == 0:
                scanned.append(i)
                last = int(np.sign(np.sin(theta0 - (i + 0.5) * th)))
                continue
            if last is None:
                last = sg
            elif sg != last:
                scanned.append(i)
                last = sg
        events = []
        # first border at s >= 0 (within the tie tolerance); k = -1 when theta0 sits at pi
        k = -1 if (theta0 - math.pi) / th >= -TIE_TOL_S else (0 if theta0 / th >= -TIE_TOL_S else 1)
        while True:
            s_star = (theta0 + k * math.pi) / th
            if s_star > s_max + TIE_TOL_S:
                break
            idx = max(0, math.ceil(s_star - TIE_TOL_S))
            events.append(BorderEvent(idx, s_star, _border_name(k), idx in scanned))
            k += 1
        agree &= [e.s for e in events] == scanned
        out[j] = events
    out["agree"] = agree
    return out


def contraction_memory_probe(sq: int, sk: int, heads: int, d: int, batch: int = 1, seed: int = 0, backend: str = "python") -> dict:
    """Peak traced allocation (in elements) while computing scores both ways.

    Inputs are allocated before tracing starts, so peaks count the output,
    workspaces and temporaries only. Uses ``tracemalloc``, which sees numpy
    buffers and the compiled core's raw allocations.
    """
    rng = np.random.default_rng(seed)
    q_raw = rng.standard_normal((batch, sq, heads, d))
    q_rot = rng.standard_normal((batch, sq, heads, d))
    t_rot = np.abs(rng.standard_normal((batch, sk, heads, d)))
    itemsize = q_raw.dtype.itemsize

    def peak(fn):
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            fn()
            _, top = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        return top

    fused = peak(lambda: kernels.fused_scores(q_raw, q_rot, t_rot, 1.0, backend=backend))
    naive = peak(lambda: kernels.naive_scores(q_raw, q_rot, t_rot, 1.0))
    return {
        "shape": dict(batch=batch, sq=sq, sk=sk, heads=heads, d=d),
        "backend": backend,
        "fused_peak_elems": fused // itemsize,
        "naive_peak_elems": naive // itemsize,
        "key_tensor_elems": batch * sq * sk * heads * d,
        "ratio": naive / max(fused, 1),
    }


__all__ = [
    "BorderEvent",
    "DecayBatchSummary",
    "DecayBoundReport",
    "OrderBreakReport",
    "contraction_memory_probe",
    "decay_bound_batch",
    "decay_bound_check",
    "effective_h",
    "initial_angles",
    "order_break_scan",
    "rotary_border_report",
]
