"""Slow, independent reference computations used by several test modules."""

import math

import numpy as np


def scalar_triple_loop(q_raw, q_rot, t_rot, scale):
    """Pair-wise complex triple product, one python complex at a time."""
    b, sq, h, d = q_raw.shape
    sk = t_rot.shape[1]
    half = d // 2
    out = np.zeros((b, h, sq, sk))
    for bi in range(b):
        for hi in range(h):
            for m in range(sq):
                for n in range(sk):
                    acc = 0j
                    for j in range(half):
                        zr = complex(q_rot[bi, m, hi, j], q_rot[bi, m, hi, j + half])
                        zq = complex(q_raw[bi, m, hi, j], q_raw[bi, m, hi, j + half])
                        zt = complex(t_rot[bi, n, hi, j], t_rot[bi, n, hi, j + half])
                        acc += zr * zq.conjugate() * zt.conjugate() * (1 + 1j) / 2
                    out[bi, hi, m, n] = acc.real / scale
    return out


def rotate_vec(x, pos, base=10000.0):
    """Rotate one head vector (half-split pairs) by ``pos`` with plain math calls."""
    d = len(x)
    half = d // 2
    out = list(x)
    for j in range(half):
        th = pos * base ** (-2.0 * j / d)
        c, s = math.cos(th), math.sin(th)
        out[j] = x[j] * c - x[j + half] * s
        out[j + half] = x[j] * s + x[j + half] * c
    return np.array(out)


def fold(t):
    half = len(t) // 2
    tau = [max((t[j] + t[j + half]) / 2, 0.0) for j in range(half)]
    return np.array(tau + tau)


def coca_score_first_principles(q, t_raw, m, n, scale=1.0, base=10000.0):
    """Key = q * fold(t) elementwise, rotated to position n; query rotated to m."""
    key = q * fold(t_raw)
    return float(rotate_vec(q, m, base) @ rotate_vec(key, n, base)) / scale
