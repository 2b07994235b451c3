"""Pure-numpy versions of the score kernels.

Same contract as the compiled module: ``[B, s, H, D]`` inputs, ``[B, H, sq, sk]``
scores. The forward builds the per-query pair product ``P`` (an ``sq*D``
workspace per head) and hands the remaining contraction against ``t`` to a
batched matmul, so the ``sq*sk*D`` key tensor is never built.
"""

import numpy as np


def pair_product(q_raw, q_rot):
    """``P_j = q_rot_j * conj(q_raw_j) * (1 + i) / 2`` per complex pair, in real coordinates.

    ``Re(P conj(t_rot))`` summed over pairs is the CoCA score; the ``(1 + i)/2``
    undoes the 45 degree phase the fold-and-copy puts on every ``t`` pair.
    """
    half = q_raw.shape[-1] // 2
    a, a2 = q_raw[..., :half], q_raw[..., half:]
    b, b2 = q_rot[..., :half], q_rot[..., half:]
    g_re = b * a + b2 * a2
    g_im = b2 * a - b * a2
    return np.concatenate([(g_re - g_im) * 0.5, (g_re + g_im) * 0.5], axis=-1)


def pair_product_adjoint(g_p, q_raw, q_rot):
    """Pull a gradient on ``P`` back to ``(q_raw, q_rot)``."""
    half = q_raw.shape[-1] // 2
    a, a2 = q_raw[..., :half], q_raw[..., half:]
    b, b2 = q_rot[..., :half], q_rot[..., half:]
    gp_re, gp_im = g_p[..., :half], g_p[..., half:]
    g_re = (gp_re + gp_im) * 0.5
    g_im = (gp_im - gp_re) * 0.5
    g_qraw = np.concatenate([g_re * b + g_im * b2, g_re * b2 - g_im * b], axis=-1)
    g_qrot = np.concatenate([g_re * a - g_im * a2, g_re * a2 + g_im * a], axis=-1)
    return g_qraw, g_qrot


def scores_forward(q_raw, q_rot, t_rot, scale, out, num_threads=1, causal_offset=-1):
    w = pair_product(q_raw, q_rot)
    np.matmul(w.transpose(0, 2, 1, 3), t_rot.transpose(0, 2, 3, 1), out=out)
    out *= out.dtype.type(1.0 / scale)


def scores_backward(
    q_raw, q_rot, t_rot, grad_out, scale, g_qraw, g_qrot, g_t, num_threads=1, causal_offset=-1
):
    g = grad_out * grad_out.dtype.type(1.0 / scale)
    g_p = np.matmul(g, t_rot.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3)
    g_qraw[...], g_qrot[...] = pair_product_adjoint(g_p, q_raw, q_rot)
    w = pair_product(q_raw, q_rot).transpose(0, 2, 1, 3)
    g_t[...] = np.matmul(g.transpose(0, 1, 3, 2), w).transpose(0, 2, 1, 3)
