# Fused three-operand CoCA score contraction and its backward pass.
#
# Layout: activations are [batch, seq, heads, d] C-contiguous, scores are
# [batch, heads, sq, sk]. Coordinates j and j + d/2 form one complex pair.
#
#   score[m, n] = Re sum_j q_rot[m]_j * conj(q_raw[m]_j) * conj(t_rot[n]_j) * (1+i)/2
#
# Nothing of size sq*sk*d is ever allocated. Per (batch, head) the forward
# keeps a d-length pair-product buffer plus a transposed copy of t (sk*d); the
# backward keeps d- and sk*d-sized accumulators. Inner loops are axpy updates
# over a contiguous axis so they vectorise without reassociating sums.
#
# `causal_offset >= 0` restricts work to keys n <= causal_offset + m; skipped
# scores are written as 0 and must be masked by the caller.

from cython cimport floating
from cython.parallel cimport prange
from cpython.mem cimport PyMem_RawMalloc, PyMem_RawFree
from libc.string cimport memset


cdef inline void _pair_product(
    const floating* a, const floating* b, floating* w, Py_ssize_t half
) noexcept nogil:
    cdef Py_ssize_t j
    cdef floating g_re, g_im
    for j in range(half):
        g_re = b[j] * a[j] + b[j + half] * a[j + half]
        g_im = b[j + half] * a[j] - b[j] * a[j + half]
        w[j] = (g_re - g_im) * <floating> 0.5
        w[j + half] = (g_re + g_im) * <floating> 0.5


def scores_forward(
    const floating[:, :, :, ::1] q_raw,
    const floating[:, :, :, ::1] q_rot,
    const floating[:, :, :, ::1] t_rot,
    double scale,
    floating[:, :, :, ::1] out,
    int num_threads=1,
    Py_ssize_t causal_offset=-1,
):
    cdef Py_ssize_t B = q_raw.shape[0]
    cdef Py_ssize_t sq = q_raw.shape[1]
    cdef Py_ssize_t H = q_raw.shape[2]
    cdef Py_ssize_t D = q_raw.shape[3]
    cdef Py_ssize_t sk = t_rot.shape[1]
    cdef Py_ssize_t half = D // 2
    cdef Py_ssize_t bh, b, p, m, n, d, n_end
    cdef floating wd
    cdef floating inv = <floating> (1.0 / scale)
    cdef floating* w
    cdef floating* tt
    cdef floating* row
    if B * H == 0 or sq == 0 or sk == 0:
        return
    for bh in prange(B * H, nogil=True, num_threads=num_threads, schedule="static"):
        b = bh // H
        p = bh % H
        w = <floating*> PyMem_RawMalloc(D * sizeof(floating))
        tt = <floating*> PyMem_RawMalloc(sk * D * sizeof(floating))
        # tt[d, n] = t_rot[b, n, p, d] / scale
        for n in range(sk):
            for d in range(D):
                tt[d * sk + n] = t_rot[b, n, p, d] * inv
        for m in range(sq):
            _pair_product(&q_raw[b, m, p, 0], &q_rot[b, m, p, 0], w, half)
            row = &out[b, p, m, 0]
            n_end = sk
            if causal_offset >= 0 and causal_offset + m + 1 < sk:
                n_end = causal_offset + m + 1
            memset(row, 0, sk * sizeof(floating))
            for d in range(D):
                wd = w[d]
                for n in range(n_end):
                    row[n] = row[n] + wd * tt[d * sk + n]
        PyMem_RawFree(w)
        PyMem_RawFree(tt)


def scores_backward(
    const floating[:, :, :, ::1] q_raw,
    const floating[:, :, :, ::1] q_rot,
    const floating[:, :, :, ::1] t_rot,
    const floating[:, :, :, ::1] grad_out,
    double scale,
    floating[:, :, :, ::1] g_qraw,
    floating[:, :, :, ::1] g_qrot,
    floating[:, :, :, ::1] g_t,
    int num_threads=1,
    Py_ssize_t causal_offset=-1,
):
    cdef Py_ssize_t B = q_raw.shape[0]
    cdef Py_ssize_t sq = q_raw.shape[1]
    cdef Py_ssize_t H = q_raw.shape[2]
    cdef Py_ssize_t D = q_raw.shape[3]
    cdef Py_ssize_t sk = t_rot.shape[1]
    cdef Py_ssize_t half = D // 2
    cdef Py_ssize_t bh, b, p, m, n, d, j, n_end
    cdef floating g, g_re, g_im, a1, a2, b1, b2
    cdef floating inv = <floating> (1.0 / scale)
    cdef floating* w
    cdef floating* gw
    cdef floating* gt
    cdef const floating* trow
    if B * H == 0:
        return
    for bh in prange(B * H, nogil=True, num_threads=num_threads, schedule="static"):
        b = bh // H
        p = bh % H
        w = <floating*> PyMem_RawMalloc(D * sizeof(floating))
        gw = <floating*> PyMem_RawMalloc(D * sizeof(floating))
        gt = <floating*> PyMem_RawMalloc(sk * D * sizeof(floating))
        memset(gt, 0, sk * D * sizeof(floating))
        for m in range(sq):
            memset(gw, 0, D * sizeof(floating))
            _pair_product(&q_raw[b, m, p, 0], &q_rot[b, m, p, 0], w, half)
            n_end = sk
            if causal_offset >= 0 and causal_offset + m + 1 < sk:
                n_end = causal_offset + m + 1
            for n in range(n_end):
                g = grad_out[b, p, m, n] * inv
                if g == 0:
                    continue
                trow = &t_rot[b, n, p, 0]
                for d in range(D):
                    gw[d] = gw[d] + g * trow[d]
                for d in range(D):
                    gt[n * D + d] = gt[n * D + d] + g * w[d]
            # gw holds dL/dP; pull it back through the pair product
            for j in range(half):
                g_re = (gw[j] + gw[j + half]) * <floating> 0.5
                g_im = (gw[j + half] - gw[j]) * <floating> 0.5
                a1 = q_raw[b, m, p, j]
                a2 = q_raw[b, m, p, j + half]
                b1 = q_rot[b, m, p, j]
                b2 = q_rot[b, m, p, j + half]
                g_qraw[b, m, p, j] = g_re * b1 + g_im * b2
                g_qraw[b, m, p, j + half] = g_re * b2 - g_im * b1
                g_qrot[b, m, p, j] = g_re * a1 - g_im * a2
                g_qrot[b, m, p, j + half] = g_re * a2 + g_im * a1
        for n in range(sk):
            for d in range(D):
                g_t[b, n, p, d] = gt[n * D + d]
        PyMem_RawFree(w)
        PyMem_RawFree(gw)
        PyMem_RawFree(gt)
