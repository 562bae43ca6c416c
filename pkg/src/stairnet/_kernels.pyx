# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GEMM and im2col kernels.

The GEMM follows the usual packed three-level blocking: B is packed into
NR-column panels per (NC, KC) block, A into MR-row panels per (MC, KC) block,
and the register micro-kernel from ``_ukernel.h`` computes MR x NR tiles.
Accumulation order along k is fixed by the blocking, independent of the
thread count, so results are bitwise reproducible.
"""
from cython.parallel cimport prange
from libc.stdlib cimport free, malloc

cdef extern from "_ukernel.h" nogil:
    enum:
        SN_MR
        SN_NR
    void sn_micro_f32(Py_ssize_t kc, const float* ap, const float* bp, float* c,
                      Py_ssize_t ldc, Py_ssize_t mr, Py_ssize_t nr, int first)
    void sn_micro_f64(Py_ssize_t kc, const double* ap, const double* bp, double* c,
                      Py_ssize_t ldc, Py_ssize_t mr, Py_ssize_t nr, int first)

ctypedef fused real:
    float
    double

cdef enum:
    KC = 256
    MC = 128
    NC = 4096

MR = SN_MR
NR = SN_NR
BLOCKING = {"MR": SN_MR, "NR": SN_NR, "KC": KC, "MC": MC, "NC": NC}


cdef inline Py_ssize_t _min(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a < b else b


cdef inline void _micro(Py_ssize_t kc, const real* ap, const real* bp, real* c,
                        Py_ssize_t ldc, Py_ssize_t mr, Py_ssize_t nr, int first) noexcept nogil:
    if real is float:
        sn_micro_f32(kc, ap, bp, c, ldc, mr, nr, first)
    else:
        sn_micro_f64(kc, ap, bp, c, ldc, mr, nr, first)


def gemm_into(const real[:, :] a, const real[:, :] b, real[:, ::1] c, int num_threads=1):
    """c = a @ b, with a and b given as arbitrary strided views."""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t ldc = c.shape[1]
    cdef Py_ssize_t jb, pb, ib, jp, ip, jc, pc, ic, jr, ir, kc, mc, nc, p, i, j
    cdef real* apack
    cdef real* bpack
    if k == 0:
        c[:, :] = 0
        return
    if m == 0 or n == 0:
        return
    cdef Py_ssize_t kcap = _min(KC, k)
    cdef Py_ssize_t mcap = (_min(MC, m) + SN_MR - 1) // SN_MR * SN_MR
    cdef Py_ssize_t ncap = (_min(NC, n) + SN_NR - 1) // SN_NR * SN_NR
    apack = <real*> malloc(sizeof(real) * mcap * kcap)
    bpack = <real*> malloc(sizeof(real) * kcap * ncap)
    if apack == NULL or bpack == NULL:
        free(apack)
        free(bpack)
        raise MemoryError()
    with nogil:
        for jb in range((n + NC - 1) // NC):
            jc = jb * NC
            nc = _min(NC, n - jc)
            for pb in range((k + KC - 1) // KC):
                pc = pb * KC
                kc = _min(KC, k - pc)
                for jp in range((nc + SN_NR - 1) // SN_NR):
                    jr = jp * SN_NR
                    for p in range(kc):
                        for j in range(SN_NR):
                            if jr + j < nc:
                                bpack[jr * kc + p * SN_NR + j] = b[pc + p, jc + jr + j]
                            else:
                                bpack[jr * kc + p * SN_NR + j] = 0
                for ib in range((m + MC - 1) // MC):
                    ic = ib * MC
                    mc = _min(MC, m - ic)
                    for ip in range((mc + SN_MR - 1) // SN_MR):
                        ir = ip * SN_MR
                        for p in range(kc):
                            for i in range(SN_MR):
                                if ir + i < mc:
                                    apack[ir * kc + p * SN_MR + i] = a[ic + ir + i, pc + p]
                                else:
                                    apack[ir * kc + p * SN_MR + i] = 0
                    for jp in prange((nc + SN_NR - 1) // SN_NR, num_threads=num_threads,
                                     schedule="static"):
                        jr = jp * SN_NR
                        for ip in range((mc + SN_MR - 1) // SN_MR):
                            ir = ip * SN_MR
                            _micro(kc, apack + ir * kc, bpack + jr * kc,
                                   &c[ic + ir, jc + jr], ldc,
                                   _min(SN_MR, mc - ir), _min(SN_NR, nc - jr), pc == 0)
    free(apack)
    free(bpack)


def im2col_into(const real[:, :, :, ::1] x, real[:, ::1] out, int ksize, int stride, int pad):
    """Unfold NCHW input into a (C*k*k) x (N*Ho*Wo) column matrix."""
    cdef Py_ssize_t n = x.shape[0], ch = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - ksize) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - ksize) // stride + 1
    cdef Py_ssize_t c, ki, kj, b, oh, ow, ih, iw, row, col
    with nogil:
        for c in range(ch):
            for ki in range(ksize):
                for kj in range(ksize):
                    row = (c * ksize + ki) * ksize + kj
                    for b in range(n):
                        for oh in range(ho):
                            ih = oh * stride + ki - pad
                            col = (b * ho + oh) * wo
                            if ih < 0 or ih >= h:
                                for ow in range(wo):
                                    out[row, col + ow] = 0
                                continue
                            for ow in range(wo):
                                iw = ow * stride + kj - pad
                                if iw < 0 or iw >= w:
                                    out[row, col + ow] = 0
                                else:
                                    out[row, col + ow] = x[b, c, ih, iw]


def col2im_into(const real[:, ::1] cols, real[:, :, :, ::1] out, int ksize, int stride, int pad):
    """Adjoint of im2col: scatter-add columns back into a zeroed NCHW tensor."""
    cdef Py_ssize_t n = out.shape[0], ch = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - ksize) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - ksize) // stride + 1
    cdef Py_ssize_t c, ki, kj, b, oh, ow, ih, iw, row, col
    with nogil:
        for c in range(ch):
            for ki in range(ksize):
                for kj in range(ksize):
                    row = (c * ksize + ki) * ksize + kj
                    for b in range(n):
                        for oh in range(ho):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= h:
                                continue
                            col = (b * ho + oh) * wo
                            for ow in range(wo):
                                iw = ow * stride + kj - pad
                                if iw >= 0 and iw < w:
                                    out[b, c, ih, iw] += cols[row, col + ow]
