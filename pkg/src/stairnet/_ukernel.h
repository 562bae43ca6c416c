/* Register-blocked GEMM micro-kernels.
 *
 * Each call computes a full SN_MR x SN_NR tile of C from packed panels of A
 * (SN_MR rows interleaved per k) and B (SN_NR columns per k).  Partial tiles
 * are computed at full size against zero padding and only the valid region is
 * written back, so cost is a step function of ceil(m / SN_MR).
 */
#ifndef STAIRNET_UKERNEL_H
#define STAIRNET_UKERNEL_H

#include <stddef.h>

#define SN_MR 16
#define SN_NR 16

typedef float sn_vf __attribute__((vector_size(SN_NR * sizeof(float)), aligned(4)));
typedef double sn_vd __attribute__((vector_size(SN_NR * sizeof(double)), aligned(8)));

#define SN_ROWS(X) X(0) X(1) X(2) X(3) X(4) X(5) X(6) X(7) \
                   X(8) X(9) X(10) X(11) X(12) X(13) X(14) X(15)

#define SN_DEFINE_MICRO(NAME, T, V)                                              \
static inline void NAME(ptrdiff_t kc, const T* ap, const T* bp, T* c,           \
                        ptrdiff_t ldc, ptrdiff_t mr, ptrdiff_t nr, int first) {  \
    SN_ROWS(SN_DECL_##V)                                                         \
    for (ptrdiff_t p = 0; p < kc; ++p) {                                         \
        const V bv = *(const V*)(bp + p * SN_NR);                                \
        const T* a = ap + p * SN_MR;                                             \
        SN_ROWS(SN_FMA)                                                          \
    }                                                                            \
    T out[SN_MR][SN_NR];                                                         \
    SN_ROWS(SN_STORE_##V)                                                        \
    for (ptrdiff_t i = 0; i < mr; ++i) {                                         \
        T* row = c + i * ldc;                                                    \
        if (first) {                                                             \
            for (ptrdiff_t j = 0; j < nr; ++j) row[j] = out[i][j];               \
        } else {                                                                 \
            for (ptrdiff_t j = 0; j < nr; ++j) row[j] += out[i][j];              \
        }                                                                        \
    }                                                                            \
}

#define SN_DECL_sn_vf(i) sn_vf acc##i = (sn_vf){0};
#define SN_DECL_sn_vd(i) sn_vd acc##i = (sn_vd){0};
#define SN_FMA(i) acc##i += a[i] * bv;
#define SN_STORE_sn_vf(i) *(sn_vf*)out[i] = acc##i;
#define SN_STORE_sn_vd(i) *(sn_vd*)out[i] = acc##i;

SN_DEFINE_MICRO(sn_micro_f32, float, sn_vf)
SN_DEFINE_MICRO(sn_micro_f64, double, sn_vd)

#endif
