/* Fixed-order convolution kernels.
 *
 * Each output element accumulates its products over (in-channel, kernel-row,
 * kernel-col) in ascending order into a double accumulator, matching the
 * reference scalar loop bit for bit.  Must be compiled WITHOUT fused
 * multiply-add or reduction vectorization (see _native.py for flags).
 */
#include <stddef.h>

#define CONV_FWD(NAME, TYPE)                                                   \
void NAME(const TYPE *xp, const TYPE *w, double *out,                         \
          long n_img, long ci_n, long hp, long wp,                            \
          long co_n, long kh, long kw, long oh_n, long ow_n, long stride) {   \
    for (long n = 0; n < n_img; n++)                                          \
      for (long co = 0; co < co_n; co++)                                      \
        for (long oh = 0; oh < oh_n; oh++) {                                  \
          const long ow4 = ow_n & ~3L;                                        \
          double *orow = out + ((n * co_n + co) * oh_n + oh) * ow_n;          \
          for (long ow = 0; ow < ow4; ow += 4) {                              \
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;                    \
            for (long ci = 0; ci < ci_n; ci++)                                \
              for (long u = 0; u < kh; u++) {                                 \
                const TYPE *xrow =                                            \
                    xp + ((n * ci_n + ci) * hp + oh * stride + u) * wp        \
                       + ow * stride;                                         \
                const TYPE *wrow = w + ((co * ci_n + ci) * kh + u) * kw;      \
                for (long v = 0; v < kw; v++) {                               \
                  double wv = (double)wrow[v];                                \
                  a0 += (double)xrow[v] * wv;                                 \
                  a1 += (double)xrow[v + stride] * wv;                        \
                  a2 += (double)xrow[v + 2 * stride] * wv;                    \
                  a3 += (double)xrow[v + 3 * stride] * wv;                    \
                }                                                             \
              }                                                               \
            orow[ow] = a0; orow[ow + 1] = a1;                                 \
            orow[ow + 2] = a2; orow[ow + 3] = a3;                             \
          }                                                                   \
          for (long ow = ow4; ow < ow_n; ow++) {                              \
            double acc = 0.0;                                                 \
            for (long ci = 0; ci < ci_n; ci++)                                \
              for (long u = 0; u < kh; u++)                                   \
                for (long v = 0; v < kw; v++)                                 \
                  acc += (double)xp[((n * ci_n + ci) * hp + oh * stride + u)  \
                                    * wp + ow * stride + v]                   \
                       * (double)w[((co * ci_n + ci) * kh + u) * kw + v];     \
            orow[ow] = acc;                                                   \
          }                                                                   \
        }                                                                     \
}

CONV_FWD(conv_fwd_f32, float)
CONV_FWD(conv_fwd_f64, double)
