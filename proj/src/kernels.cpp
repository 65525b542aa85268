#include "octseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace octseg::kernels {

namespace {

struct ConvDims {
    int64_t ci, d, h, w;
    int64_t co, kd, kh, kw;
    int64_t pd, ph, pw;
};

ConvDims conv_dims(const Tensor& in, const Tensor& weight) {
    if (in.rank() != 4 || weight.rank() != 5)
        throw std::invalid_argument("conv3d: input must be rank 4 and weight rank 5");
    ConvDims c{};
    c.ci = in.dim(0);
    c.d = in.dim(1);
    c.h = in.dim(2);
    c.w = in.dim(3);
    c.co = weight.dim(0);
    c.kd = weight.dim(2);
    c.kh = weight.dim(3);
    c.kw = weight.dim(4);
    if (weight.dim(1) != c.ci) throw std::invalid_argument("conv3d: channel mismatch");
    c.pd = c.kd / 2;
    c.ph = c.kh / 2;
    c.pw = c.kw / 2;
    return c;
}

inline int64_t idx4(int64_t i, int64_t j, int64_t k, int64_t l, int64_t d1, int64_t d2, int64_t d3) {
    return ((i * d1 + j) * d2 + k) * d3 + l;
}

} // namespace

void conv3d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, Tensor& out) {
    const ConvDims c = conv_dims(in, weight);
    if (out.shape != std::vector<int64_t>{c.co, c.d, c.h, c.w})
        throw std::invalid_argument("conv3d_forward: bad output shape");
    const double* __restrict pin = in.data();
    const double* __restrict pw = weight.data();
    const double* __restrict pb = bias.data();
    double* __restrict po = out.data();
    const int64_t w = c.w;

#pragma omp parallel for schedule(static)
    for (int64_t z = 0; z < c.d; ++z) {
        std::vector<double> accbuf(static_cast<size_t>(c.co * w));
        double* __restrict acc = accbuf.data();
        for (int64_t y = 0; y < c.h; ++y) {
            for (int64_t i = 0; i < c.co * w; ++i) acc[i] = 0.0;
            for (int64_t ci = 0; ci < c.ci; ++ci) {
                for (int64_t kz = 0; kz < c.kd; ++kz) {
                    const int64_t zi = z + kz - c.pd;
                    if (zi < 0 || zi >= c.d) continue;
                    for (int64_t ky = 0; ky < c.kh; ++ky) {
                        const int64_t yi = y + ky - c.ph;
                        if (yi < 0 || yi >= c.h) continue;
                        const double* __restrict irow = pin + ((ci * c.d + zi) * c.h + yi) * w;
                        for (int64_t co = 0; co < c.co; ++co) {
                            const double* __restrict wrow =
                                pw + (((co * c.ci + ci) * c.kd + kz) * c.kh + ky) * c.kw;
                            double* __restrict a = acc + co * w;
                            if (c.kw == 3 && w >= 2) {
                                const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                a[0] += w1 * irow[0] + w2 * irow[1];
#pragma omp simd
                                for (int64_t x = 1; x < w - 1; ++x)
                                    a[x] += w0 * irow[x - 1] + w1 * irow[x] + w2 * irow[x + 1];
                                a[w - 1] += w0 * irow[w - 2] + w1 * irow[w - 1];
                            } else {
                                for (int64_t kx = 0; kx < c.kw; ++kx) {
                                    const double wv = wrow[kx];
                                    const int64_t sh = kx - c.pw;
                                    const int64_t x0 = std::max<int64_t>(0, -sh);
                                    const int64_t x1 = std::min<int64_t>(w, w - sh);
                                    const double* __restrict is = irow + sh;
#pragma omp simd
                                    for (int64_t x = x0; x < x1; ++x) a[x] += wv * is[x];
                                }
                            }
                        }
                    }
                }
            }
            for (int64_t co = 0; co < c.co; ++co) {
                double* __restrict orow = po + ((co * c.d + z) * c.h + y) * w;
                const double* __restrict a = acc + co * w;
                const double b = pb[co];
#pragma omp simd
                for (int64_t x = 0; x < w; ++x) orow[x] = a[x] + b;
            }
        }
    }
}

void conv3d_backward_input(const Tensor& gout, const Tensor& weight, Tensor& gin) {
    // gin has the input shape, gout the output shape.
    if (gin.rank() != 4 || weight.rank() != 5)
        throw std::invalid_argument("conv3d_backward_input: bad ranks");
    const ConvDims c = conv_dims(gin, weight);
    if (gout.shape != std::vector<int64_t>{c.co, c.d, c.h, c.w})
        throw std::invalid_argument("conv3d_backward_input: bad gout shape");
    const double* __restrict pg = gout.data();
    const double* __restrict pw = weight.data();
    double* __restrict pi = gin.data();
    const int64_t w = c.w;

#pragma omp parallel for schedule(static)
    for (int64_t zi = 0; zi < c.d; ++zi) {
        std::vector<double> accbuf(static_cast<size_t>(c.ci * w));
        double* __restrict acc = accbuf.data();
        for (int64_t yi = 0; yi < c.h; ++yi) {
            for (int64_t i = 0; i < c.ci * w; ++i) acc[i] = 0.0;
            for (int64_t co = 0; co < c.co; ++co) {
                for (int64_t kz = 0; kz < c.kd; ++kz) {
                    const int64_t zo = zi - kz + c.pd;
                    if (zo < 0 || zo >= c.d) continue;
                    for (int64_t ky = 0; ky < c.kh; ++ky) {
                        const int64_t yo = yi - ky + c.ph;
                        if (yo < 0 || yo >= c.h) continue;
                        const double* __restrict grow = pg + ((co * c.d + zo) * c.h + yo) * w;
                        for (int64_t ci = 0; ci < c.ci; ++ci) {
                            const double* __restrict wrow =
                                pw + (((co * c.ci + ci) * c.kd + kz) * c.kh + ky) * c.kw;
                            double* __restrict a = acc + ci * w;
                            if (c.kw == 3 && w >= 2) {
                                // xo = xi - (kx - pw): kx=0 reads x+1, kx=2 reads x-1
                                const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                a[0] += w0 * grow[1] + w1 * grow[0];
#pragma omp simd
                                for (int64_t x = 1; x < w - 1; ++x)
                                    a[x] += w0 * grow[x + 1] + w1 * grow[x] + w2 * grow[x - 1];
                                a[w - 1] += w1 * grow[w - 1] + w2 * grow[w - 2];
                            } else {
                                for (int64_t kx = 0; kx < c.kw; ++kx) {
                                    const double wv = wrow[kx];
                                    const int64_t sh = kx - c.pw; // xo = xi - sh
                                    const int64_t x0 = std::max<int64_t>(0, sh);
                                    const int64_t x1 = std::min<int64_t>(w, w + sh);
                                    const double* __restrict gs = grow - sh;
#pragma omp simd
                                    for (int64_t x = x0; x < x1; ++x) a[x] += wv * gs[x];
                                }
                            }
                        }
                    }
                }
            }
            for (int64_t ci = 0; ci < c.ci; ++ci) {
                double* __restrict irow = pi + ((ci * c.d + zi) * c.h + yi) * w;
                const double* __restrict a = acc + ci * w;
#pragma omp simd
                for (int64_t x = 0; x < w; ++x) irow[x] = a[x];
            }
        }
    }
}

void conv3d_backward_params(const Tensor& gout, const Tensor& in, Tensor& gweight, Tensor& gbias) {
    const ConvDims c = conv_dims(in, gweight);
    if (gout.shape != std::vector<int64_t>{c.co, c.d, c.h, c.w})
        throw std::invalid_argument("conv3d_backward_params: bad gout shape");
    const double* __restrict pg = gout.data();
    const double* __restrict pi = in.data();
    double* __restrict pgw = gweight.data();
    double* __restrict pgb = gbias.data();
    const int64_t w = c.w;

#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < c.co; ++co) {
        double acc = 0.0;
        const double* base = pg + co * c.d * c.h * c.w;
        for (int64_t i = 0; i < c.d * c.h * c.w; ++i) acc += base[i];
        pgb[co] = acc;
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t co = 0; co < c.co; ++co) {
        for (int64_t ci = 0; ci < c.ci; ++ci) {
            std::vector<double> accbuf(static_cast<size_t>(c.kd * c.kh * c.kw), 0.0);
            for (int64_t z = 0; z < c.d; ++z) {
                for (int64_t y = 0; y < c.h; ++y) {
                    const double* __restrict orow = pg + ((co * c.d + z) * c.h + y) * w;
                    for (int64_t kz = 0; kz < c.kd; ++kz) {
                        const int64_t zi = z + kz - c.pd;
                        if (zi < 0 || zi >= c.d) continue;
                        for (int64_t ky = 0; ky < c.kh; ++ky) {
                            const int64_t yi = y + ky - c.ph;
                            if (yi < 0 || yi >= c.h) continue;
                            const double* __restrict irow = pi + ((ci * c.d + zi) * c.h + yi) * w;
                            double* __restrict a = accbuf.data() + (kz * c.kh + ky) * c.kw;
                            if (c.kw == 3 && w >= 2) {
                                double r0 = 0.0, r1 = 0.0, r2 = 0.0;
                                r1 += orow[0] * irow[0];
                                r2 += orow[0] * irow[1];
#pragma omp simd reduction(+ : r0, r1, r2)
                                for (int64_t x = 1; x < w - 1; ++x) {
                                    const double g = orow[x];
                                    r0 += g * irow[x - 1];
                                    r1 += g * irow[x];
                                    r2 += g * irow[x + 1];
                                }
                                r0 += orow[w - 1] * irow[w - 2];
                                r1 += orow[w - 1] * irow[w - 1];
                                a[0] += r0;
                                a[1] += r1;
                                a[2] += r2;
                            } else {
                                for (int64_t kx = 0; kx < c.kw; ++kx) {
                                    const int64_t sh = kx - c.pw;
                                    const int64_t x0 = std::max<int64_t>(0, -sh);
                                    const int64_t x1 = std::min<int64_t>(w, w - sh);
                                    const double* __restrict is = irow + sh;
                                    double r = 0.0;
#pragma omp simd reduction(+ : r)
                                    for (int64_t x = x0; x < x1; ++x) r += orow[x] * is[x];
                                    a[kx] += r;
                                }
                            }
                        }
                    }
                }
            }
            double* __restrict gw = pgw + (co * c.ci + ci) * c.kd * c.kh * c.kw;
            for (int64_t i = 0; i < c.kd * c.kh * c.kw; ++i) gw[i] = accbuf[static_cast<size_t>(i)];
        }
    }
}

void maxpool2_forward(const Tensor& in, Tensor& out, std::vector<int32_t>& argmax) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    if (h % 2 || w % 2) throw std::invalid_argument("maxpool2: rows/cols must be even");
    const int64_t ho = h / 2, wo = w / 2;
    if (out.shape != std::vector<int64_t>{cc, d, ho, wo})
        throw std::invalid_argument("maxpool2: bad output shape");
    argmax.assign(static_cast<size_t>(out.numel()), 0);
    const double* pin = in.data();
    double* po = out.data();
    int32_t* pa = argmax.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t c = 0; c < cc; ++c) {
        for (int64_t z = 0; z < d; ++z) {
            for (int64_t y = 0; y < ho; ++y) {
                const double* r0 = pin + idx4(c, z, 2 * y, 0, d, h, w);
                const double* r1 = r0 + w;
                double* orow = po + idx4(c, z, y, 0, d, ho, wo);
                int32_t* arow = pa + idx4(c, z, y, 0, d, ho, wo);
                for (int64_t x = 0; x < wo; ++x) {
                    const double cand[4] = {r0[2 * x], r0[2 * x + 1], r1[2 * x], r1[2 * x + 1]};
                    int best = 0;
                    for (int i = 1; i < 4; ++i)
                        if (cand[i] > cand[best]) best = i;
                    orow[x] = cand[best];
                    arow[x] = best;
                }
            }
        }
    }
}

void maxpool2_backward(const Tensor& gout, const std::vector<int32_t>& argmax, Tensor& gin) {
    const int64_t cc = gin.dim(0), d = gin.dim(1), h = gin.dim(2), w = gin.dim(3);
    const int64_t ho = h / 2, wo = w / 2;
    if (gout.shape != std::vector<int64_t>{cc, d, ho, wo})
        throw std::invalid_argument("maxpool2_backward: bad gout shape");
    gin.fill(0.0);
    const double* pg = gout.data();
    const int32_t* pa = argmax.data();
    double* pi = gin.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t c = 0; c < cc; ++c) {
        for (int64_t z = 0; z < d; ++z) {
            for (int64_t y = 0; y < ho; ++y) {
                const double* grow = pg + idx4(c, z, y, 0, d, ho, wo);
                const int32_t* arow = pa + idx4(c, z, y, 0, d, ho, wo);
                for (int64_t x = 0; x < wo; ++x) {
                    const int32_t k = arow[x];
                    const int64_t yy = 2 * y + (k >> 1), xx = 2 * x + (k & 1);
                    pi[idx4(c, z, yy, xx, d, h, w)] += grow[x];
                }
            }
        }
    }
}

void upsample2_forward(const Tensor& in, Tensor& out) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    if (out.shape != std::vector<int64_t>{cc, d, 2 * h, 2 * w})
        throw std::invalid_argument("upsample2: bad output shape");
    const double* pin = in.data();
    double* po = out.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t c = 0; c < cc; ++c) {
        for (int64_t z = 0; z < d; ++z) {
            for (int64_t y = 0; y < 2 * h; ++y) {
                const double* irow = pin + idx4(c, z, y / 2, 0, d, h, w);
                double* orow = po + idx4(c, z, y, 0, d, 2 * h, 2 * w);
                for (int64_t x = 0; x < 2 * w; ++x) orow[x] = irow[x / 2];
            }
        }
    }
}

void upsample2_backward(const Tensor& gout, Tensor& gin) {
    const int64_t cc = gin.dim(0), d = gin.dim(1), h = gin.dim(2), w = gin.dim(3);
    if (gout.shape != std::vector<int64_t>{cc, d, 2 * h, 2 * w})
        throw std::invalid_argument("upsample2_backward: bad gout shape");
    const double* pg = gout.data();
    double* pi = gin.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t c = 0; c < cc; ++c) {
        for (int64_t z = 0; z < d; ++z) {
            for (int64_t y = 0; y < h; ++y) {
                const double* g0 = pg + idx4(c, z, 2 * y, 0, d, 2 * h, 2 * w);
                const double* g1 = g0 + 2 * w;
                double* irow = pi + idx4(c, z, y, 0, d, h, w);
                for (int64_t x = 0; x < w; ++x)
                    irow[x] = g0[2 * x] + g0[2 * x + 1] + g1[2 * x] + g1[2 * x + 1];
            }
        }
    }
}

void relu_forward(const Tensor& in, Tensor& out) {
    check_same_shape(in, out, "relu");
    const double* pin = in.data();
    double* po = out.data();
    const int64_t n = in.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) po[i] = pin[i] > 0.0 ? pin[i] : 0.0;
}

void relu_backward(const Tensor& gout, const Tensor& in, Tensor& gin) {
    check_same_shape(gout, gin, "relu_backward");
    const double* pg = gout.data();
    const double* pin = in.data();
    double* pi = gin.data();
    const int64_t n = in.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) pi[i] = pin[i] > 0.0 ? pg[i] : 0.0;
}

void channel_norm_forward(const Tensor& in, const Tensor& gamma, const Tensor& beta,
                          bool per_slice, double eps, Tensor& out,
                          Tensor& mean_cache, Tensor& invstd_cache) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    check_same_shape(in, out, "channel_norm");
    const int64_t groups = per_slice ? cc * d : cc;
    const int64_t gsize = per_slice ? h * w : d * h * w;
    mean_cache = Tensor({groups});
    invstd_cache = Tensor({groups});
    const double* pin = in.data();
    double* po = out.data();
    double* pm = mean_cache.data();
    double* ps = invstd_cache.data();
    const double* pgm = gamma.data();
    const double* pbt = beta.data();

#pragma omp parallel for schedule(static)
    for (int64_t g = 0; g < groups; ++g) {
        const double* base = pin + g * gsize;
        double* obase = po + g * gsize;
        const int64_t c = per_slice ? g / d : g;
        double mu = 0.0;
        for (int64_t i = 0; i < gsize; ++i) mu += base[i];
        mu /= static_cast<double>(gsize);
        double var = 0.0;
        for (int64_t i = 0; i < gsize; ++i) {
            const double t = base[i] - mu;
            var += t * t;
        }
        var /= static_cast<double>(gsize);
        const double inv = 1.0 / std::sqrt(var + eps);
        pm[g] = mu;
        ps[g] = inv;
        const double gm = pgm[c], bt = pbt[c];
        for (int64_t i = 0; i < gsize; ++i) obase[i] = gm * ((base[i] - mu) * inv) + bt;
    }
}

void channel_norm_backward(const Tensor& gout, const Tensor& in, const Tensor& gamma,
                           bool per_slice, const Tensor& mean_cache, const Tensor& invstd_cache,
                           Tensor& gin, Tensor& ggamma, Tensor& gbeta) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    const int64_t gsize = per_slice ? h * w : d * h * w;
    const int64_t per_channel = per_slice ? d : 1;
    const double* pg = gout.data();
    const double* pin = in.data();
    const double* pm = mean_cache.data();
    const double* ps = invstd_cache.data();
    const double* pgm = gamma.data();
    double* pi = gin.data();
    double* pgg = ggamma.data();
    double* pgb = gbeta.data();

#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < cc; ++c) {
        double acc_g = 0.0, acc_b = 0.0;
        for (int64_t s = 0; s < per_channel; ++s) {
            const int64_t g = c * per_channel + s;
            const double* xb = pin + g * gsize;
            const double* gb = pg + g * gsize;
            double* ib = pi + g * gsize;
            const double mu = pm[g], inv = ps[g], gm = pgm[c];
            double s1 = 0.0, s2 = 0.0;
            for (int64_t i = 0; i < gsize; ++i) {
                const double xhat = (xb[i] - mu) * inv;
                s1 += gb[i];
                s2 += gb[i] * xhat;
            }
            acc_b += s1;
            acc_g += s2;
            const double n = static_cast<double>(gsize);
            for (int64_t i = 0; i < gsize; ++i) {
                const double xhat = (xb[i] - mu) * inv;
                ib[i] = gm * inv * (gb[i] - s1 / n - xhat * s2 / n);
            }
        }
        pgg[c] = acc_g;
        pgb[c] = acc_b;
    }
}

void warp_rows_forward(const Tensor& in, const std::vector<double>& shifts, Tensor& out) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    check_same_shape(in, out, "warp_rows");
    if (static_cast<int64_t>(shifts.size()) != d)
        throw std::invalid_argument("warp_rows: one shift per B-scan required");
    const double* pin = in.data();
    double* po = out.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t c = 0; c < cc; ++c) {
        for (int64_t b = 0; b < d; ++b) {
            const double s = shifts[static_cast<size_t>(b)];
            for (int64_t y = 0; y < h; ++y) {
                double p = static_cast<double>(y) + s;
                p = std::clamp(p, 0.0, static_cast<double>(h - 1));
                const int64_t i0 = static_cast<int64_t>(std::floor(p));
                const int64_t i1 = std::min(i0 + 1, h - 1);
                const double f = p - static_cast<double>(i0);
                const double* r0 = pin + idx4(c, b, i0, 0, d, h, w);
                const double* r1 = pin + idx4(c, b, i1, 0, d, h, w);
                double* orow = po + idx4(c, b, y, 0, d, h, w);
                for (int64_t x = 0; x < w; ++x) orow[x] = (1.0 - f) * r0[x] + f * r1[x];
            }
        }
    }
}

void warp_rows_backward(const Tensor& gout, const Tensor& in, const std::vector<double>& shifts,
                        Tensor& gin, std::vector<double>& gshifts) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    check_same_shape(gout, gin, "warp_rows_backward");
    gin.fill(0.0);
    gshifts.assign(static_cast<size_t>(d), 0.0);
    const double* pg = gout.data();
    const double* pin = in.data();
    double* pi = gin.data();

#pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < d; ++b) {
        const double s = shifts[static_cast<size_t>(b)];
        double gs = 0.0;
        for (int64_t c = 0; c < cc; ++c) {
            for (int64_t y = 0; y < h; ++y) {
                const double praw = static_cast<double>(y) + s;
                const bool interior = praw > 0.0 && praw < static_cast<double>(h - 1);
                const double p = std::clamp(praw, 0.0, static_cast<double>(h - 1));
                const int64_t i0 = static_cast<int64_t>(std::floor(p));
                const int64_t i1 = std::min(i0 + 1, h - 1);
                const double f = p - static_cast<double>(i0);
                const double* grow = pg + idx4(c, b, y, 0, d, h, w);
                const double* r0 = pin + idx4(c, b, i0, 0, d, h, w);
                const double* r1 = pin + idx4(c, b, i1, 0, d, h, w);
                double* gi0 = pi + idx4(c, b, i0, 0, d, h, w);
                double* gi1 = pi + idx4(c, b, i1, 0, d, h, w);
                for (int64_t x = 0; x < w; ++x) {
                    gi0[x] += (1.0 - f) * grow[x];
                    gi1[x] += f * grow[x];
                    if (interior) gs += grow[x] * (r1[x] - r0[x]);
                }
            }
        }
        gshifts[static_cast<size_t>(b)] = gs;
    }
}

namespace ref {

void conv3d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, Tensor& out) {
    const ConvDims c = conv_dims(in, weight);
    for (int64_t co = 0; co < c.co; ++co)
        for (int64_t z = 0; z < c.d; ++z)
            for (int64_t y = 0; y < c.h; ++y)
                for (int64_t x = 0; x < c.w; ++x) {
                    double acc = bias[co];
                    for (int64_t ci = 0; ci < c.ci; ++ci)
                        for (int64_t kz = 0; kz < c.kd; ++kz)
                            for (int64_t ky = 0; ky < c.kh; ++ky)
                                for (int64_t kx = 0; kx < c.kw; ++kx) {
                                    const int64_t zi = z + kz - c.pd;
                                    const int64_t yi = y + ky - c.ph;
                                    const int64_t xi = x + kx - c.pw;
                                    if (zi < 0 || zi >= c.d || yi < 0 || yi >= c.h || xi < 0 ||
                                        xi >= c.w)
                                        continue;
                                    acc += in.at4(ci, zi, yi, xi) *
                                           weight.at5(co, ci, kz, ky, kx);
                                }
                    out.at4(co, z, y, x) = acc;
                }
}

void conv3d_backward_input(const Tensor& gout, const Tensor& weight, Tensor& gin) {
    const ConvDims c = conv_dims(gin, weight);
    gin.fill(0.0);
    for (int64_t co = 0; co < c.co; ++co)
        for (int64_t z = 0; z < c.d; ++z)
            for (int64_t y = 0; y < c.h; ++y)
                for (int64_t x = 0; x < c.w; ++x) {
                    const double g = gout.at4(co, z, y, x);
                    for (int64_t ci = 0; ci < c.ci; ++ci)
                        for (int64_t kz = 0; kz < c.kd; ++kz)
                            for (int64_t ky = 0; ky < c.kh; ++ky)
                                for (int64_t kx = 0; kx < c.kw; ++kx) {
                                    const int64_t zi = z + kz - c.pd;
                                    const int64_t yi = y + ky - c.ph;
                                    const int64_t xi = x + kx - c.pw;
                                    if (zi < 0 || zi >= c.d || yi < 0 || yi >= c.h || xi < 0 ||
                                        xi >= c.w)
                                        continue;
                                    gin.at4(ci, zi, yi, xi) += g * weight.at5(co, ci, kz, ky, kx);
                                }
                }
}

void conv3d_backward_params(const Tensor& gout, const Tensor& in, Tensor& gweight, Tensor& gbias) {
    const ConvDims c = conv_dims(in, gweight);
    gweight.fill(0.0);
    gbias.fill(0.0);
    for (int64_t co = 0; co < c.co; ++co)
        for (int64_t z = 0; z < c.d; ++z)
            for (int64_t y = 0; y < c.h; ++y)
                for (int64_t x = 0; x < c.w; ++x) {
                    const double g = gout.at4(co, z, y, x);
                    gbias[co] += g;
                    for (int64_t ci = 0; ci < c.ci; ++ci)
                        for (int64_t kz = 0; kz < c.kd; ++kz)
                            for (int64_t ky = 0; ky < c.kh; ++ky)
                                for (int64_t kx = 0; kx < c.kw; ++kx) {
                                    const int64_t zi = z + kz - c.pd;
                                    const int64_t yi = y + ky - c.ph;
                                    const int64_t xi = x + kx - c.pw;
                                    if (zi < 0 || zi >= c.d || yi < 0 || yi >= c.h || xi < 0 ||
                                        xi >= c.w)
                                        continue;
                                    gweight.at5(co, ci, kz, ky, kx) += g * in.at4(ci, zi, yi, xi);
                                }
                }
}

void maxpool2_forward(const Tensor& in, Tensor& out, std::vector<int32_t>& argmax) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    const int64_t ho = h / 2, wo = w / 2;
    argmax.assign(static_cast<size_t>(out.numel()), 0);
    for (int64_t c = 0; c < cc; ++c)
        for (int64_t z = 0; z < d; ++z)
            for (int64_t y = 0; y < ho; ++y)
                for (int64_t x = 0; x < wo; ++x) {
                    double best = in.at4(c, z, 2 * y, 2 * x);
                    int bi = 0;
                    const double cand[4] = {best, in.at4(c, z, 2 * y, 2 * x + 1),
                                            in.at4(c, z, 2 * y + 1, 2 * x),
                                            in.at4(c, z, 2 * y + 1, 2 * x + 1)};
                    for (int i = 1; i < 4; ++i)
                        if (cand[i] > cand[bi]) bi = i;
                    out.at4(c, z, y, x) = cand[bi];
                    argmax[static_cast<size_t>(((c * d + z) * ho + y) * wo + x)] = bi;
                }
}

void upsample2_forward(const Tensor& in, Tensor& out) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    for (int64_t c = 0; c < cc; ++c)
        for (int64_t z = 0; z < d; ++z)
            for (int64_t y = 0; y < 2 * h; ++y)
                for (int64_t x = 0; x < 2 * w; ++x) out.at4(c, z, y, x) = in.at4(c, z, y / 2, x / 2);
}

void warp_rows_forward(const Tensor& in, const std::vector<double>& shifts, Tensor& out) {
    const int64_t cc = in.dim(0), d = in.dim(1), h = in.dim(2), w = in.dim(3);
    for (int64_t c = 0; c < cc; ++c)
        for (int64_t b = 0; b < d; ++b)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double p = static_cast<double>(y) + shifts[static_cast<size_t>(b)];
                    p = std::clamp(p, 0.0, static_cast<double>(h - 1));
                    const int64_t i0 = static_cast<int64_t>(std::floor(p));
                    const int64_t i1 = std::min(i0 + 1, h - 1);
                    const double f = p - static_cast<double>(i0);
                    out.at4(c, b, y, x) =
                        (1.0 - f) * in.at4(c, b, i0, x) + f * in.at4(c, b, i1, x);
                }
}

} // namespace ref

} // namespace octseg::kernels
