#include "octseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "octseg/kernels.hpp"

namespace octseg::losses {

void LossWeights::validate(int64_t surfaces) const {
    if (static_cast<int64_t>(lambda.size()) != surfaces)
        throw std::invalid_argument("LossWeights: need one lambda per surface");
    for (double l : lambda)
        if (!(l >= 0.0)) throw std::invalid_argument("LossWeights: lambda must be >= 0");
}

namespace {

// summed-area table with one extra row/column of zeros
struct Sat {
    int64_t h = 0, w = 0;
    std::vector<double> s;

    void build(const double* img, int64_t h_, int64_t w_) {
        h = h_;
        w = w_;
        s.assign(static_cast<size_t>((h + 1) * (w + 1)), 0.0);
        for (int64_t y = 0; y < h; ++y) {
            double row = 0.0;
            for (int64_t x = 0; x < w; ++x) {
                row += img[y * w + x];
                s[static_cast<size_t>((y + 1) * (w + 1) + (x + 1))] =
                    s[static_cast<size_t>(y * (w + 1) + (x + 1))] + row;
            }
        }
    }

    // sum over rows [y0, y1] x cols [x0, x1], inclusive, clamped to bounds
    double box(int64_t y0, int64_t y1, int64_t x0, int64_t x1) const {
        y0 = std::max<int64_t>(y0, 0);
        x0 = std::max<int64_t>(x0, 0);
        y1 = std::min(y1, h - 1);
        x1 = std::min(x1, w - 1);
        if (y0 > y1 || x0 > x1) return 0.0;
        const int64_t W = w + 1;
        return s[static_cast<size_t>((y1 + 1) * W + (x1 + 1))] -
               s[static_cast<size_t>(y0 * W + (x1 + 1))] -
               s[static_cast<size_t>((y1 + 1) * W + x0)] + s[static_cast<size_t>(y0 * W + x0)];
    }
};

struct PairGradMaps {
    std::vector<double> A, AJbar, AIbar, BI, BIbar, BJ, BJbar;
};

} // namespace

double local_ncc_loss(const Tensor& image, const DisplacementVector& d, int window,
                      std::vector<double>* grad_d, double eps) {
    if (image.rank() != 4 || image.dim(0) != 1)
        throw std::invalid_argument("local_ncc_loss: image must have shape (1, bscans, rows, cols)");
    const int64_t B = image.dim(1), H = image.dim(2), W = image.dim(3);
    if (B < 2) throw std::invalid_argument("local_ncc_loss: need at least two B-scans");
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("local_ncc_loss: window must be odd and positive");
    if (window > H || window > W)
        throw std::invalid_argument("local_ncc_loss: window larger than a B-scan");
    if (d.size() != B) throw std::invalid_argument("local_ncc_loss: displacement size mismatch");

    Tensor warped(image.shape);
    kernels::warp_rows_forward(image, d.d, warped);

    const int64_t rho = window / 2;
    const int64_t cy0 = rho, cy1 = H - 1 - rho, cx0 = rho, cx1 = W - 1 - rho;
    const int64_t centers_per_pair = (cy1 - cy0 + 1) * (cx1 - cx0 + 1);
    const double n = static_cast<double>(window) * window;
    const double norm = 1.0 / (static_cast<double>(B - 1) * static_cast<double>(centers_per_pair));

    Tensor g_warped;
    if (grad_d) g_warped = Tensor(image.shape);

    double cc_sum = 0.0;
    Sat sI, sJ, sII, sJJ, sIJ;
    std::vector<double> tmp(static_cast<size_t>(H * W));
    for (int64_t b = 0; b + 1 < B; ++b) {
        const double* I = warped.data() + b * H * W;
        const double* J = warped.data() + (b + 1) * H * W;
        sI.build(I, H, W);
        sJ.build(J, H, W);
        for (int64_t i = 0; i < H * W; ++i) tmp[static_cast<size_t>(i)] = I[i] * I[i];
        sII.build(tmp.data(), H, W);
        for (int64_t i = 0; i < H * W; ++i) tmp[static_cast<size_t>(i)] = J[i] * J[i];
        sJJ.build(tmp.data(), H, W);
        for (int64_t i = 0; i < H * W; ++i) tmp[static_cast<size_t>(i)] = I[i] * J[i];
        sIJ.build(tmp.data(), H, W);

        PairGradMaps maps;
        if (grad_d) {
            const size_t sz = static_cast<size_t>(H * W);
            maps.A.assign(sz, 0.0);
            maps.AJbar.assign(sz, 0.0);
            maps.AIbar.assign(sz, 0.0);
            maps.BI.assign(sz, 0.0);
            maps.BIbar.assign(sz, 0.0);
            maps.BJ.assign(sz, 0.0);
            maps.BJbar.assign(sz, 0.0);
        }

        for (int64_t y = cy0; y <= cy1; ++y) {
            for (int64_t x = cx0; x <= cx1; ++x) {
                const double SI = sI.box(y - rho, y + rho, x - rho, x + rho);
                const double SJ = sJ.box(y - rho, y + rho, x - rho, x + rho);
                const double SII = sII.box(y - rho, y + rho, x - rho, x + rho);
                const double SJJ = sJJ.box(y - rho, y + rho, x - rho, x + rho);
                const double SIJ = sIJ.box(y - rho, y + rho, x - rho, x + rho);
                const double c = SIJ - SI * SJ / n;
                const double vI = std::max(0.0, SII - SI * SI / n);
                const double vJ = std::max(0.0, SJJ - SJ * SJ / n);
                const double D = std::sqrt((vI + eps) * (vJ + eps));
                const double cc = c / D;
                cc_sum += cc;
                if (grad_d) {
                    const size_t p = static_cast<size_t>(y * W + x);
                    const double A = 1.0 / D;
                    maps.A[p] = A;
                    maps.AJbar[p] = A * SJ / n;
                    maps.AIbar[p] = A * SI / n;
                    const double BIc = cc / (vI + eps);
                    const double BJc = cc / (vJ + eps);
                    maps.BI[p] = BIc;
                    maps.BIbar[p] = BIc * SI / n;
                    maps.BJ[p] = BJc;
                    maps.BJbar[p] = BJc * SJ / n;
                }
            }
        }

        if (grad_d) {
            Sat bA, bAJ, bAI, bBI, bBIb, bBJ, bBJb;
            bA.build(maps.A.data(), H, W);
            bAJ.build(maps.AJbar.data(), H, W);
            bAI.build(maps.AIbar.data(), H, W);
            bBI.build(maps.BI.data(), H, W);
            bBIb.build(maps.BIbar.data(), H, W);
            bBJ.build(maps.BJ.data(), H, W);
            bBJb.build(maps.BJbar.data(), H, W);
            double* gI = g_warped.data() + b * H * W;
            double* gJ = g_warped.data() + (b + 1) * H * W;
            // d loss / d cc = -norm at every center
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const double a_s = bA.box(y - rho, y + rho, x - rho, x + rho);
                    const double aj = bAJ.box(y - rho, y + rho, x - rho, x + rho);
                    const double ai = bAI.box(y - rho, y + rho, x - rho, x + rho);
                    const double bi = bBI.box(y - rho, y + rho, x - rho, x + rho);
                    const double bib = bBIb.box(y - rho, y + rho, x - rho, x + rho);
                    const double bj = bBJ.box(y - rho, y + rho, x - rho, x + rho);
                    const double bjb = bBJb.box(y - rho, y + rho, x - rho, x + rho);
                    const double Iv = I[y * W + x], Jv = J[y * W + x];
                    gI[y * W + x] += -norm * (Jv * a_s - aj - Iv * bi + bib);
                    gJ[y * W + x] += -norm * (Iv * a_s - ai - Jv * bj + bjb);
                }
        }
    }

    if (grad_d) {
        Tensor g_img(image.shape);
        kernels::warp_rows_backward(g_warped, image, d.d, g_img, *grad_d);
    }
    return -cc_sum * norm;
}

double alignment_smoothness_loss(const SurfaceSet& truth, const DisplacementVector& d,
                                 const SurfaceMask& mask, Reduction red,
                                 std::vector<double>* grad_d) {
    const int64_t K = truth.n_surfaces, B = truth.n_b, A = truth.n_a;
    if (B < 2) throw std::invalid_argument("alignment_smoothness_loss: need at least two B-scans");
    if (d.size() != B) throw std::invalid_argument("alignment_smoothness_loss: size mismatch");
    if (mask.n_surfaces != K || mask.n_b != B || mask.n_a != A)
        throw std::invalid_argument("alignment_smoothness_loss: mask shape mismatch");
    if (grad_d) grad_d->assign(static_cast<size_t>(B), 0.0);

    double loss = 0.0;
    for (int64_t k = 0; k < K; ++k) {
        double acc = 0.0;
        int64_t count = 0;
        for (int64_t b = 0; b + 1 < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                if (!mask.at(k, b, a) || !mask.at(k, b + 1, a)) continue;
                ++count;
                const double t = (truth.at(k, b, a) - d.d[static_cast<size_t>(b)]) -
                                 (truth.at(k, b + 1, a) - d.d[static_cast<size_t>(b + 1)]);
                acc += t * t;
            }
        const double scale = red == Reduction::Mean && count > 0
                                 ? 1.0 / (static_cast<double>(K) * static_cast<double>(count))
                                 : 1.0 / static_cast<double>(K);
        loss += acc * scale;
        if (grad_d) {
            for (int64_t b = 0; b + 1 < B; ++b)
                for (int64_t a = 0; a < A; ++a) {
                    if (!mask.at(k, b, a) || !mask.at(k, b + 1, a)) continue;
                    const double t = (truth.at(k, b, a) - d.d[static_cast<size_t>(b)]) -
                                     (truth.at(k, b + 1, a) - d.d[static_cast<size_t>(b + 1)]);
                    (*grad_d)[static_cast<size_t>(b)] += -2.0 * t * scale;
                    (*grad_d)[static_cast<size_t>(b + 1)] += 2.0 * t * scale;
                }
        }
    }
    return loss;
}

double alignment_loss(const Tensor& image, const SurfaceSet& truth, const DisplacementVector& d,
                      int window, const SurfaceMask& mask, Reduction red,
                      std::vector<double>* grad_d) {
    std::vector<double> g_ncc, g_smooth;
    const double ncc = local_ncc_loss(image, d, window, grad_d ? &g_ncc : nullptr);
    const double sm = alignment_smoothness_loss(truth, d, mask, red, grad_d ? &g_smooth : nullptr);
    if (grad_d) {
        grad_d->assign(g_ncc.size(), 0.0);
        for (size_t i = 0; i < g_ncc.size(); ++i) (*grad_d)[i] = g_ncc[i] + g_smooth[i];
    }
    return ncc + sm;
}

double surface_cross_entropy(const Tensor& q, const SurfaceSet& truth, const SurfaceMask& mask,
                             Reduction red, Tensor* grad_q) {
    const int64_t K = q.dim(0), B = q.dim(1), R = q.dim(2), A = q.dim(3);
    if (truth.n_surfaces != K || truth.n_b != B || truth.n_a != A)
        throw std::invalid_argument("surface_cross_entropy: truth shape mismatch");
    if (grad_q) *grad_q = Tensor(q.shape);

    int64_t count = 0;
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                if (!mask.at(k, b, a)) continue;
                const int64_t ridx = static_cast<int64_t>(round_half_up(truth.at(k, b, a))) - 1;
                if (ridx < 0 || ridx >= R) continue;
                ++count;
            }
    const double scale = red == Reduction::Mean && count > 0 ? 1.0 / static_cast<double>(count) : 1.0;

    double loss = 0.0;
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                if (!mask.at(k, b, a)) continue;
                const int64_t ridx = static_cast<int64_t>(round_half_up(truth.at(k, b, a))) - 1;
                if (ridx < 0 || ridx >= R) continue;
                const double p = std::max(q.at4(k, b, ridx, a), 1e-12);
                loss += -std::log(p) * scale;
                if (grad_q) grad_q->at4(k, b, ridx, a) += -scale / p;
            }
    return loss;
}

double smooth_l1(const SurfaceSet& pred, const SurfaceSet& truth, const SurfaceMask& mask,
                 Reduction red, Tensor* grad_pred) {
    const int64_t K = pred.n_surfaces, B = pred.n_b, A = pred.n_a;
    if (truth.n_surfaces != K || truth.n_b != B || truth.n_a != A)
        throw std::invalid_argument("smooth_l1: shape mismatch");
    if (grad_pred) *grad_pred = Tensor({K, B, A});

    const int64_t count = [&] {
        int64_t c = 0;
        for (int64_t k = 0; k < K; ++k)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t a = 0; a < A; ++a)
                    if (mask.at(k, b, a)) ++c;
        return c;
    }();
    const double scale = red == Reduction::Mean && count > 0 ? 1.0 / static_cast<double>(count) : 1.0;

    double loss = 0.0;
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                if (!mask.at(k, b, a)) continue;
                const double t = pred.at(k, b, a) - truth.at(k, b, a);
                if (std::abs(t) < 1.0) {
                    loss += 0.5 * t * t * scale;
                    if (grad_pred) grad_pred->at3(k, b, a) = t * scale;
                } else {
                    loss += (std::abs(t) - 0.5) * scale;
                    if (grad_pred) grad_pred->at3(k, b, a) = (t > 0.0 ? 1.0 : -1.0) * scale;
                }
            }
    return loss;
}

std::vector<double> surface_smoothness(const SurfaceSet& pred, Reduction red,
                                       const std::vector<double>* lambda, Tensor* grad_pred) {
    const int64_t K = pred.n_surfaces, B = pred.n_b, A = pred.n_a;
    if (lambda && static_cast<int64_t>(lambda->size()) != K)
        throw std::invalid_argument("surface_smoothness: lambda size mismatch");
    if (grad_pred) *grad_pred = Tensor({K, B, A});

    const int64_t stencils = B * (A - 1) + (B - 1) * A;
    std::vector<double> values(static_cast<size_t>(K), 0.0);
    for (int64_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a + 1 < A; ++a) {
                const double t = pred.at(k, b, a + 1) - pred.at(k, b, a);
                acc += t * t;
            }
        for (int64_t b = 0; b + 1 < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                const double t = pred.at(k, b + 1, a) - pred.at(k, b, a);
                acc += t * t;
            }
        const double scale = red == Reduction::Mean && stencils > 0
                                 ? 1.0 / static_cast<double>(stencils)
                                 : 1.0;
        values[static_cast<size_t>(k)] = acc * scale;
        if (grad_pred) {
            const double lw = (lambda ? (*lambda)[static_cast<size_t>(k)] : 1.0) * scale;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t a = 0; a + 1 < A; ++a) {
                    const double t = pred.at(k, b, a + 1) - pred.at(k, b, a);
                    grad_pred->at3(k, b, a + 1) += 2.0 * t * lw;
                    grad_pred->at3(k, b, a) += -2.0 * t * lw;
                }
            for (int64_t b = 0; b + 1 < B; ++b)
                for (int64_t a = 0; a < A; ++a) {
                    const double t = pred.at(k, b + 1, a) - pred.at(k, b, a);
                    grad_pred->at3(k, b + 1, a) += 2.0 * t * lw;
                    grad_pred->at3(k, b, a) += -2.0 * t * lw;
                }
        }
    }
    return values;
}

double dice_ce_loss(const Tensor& semantic_logits, const LabelMap& labels, Tensor* grad_logits,
                    double dice_eps) {
    const int64_t C = semantic_logits.dim(0), B = semantic_logits.dim(1),
                  R = semantic_logits.dim(2), A = semantic_logits.dim(3);
    if (labels.n_a != A || labels.n_b != B || labels.n_r != R)
        throw std::invalid_argument("dice_ce_loss: label map shape mismatch");
    if (C > 16) throw std::invalid_argument("dice_ce_loss: more than 16 classes not supported");
    for (uint8_t l : labels.labels)
        if (l >= C) throw std::invalid_argument("dice_ce_loss: label exceeds class count");

    // softmax over the class axis per voxel
    Tensor p(semantic_logits.shape);
    const int64_t stride = B * R * A; // class stride
    const double* pl = semantic_logits.data();
    double* pp = p.data();
#pragma omp parallel for schedule(static)
    for (int64_t v = 0; v < stride; ++v) {
        double mx = pl[v];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, pl[c * stride + v]);
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            const double e = std::exp(pl[c * stride + v] - mx);
            pp[c * stride + v] = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (int64_t c = 0; c < C; ++c) pp[c * stride + v] *= inv;
    }

    const double nvox = static_cast<double>(stride);
    auto label_at = [&](int64_t v) {
        const int64_t b = v / (R * A);
        const int64_t r = (v / A) % R;
        const int64_t a = v % A;
        return static_cast<int64_t>(labels.at(a, b, r));
    };

    double ce = 0.0;
    std::vector<double> sum_p(static_cast<size_t>(C), 0.0), sum_t(static_cast<size_t>(C), 0.0),
        sum_pt(static_cast<size_t>(C), 0.0);
    for (int64_t v = 0; v < stride; ++v) {
        const int64_t t = label_at(v);
        const double pt = std::max(pp[t * stride + v], 1e-12);
        ce += -std::log(pt);
        sum_t[static_cast<size_t>(t)] += 1.0;
        sum_pt[static_cast<size_t>(t)] += pp[t * stride + v];
        for (int64_t c = 0; c < C; ++c) sum_p[static_cast<size_t>(c)] += pp[c * stride + v];
    }
    ce /= nvox;

    double mean_dice = 0.0;
    std::vector<double> Nc(static_cast<size_t>(C)), Mc(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
        Nc[static_cast<size_t>(c)] = 2.0 * sum_pt[static_cast<size_t>(c)] + dice_eps;
        Mc[static_cast<size_t>(c)] = sum_p[static_cast<size_t>(c)] + sum_t[static_cast<size_t>(c)] + dice_eps;
        mean_dice += Nc[static_cast<size_t>(c)] / Mc[static_cast<size_t>(c)];
    }
    mean_dice /= static_cast<double>(C);
    const double dice_term = 1.0 - mean_dice;

    if (grad_logits) {
        *grad_logits = Tensor(semantic_logits.shape);
        double* pg = grad_logits->data();
#pragma omp parallel for schedule(static)
        for (int64_t v = 0; v < stride; ++v) {
            const int64_t t = label_at(v);
            // gradient w.r.t. softmax probabilities
            double gp[16]; // C is small (K+1)
            for (int64_t c = 0; c < C; ++c) {
                const double dice_dpc =
                    (2.0 * (c == t ? 1.0 : 0.0) * Mc[static_cast<size_t>(c)] - Nc[static_cast<size_t>(c)]) /
                    (Mc[static_cast<size_t>(c)] * Mc[static_cast<size_t>(c)]);
                gp[c] = -dice_dpc / static_cast<double>(C);
            }
            gp[t] += -1.0 / (std::max(pp[t * stride + v], 1e-12) * nvox);
            double dot = 0.0;
            for (int64_t c = 0; c < C; ++c) dot += gp[c] * pp[c * stride + v];
            for (int64_t c = 0; c < C; ++c)
                pg[c * stride + v] = pp[c * stride + v] * (gp[c] - dot);
        }
    }
    return ce + dice_term;
}

SegLossParts segmentation_loss(const Tensor& q, const SurfaceSet& pred, const Tensor& semantic_logits,
                               const SurfaceSet& truth, const LabelMap& labels,
                               const SurfaceMask& mask, const LossWeights& weights,
                               Tensor* grad_q, Tensor* grad_pred, Tensor* grad_sem) {
    weights.validate(pred.n_surfaces);
    SegLossParts parts;
    parts.dice_ce = dice_ce_loss(semantic_logits, labels, grad_sem);
    parts.ce = surface_cross_entropy(q, truth, mask, weights.reduction, grad_q);
    Tensor g_l1, g_sm;
    parts.l1 = smooth_l1(pred, truth, mask, weights.reduction, grad_pred ? &g_l1 : nullptr);
    const auto sm = surface_smoothness(pred, weights.reduction, &weights.lambda,
                                       grad_pred ? &g_sm : nullptr);
    for (int64_t k = 0; k < pred.n_surfaces; ++k)
        parts.smooth += weights.lambda[static_cast<size_t>(k)] * sm[static_cast<size_t>(k)];
    if (grad_pred) {
        *grad_pred = g_l1;
        for (int64_t i = 0; i < grad_pred->numel(); ++i) (*grad_pred)[i] += g_sm[i];
    }
    parts.total = parts.dice_ce + parts.ce + parts.l1 + parts.smooth;
    return parts;
}

TotalLossParts total_loss(const Tensor& image, const DisplacementVector& d,
                          const SurfaceSet& truth_alignment, int window,
                          const Tensor& q, const SurfaceSet& pred, const Tensor& semantic_logits,
                          const SurfaceSet& truth_seg, const LabelMap& labels,
                          const SurfaceMask& mask, const LossWeights& weights,
                          std::vector<double>* grad_d, Tensor* grad_q, Tensor* grad_pred,
                          Tensor* grad_sem) {
    TotalLossParts parts;
    std::vector<double> g_ncc, g_sa;
    parts.ncc = local_ncc_loss(image, d, window, grad_d ? &g_ncc : nullptr);
    parts.smooth_align = alignment_smoothness_loss(truth_alignment, d, mask, weights.reduction,
                                                   grad_d ? &g_sa : nullptr);
    parts.align = parts.ncc + parts.smooth_align;
    parts.seg = segmentation_loss(q, pred, semantic_logits, truth_seg, labels, mask, weights,
                                  grad_q, grad_pred, grad_sem);
    if (grad_d) {
        grad_d->assign(g_ncc.size(), 0.0);
        for (size_t i = 0; i < g_ncc.size(); ++i) (*grad_d)[i] = g_ncc[i] + g_sa[i];
    }
    parts.total = parts.align + parts.seg.total;
    return parts;
}

} // namespace octseg::losses
