#include "doctest.h"

#include <cmath>

#include "octseg/kernels.hpp"
#include "octseg/losses.hpp"
#include "test_utils.hpp"

using namespace octseg;
using namespace octseg::testutil;
namespace L = octseg::losses;

namespace {

SurfaceMask full_mask(int64_t k, int64_t b, int64_t a) { return SurfaceMask(k, b, a, true); }

Tensor smooth_pair_image(int64_t H, int64_t W, double shift_second, Rng& rng) {
    // structured rows so windowed statistics are informative at every pixel
    Tensor img({1, 2, H, W});
    std::vector<double> profile(static_cast<size_t>(H + 16));
    for (size_t r = 0; r < profile.size(); ++r)
        profile[r] = std::sin(0.7 * static_cast<double>(r)) + 0.05 * rng.uniform();
    for (int64_t r = 0; r < H; ++r)
        for (int64_t x = 0; x < W; ++x) {
            const double col = 0.3 * std::cos(0.5 * static_cast<double>(x));
            img.at4(0, 0, r, x) = profile[static_cast<size_t>(r)] + col;
            const int64_t src = std::clamp<int64_t>(r - static_cast<int64_t>(shift_second), 0, H - 1);
            img.at4(0, 1, r, x) = profile[static_cast<size_t>(src)] + col;
        }
    return img;
}

} // namespace

TEST_CASE("smooth L1 pinned values") {
    SurfaceSet pred(1, 1, 1), truth(1, 1, 1);
    const auto mask = full_mask(1, 1, 1);
    truth.at(0, 0, 0) = 5.0;

    pred.at(0, 0, 0) = 5.0;
    CHECK(L::smooth_l1(pred, truth, mask, L::Reduction::Sum) == doctest::Approx(0.0));
    pred.at(0, 0, 0) = 5.5;
    CHECK(L::smooth_l1(pred, truth, mask, L::Reduction::Sum) == doctest::Approx(0.125));
    pred.at(0, 0, 0) = 2.0; // t = -3
    CHECK(L::smooth_l1(pred, truth, mask, L::Reduction::Sum) == doctest::Approx(2.5));
}

TEST_CASE("surface cross entropy pinned values") {
    SUBCASE("certain prediction gives zero loss") {
        Tensor q({1, 1, 4, 1});
        q.at4(0, 0, 2, 0) = 1.0;
        SurfaceSet truth(1, 1, 1);
        truth.at(0, 0, 0) = 3.0;
        CHECK(L::surface_cross_entropy(q, truth, full_mask(1, 1, 1), L::Reduction::Sum) ==
              doctest::Approx(0.0));
    }
    SUBCASE("probability one half gives ln 2") {
        Tensor q({1, 1, 4, 1});
        q.at4(0, 0, 1, 0) = 0.5;
        q.at4(0, 0, 3, 0) = 0.5;
        SurfaceSet truth(1, 1, 1);
        truth.at(0, 0, 0) = 2.0;
        CHECK(L::surface_cross_entropy(q, truth, full_mask(1, 1, 1), L::Reduction::Sum) ==
              doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
    SUBCASE("uniform distribution sums to M ln R") {
        const int64_t R = 16, B = 3, A = 4;
        Tensor q({1, B, R, A});
        q.fill(1.0 / static_cast<double>(R));
        SurfaceSet truth(1, B, A);
        for (auto& p : truth.positions) p = 7.0;
        auto mask = full_mask(1, B, A);
        mask.at(0, 1, 2) = 0; // M = B*A - 1
        const double loss = L::surface_cross_entropy(q, truth, mask, L::Reduction::Sum);
        CHECK(loss == doctest::Approx(static_cast<double>(B * A - 1) * std::log(16.0)).epsilon(1e-9));
        const double mean_loss = L::surface_cross_entropy(q, truth, mask, L::Reduction::Mean);
        CHECK(loss == doctest::Approx(mean_loss * static_cast<double>(B * A - 1)).epsilon(1e-12));
    }
}

TEST_CASE("alignment smoothness pinned values and invariance") {
    SUBCASE("flat truth with zero displacement") {
        SurfaceSet truth(1, 3, 2);
        for (auto& p : truth.positions) p = 12.0;
        CHECK(L::alignment_smoothness_loss(truth, DisplacementVector(3), full_mask(1, 3, 2),
                                           L::Reduction::Sum) == doctest::Approx(0.0));
    }
    SUBCASE("displacement cancels a one-pixel tilt") {
        const int64_t B = 4, A = 3;
        SurfaceSet truth(1, B, A);
        DisplacementVector d(B);
        for (int64_t b = 0; b < B; ++b) {
            d.d[static_cast<size_t>(b)] = static_cast<double>(b);
            for (int64_t a = 0; a < A; ++a) truth.at(0, b, a) = 10.0 + static_cast<double>(b);
        }
        CHECK(L::alignment_smoothness_loss(truth, d, full_mask(1, B, A), L::Reduction::Sum) ==
              doctest::Approx(0.0));
    }
    SUBCASE("two B-scans, one A-scan, sum form") {
        SurfaceSet truth(1, 2, 1);
        truth.at(0, 0, 0) = 10.0;
        truth.at(0, 1, 0) = 14.0;
        CHECK(L::alignment_smoothness_loss(truth, DisplacementVector(2), full_mask(1, 2, 1),
                                           L::Reduction::Sum) == doctest::Approx(16.0));
    }
    SUBCASE("invariant to a constant added to every displacement") {
        Rng rng(31);
        const int64_t K = 2, B = 5, A = 4;
        const SurfaceSet truth = random_ordered_surfaces(K, B, A, 40, rng);
        DisplacementVector d(B), d_shifted(B);
        for (int64_t b = 0; b < B; ++b) {
            d.d[static_cast<size_t>(b)] = rng.uniform(-3.0, 3.0);
            d_shifted.d[static_cast<size_t>(b)] = d.d[static_cast<size_t>(b)] + 17.25;
        }
        const auto mask = full_mask(K, B, A);
        const double l0 = L::alignment_smoothness_loss(truth, d, mask, L::Reduction::Sum);
        const double l1 = L::alignment_smoothness_loss(truth, d_shifted, mask, L::Reduction::Sum);
        CHECK(std::abs(l0 - l1) <= 1e-9);
    }
}

TEST_CASE("alignment smoothness gradient matches finite differences") {
    Rng rng(33);
    const int64_t K = 2, B = 4, A = 3;
    const SurfaceSet truth = random_ordered_surfaces(K, B, A, 30, rng);
    DisplacementVector d(B);
    for (auto& x : d.d) x = rng.uniform(-2.0, 2.0);
    const auto mask = full_mask(K, B, A);
    std::vector<double> grad;
    L::alignment_smoothness_loss(truth, d, mask, L::Reduction::Mean, &grad);
    auto f = [&] { return L::alignment_smoothness_loss(truth, d, mask, L::Reduction::Mean); };
    for (int64_t b = 0; b < B; ++b)
        CHECK(rel_err(grad[static_cast<size_t>(b)], fd_central(f, &d.d[static_cast<size_t>(b)])) <
              1e-4);
}

TEST_CASE("surface smoothness pinned values and oracle") {
    SUBCASE("constant surface") {
        SurfaceSet pred(1, 3, 4);
        for (auto& p : pred.positions) p = 9.0;
        CHECK(L::surface_smoothness(pred, L::Reduction::Sum)[0] == doctest::Approx(0.0));
    }
    SUBCASE("planar 2x2 surface a+b") {
        SurfaceSet pred(1, 2, 2);
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t a = 0; a < 2; ++a) pred.at(0, b, a) = static_cast<double>(a + b + 5);
        CHECK(L::surface_smoothness(pred, L::Reduction::Sum)[0] == doctest::Approx(4.0));
    }
    SUBCASE("random surface equals the double-loop oracle") {
        Rng rng(41);
        SurfaceSet pred(2, 4, 5);
        for (auto& p : pred.positions) p = rng.uniform(1.0, 30.0);
        const auto vals = L::surface_smoothness(pred, L::Reduction::Sum);
        for (int64_t k = 0; k < 2; ++k) {
            double oracle = 0.0;
            for (int64_t b = 0; b < 4; ++b)
                for (int64_t a = 0; a < 5; ++a) {
                    if (a + 1 < 5) {
                        const double t = pred.at(k, b, a + 1) - pred.at(k, b, a);
                        oracle += t * t;
                    }
                    if (b + 1 < 4) {
                        const double t = pred.at(k, b + 1, a) - pred.at(k, b, a);
                        oracle += t * t;
                    }
                }
            CHECK(vals[static_cast<size_t>(k)] == doctest::Approx(oracle).epsilon(1e-12));
        }
    }
    SUBCASE("invariant to a constant offset") {
        Rng rng(43);
        SurfaceSet pred(1, 3, 4), shifted(1, 3, 4);
        for (size_t i = 0; i < pred.positions.size(); ++i) {
            pred.positions[i] = rng.uniform(5.0, 20.0);
            shifted.positions[i] = pred.positions[i] + 123.5;
        }
        CHECK(L::surface_smoothness(pred, L::Reduction::Sum)[0] ==
              doctest::Approx(L::surface_smoothness(shifted, L::Reduction::Sum)[0]).epsilon(1e-12));
    }
    SUBCASE("gradient matches finite differences") {
        Rng rng(45);
        SurfaceSet pred(2, 3, 3);
        for (auto& p : pred.positions) p = rng.uniform(1.0, 20.0);
        const std::vector<double> lambda{0.4, 1.7};
        Tensor grad;
        L::surface_smoothness(pred, L::Reduction::Mean, &lambda, &grad);
        auto f = [&] {
            const auto v = L::surface_smoothness(pred, L::Reduction::Mean);
            return lambda[0] * v[0] + lambda[1] * v[1];
        };
        for (int t = 0; t < 10; ++t) {
            const int64_t i = rng.uniform_int(0, static_cast<int64_t>(pred.positions.size()) - 1);
            CHECK(rel_err(grad[i], fd_central(f, &pred.positions[static_cast<size_t>(i)])) < 1e-4);
        }
    }
}

TEST_CASE("local NCC pinned values") {
    Rng rng(51);
    const int64_t H = 16, W = 20;
    SUBCASE("identical non-constant adjacent B-scans give -1") {
        Tensor img({1, 2, H, W});
        for (int64_t r = 0; r < H; ++r)
            for (int64_t x = 0; x < W; ++x) {
                const double v = rng.uniform(0.0, 1.0);
                img.at4(0, 0, r, x) = v;
                img.at4(0, 1, r, x) = v;
            }
        const double loss = L::local_ncc_loss(img, DisplacementVector(2), 9);
        CHECK(loss == doctest::Approx(-1.0).epsilon(1e-4));
    }
    SUBCASE("negated second B-scan gives +1") {
        Tensor img({1, 2, H, W});
        for (int64_t r = 0; r < H; ++r)
            for (int64_t x = 0; x < W; ++x) {
                const double v = rng.uniform(-1.0, 1.0);
                img.at4(0, 0, r, x) = v;
                img.at4(0, 1, r, x) = -v;
            }
        const double loss = L::local_ncc_loss(img, DisplacementVector(2), 9);
        CHECK(loss == doctest::Approx(1.0).epsilon(1e-4));
    }
    SUBCASE("cancelling an integer shift does not increase the loss") {
        Tensor img = smooth_pair_image(32, 24, 3.0, rng);
        const double at_zero = L::local_ncc_loss(img, DisplacementVector(2), 9);
        const double cancelled =
            L::local_ncc_loss(img, DisplacementVector(std::vector<double>{0.0, 3.0}), 9);
        CHECK(cancelled <= at_zero);
        CHECK(cancelled == doctest::Approx(-1.0).epsilon(2e-2));
    }
    SUBCASE("window larger than the B-scan is rejected") {
        Tensor img({1, 2, 6, 6});
        CHECK_THROWS_AS(L::local_ncc_loss(img, DisplacementVector(2), 9), std::invalid_argument);
    }
    SUBCASE("value lies in [-1, 1]") {
        Rng r2(53);
        Tensor img = random_tensor({1, 3, 12, 12}, r2);
        DisplacementVector d(std::vector<double>{0.4, -1.2, 0.8});
        const double loss = L::local_ncc_loss(img, d, 5);
        CHECK(loss >= -1.0);
        CHECK(loss <= 1.0);
    }
}

TEST_CASE("local NCC gradient matches finite differences") {
    Rng rng(55);
    Tensor img = smooth_pair_image(20, 14, 1.0, rng);
    for (auto& x : img.v) x += 0.02 * rng.uniform(); // break exact symmetries
    DisplacementVector d(std::vector<double>{0.35, -0.6});
    std::vector<double> grad;
    L::local_ncc_loss(img, d, 5, &grad);
    auto f = [&] { return L::local_ncc_loss(img, d, 5); };
    for (size_t b = 0; b < d.d.size(); ++b)
        CHECK(rel_err(grad[b], fd_central(f, &d.d[b], 1e-6)) < 1e-4);
}

TEST_CASE("dice+ce loss") {
    SUBCASE("near one-hot correct prediction gives near zero") {
        const int64_t B = 2, R = 6, A = 3;
        SurfaceSet s(1, B, A);
        for (auto& p : s.positions) p = 4.0;
        const LabelMap labels = surfaces_to_labelmap(s, R);
        Tensor logits({2, B, R, A});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t a = 0; a < A; ++a) {
                    const int64_t t = labels.at(a, b, r);
                    logits.at4(t, b, r, a) = 20.0;
                    logits.at4(1 - t, b, r, a) = -20.0;
                }
        CHECK(L::dice_ce_loss(logits, labels) == doctest::Approx(0.0).epsilon(1e-4));
    }
    SUBCASE("all-one-class prediction on a 50/50 split matches the closed form") {
        const int64_t B = 2, R = 8, A = 2;
        LabelMap labels(A, B, R);
        for (int64_t a = 0; a < A; ++a)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t r = 0; r < R; ++r) labels.at(a, b, r) = r < R / 2 ? 0 : 1;
        Tensor logits({2, B, R, A});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t a = 0; a < A; ++a) {
                    logits.at4(0, b, r, a) = 20.0;
                    logits.at4(1, b, r, a) = -20.0;
                }
        // independent oracle: CE from the softmax probabilities, Dice in closed form
        const double p0 = 1.0 / (1.0 + std::exp(-40.0));
        const double p1 = 1.0 - p0;
        const double ce_oracle = -0.5 * std::log(p0) - 0.5 * std::log(std::max(p1, 1e-12));
        const double n = static_cast<double>(B * R * A / 2); // voxels per class
        const double eps = 1e-5;
        const double dice0 = (2.0 * n * p0 + eps) / (2.0 * n * p0 + n + eps);
        const double dice1 = (2.0 * n * p1 + eps) / (2.0 * n * p1 + n + eps);
        const double oracle = ce_oracle + 1.0 - 0.5 * (dice0 + dice1);
        CHECK(L::dice_ce_loss(logits, labels) == doctest::Approx(oracle).epsilon(1e-6));
        // and the dominant dice behaviour: 1 - (2*0.5)/(1+0.5) averaged with the absent class
        CHECK(1.0 - 0.5 * (dice0 + dice1) ==
              doctest::Approx(1.0 - 0.5 * (2.0 / 3.0)).epsilon(1e-3));
    }
    SUBCASE("equivariant under joint class relabeling") {
        Rng rng(61);
        const int64_t C = 3, B = 2, R = 5, A = 4;
        Tensor logits = random_tensor({C, B, R, A}, rng);
        LabelMap labels(A, B, R);
        for (auto& l : labels.labels) l = static_cast<uint8_t>(rng.uniform_int(0, C - 1));
        const double base = L::dice_ce_loss(logits, labels);

        Tensor swapped(logits.shape); // swap classes 0 and 2
        for (int64_t c = 0; c < C; ++c) {
            const int64_t src = c == 0 ? 2 : (c == 2 ? 0 : c);
            for (int64_t i = 0; i < B * R * A; ++i)
                swapped[c * B * R * A + i] = logits[src * B * R * A + i];
        }
        LabelMap relabeled = labels;
        for (auto& l : relabeled.labels) l = l == 0 ? 2 : (l == 2 ? 0 : l);
        CHECK(L::dice_ce_loss(swapped, relabeled) == doctest::Approx(base).epsilon(1e-12));
    }
    SUBCASE("matches an independent brute-force oracle on random input") {
        Rng rng(63);
        const int64_t C = 4, B = 2, R = 6, A = 3;
        Tensor logits = random_tensor({C, B, R, A}, rng, -2.0, 2.0);
        LabelMap labels(A, B, R);
        SurfaceSet s = random_ordered_surfaces(C - 1, B, A, R, rng);
        labels = surfaces_to_labelmap(s, R);

        double ce = 0.0;
        std::vector<double> sp(C, 0.0), st(C, 0.0), spt(C, 0.0);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t a = 0; a < A; ++a) {
                    double mx = -1e300, denom = 0.0;
                    for (int64_t c = 0; c < C; ++c) mx = std::max(mx, logits.at4(c, b, r, a));
                    for (int64_t c = 0; c < C; ++c) denom += std::exp(logits.at4(c, b, r, a) - mx);
                    const int64_t t = labels.at(a, b, r);
                    for (int64_t c = 0; c < C; ++c) {
                        const double p = std::exp(logits.at4(c, b, r, a) - mx) / denom;
                        sp[static_cast<size_t>(c)] += p;
                        if (c == t) {
                            ce += -std::log(p);
                            spt[static_cast<size_t>(c)] += p;
                            st[static_cast<size_t>(c)] += 1.0;
                        }
                    }
                }
        ce /= static_cast<double>(B * R * A);
        double dice = 0.0;
        for (int64_t c = 0; c < C; ++c)
            dice += (2.0 * spt[static_cast<size_t>(c)] + 1e-5) /
                    (sp[static_cast<size_t>(c)] + st[static_cast<size_t>(c)] + 1e-5);
        const double oracle = ce + 1.0 - dice / static_cast<double>(C);
        CHECK(L::dice_ce_loss(logits, labels) == doctest::Approx(oracle).epsilon(1e-10));
    }
    SUBCASE("gradient matches finite differences") {
        Rng rng(65);
        const int64_t C = 3, B = 2, R = 4, A = 3;
        Tensor logits = random_tensor({C, B, R, A}, rng, -1.0, 1.0);
        LabelMap labels(A, B, R);
        for (auto& l : labels.labels) l = static_cast<uint8_t>(rng.uniform_int(0, C - 1));
        Tensor grad;
        L::dice_ce_loss(logits, labels, &grad);
        auto f = [&] { return L::dice_ce_loss(logits, labels); };
        for (int t = 0; t < 15; ++t) {
            const int64_t i = rng.uniform_int(0, logits.numel() - 1);
            CHECK(rel_err(grad[i], fd_central(f, &logits.v[static_cast<size_t>(i)])) < 1e-4);
        }
    }
}

TEST_CASE("cross entropy and smooth l1 gradients match finite differences") {
    Rng rng(71);
    const int64_t K = 2, B = 3, R = 8, A = 4;
    Tensor q = random_distribution(K, B, R, A, rng);
    SurfaceSet truth = random_ordered_surfaces(K, B, A, R, rng);
    SurfaceSet pred = random_ordered_surfaces(K, B, A, R, rng);
    auto mask = full_mask(K, B, A);
    mask.at(0, 0, 1) = 0;

    Tensor gq;
    L::surface_cross_entropy(q, truth, mask, L::Reduction::Mean, &gq);
    auto fce = [&] { return L::surface_cross_entropy(q, truth, mask, L::Reduction::Mean); };
    for (int t = 0; t < 10; ++t) {
        const int64_t i = rng.uniform_int(0, q.numel() - 1);
        CHECK(rel_err(gq[i], fd_central(fce, &q.v[static_cast<size_t>(i)], 1e-6)) < 1e-4);
    }

    Tensor gp;
    L::smooth_l1(pred, truth, mask, L::Reduction::Mean, &gp);
    auto fl1 = [&] { return L::smooth_l1(pred, truth, mask, L::Reduction::Mean); };
    for (int t = 0; t < 10; ++t) {
        const int64_t i = rng.uniform_int(0, static_cast<int64_t>(pred.positions.size()) - 1);
        CHECK(rel_err(gp[i], fd_central(fl1, &pred.positions[static_cast<size_t>(i)], 1e-6)) < 1e-4);
    }
}

TEST_CASE("composed objectives recompose from their parts") {
    Rng rng(81);
    const int64_t K = 2, B = 3, R = 8, A = 6;
    Tensor image = random_tensor({1, B, R, A}, rng, 0.0, 1.0);
    DisplacementVector d(B);
    for (auto& x : d.d) x = rng.uniform(-1.5, 1.5);
    Tensor q = random_distribution(K, B, R, A, rng);
    SurfaceSet truth = random_ordered_surfaces(K, B, A, R, rng);
    SurfaceSet pred = random_ordered_surfaces(K, B, A, R, rng);
    const LabelMap labels = surfaces_to_labelmap(truth, R);
    Tensor sem = random_tensor({K + 1, B, R, A}, rng);
    const auto mask = full_mask(K, B, A);
    const L::LossWeights w{{0.0, 0.5}, L::Reduction::Mean};

    const double ncc = L::local_ncc_loss(image, d, 5);
    const double sa = L::alignment_smoothness_loss(truth, d, mask, w.reduction);
    CHECK(L::alignment_loss(image, truth, d, 5, mask, w.reduction) ==
          doctest::Approx(ncc + sa).epsilon(1e-12));

    const auto seg = L::segmentation_loss(q, pred, sem, truth, labels, mask, w);
    const double dice = L::dice_ce_loss(sem, labels);
    const double ce = L::surface_cross_entropy(q, truth, mask, w.reduction);
    const double l1 = L::smooth_l1(pred, truth, mask, w.reduction);
    const auto sm = L::surface_smoothness(pred, w.reduction);
    CHECK(seg.total == doctest::Approx(dice + ce + l1 + 0.0 * sm[0] + 0.5 * sm[1]).epsilon(1e-12));
    CHECK(seg.smooth == doctest::Approx(0.5 * sm[1]).epsilon(1e-12));

    // lambda = 0 removes the smoothness term exactly
    const L::LossWeights w0{{0.0, 0.0}, L::Reduction::Mean};
    const auto seg0 = L::segmentation_loss(q, pred, sem, truth, labels, mask, w0);
    CHECK(seg0.smooth == 0.0);
    CHECK(seg0.total == doctest::Approx(dice + ce + l1).epsilon(1e-12));

    std::vector<double> gd_total;
    const auto total = L::total_loss(image, d, truth, 5, q, pred, sem, truth, labels, mask, w,
                                     &gd_total);
    CHECK(total.total == doctest::Approx(ncc + sa + seg.total).epsilon(1e-12));

    // gradient of the total is the sum of the component gradients
    std::vector<double> g_ncc, g_sa;
    L::local_ncc_loss(image, d, 5, &g_ncc);
    L::alignment_smoothness_loss(truth, d, mask, w.reduction, &g_sa);
    for (int64_t b = 0; b < B; ++b)
        CHECK(gd_total[static_cast<size_t>(b)] ==
              doctest::Approx(g_ncc[static_cast<size_t>(b)] + g_sa[static_cast<size_t>(b)])
                  .epsilon(1e-12));
}

TEST_CASE("sum and mean reductions differ by the valid-element count") {
    Rng rng(91);
    const int64_t K = 2, B = 3, A = 5, R = 16;
    SurfaceSet pred = random_ordered_surfaces(K, B, A, R, rng);
    SurfaceSet truth = random_ordered_surfaces(K, B, A, R, rng);
    auto mask = full_mask(K, B, A);
    mask.at(1, 2, 3) = 0;
    mask.at(0, 0, 0) = 0;
    const int64_t count = mask.count();
    const double s = L::smooth_l1(pred, truth, mask, L::Reduction::Sum);
    const double m = L::smooth_l1(pred, truth, mask, L::Reduction::Mean);
    CHECK(s == doctest::Approx(m * static_cast<double>(count)).epsilon(1e-12));
}
