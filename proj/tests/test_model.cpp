#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "octseg/model.hpp"
#include "test_utils.hpp"

using namespace octseg;
using namespace octseg::testutil;
namespace M = octseg::model;

namespace {

M::ModelConfig tiny_config(int surfaces = 2, M::ModelConfig::Mode mode = M::ModelConfig::Mode::Hybrid2d3d) {
    M::ModelConfig c;
    c.levels = 2;
    c.base_channels = 2;
    c.surfaces = surfaces;
    c.mode = mode;
    return c;
}

} // namespace

TEST_CASE("encoder pyramid halves rows and cols per level") {
    M::ModelConfig cfg;
    cfg.levels = 4;
    cfg.base_channels = 1;
    cfg.surfaces = 1;
    M::Network net(cfg, 1);
    Rng rng(3);
    Tensor patch = random_tensor({1, 12, 96, 128}, rng);
    const auto pyr = net.encode(patch);
    REQUIRE(pyr.levels.size() == 4);
    const int64_t rows[4] = {96, 48, 24, 12};
    const int64_t cols[4] = {128, 64, 32, 16};
    for (int l = 0; l < 4; ++l) {
        CHECK(pyr.levels[static_cast<size_t>(l)].dim(0) == cfg.channels_at(l));
        CHECK(pyr.levels[static_cast<size_t>(l)].dim(1) == 12);
        CHECK(pyr.levels[static_cast<size_t>(l)].dim(2) == rows[l]);
        CHECK(pyr.levels[static_cast<size_t>(l)].dim(3) == cols[l]);
    }
}

TEST_CASE("encoder commutes with B-scan permutation") {
    M::Network net(tiny_config(), 7);
    Rng rng(5);
    const int64_t B = 5;
    Tensor patch = random_tensor({1, B, 16, 12}, rng);
    const std::vector<int64_t> perm = {3, 0, 4, 1, 2};
    Tensor permuted(patch.shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < 16; ++r)
            for (int64_t a = 0; a < 12; ++a)
                permuted.at4(0, b, r, a) = patch.at4(0, perm[static_cast<size_t>(b)], r, a);

    const auto base = net.encode(patch);
    const auto perm_out = net.encode(permuted);
    for (size_t l = 0; l < base.levels.size(); ++l) {
        const Tensor& e = base.levels[l];
        const Tensor& p = perm_out.levels[l];
        for (int64_t c = 0; c < e.dim(0); ++c)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t r = 0; r < e.dim(2); ++r)
                    for (int64_t a = 0; a < e.dim(3); ++a)
                        CHECK(p.at4(c, b, r, a) == e.at4(c, perm[static_cast<size_t>(b)], r, a));
    }
}

TEST_CASE("forward is bit-identical across repeated runs") {
    M::Network net(tiny_config(), 11);
    Rng rng(13);
    Tensor patch = random_tensor({1, 4, 16, 12}, rng);
    M::ForwardOptions opt;
    const auto a = net.forward(patch, opt);
    const auto b = net.forward(patch, opt);
    CHECK(a.out.surface_logits.v == b.out.surface_logits.v);
    CHECK(a.out.semantic_logits.v == b.out.semantic_logits.v);
    CHECK(a.out.displacement.d == b.out.displacement.d);
}

TEST_CASE("stm_apply") {
    Rng rng(17);
    SUBCASE("zero displacement is the exact identity") {
        Tensor f = random_tensor({3, 4, 10, 6}, rng);
        const Tensor out = M::stm_apply(f, DisplacementVector(4), 0);
        CHECK(out.v == f.v);
    }
    SUBCASE("integer shift moves rows and replicates the edge") {
        Tensor f({1, 1, 6, 2});
        for (int64_t r = 0; r < 6; ++r)
            for (int64_t x = 0; x < 2; ++x) f.at4(0, 0, r, x) = static_cast<double>(10 * r + x);
        const Tensor out = M::stm_apply(f, DisplacementVector(std::vector<double>{2.0}), 0);
        for (int64_t r = 0; r < 4; ++r)
            for (int64_t x = 0; x < 2; ++x)
                CHECK(out.at4(0, 0, r, x) == f.at4(0, 0, r + 2, x));
        for (int64_t r = 4; r < 6; ++r)
            for (int64_t x = 0; x < 2; ++x)
                CHECK(out.at4(0, 0, r, x) == f.at4(0, 0, 5, x)); // replicated bottom row
    }
    SUBCASE("half-pixel shift on a linear ramp is exact in the interior") {
        Tensor f({1, 1, 8, 3});
        for (int64_t r = 0; r < 8; ++r)
            for (int64_t x = 0; x < 3; ++x) f.at4(0, 0, r, x) = static_cast<double>(r);
        const Tensor out = M::stm_apply(f, DisplacementVector(std::vector<double>{0.5}), 0);
        for (int64_t r = 0; r < 7; ++r)
            CHECK(out.at4(0, 0, r, 0) == doctest::Approx(static_cast<double>(r) + 0.5));
    }
    SUBCASE("displacement is rescaled by the pyramid level") {
        Tensor f({1, 1, 8, 1});
        for (int64_t r = 0; r < 8; ++r) f.at4(0, 0, r, 0) = static_cast<double>(r);
        const Tensor out = M::stm_apply(f, DisplacementVector(std::vector<double>{4.0}), 2);
        for (int64_t r = 0; r < 7; ++r)
            CHECK(out.at4(0, 0, r, 0) == doctest::Approx(static_cast<double>(r) + 1.0));
    }
    SUBCASE("linear in the features for fixed displacement") {
        Tensor f1 = random_tensor({2, 3, 9, 4}, rng);
        Tensor f2 = random_tensor({2, 3, 9, 4}, rng);
        const DisplacementVector d(std::vector<double>{0.3, -1.7, 2.2});
        Tensor sum(f1.shape);
        for (int64_t i = 0; i < sum.numel(); ++i) sum[i] = 2.0 * f1[i] + 3.0 * f2[i];
        const Tensor w1 = M::stm_apply(f1, d, 1);
        const Tensor w2 = M::stm_apply(f2, d, 1);
        const Tensor ws = M::stm_apply(sum, d, 1);
        for (int64_t i = 0; i < ws.numel(); ++i)
            CHECK(ws[i] == doctest::Approx(2.0 * w1[i] + 3.0 * w2[i]).epsilon(1e-12));
    }
}

TEST_CASE("soft_argmax") {
    SUBCASE("one-hot at row 7") {
        SurfaceDistribution q(1, 1, 1, 12);
        q.at(0, 0, 0, 6) = 1.0;
        CHECK(M::soft_argmax(q).at(0, 0, 0) == doctest::Approx(7.0));
    }
    SUBCASE("uniform over 512 rows") {
        SurfaceDistribution q(1, 1, 1, 512);
        for (int64_t r = 0; r < 512; ++r) q.at(0, 0, 0, r) = 1.0 / 512.0;
        CHECK(M::soft_argmax(q).at(0, 0, 0) == doctest::Approx(256.5));
    }
    SUBCASE("quarter at 2, three quarters at 4") {
        SurfaceDistribution q(1, 1, 1, 6);
        q.at(0, 0, 0, 1) = 0.25;
        q.at(0, 0, 0, 3) = 0.75;
        CHECK(M::soft_argmax(q).at(0, 0, 0) == doctest::Approx(3.5));
    }
    SUBCASE("unnormalized input is rejected") {
        SurfaceDistribution q(1, 1, 1, 4);
        q.at(0, 0, 0, 0) = 0.7;
        q.at(0, 0, 0, 1) = 0.7;
        CHECK_THROWS_AS(M::soft_argmax(q), std::invalid_argument);
    }
    SUBCASE("output lies in [1, R] for random distributions") {
        Rng rng(23);
        const Tensor qt = random_distribution(2, 3, 10, 4, rng);
        SurfaceDistribution q(2, 3, 4, 10);
        for (int64_t k = 0; k < 2; ++k)
            for (int64_t b = 0; b < 3; ++b)
                for (int64_t a = 0; a < 4; ++a)
                    for (int64_t r = 0; r < 10; ++r) q.at(k, b, a, r) = qt.at4(k, b, r, a);
        const auto s = M::soft_argmax(q);
        for (double p : s.positions) {
            CHECK(p >= 1.0);
            CHECK(p <= 10.0);
        }
    }
}

TEST_CASE("topology_guarantee") {
    auto make = [](std::initializer_list<double> vals) {
        SurfaceSet s(static_cast<int64_t>(vals.size()), 1, 1);
        int64_t k = 0;
        for (double v : vals) s.at(k++, 0, 0) = v;
        return s;
    };
    SUBCASE("already ordered input is unchanged") {
        const auto out = M::topology_guarantee(make({3, 5, 9}));
        CHECK(out.at(0, 0, 0) == 3);
        CHECK(out.at(1, 0, 0) == 5);
        CHECK(out.at(2, 0, 0) == 9);
    }
    SUBCASE("single violation clamps") {
        const auto out = M::topology_guarantee(make({5, 4, 9}));
        CHECK(out.at(0, 0, 0) == 5);
        CHECK(out.at(1, 0, 0) == 5);
        CHECK(out.at(2, 0, 0) == 9);
    }
    SUBCASE("cascading violations clamp") {
        const auto out = M::topology_guarantee(make({5, 4, 3}));
        CHECK(out.at(0, 0, 0) == 5);
        CHECK(out.at(1, 0, 0) == 5);
        CHECK(out.at(2, 0, 0) == 5);
    }
    SUBCASE("identity for a single surface") {
        const auto out = M::topology_guarantee(make({4.25}));
        CHECK(out.at(0, 0, 0) == doctest::Approx(4.25));
    }
    SUBCASE("idempotent and always ordered on random input") {
        Rng rng(29);
        SurfaceSet raw(4, 3, 5);
        for (auto& p : raw.positions) p = rng.uniform(1.0, 30.0);
        const auto once = M::topology_guarantee(raw);
        CHECK(once.is_ordered());
        const auto twice = M::topology_guarantee(once);
        CHECK(twice.positions == once.positions);
    }
}

TEST_CASE("forward shape contracts and ordering invariant") {
    Rng rng(31);
    Tensor patch = random_tensor({1, 4, 16, 12}, rng, 0.0, 1.0);
    for (const auto mode : {M::ModelConfig::Mode::Hybrid2d3d, M::ModelConfig::Mode::Full3d}) {
        M::Network net(tiny_config(3, mode), 37);
        M::ForwardOptions opt;
        const auto res = net.forward(patch, opt);
        CHECK(res.out.surface_logits.shape == std::vector<int64_t>{3, 4, 16, 12});
        CHECK(res.out.semantic_logits.shape == std::vector<int64_t>{4, 4, 16, 12});
        CHECK(res.out.displacement.size() == 4);
        CHECK(res.pred_aligned.is_ordered(1e-12));
        CHECK(res.pred_volume.is_ordered(1e-12));
        CHECK(std::abs(res.out.displacement.mean()) < 1e-5);
        // q sums to one over rows
        for (int64_t k = 0; k < 3; ++k)
            for (int64_t b = 0; b < 4; ++b)
                for (int64_t a = 0; a < 12; ++a) {
                    double s = 0.0;
                    for (int64_t r = 0; r < 16; ++r) s += res.q.at4(k, b, r, a);
                    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
                }
        CHECK(res.stm_active == (mode == M::ModelConfig::Mode::Hybrid2d3d));
    }
}

TEST_CASE("indivisible patch shapes are rejected") {
    M::ModelConfig cfg = tiny_config();
    cfg.levels = 3;
    M::Network net(cfg, 1);
    Tensor patch({1, 3, 18, 12}); // 18 not divisible by 4
    CHECK_THROWS_AS(net.forward(patch, M::ForwardOptions{}), std::invalid_argument);
}

TEST_CASE("whole-network gradients match finite differences") {
    Rng rng(41);
    M::Network net(tiny_config(2), 43);
    Tensor patch = random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);

    // scalar probe: fixed random weights on every network output
    const Tensor cq = random_tensor({2, 3, 8, 8}, rng, -0.5, 0.5);
    const Tensor cp = random_tensor({2, 3, 8}, rng, -0.5, 0.5);
    const Tensor cs = random_tensor({3, 3, 8, 8}, rng, -0.5, 0.5);
    const std::vector<double> cd = {0.7, -0.2, 0.4};

    auto probe = [&] {
        M::ForwardOptions opt;
        const auto res = net.forward(patch, opt);
        double s = 0.0;
        for (int64_t i = 0; i < cq.numel(); ++i) s += cq[i] * res.q[i];
        for (int64_t k = 0; k < 2; ++k)
            for (int64_t b = 0; b < 3; ++b)
                for (int64_t a = 0; a < 8; ++a) s += cp.at3(k, b, a) * res.pred_aligned.at(k, b, a);
        for (int64_t i = 0; i < cs.numel(); ++i) s += cs[i] * res.out.semantic_logits[i];
        for (int64_t b = 0; b < 3; ++b)
            s += cd[static_cast<size_t>(b)] * res.out.displacement.d[static_cast<size_t>(b)];
        return s;
    };

    M::ForwardOptions opt;
    opt.cache = true;
    net.forward(patch, opt);
    net.zero_grad();
    M::OutputGrads g;
    g.g_q = cq;
    g.g_pred_aligned = cp;
    g.g_semantic_logits = cs;
    g.g_d = cd;
    net.backward(g);

    auto params = net.params();
    Rng pick(47);
    int checked = 0;
    for (auto* p : params) {
        const int64_t i = pick.uniform_int(0, p->value.numel() - 1);
        const double analytic = p->grad[i];
        const double numeric = fd_central(probe, &p->value.v[static_cast<size_t>(i)], 1e-5);
        INFO(p->name << "[" << i << "]");
        CHECK(rel_err(analytic, numeric) < 2e-4);
        ++checked;
    }
    CHECK(checked > 20);
}

TEST_CASE("segmentation losses reach the displacement only through the feature warps") {
    Rng rng(53);
    Tensor patch = random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
    const Tensor cp = random_tensor({2, 3, 8}, rng, -0.5, 0.5);

    auto head_grad_norm = [&](M::ModelConfig::Mode mode) {
        M::Network net(tiny_config(2, mode), 59);
        M::ForwardOptions opt;
        opt.cache = true;
        net.forward(patch, opt);
        net.zero_grad();
        M::OutputGrads g;
        g.g_pred_aligned = cp;
        net.backward(g);
        double norm = 0.0;
        for (auto* p : net.params())
            if (p->name.rfind("align_head", 0) == 0 || p->name.rfind("align_dec", 0) == 0)
                for (int64_t i = 0; i < p->grad.numel(); ++i) norm += std::abs(p->grad[i]);
        return norm;
    };

    CHECK(head_grad_norm(M::ModelConfig::Mode::Hybrid2d3d) > 1e-10);
    CHECK(head_grad_norm(M::ModelConfig::Mode::Full3d) == 0.0);
}

TEST_CASE("checkpoint round-trip") {
    const auto dir = std::filesystem::temp_directory_path() / "octseg_ckpt_test";
    std::filesystem::remove_all(dir);
    M::Network net(tiny_config(2), 61);
    Rng rng(67);
    Tensor patch = random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
    const auto before = net.forward(patch, M::ForwardOptions{});
    M::save_checkpoint(dir, net, R"({"note":"test"})");

    M::Network loaded = M::load_checkpoint(dir);
    const auto after = loaded.forward(patch, M::ForwardOptions{});
    CHECK(after.out.surface_logits.v == before.out.surface_logits.v);
    CHECK(after.out.displacement.d == before.out.displacement.d);
    CHECK(M::checkpoint_extra(dir) == R"({"note":"test"})");

    // a tampered parameter list is rejected with a message
    auto index_path = dir / "weights.json";
    auto text = std::string();
    {
        std::ifstream f(index_path);
        text.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }
    const auto pos = text.find("enc0.conv1.w");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 12, "enc9.conv1.w");
    {
        std::ofstream f(index_path, std::ios::trunc);
        f << text;
    }
    CHECK_THROWS_WITH_AS(M::load_checkpoint(dir), doctest::Contains("mismatch"),
                         std::runtime_error);
    std::filesystem::remove_all(dir);
}
