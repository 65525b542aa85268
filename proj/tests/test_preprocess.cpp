#include "doctest.h"

#include "octseg/preprocess.hpp"
#include "octseg/synth.hpp"
#include "test_utils.hpp"

using namespace octseg;
using namespace octseg::testutil;
namespace P = octseg::preprocess;

namespace {

OctVolume step_volume(int64_t na, int64_t nb, int64_t nr, const std::vector<double>& boundary) {
    // bright above the boundary row, dark below (strong negative gradient)
    OctVolume v(na, nb, nr);
    for (int64_t a = 0; a < na; ++a)
        for (int64_t b = 0; b < nb; ++b)
            for (int64_t r = 0; r < nr; ++r)
                v.at(a, b, r) =
                    (static_cast<double>(r + 1) <= boundary[static_cast<size_t>(a * nb + b)])
                        ? 0.8f
                        : 0.05f;
    return v;
}

} // namespace

TEST_CASE("estimate_bm finds a known deep boundary within one pixel") {
    const int64_t na = 24, nb = 6, nr = 96;
    std::vector<double> boundary(static_cast<size_t>(na * nb), 70.0);
    const OctVolume v = step_volume(na, nb, nr, boundary);
    const auto bm = P::estimate_bm(v);
    for (double x : bm) CHECK(std::abs(x - 70.0) <= 1.0);
}

TEST_CASE("estimate_bm flags constant volumes and falls back to R/2") {
    OctVolume v(8, 4, 64);
    for (auto& x : v.intensities) x = 0.4f;
    const auto bm = P::estimate_bm(v);
    for (double x : bm) CHECK(x == doctest::Approx(32.0));
}

TEST_CASE("estimate_bm is invariant to a constant intensity offset") {
    const int64_t na = 12, nb = 4, nr = 64;
    std::vector<double> boundary(static_cast<size_t>(na * nb));
    Rng rng(3);
    for (auto& b : boundary) b = 40.0 + rng.uniform(0.0, 8.0);
    OctVolume v = step_volume(na, nb, nr, boundary);
    OctVolume shifted = v;
    for (auto& x : shifted.intensities) x += 0.15f;
    CHECK(P::estimate_bm(v) == P::estimate_bm(shifted));
}

TEST_CASE("flatten_volume") {
    const int64_t na = 10, nb = 4, nr = 64;
    SUBCASE("identity when the boundary already sits at the target") {
        std::vector<double> bm(static_cast<size_t>(na * nb), 48.0);
        const OctVolume v = step_volume(na, nb, nr, bm);
        auto [flat, rec] = P::flatten_volume(v, bm, 48);
        CHECK(flat.intensities == v.intensities);
        for (int32_t s : rec.shifts) CHECK(s == 0);
    }
    SUBCASE("uniform shift of +3 rows") {
        std::vector<double> bm(static_cast<size_t>(na * nb), 45.0);
        const OctVolume v = step_volume(na, nb, nr, bm);
        auto [flat, rec] = P::flatten_volume(v, bm, 48);
        for (int32_t s : rec.shifts) CHECK(s == 3);
        for (int64_t a = 0; a < na; ++a)
            for (int64_t b = 0; b < nb; ++b)
                for (int64_t r = 3; r < nr; ++r)
                    CHECK(flat.at(a, b, r) == v.at(a, b, r - 3));
    }
    SUBCASE("target row outside [R/2, R-4] is rejected") {
        std::vector<double> bm(static_cast<size_t>(na * nb), 40.0);
        const OctVolume v = step_volume(na, nb, nr, bm);
        CHECK_THROWS_AS(P::flatten_volume(v, bm, 10), std::invalid_argument);
        CHECK_THROWS_AS(P::flatten_volume(v, bm, nr - 1), std::invalid_argument);
    }
}

TEST_CASE("flatten then unflatten restores the boundary within rounding") {
    const int64_t na = 20, nb = 5, nr = 96;
    Rng rng(7);
    std::vector<double> boundary(static_cast<size_t>(na * nb));
    for (auto& b : boundary) b = 60.0 + rng.uniform(-6.0, 6.0);
    const OctVolume v = step_volume(na, nb, nr, boundary);
    const auto bm = P::estimate_bm(v);
    auto [flat, rec] = P::flatten_volume(v, bm, 72);

    // boundary positions expressed as a surface in the flattened frame
    SurfaceSet s(1, nb, na);
    for (int64_t b = 0; b < nb; ++b)
        for (int64_t a = 0; a < na; ++a)
            s.at(0, b, a) = bm[static_cast<size_t>(a * nb + b)] + rec.at(a, b);
    const SurfaceSet back = P::unflatten_surface(s, rec);
    for (int64_t b = 0; b < nb; ++b)
        for (int64_t a = 0; a < na; ++a)
            CHECK(std::abs(back.at(0, b, a) - bm[static_cast<size_t>(a * nb + b)]) <= 0.5);
}

TEST_CASE("unflatten undoes flatten_surfaces exactly") {
    Rng rng(11);
    P::FlattenRecord rec;
    rec.n_a = 6;
    rec.n_b = 3;
    rec.target_row = 40;
    rec.shifts.resize(18);
    for (auto& s : rec.shifts) s = static_cast<int32_t>(rng.uniform_int(-7, 7));
    const SurfaceSet s = random_ordered_surfaces(2, 3, 6, 50, rng);
    const SurfaceSet there = P::flatten_surfaces(s, rec);
    const SurfaceSet back = P::unflatten_surface(there, rec);
    for (size_t i = 0; i < s.positions.size(); ++i)
        CHECK(back.positions[i] == doctest::Approx(s.positions[i]).epsilon(1e-12));
}

TEST_CASE("flatten record round-trips through its file format") {
    Rng rng(13);
    P::FlattenRecord rec;
    rec.n_a = 5;
    rec.n_b = 4;
    rec.target_row = 30;
    rec.shifts.resize(20);
    for (auto& s : rec.shifts) s = static_cast<int32_t>(rng.uniform_int(-10, 10));
    const auto dir = std::filesystem::temp_directory_path() / "octseg_flat_test";
    std::filesystem::create_directories(dir);
    P::write_flatten_record(rec, dir / "rec.flatten.json");
    const auto back = P::read_flatten_record(dir / "rec.flatten.json");
    CHECK(back.n_a == rec.n_a);
    CHECK(back.n_b == rec.n_b);
    CHECK(back.target_row == rec.target_row);
    CHECK(back.shifts == rec.shifts);
    std::filesystem::remove_all(dir);
}

TEST_CASE("intensity normalization") {
    OctVolume v(2, 2, 4);
    Rng rng(17);
    for (auto& x : v.intensities) x = static_cast<float>(rng.uniform(0.2, 0.9));
    v.intensities[0] = 0.2f;
    v.intensities[5] = 0.9f;
    const OctVolume n = P::normalize_intensity(v);
    float lo = 1e9f, hi = -1e9f;
    for (float x : n.intensities) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    CHECK(lo == doctest::Approx(0.0f));
    CHECK(hi == doctest::Approx(1.0f));

    OctVolume c(2, 2, 4);
    for (auto& x : c.intensities) x = 0.7f;
    const OctVolume nc = P::normalize_intensity(c);
    for (float x : nc.intensities) CHECK(x == doctest::Approx(0.5f));
}

TEST_CASE("patch extraction") {
    synth::PhantomSpec spec;
    spec.n_a = 40;
    spec.n_b = 6;
    spec.n_r = 48;
    spec.surfaces = 2;
    spec.drusen_count = 0;
    spec.shift_range = 3.0;
    spec.seed = 21;
    const auto sample = synth::generate_phantom(spec);

    SUBCASE("patch equal to the volume is the identity crop") {
        P::PatchSampler sampler(sample.volume, sample.truth, {48, 40, 6}, 1);
        const auto offs = sampler.tiling_offsets();
        REQUIRE(offs.size() == 1);
        const auto p = sampler.at_offset(0, 0, 0);
        for (int64_t b = 0; b < 6; ++b)
            for (int64_t r = 0; r < 48; ++r)
                for (int64_t a = 0; a < 40; ++a)
                    CHECK(p.image.at4(0, b, r, a) ==
                          doctest::Approx(static_cast<double>(sample.volume.at(a, b, r))));
        CHECK(p.mask.count() == 2 * 6 * 40);
    }
    SUBCASE("tiling covers the volume with clamped final tiles") {
        P::PatchSampler sampler(sample.volume, sample.truth, {32, 16, 6}, 1);
        const auto offs = sampler.tiling_offsets();
        CHECK(offs.size() == 2 * 3 * 1); // rows: 0,16  cols: 0,16,24
        std::vector<uint8_t> covered(static_cast<size_t>(48 * 40), 0);
        for (const auto& o : offs)
            for (int64_t r = o[0]; r < o[0] + 32; ++r)
                for (int64_t a = o[1]; a < o[1] + 16; ++a)
                    covered[static_cast<size_t>(r * 40 + a)] = 1;
        for (uint8_t c : covered) CHECK(c == 1);
    }
    SUBCASE("random draws stay in bounds and mask matches the crop") {
        P::PatchSampler sampler(sample.volume, sample.truth, {32, 24, 4}, 99);
        for (int t = 0; t < 100; ++t) {
            const auto p = sampler.random_patch();
            CHECK(p.r0 >= 0);
            CHECK(p.r0 + 32 <= 48);
            CHECK(p.a0 >= 0);
            CHECK(p.a0 + 24 <= 40);
            CHECK(p.b0 >= 0);
            CHECK(p.b0 + 4 <= 6);
            for (int64_t k = 0; k < 2; ++k)
                for (int64_t b = 0; b < 4; ++b)
                    for (int64_t a = 0; a < 24; ++a) {
                        const double orig = sample.truth.at(k, p.b0 + b, p.a0 + a) -
                                            static_cast<double>(p.r0);
                        const bool inside = orig >= 1.0 && orig <= 32.0;
                        CHECK(p.mask.at(k, b, a) == (inside ? 1 : 0));
                        if (inside) CHECK(p.truth.at(k, b, a) == doctest::Approx(orig));
                    }
        }
    }
    SUBCASE("patches larger than the volume are rejected") {
        CHECK_THROWS_AS(P::PatchSampler(sample.volume, sample.truth, {64, 16, 4}, 1),
                        std::invalid_argument);
    }
}
