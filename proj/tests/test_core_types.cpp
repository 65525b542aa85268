#include "doctest.h"

#include "octseg/core_types.hpp"
#include "test_utils.hpp"

using namespace octseg;
using namespace octseg::testutil;

TEST_CASE("surfaces_to_labelmap definition cases") {
    SUBCASE("one surface at row 3 of 5") {
        SurfaceSet s(1, 1, 1);
        s.at(0, 0, 0) = 3.0;
        const LabelMap m = surfaces_to_labelmap(s, 5);
        const uint8_t expected[5] = {0, 0, 1, 1, 1};
        for (int64_t r = 0; r < 5; ++r) CHECK(m.at(0, 0, r) == expected[r]);
    }
    SUBCASE("two surfaces at rows 2 and 4 of 5") {
        SurfaceSet s(2, 1, 1);
        s.at(0, 0, 0) = 2.0;
        s.at(1, 0, 0) = 4.0;
        const LabelMap m = surfaces_to_labelmap(s, 5);
        const uint8_t expected[5] = {0, 1, 1, 2, 2};
        for (int64_t r = 0; r < 5; ++r) CHECK(m.at(0, 0, r) == expected[r]);
    }
    SUBCASE("unordered input is rejected") {
        SurfaceSet s(2, 1, 1);
        s.at(0, 0, 0) = 4.0;
        s.at(1, 0, 0) = 2.0;
        CHECK_THROWS_AS(surfaces_to_labelmap(s, 5), std::invalid_argument);
    }
}

TEST_CASE("labelmap matches the brute-force count and stays monotone") {
    Rng rng(123);
    const int64_t K = 3, B = 4, A = 5, R = 12;
    const SurfaceSet s = random_ordered_surfaces(K, B, A, R, rng);
    const LabelMap m = surfaces_to_labelmap(s, R);
    for (int64_t a = 0; a < A; ++a)
        for (int64_t b = 0; b < B; ++b) {
            int prev = 0;
            for (int64_t r0 = 0; r0 < R; ++r0) {
                int count = 0; // independent definition: surfaces at or above this row
                for (int64_t k = 0; k < K; ++k)
                    if (static_cast<int64_t>(round_half_up(s.at(k, b, a))) <= r0 + 1) ++count;
                CHECK(m.at(a, b, r0) == count);
                CHECK(m.at(a, b, r0) >= prev);
                prev = m.at(a, b, r0);
            }
        }
}

TEST_CASE("labelmap transitions recover rounded integer surface positions") {
    Rng rng(77);
    const int64_t K = 2, B = 3, A = 4, R = 10;
    SurfaceSet s = random_ordered_surfaces(K, B, A, R, rng);
    // integer positions, kept strictly inside and strictly increasing so each
    // region is non-degenerate
    for (int64_t b = 0; b < B; ++b)
        for (int64_t a = 0; a < A; ++a) {
            s.at(0, b, a) = 2 + (a + b) % 3;
            s.at(1, b, a) = 6 + (a * b) % 3;
        }
    const LabelMap m = surfaces_to_labelmap(s, R);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t a = 0; a < A; ++a) {
            std::vector<int64_t> transitions;
            for (int64_t r0 = 1; r0 < R; ++r0)
                for (int l = m.at(a, b, r0 - 1); l < m.at(a, b, r0); ++l)
                    transitions.push_back(r0 + 1);
            REQUIRE(transitions.size() == 2);
            CHECK(transitions[0] == static_cast<int64_t>(s.at(0, b, a)));
            CHECK(transitions[1] == static_cast<int64_t>(s.at(1, b, a)));
        }
}

TEST_CASE("apply_displacement_to_surfaces") {
    Rng rng(5);
    const int64_t K = 2, B = 4, A = 3, R = 20;
    const SurfaceSet s = random_ordered_surfaces(K, B, A, R, rng);

    SUBCASE("zero displacement is the identity") {
        const auto out = apply_displacement_to_surfaces(s, DisplacementVector(B));
        CHECK(out.positions == s.positions);
    }
    SUBCASE("constant surface minus constant displacement") {
        SurfaceSet flat(1, 2, 3);
        for (auto& p : flat.positions) p = 10.0;
        const auto out =
            apply_displacement_to_surfaces(flat, DisplacementVector(std::vector<double>{2.0, 2.0}));
        for (const double p : out.positions) CHECK(p == doctest::Approx(8.0));
    }
    SUBCASE("matches the element-wise oracle and inverts") {
        DisplacementVector d(B);
        for (auto& x : d.d) x = rng.uniform(-4.0, 4.0);
        const auto out = apply_displacement_to_surfaces(s, d);
        for (int64_t k = 0; k < K; ++k)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t a = 0; a < A; ++a)
                    CHECK(out.at(k, b, a) ==
                          doctest::Approx(s.at(k, b, a) - d.d[static_cast<size_t>(b)]));
        const auto back = apply_displacement_to_surfaces(out, negated(d));
        for (size_t i = 0; i < back.positions.size(); ++i)
            CHECK(back.positions[i] == doctest::Approx(s.positions[i]).epsilon(1e-12));
    }
    SUBCASE("clipping only on request") {
        SurfaceSet top(1, 2, 1);
        top.at(0, 0, 0) = 2.0;
        top.at(0, 1, 0) = 2.0;
        const DisplacementVector d(std::vector<double>{5.0, -30.0});
        const auto unclipped = apply_displacement_to_surfaces(top, d);
        CHECK(unclipped.at(0, 0, 0) == doctest::Approx(-3.0));
        const auto clipped = apply_displacement_to_surfaces(top, d, true, 20);
        CHECK(clipped.at(0, 0, 0) == doctest::Approx(1.0));
        CHECK(clipped.at(0, 1, 0) == doctest::Approx(20.0));
    }
}

TEST_CASE("invariant validators") {
    OctVolume v(2, 2, 4);
    v.validate();
    v.spacing_um[0] = -1.0;
    CHECK_THROWS_AS(v.validate(), std::invalid_argument);

    SurfaceSet s(2, 1, 1);
    s.at(0, 0, 0) = 3.0;
    s.at(1, 0, 0) = 2.0;
    CHECK_FALSE(s.is_ordered());

    DisplacementVector d(std::vector<double>{100.0});
    CHECK_THROWS_AS(d.validate_for_rows(20), std::invalid_argument);

    SurfaceDistribution q(1, 1, 1, 4);
    q.at(0, 0, 0, 0) = 0.5;
    q.at(0, 0, 0, 1) = 0.5;
    CHECK(q.is_normalized());
    q.at(0, 0, 0, 1) = 0.6;
    CHECK_FALSE(q.is_normalized());
}
