#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace octseg {

// Row indices are 1-based everywhere a row position is a value (surface
// positions, displacement math, file formats). Grid loops are 0-based.

inline double round_half_up(double x) { return std::floor(x + 0.5); }

// Volumetric scan, indexed (a, b, r) = (A-scan column, B-scan index, axial row),
// row-major with r fastest. Intensities are stored as f32 to match the on-disk
// payload; numeric work happens in double elsewhere.
struct OctVolume {
    int64_t n_a = 0, n_b = 0, n_r = 0;
    std::array<double, 3> spacing_um{3.24, 6.7, 67.0};
    std::string id;
    std::vector<float> intensities;

    OctVolume() = default;
    OctVolume(int64_t na, int64_t nb, int64_t nr)
        : n_a(na), n_b(nb), n_r(nr),
          intensities(static_cast<size_t>(na * nb * nr), 0.0f) {}

    float& at(int64_t a, int64_t b, int64_t r) {
        return intensities[static_cast<size_t>((a * n_b + b) * n_r + r)];
    }
    float at(int64_t a, int64_t b, int64_t r) const {
        return intensities[static_cast<size_t>((a * n_b + b) * n_r + r)];
    }

    void validate() const; // throws std::invalid_argument on violated invariants
};

// K layer surfaces, one real-valued (possibly fractional) row per (b, a).
struct SurfaceSet {
    int64_t n_surfaces = 0, n_b = 0, n_a = 0;
    std::vector<std::string> names;
    std::vector<double> positions; // (k, b, a), values in row units, 1-based

    SurfaceSet() = default;
    SurfaceSet(int64_t k, int64_t nb, int64_t na)
        : n_surfaces(k), n_b(nb), n_a(na),
          positions(static_cast<size_t>(k * nb * na), 0.0) {}

    double& at(int64_t k, int64_t b, int64_t a) {
        return positions[static_cast<size_t>((k * n_b + b) * n_a + a)];
    }
    double at(int64_t k, int64_t b, int64_t a) const {
        return positions[static_cast<size_t>((k * n_b + b) * n_a + a)];
    }

    bool is_ordered(double tol = 0.0) const;
    bool in_bounds(int64_t rows) const; // all positions within [1, rows]
    void validate_for_rows(int64_t rows) const;
};

// One axial displacement per B-scan; positive shifts content toward larger
// row indices, and the aligned position of a surface is r - d_b.
struct DisplacementVector {
    std::vector<double> d;

    DisplacementVector() = default;
    explicit DisplacementVector(int64_t nb) : d(static_cast<size_t>(nb), 0.0) {}
    explicit DisplacementVector(std::vector<double> values) : d(std::move(values)) {}

    int64_t size() const { return static_cast<int64_t>(d.size()); }
    double mean() const;
    void validate_for_rows(int64_t rows) const; // finite, |d_b| < rows
};

// Per-A-scan probability over the R axial rows.
struct SurfaceDistribution {
    int64_t n_surfaces = 0, n_b = 0, n_a = 0, n_r = 0;
    std::vector<double> probs; // (k, b, a, r)

    SurfaceDistribution() = default;
    SurfaceDistribution(int64_t k, int64_t nb, int64_t na, int64_t nr)
        : n_surfaces(k), n_b(nb), n_a(na), n_r(nr),
          probs(static_cast<size_t>(k * nb * na * nr), 0.0) {}

    double& at(int64_t k, int64_t b, int64_t a, int64_t r) {
        return probs[static_cast<size_t>(((k * n_b + b) * n_a + a) * n_r + r)];
    }
    double at(int64_t k, int64_t b, int64_t a, int64_t r) const {
        return probs[static_cast<size_t>(((k * n_b + b) * n_a + a) * n_r + r)];
    }

    // non-negative and sums to one over r within the given tolerance
    bool is_normalized(double tol = 1e-5) const;
};

// Region index per voxel: label k means k surfaces lie at or above that row.
struct LabelMap {
    int64_t n_a = 0, n_b = 0, n_r = 0;
    std::vector<uint8_t> labels; // (a, b, r)

    LabelMap() = default;
    LabelMap(int64_t na, int64_t nb, int64_t nr)
        : n_a(na), n_b(nb), n_r(nr), labels(static_cast<size_t>(na * nb * nr), 0) {}

    uint8_t& at(int64_t a, int64_t b, int64_t r) {
        return labels[static_cast<size_t>((a * n_b + b) * n_r + r)];
    }
    uint8_t at(int64_t a, int64_t b, int64_t r) const {
        return labels[static_cast<size_t>((a * n_b + b) * n_r + r)];
    }
};

// Validity mask over (k, b, a), used when patches clip surfaces out of the
// supervised row window.
struct SurfaceMask {
    int64_t n_surfaces = 0, n_b = 0, n_a = 0;
    std::vector<uint8_t> m;

    SurfaceMask() = default;
    SurfaceMask(int64_t k, int64_t nb, int64_t na, bool valid = true)
        : n_surfaces(k), n_b(nb), n_a(na),
          m(static_cast<size_t>(k * nb * na), valid ? 1 : 0) {}

    uint8_t& at(int64_t k, int64_t b, int64_t a) {
        return m[static_cast<size_t>((k * n_b + b) * n_a + a)];
    }
    uint8_t at(int64_t k, int64_t b, int64_t a) const {
        return m[static_cast<size_t>((k * n_b + b) * n_a + a)];
    }

    int64_t count() const;
};

// Region boundaries sit at rounded surface positions: voxel (a,b,r) gets the
// number of surfaces whose rounded position is <= r. Rejects unordered input.
LabelMap surfaces_to_labelmap(const SurfaceSet& s, int64_t rows);

// positions'[k,b,a] = positions[k,b,a] - d_b; clipped to [1, rows] only when
// requested.
SurfaceSet apply_displacement_to_surfaces(const SurfaceSet& s, const DisplacementVector& d,
                                          bool clip = false, int64_t rows = 0);

DisplacementVector negated(const DisplacementVector& d);

} // namespace octseg
