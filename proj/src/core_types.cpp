#include "octseg/core_types.hpp"

#include <cmath>
#include <stdexcept>

namespace octseg {

void OctVolume::validate() const {
    if (n_a < 1 || n_b < 2 || n_r < 2)
        throw std::invalid_argument("OctVolume: need n_a >= 1, n_b >= 2, n_r >= 2");
    if (intensities.size() != static_cast<size_t>(n_a * n_b * n_r))
        throw std::invalid_argument("OctVolume: intensity buffer size mismatch");
    for (double s : spacing_um)
        if (!(s > 0.0)) throw std::invalid_argument("OctVolume: spacing must be positive");
    for (float x : intensities)
        if (!std::isfinite(x)) throw std::invalid_argument("OctVolume: non-finite intensity");
}

bool SurfaceSet::is_ordered(double tol) const {
    for (int64_t k = 0; k + 1 < n_surfaces; ++k)
        for (int64_t b = 0; b < n_b; ++b)
            for (int64_t a = 0; a < n_a; ++a)
                if (at(k + 1, b, a) < at(k, b, a) - tol) return false;
    return true;
}

bool SurfaceSet::in_bounds(int64_t rows) const {
    for (double p : positions)
        if (!(p >= 1.0 && p <= static_cast<double>(rows))) return false;
    return true;
}

void SurfaceSet::validate_for_rows(int64_t rows) const {
    if (positions.size() != static_cast<size_t>(n_surfaces * n_b * n_a))
        throw std::invalid_argument("SurfaceSet: position buffer size mismatch");
    if (!in_bounds(rows))
        throw std::invalid_argument("SurfaceSet: positions must lie within [1, rows]");
    if (!is_ordered())
        throw std::invalid_argument("SurfaceSet: surfaces must be ordered along every A-scan");
}

double DisplacementVector::mean() const {
    if (d.empty()) return 0.0;
    double s = 0.0;
    for (double x : d) s += x;
    return s / static_cast<double>(d.size());
}

void DisplacementVector::validate_for_rows(int64_t rows) const {
    for (double x : d) {
        if (!std::isfinite(x))
            throw std::invalid_argument("DisplacementVector: non-finite entry");
        if (std::abs(x) >= static_cast<double>(rows))
            throw std::invalid_argument("DisplacementVector: |d_b| must be < rows");
    }
}

bool SurfaceDistribution::is_normalized(double tol) const {
    for (int64_t k = 0; k < n_surfaces; ++k)
        for (int64_t b = 0; b < n_b; ++b)
            for (int64_t a = 0; a < n_a; ++a) {
                double s = 0.0;
                for (int64_t r = 0; r < n_r; ++r) {
                    const double p = at(k, b, a, r);
                    if (p < 0.0) return false;
                    s += p;
                }
                if (std::abs(s - 1.0) > tol) return false;
            }
    return true;
}

int64_t SurfaceMask::count() const {
    int64_t n = 0;
    for (uint8_t x : m) n += x ? 1 : 0;
    return n;
}

LabelMap surfaces_to_labelmap(const SurfaceSet& s, int64_t rows) {
    if (!s.is_ordered(1e-9))
        throw std::invalid_argument("surfaces_to_labelmap: unordered SurfaceSet");
    LabelMap out(s.n_a, s.n_b, rows);
    for (int64_t a = 0; a < s.n_a; ++a)
        for (int64_t b = 0; b < s.n_b; ++b) {
            int64_t k = 0; // surfaces already passed, walking rows downward
            for (int64_t r0 = 0; r0 < rows; ++r0) {
                const int64_t row = r0 + 1;
                while (k < s.n_surfaces &&
                       static_cast<int64_t>(round_half_up(s.at(k, b, a))) <= row)
                    ++k;
                out.at(a, b, r0) = static_cast<uint8_t>(k);
            }
        }
    return out;
}

SurfaceSet apply_displacement_to_surfaces(const SurfaceSet& s, const DisplacementVector& d,
                                          bool clip, int64_t rows) {
    if (d.size() != s.n_b)
        throw std::invalid_argument("apply_displacement_to_surfaces: size mismatch");
    SurfaceSet out = s;
    for (int64_t k = 0; k < s.n_surfaces; ++k)
        for (int64_t b = 0; b < s.n_b; ++b) {
            const double db = d.d[static_cast<size_t>(b)];
            for (int64_t a = 0; a < s.n_a; ++a) {
                double p = s.at(k, b, a) - db;
                if (clip) p = std::clamp(p, 1.0, static_cast<double>(rows));
                out.at(k, b, a) = p;
            }
        }
    return out;
}

DisplacementVector negated(const DisplacementVector& d) {
    DisplacementVector out = d;
    for (double& x : out.d) x = -x;
    return out;
}

} // namespace octseg
