#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "octseg/core_types.hpp"
#include "octseg/rng.hpp"
#include "octseg/tensor.hpp"

namespace octseg::preprocess {

// Integer per-A-scan shifts applied when flattening; kept so predictions can
// be mapped back to the scanner frame.
struct FlattenRecord {
    int64_t n_a = 0, n_b = 0;
    int64_t target_row = 0;
    std::vector<int32_t> shifts; // (a, b)

    int32_t& at(int64_t a, int64_t b) { return shifts[static_cast<size_t>(a * n_b + b)]; }
    int32_t at(int64_t a, int64_t b) const { return shifts[static_cast<size_t>(a * n_b + b)]; }
};

// Deep-boundary estimate per (a, b): row of the strongest negative axial
// gradient in the lower half of each A-scan, median-filtered with a 5x3
// window. A-scans with no gradient below -floor are filled from neighbours;
// if every A-scan is flagged the estimate falls back to R/2.
std::vector<double> estimate_bm(const OctVolume& v, double gradient_floor = 0.02);

std::pair<OctVolume, FlattenRecord> flatten_volume(const OctVolume& v,
                                                   const std::vector<double>& bm,
                                                   int64_t target_row);

// Maps surfaces from the flattened frame back to the scanner frame.
SurfaceSet unflatten_surface(const SurfaceSet& s, const FlattenRecord& rec);
// Maps scanner-frame surfaces into the flattened frame.
SurfaceSet flatten_surfaces(const SurfaceSet& s, const FlattenRecord& rec);

// Min/max normalization to [0, 1]; constant volumes map to 0.5 everywhere.
OctVolume normalize_intensity(const OctVolume& v);

void write_flatten_record(const FlattenRecord& rec, const std::filesystem::path& header_path);
FlattenRecord read_flatten_record(const std::filesystem::path& header_path);

struct PatchShape {
    int64_t rows = 0, cols_a = 0, bscans = 0;
};

struct Patch {
    int64_t r0 = 0, a0 = 0, b0 = 0; // 0-based offsets into the volume
    Tensor image;                   // (1, bscans, rows, cols_a), double
    SurfaceSet truth;               // row positions relative to the patch window, clamped
    SurfaceMask mask;               // entries whose surface left the row window are masked
};

class PatchSampler {
public:
    PatchSampler(const OctVolume& v, const SurfaceSet& truth, PatchShape shape, uint64_t seed);

    Patch random_patch();
    Patch at_offset(int64_t r0, int64_t a0, int64_t b0) const;

    // Deterministic tiling covering the whole volume (stride = patch size,
    // final tile clamped to the boundary).
    std::vector<std::array<int64_t, 3>> tiling_offsets() const;

private:
    const OctVolume& vol_;
    const SurfaceSet& truth_;
    PatchShape shape_;
    Rng rng_;
};

} // namespace octseg::preprocess
