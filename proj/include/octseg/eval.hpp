#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "octseg/core_types.hpp"
#include "octseg/tensor.hpp"

namespace octseg::eval {

struct SurfaceStat {
    std::string name;
    double mean_px = 0, std_px = 0, mean_um = 0, std_um = 0;
};

struct Histogram {
    double lo = -15.0, hi = 15.0;
    std::vector<int64_t> counts; // values outside [lo, hi] land in the edge bins

    int64_t bins() const { return static_cast<int64_t>(counts.size()); }
    double bin_lo(int64_t i) const { return lo + (hi - lo) * static_cast<double>(i) / bins(); }
    double bin_hi(int64_t i) const { return lo + (hi - lo) * static_cast<double>(i + 1) / bins(); }
    int64_t central_bin() const; // the bin containing 0
    int64_t total() const;
};

struct CaseMetrics {
    std::string id, tag;
    std::vector<double> mad_px;        // per surface
    std::vector<double> alignment_mad; // per surface, pixels
    double ncc = 0;
    double mean_abs_adjacent_diff = 0; // flatness of the (aligned) predictions
};

struct MetricsReport {
    std::string run_name;
    std::vector<std::string> surface_names;
    double spacing_um = 3.24;                 // within-A-scan
    std::vector<SurfaceStat> mad;             // aggregated over cases
    std::vector<double> alignment_mad_px;     // per surface, mean over cases
    double alignment_mad_avg_px = 0;
    double mean_ncc = 0;
    double mean_abs_adjacent_diff = 0;
    Histogram histogram;
    std::vector<CaseMetrics> cases;

    std::string to_json() const;
    static MetricsReport from_json(const std::string& text);
    std::string to_csv() const;
};

// Mean absolute distance between two surface sets, per surface, in pixels and
// micrometers (spacing_um = within-A-scan spacing). std is over (b, a).
std::vector<SurfaceStat> metric_mad(const SurfaceSet& pred, const SurfaceSet& truth,
                                    double spacing_um);

// Mean |(r_b - d_b) - (r_{b+1} - d_{b+1})| per surface, pixels.
std::vector<double> metric_alignment_mad(const SurfaceSet& truth, const DisplacementVector& d);

// Mean local NCC between adjacent B-scans after alignment; higher is better.
double metric_ncc_volume(const OctVolume& v, const DisplacementVector& d, int window = 9);

// Adjacent-B-scan surface differences pooled over (k, b, a).
Histogram connectivity_histogram(const SurfaceSet& pred, int64_t bins = 61, double lo = -15.0,
                                 double hi = 15.0);

double mean_abs_adjacent_diff(const SurfaceSet& pred);

// The selected surface as an (N_B, N_A) grid.
Tensor depth_field_export(const SurfaceSet& pred, int64_t surface_index);

// Side-by-side table of several runs, one column per run (markdown + csv).
struct Comparison {
    std::string markdown, csv;
};
Comparison compare_runs(const std::vector<MetricsReport>& reports);

std::string histogram_to_csv(const Histogram& h);
std::string depth_field_to_csv(const Tensor& grid);

// Minimal dependency-free image output (binary PGM, 8-bit grayscale).
void write_pgm(const std::filesystem::path& p, const std::vector<uint8_t>& pixels, int64_t width,
               int64_t height);
void render_histogram_pgm(const Histogram& h, const std::filesystem::path& p);
void render_depth_field_pgm(const Tensor& grid, const std::filesystem::path& p);

} // namespace octseg::eval
