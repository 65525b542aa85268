#pragma once

#include <filesystem>
#include <string>

#include "octseg/core_types.hpp"

namespace octseg::synth {

// Layered phantom volumes with known surfaces and a known injected per-B-scan
// misalignment, for desk-scale end-to-end verification.
struct PhantomSpec {
    int64_t n_a = 128, n_b = 12, n_r = 96;
    int64_t surfaces = 3;
    double smooth_cycles_a = 1.5; // spatial frequency of the surface undulation
    double smooth_cycles_b = 0.8;
    int drusen_count = 2;
    double drusen_amp_lo = 3.0; // axial pixels, bumps lift the deep surfaces upward
    double drusen_amp_hi = 8.0;
    double noise_sigma = 0.05;
    double shift_range = 6.0; // max |injected displacement| in pixels
    uint64_t seed = 1;

    void validate() const;
};

struct PhantomSample {
    OctVolume volume;            // observed (misaligned) volume
    SurfaceSet truth_scanner;    // ground truth in the unshifted frame
    SurfaceSet truth;            // ground truth in the volume frame
    DisplacementVector injected; // zero-mean injected per-B-scan shift
    std::string tag;             // "amd" when drusen were added, else "normal"
};

PhantomSample generate_phantom(const PhantomSpec& spec);

struct DatasetManifest {
    std::filesystem::path path; // manifest file location
    int64_t n_train = 0, n_test = 0;
};

// Writes OCTV1/SURF1 pairs for every sample plus manifest.json recording the
// split, per-sample seeds, tags, and injected displacements. Surfaces on disk
// are in the volume frame.
DatasetManifest make_dataset(const PhantomSpec& spec, int64_t n_train, int64_t n_test,
                             const std::filesystem::path& out_dir);

} // namespace octseg::synth
