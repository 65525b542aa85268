#pragma once

#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "octseg/losses.hpp"
#include "octseg/model.hpp"
#include "octseg/preprocess.hpp"

namespace octseg::train {

struct AdamConfig {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

enum class RunMode { Full, NoAlign, PreAlign, NoSmooth, Full3d };

std::string run_mode_name(RunMode m);
RunMode run_mode_from_name(const std::string& s);

struct TrainConfig {
    int epochs = 30;
    double learning_rate = 1e-3;
    int plateau_patience = 10;
    int batch_size = 3;
    preprocess::PatchShape patch{64, 64, 12}; // rows, A-scans, B-scans
    std::vector<double> lambda{0.0, 0.3, 0.5};
    RunMode mode = RunMode::Full;
    std::string pre_align_file; // JSON { volume id: [d_1..d_B] }, required for pre_align
    uint64_t seed = 1;
    losses::Reduction reduction = losses::Reduction::Mean;
    int ncc_window = 9;
    model::ModelConfig model{3, 8, 3, model::ModelConfig::Mode::Hybrid2d3d};
    AdamConfig adam;
    std::string monitor = "total";
    bool deterministic = true;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

// Halve the rate after `patience` consecutive epochs without improvement.
class PlateauScheduler {
public:
    PlateauScheduler(double lr, int patience) : lr_(lr), patience_(patience) {}
    double lr() const { return lr_; }
    void observe(double monitored);

private:
    double lr_;
    int patience_;
    double best_ = std::numeric_limits<double>::infinity();
    int stale_ = 0;
};

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<layers::Param*> params, double lr, AdamConfig cfg);
    void set_lr(double lr) { lr_ = lr; }
    void step();

private:
    std::vector<layers::Param*> params_;
    std::vector<Tensor> m_, v_;
    double lr_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

struct DatasetCase {
    std::string id, tag, split;
    OctVolume volume;
    SurfaceSet truth; // volume frame
    DisplacementVector injected;
};

// split: "train", "test", or "" for everything
std::vector<DatasetCase> load_dataset(const std::filesystem::path& manifest_path,
                                      const std::string& split);

struct EpochLog {
    int epoch = 0;
    double lr = 0;
    losses::TotalLossParts mean;
    double wall_s = 0;
};

struct TrainResult {
    std::filesystem::path best_checkpoint, last_checkpoint, log_csv;
    std::vector<EpochLog> log;
    double best_monitored = 0;
};

struct TrainAborted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& manifest_path,
                  const std::filesystem::path& out_dir);

struct Prediction {
    SurfaceSet pred_volume;  // input-frame surfaces
    SurfaceSet pred_aligned; // aligned-frame surfaces
    DisplacementVector displacement;
};

// Runs the network over a deterministic tiling of the volume (rows/cols only;
// all B-scans are processed together) and averages overlapping estimates.
Prediction predict_volume(model::Network& net, const OctVolume& v,
                          const preprocess::PatchShape& patch, RunMode mode,
                          const DisplacementVector* pre_d = nullptr);

std::string log_csv_header();
std::string log_csv_row(const EpochLog& e);

} // namespace octseg::train
