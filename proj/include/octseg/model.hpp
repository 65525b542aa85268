#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "octseg/core_types.hpp"
#include "octseg/layers.hpp"
#include "octseg/tensor.hpp"

namespace octseg::model {

struct ModelConfig {
    int levels = 4;
    int base_channels = 16;
    int surfaces = 1;
    enum class Mode { Hybrid2d3d, Full3d } mode = Mode::Hybrid2d3d;

    int64_t channels_at(int level) const { return static_cast<int64_t>(base_channels) << level; }
    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

// Stacked per-B-scan feature maps, finest first; level l has shape
// (channels, bscans, rows/2^l, cols/2^l).
struct FeaturePyramid {
    std::vector<Tensor> levels;
};

struct NetworkOutput {
    DisplacementVector displacement;
    Tensor surface_logits;  // (K, B, rows, cols)
    Tensor semantic_logits; // (K+1, B, rows, cols)
};

struct ForwardResult {
    NetworkOutput out;
    Tensor q;                // softmax of surface_logits over the row axis
    SurfaceSet pred_aligned; // surfaces in the aligned frame (ordered)
    SurfaceSet pred_volume;  // aligned predictions mapped back to the input frame
    bool stm_active = false;
};

enum class DispSource { FromNetwork, Fixed, Zero };

struct ForwardOptions {
    DispSource d_source = DispSource::FromNetwork;
    const DisplacementVector* fixed_d = nullptr;
    bool cache = false; // keep intermediates for a following backward()
};

// Loss gradients flowing into the network; empty tensors mean "no gradient
// from this output".
struct OutputGrads {
    Tensor g_q;               // (K, B, rows, cols)
    Tensor g_pred_aligned;    // (K, B, cols)
    Tensor g_semantic_logits; // (K+1, B, rows, cols)
    std::vector<double> g_d;  // direct gradient on the displacement
};

// Softmax across the row axis of (K, B, rows, cols) logits.
Tensor softmax_over_rows(const Tensor& logits);

// Expected row index (1-based) under a normalized per-A-scan distribution.
SurfaceSet soft_argmax(const SurfaceDistribution& q);
SurfaceSet soft_argmax_tensor(const Tensor& q); // (K, B, rows, cols) layout

// Cumulative non-negative-increment ordering: s'_1 = raw_1,
// s'_{k+1} = s'_k + relu(raw_{k+1} - s'_k).
SurfaceSet topology_guarantee(const SurfaceSet& raw);

// Translate a pyramid level along the row axis by d_b / 2^level per B-scan
// (linear interpolation, edge replication).
Tensor stm_apply(const Tensor& level_features, const DisplacementVector& d, int level);

struct StmGrads {
    Tensor g_features;
    std::vector<double> g_d;
};
StmGrads stm_backward(const Tensor& g_out, const Tensor& level_features,
                      const DisplacementVector& d, int level);

// Backward passes of the prediction chain, shared by the network and the
// verification suites. raw is the pre-ordering soft-argmax output (K, B, cols).
Tensor topology_backward(const Tensor& raw, const Tensor& g_ordered);
// adds the soft-argmax contribution of g_raw onto g_q (K, B, rows, cols)
void soft_argmax_backward_accumulate(const Tensor& g_raw, Tensor& g_q);
Tensor softmax_over_rows_backward(const Tensor& q, const Tensor& g_q);

class Network {
public:
    Network(ModelConfig cfg, uint64_t seed);

    ForwardResult forward(const Tensor& patch, const ForwardOptions& opt);
    void backward(const OutputGrads& g);

    FeaturePyramid encode(const Tensor& patch); // encoder only, no caching

    std::vector<layers::Param*> params();
    void zero_grad();
    const ModelConfig& config() const { return cfg_; }

private:
    struct Decoder {
        std::vector<layers::UpsampleLayer> ups;
        std::vector<layers::ResBlock> blocks;
        std::vector<int64_t> split_channels; // skip channel count per stage
        std::vector<Tensor> cat_caches_unused;

        Tensor forward(const Tensor& bottleneck, const std::vector<Tensor>& skips, bool cache);
        // returns gradient w.r.t. the bottleneck; skip gradients appended per stage
        Tensor backward(const Tensor& g_finest, std::vector<Tensor>& g_skips);
    };

    struct Ctx {
        bool valid = false;
        bool stm_active = false;
        bool align_branch = false;
        std::vector<Tensor> enc_feats;   // e_l
        std::vector<Tensor> warped;      // stm(e_l) when active
        Tensor align_finest;             // (c0, B, h, w)
        Tensor align_pooled;             // (c0, B)
        std::vector<double> d;           // final displacement
        Tensor seg_finest;
        Tensor surface_logits, q;
        Tensor raw_positions; // (K, B, cols) before ordering
        SurfaceSet pred_aligned;
        int64_t rows = 0, cols = 0, bscans = 0;
    };

    void encoder_forward(const Tensor& patch, bool cache, std::vector<Tensor>& feats);
    void check_patch(const Tensor& patch) const;

    ModelConfig cfg_;
    std::vector<layers::ResBlock> enc_blocks_;
    std::vector<layers::MaxPoolLayer> pools_;
    Decoder align_dec_, seg_dec_;
    layers::Param align_w_, align_b_; // pooled-feature linear head, one scalar per B-scan
    layers::Conv3dLayer surf_head_, sem_head_;
    Ctx ctx_;
};

// Checkpoint directory: config.json + weights.json (names/shapes/offsets) +
// weights.bin (f64, little-endian). Loading rejects configs that do not match
// the stored one.
void save_checkpoint(const std::filesystem::path& dir, Network& net, const std::string& extra_json = "");
Network load_checkpoint(const std::filesystem::path& dir);
std::string checkpoint_extra(const std::filesystem::path& dir);

} // namespace octseg::model
