#pragma once

#include <vector>

#include "octseg/core_types.hpp"
#include "octseg/tensor.hpp"

namespace octseg::losses {

enum class Reduction { Sum, Mean };

struct LossWeights {
    std::vector<double> lambda; // per-surface weight of the surface smoothness term
    Reduction reduction = Reduction::Mean;

    void validate(int64_t surfaces) const;
};

// Negative mean local NCC between each pair of adjacent B-scans after warping
// the image by d. window is the odd side length of the local patch; eps
// regularizes the variance product. Value lies in [-1, 1].
double local_ncc_loss(const Tensor& image, const DisplacementVector& d, int window,
                      std::vector<double>* grad_d = nullptr, double eps = 1e-5);

// Squared difference of displaced ground-truth surface positions on adjacent
// B-scans, averaged over surfaces; reduction applies over the (b, a) pairs.
double alignment_smoothness_loss(const SurfaceSet& truth, const DisplacementVector& d,
                                 const SurfaceMask& mask, Reduction red,
                                 std::vector<double>* grad_d = nullptr);

// Sum of the two alignment terms, weight 1 each.
double alignment_loss(const Tensor& image, const SurfaceSet& truth, const DisplacementVector& d,
                      int window, const SurfaceMask& mask, Reduction red,
                      std::vector<double>* grad_d = nullptr);

// Negative log-probability of the true (rounded) row under q, over masked
// entries. q has layout (K, B, rows, cols).
double surface_cross_entropy(const Tensor& q, const SurfaceSet& truth, const SurfaceMask& mask,
                             Reduction red, Tensor* grad_q = nullptr);

// Elementwise smooth-L1 between predicted and true surface positions.
// grad_pred has layout (K, B, cols).
double smooth_l1(const SurfaceSet& pred, const SurfaceSet& truth, const SurfaceMask& mask,
                 Reduction red, Tensor* grad_pred = nullptr);

// Sum of squared forward differences of each surface along a and along b;
// one scalar per surface. When grad_pred is requested, each surface's
// contribution is weighted by lambda[k] (all ones if lambda is null).
std::vector<double> surface_smoothness(const SurfaceSet& pred, Reduction red,
                                       const std::vector<double>* lambda = nullptr,
                                       Tensor* grad_pred = nullptr);

// Voxel cross entropy plus (1 - mean soft Dice over the K+1 classes), each
// with weight 1. logits layout (K+1, B, rows, cols); labels indexed (a, b, r).
double dice_ce_loss(const Tensor& semantic_logits, const LabelMap& labels,
                    Tensor* grad_logits = nullptr, double dice_eps = 1e-5);

struct SegLossParts {
    double dice_ce = 0, ce = 0, l1 = 0, smooth = 0, total = 0;
};

// dice_ce + ce + l1 + sum_k lambda_k * smooth_k. truth and labels live in the
// same frame as the predictions.
SegLossParts segmentation_loss(const Tensor& q, const SurfaceSet& pred, const Tensor& semantic_logits,
                               const SurfaceSet& truth, const LabelMap& labels,
                               const SurfaceMask& mask, const LossWeights& weights,
                               Tensor* grad_q = nullptr, Tensor* grad_pred = nullptr,
                               Tensor* grad_sem = nullptr);

struct TotalLossParts {
    double ncc = 0, smooth_align = 0, align = 0;
    SegLossParts seg;
    double total = 0;
};

// align + seg with weight 1 each. truth_alignment is in the image frame (used
// with d); truth_seg is in the prediction frame.
TotalLossParts total_loss(const Tensor& image, const DisplacementVector& d,
                          const SurfaceSet& truth_alignment, int window,
                          const Tensor& q, const SurfaceSet& pred, const Tensor& semantic_logits,
                          const SurfaceSet& truth_seg, const LabelMap& labels,
                          const SurfaceMask& mask, const LossWeights& weights,
                          std::vector<double>* grad_d = nullptr, Tensor* grad_q = nullptr,
                          Tensor* grad_pred = nullptr, Tensor* grad_sem = nullptr);

} // namespace octseg::losses
