#pragma once

#include <cstdint>
#include <vector>

#include "octseg/tensor.hpp"

// Low-level numeric kernels for the network. Feature tensors are laid out
// (channels, bscans, rows, cols) with rows/cols the in-plane axes of a B-scan.
// All kernels are deterministic: each output element is accumulated by exactly
// one thread in a fixed order, so results are identical for any thread count.
// The serial variants in kernels::ref are the reference implementations used
// by the unit tests and the benchmark target.

namespace octseg::kernels {

// 3D convolution, stride 1, zero padding (kd/2, kh/2, kw/2).
// in: (ci, d, h, w); weight: (co, ci, kd, kh, kw); bias: (co); out: (co, d, h, w).
// kd == 1 makes the kernel act per B-scan (the 2D encoder path).
void conv3d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, Tensor& out);
void conv3d_backward_input(const Tensor& gout, const Tensor& weight, Tensor& gin);
void conv3d_backward_params(const Tensor& gout, const Tensor& in, Tensor& gweight, Tensor& gbias);

// 2x2 max pooling over (rows, cols), per (channel, bscan). h and w must be even.
void maxpool2_forward(const Tensor& in, Tensor& out, std::vector<int32_t>& argmax);
void maxpool2_backward(const Tensor& gout, const std::vector<int32_t>& argmax, Tensor& gin);

// Nearest-neighbour 2x upsampling over (rows, cols).
void upsample2_forward(const Tensor& in, Tensor& out);
void upsample2_backward(const Tensor& gout, Tensor& gin);

void relu_forward(const Tensor& in, Tensor& out);
void relu_backward(const Tensor& gout, const Tensor& in, Tensor& gin);

// Normalization over a group of spatial positions with per-channel affine.
// per_slice = true: each (channel, bscan) slice normalized over (h, w);
// per_slice = false: each channel normalized over (bscans, h, w).
void channel_norm_forward(const Tensor& in, const Tensor& gamma, const Tensor& beta,
                          bool per_slice, double eps, Tensor& out,
                          Tensor& mean_cache, Tensor& invstd_cache);
void channel_norm_backward(const Tensor& gout, const Tensor& in, const Tensor& gamma,
                           bool per_slice, const Tensor& mean_cache, const Tensor& invstd_cache,
                           Tensor& gin, Tensor& ggamma, Tensor& gbeta);

// Translate each B-scan slab along the row axis: out(c,b,r,x) = in(c,b, r + shift_b, x),
// linear interpolation, edge replication. Differentiable in the input and the shifts.
void warp_rows_forward(const Tensor& in, const std::vector<double>& shifts, Tensor& out);
void warp_rows_backward(const Tensor& gout, const Tensor& in, const std::vector<double>& shifts,
                        Tensor& gin, std::vector<double>& gshifts);

namespace ref {
void conv3d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, Tensor& out);
void conv3d_backward_input(const Tensor& gout, const Tensor& weight, Tensor& gin);
void conv3d_backward_params(const Tensor& gout, const Tensor& in, Tensor& gweight, Tensor& gbias);
void maxpool2_forward(const Tensor& in, Tensor& out, std::vector<int32_t>& argmax);
void upsample2_forward(const Tensor& in, Tensor& out);
void warp_rows_forward(const Tensor& in, const std::vector<double>& shifts, Tensor& out);
} // namespace ref

} // namespace octseg::kernels
