#pragma once

#include <memory>
#include <string>
#include <vector>

#include "octseg/kernels.hpp"
#include "octseg/rng.hpp"
#include "octseg/tensor.hpp"

// Building blocks of the network. Each layer owns its parameters and the
// forward-pass caches its backward pass needs; backward accumulates into the
// parameter gradients so mini-batches can sum over samples.

namespace octseg::layers {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad() { grad.fill(0.0); }
};

struct Conv3dLayer {
    Param w, b;
    int64_t ci = 0, co = 0, kd = 1, kh = 3, kw = 3;
    bool use_bias = true; // convs that feed a norm drop the (cancelled) bias
    Tensor in_cache;
    Tensor gw_tmp, gb_tmp;

    void init(const std::string& name, int64_t ci_, int64_t co_, int64_t kd_, int64_t kh_,
              int64_t kw_, Rng& rng, bool use_bias_ = true);
    Tensor forward(const Tensor& x, bool cache);
    Tensor backward(const Tensor& gout);
    void collect(std::vector<Param*>& out);
};

struct ChannelNormLayer {
    Param gamma, beta;
    int64_t channels = 0;
    bool per_slice = true;
    double eps = 1e-5;
    Tensor in_cache, mean_cache, invstd_cache;
    Tensor gg_tmp, gb_tmp;

    void init(const std::string& name, int64_t channels_, bool per_slice_);
    Tensor forward(const Tensor& x, bool cache);
    Tensor backward(const Tensor& gout);
    void collect(std::vector<Param*>& out);
};

// conv -> norm -> relu -> conv -> norm, plus a (projected) skip, final relu.
struct ResBlock {
    Conv3dLayer conv1, conv2;
    ChannelNormLayer norm1, norm2;
    std::unique_ptr<Conv3dLayer> proj; // 1x1x1 when channel counts differ
    Tensor n1_cache, sum_cache;

    void init(const std::string& name, int64_t ci, int64_t co, int64_t kd, bool per_slice,
              Rng& rng);
    Tensor forward(const Tensor& x, bool cache);
    Tensor backward(const Tensor& gout);
    void collect(std::vector<Param*>& out);
};

struct MaxPoolLayer {
    std::vector<int32_t> argmax;
    std::vector<int64_t> in_shape;

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gout);
};

struct UpsampleLayer {
    std::vector<int64_t> in_shape;

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& gout);
};

} // namespace octseg::layers
