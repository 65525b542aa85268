#include "octseg/layers.hpp"

#include <cmath>

namespace octseg::layers {

void Conv3dLayer::init(const std::string& name, int64_t ci_, int64_t co_, int64_t kd_, int64_t kh_,
                       int64_t kw_, Rng& rng, bool use_bias_) {
    use_bias = use_bias_;
    ci = ci_;
    co = co_;
    kd = kd_;
    kh = kh_;
    kw = kw_;
    w.name = name + ".w";
    b.name = name + ".b";
    w.value = Tensor({co, ci, kd, kh, kw});
    w.grad = Tensor({co, ci, kd, kh, kw});
    b.value = Tensor({co});
    b.grad = Tensor({co});
    const double stddev = std::sqrt(2.0 / static_cast<double>(ci * kd * kh * kw));
    for (auto& x : w.value.v) x = stddev * rng.gaussian();
}

Tensor Conv3dLayer::forward(const Tensor& x, bool cache) {
    Tensor out({co, x.dim(1), x.dim(2), x.dim(3)});
    kernels::conv3d_forward(x, w.value, b.value, out);
    if (cache) in_cache = x;
    return out;
}

Tensor Conv3dLayer::backward(const Tensor& gout) {
    if (gw_tmp.shape != w.value.shape) {
        gw_tmp = Tensor(w.value.shape);
        gb_tmp = Tensor(b.value.shape);
    }
    kernels::conv3d_backward_params(gout, in_cache, gw_tmp, gb_tmp);
    for (int64_t i = 0; i < w.grad.numel(); ++i) w.grad[i] += gw_tmp[i];
    if (use_bias)
        for (int64_t i = 0; i < b.grad.numel(); ++i) b.grad[i] += gb_tmp[i];
    Tensor gin(in_cache.shape);
    kernels::conv3d_backward_input(gout, w.value, gin);
    return gin;
}

void Conv3dLayer::collect(std::vector<Param*>& out) {
    out.push_back(&w);
    if (use_bias) out.push_back(&b);
}

void ChannelNormLayer::init(const std::string& name, int64_t channels_, bool per_slice_) {
    channels = channels_;
    per_slice = per_slice_;
    gamma.name = name + ".gamma";
    beta.name = name + ".beta";
    gamma.value = Tensor({channels});
    gamma.grad = Tensor({channels});
    gamma.value.fill(1.0);
    beta.value = Tensor({channels});
    beta.grad = Tensor({channels});
}

Tensor ChannelNormLayer::forward(const Tensor& x, bool cache) {
    Tensor out(x.shape);
    Tensor mean, invstd;
    kernels::channel_norm_forward(x, gamma.value, beta.value, per_slice, eps, out, mean, invstd);
    if (cache) {
        in_cache = x;
        mean_cache = std::move(mean);
        invstd_cache = std::move(invstd);
    }
    return out;
}

Tensor ChannelNormLayer::backward(const Tensor& gout) {
    Tensor gin(in_cache.shape);
    if (gg_tmp.shape != gamma.value.shape) {
        gg_tmp = Tensor(gamma.value.shape);
        gb_tmp = Tensor(beta.value.shape);
    }
    kernels::channel_norm_backward(gout, in_cache, gamma.value, per_slice, mean_cache,
                                   invstd_cache, gin, gg_tmp, gb_tmp);
    for (int64_t i = 0; i < channels; ++i) {
        gamma.grad[i] += gg_tmp[i];
        beta.grad[i] += gb_tmp[i];
    }
    return gin;
}

void ChannelNormLayer::collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void ResBlock::init(const std::string& name, int64_t ci, int64_t co, int64_t kd, bool per_slice,
                    Rng& rng) {
    conv1.init(name + ".conv1", ci, co, kd, 3, 3, rng, false);
    conv2.init(name + ".conv2", co, co, kd, 3, 3, rng, false);
    norm1.init(name + ".norm1", co, per_slice);
    norm2.init(name + ".norm2", co, per_slice);
    if (ci != co) {
        proj = std::make_unique<Conv3dLayer>();
        proj->init(name + ".proj", ci, co, 1, 1, 1, rng);
    }
}

Tensor ResBlock::forward(const Tensor& x, bool cache) {
    Tensor h = conv1.forward(x, cache);
    Tensor n1 = norm1.forward(h, cache);
    Tensor r1(n1.shape);
    kernels::relu_forward(n1, r1);
    if (cache) n1_cache = n1;
    Tensor h2 = conv2.forward(r1, cache);
    Tensor n2 = norm2.forward(h2, cache);
    Tensor skip = proj ? proj->forward(x, cache) : x;
    Tensor sum(n2.shape);
    for (int64_t i = 0; i < sum.numel(); ++i) sum[i] = n2[i] + skip[i];
    Tensor out(sum.shape);
    kernels::relu_forward(sum, out);
    if (cache) sum_cache = std::move(sum);
    return out;
}

Tensor ResBlock::backward(const Tensor& gout) {
    Tensor g_sum(gout.shape);
    kernels::relu_backward(gout, sum_cache, g_sum);
    Tensor g_h2 = norm2.backward(g_sum);
    Tensor g_r1 = conv2.backward(g_h2);
    Tensor g_n1(g_r1.shape);
    kernels::relu_backward(g_r1, n1_cache, g_n1);
    Tensor g_h1 = norm1.backward(g_n1);
    Tensor g_x = conv1.backward(g_h1);
    if (proj) {
        Tensor g_skip = proj->backward(g_sum);
        for (int64_t i = 0; i < g_x.numel(); ++i) g_x[i] += g_skip[i];
    } else {
        for (int64_t i = 0; i < g_x.numel(); ++i) g_x[i] += g_sum[i];
    }
    return g_x;
}

void ResBlock::collect(std::vector<Param*>& out) {
    conv1.collect(out);
    norm1.collect(out);
    conv2.collect(out);
    norm2.collect(out);
    if (proj) proj->collect(out);
}

Tensor MaxPoolLayer::forward(const Tensor& x) {
    in_shape = x.shape;
    Tensor out({x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
    kernels::maxpool2_forward(x, out, argmax);
    return out;
}

Tensor MaxPoolLayer::backward(const Tensor& gout) {
    Tensor gin(in_shape);
    kernels::maxpool2_backward(gout, argmax, gin);
    return gin;
}

Tensor UpsampleLayer::forward(const Tensor& x) {
    in_shape = x.shape;
    Tensor out({x.dim(0), x.dim(1), x.dim(2) * 2, x.dim(3) * 2});
    kernels::upsample2_forward(x, out);
    return out;
}

Tensor UpsampleLayer::backward(const Tensor& gout) {
    Tensor gin(in_shape);
    kernels::upsample2_backward(gout, gin);
    return gin;
}

} // namespace octseg::layers
