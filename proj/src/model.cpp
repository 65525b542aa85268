#include "octseg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "octseg/io.hpp"

namespace octseg::model {

using nlohmann::json;

void ModelConfig::validate() const {
    if (levels < 2) throw std::invalid_argument("ModelConfig: levels >= 2 required");
    if (base_channels < 1) throw std::invalid_argument("ModelConfig: base_channels >= 1 required");
    if (surfaces < 1) throw std::invalid_argument("ModelConfig: surfaces >= 1 required");
}

std::string ModelConfig::to_json() const {
    json j;
    j["levels"] = levels;
    j["base_channels"] = base_channels;
    j["surfaces"] = surfaces;
    j["mode"] = mode == Mode::Hybrid2d3d ? "hybrid-2d3d" : "full-3d";
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    ModelConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "levels")
            c.levels = it.value().get<int>();
        else if (it.key() == "base_channels")
            c.base_channels = it.value().get<int>();
        else if (it.key() == "surfaces")
            c.surfaces = it.value().get<int>();
        else if (it.key() == "mode") {
            const std::string m = it.value().get<std::string>();
            if (m == "hybrid-2d3d")
                c.mode = Mode::Hybrid2d3d;
            else if (m == "full-3d")
                c.mode = Mode::Full3d;
            else
                throw std::invalid_argument("ModelConfig: unknown mode '" + m + "'");
        } else {
            throw std::invalid_argument("ModelConfig: unknown key '" + it.key() + "'");
        }
    }
    c.validate();
    return c;
}

Tensor softmax_over_rows(const Tensor& logits) {
    const int64_t K = logits.dim(0), B = logits.dim(1), R = logits.dim(2), A = logits.dim(3);
    Tensor q(logits.shape);
    const double* pl = logits.data();
    double* pq = q.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                const int64_t base = ((k * B + b) * R) * A + a;
                double mx = pl[base];
                for (int64_t r = 1; r < R; ++r) mx = std::max(mx, pl[base + r * A]);
                double s = 0.0;
                for (int64_t r = 0; r < R; ++r) {
                    const double e = std::exp(pl[base + r * A] - mx);
                    pq[base + r * A] = e;
                    s += e;
                }
                const double inv = 1.0 / s;
                for (int64_t r = 0; r < R; ++r) pq[base + r * A] *= inv;
            }
    return q;
}

SurfaceSet soft_argmax(const SurfaceDistribution& q) {
    if (!q.is_normalized(1e-4))
        throw std::invalid_argument("soft_argmax: distribution not normalized within 1e-4");
    SurfaceSet out(q.n_surfaces, q.n_b, q.n_a);
    for (int64_t k = 0; k < q.n_surfaces; ++k)
        for (int64_t b = 0; b < q.n_b; ++b)
            for (int64_t a = 0; a < q.n_a; ++a) {
                double s = 0.0;
                for (int64_t r = 0; r < q.n_r; ++r)
                    s += static_cast<double>(r + 1) * q.at(k, b, a, r);
                out.at(k, b, a) = s;
            }
    return out;
}

SurfaceSet soft_argmax_tensor(const Tensor& q) {
    const int64_t K = q.dim(0), B = q.dim(1), R = q.dim(2), A = q.dim(3);
    SurfaceSet out(K, B, A);
    const double* pq = q.data();
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                const int64_t base = ((k * B + b) * R) * A + a;
                double s = 0.0;
                for (int64_t r = 0; r < R; ++r)
                    s += static_cast<double>(r + 1) * pq[base + r * A];
                out.at(k, b, a) = s;
            }
    return out;
}

SurfaceSet topology_guarantee(const SurfaceSet& raw) {
    SurfaceSet out = raw;
    for (int64_t b = 0; b < raw.n_b; ++b)
        for (int64_t a = 0; a < raw.n_a; ++a) {
            double prev = raw.at(0, b, a);
            out.at(0, b, a) = prev;
            for (int64_t k = 1; k < raw.n_surfaces; ++k) {
                const double inc = raw.at(k, b, a) - prev;
                prev = prev + (inc > 0.0 ? inc : 0.0);
                out.at(k, b, a) = prev;
            }
        }
    return out;
}

Tensor stm_apply(const Tensor& level_features, const DisplacementVector& d, int level) {
    if (level < 0) throw std::invalid_argument("stm_apply: level must be >= 0");
    const double scale = 1.0 / static_cast<double>(int64_t(1) << level);
    std::vector<double> shifts(d.d.size());
    for (size_t i = 0; i < shifts.size(); ++i) shifts[i] = d.d[i] * scale;
    Tensor out(level_features.shape);
    kernels::warp_rows_forward(level_features, shifts, out);
    return out;
}

StmGrads stm_backward(const Tensor& g_out, const Tensor& level_features,
                      const DisplacementVector& d, int level) {
    const double scale = 1.0 / static_cast<double>(int64_t(1) << level);
    std::vector<double> shifts(d.d.size());
    for (size_t i = 0; i < shifts.size(); ++i) shifts[i] = d.d[i] * scale;
    StmGrads g;
    g.g_features = Tensor(level_features.shape);
    kernels::warp_rows_backward(g_out, level_features, shifts, g.g_features, g.g_d);
    for (auto& x : g.g_d) x *= scale;
    return g;
}

Tensor topology_backward(const Tensor& raw, const Tensor& g_ordered) {
    const int64_t K = raw.dim(0), B = raw.dim(1), A = raw.dim(2);
    Tensor g_raw({K, B, A});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t a = 0; a < A; ++a) {
            std::vector<uint8_t> active(static_cast<size_t>(K), 0);
            double prev = raw.at3(0, b, a);
            for (int64_t k = 1; k < K; ++k) {
                const double inc = raw.at3(k, b, a) - prev;
                active[static_cast<size_t>(k)] = inc > 0.0 ? 1 : 0;
                prev += inc > 0.0 ? inc : 0.0;
            }
            double carry = g_ordered.at3(K - 1, b, a);
            for (int64_t k = K - 1; k >= 1; --k) {
                g_raw.at3(k, b, a) = active[static_cast<size_t>(k)] ? carry : 0.0;
                carry = (active[static_cast<size_t>(k)] ? 0.0 : carry) + g_ordered.at3(k - 1, b, a);
            }
            g_raw.at3(0, b, a) = carry;
        }
    return g_raw;
}

void soft_argmax_backward_accumulate(const Tensor& g_raw, Tensor& g_q) {
    const int64_t K = g_q.dim(0), B = g_q.dim(1), R = g_q.dim(2), A = g_q.dim(3);
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                const double gr = g_raw.at3(k, b, a);
                if (gr == 0.0) continue;
                for (int64_t r = 0; r < R; ++r)
                    g_q.at4(k, b, r, a) += gr * static_cast<double>(r + 1);
            }
}

Tensor softmax_over_rows_backward(const Tensor& q, const Tensor& g_q) {
    const int64_t K = q.dim(0), B = q.dim(1), R = q.dim(2), A = q.dim(3);
    Tensor g_logits(q.shape);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t a = 0; a < A; ++a) {
                double dot = 0.0;
                for (int64_t r = 0; r < R; ++r) dot += g_q.at4(k, b, r, a) * q.at4(k, b, r, a);
                for (int64_t r = 0; r < R; ++r)
                    g_logits.at4(k, b, r, a) = q.at4(k, b, r, a) * (g_q.at4(k, b, r, a) - dot);
            }
    return g_logits;
}

// ---------------------------------------------------------------------------

Network::Network(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    const int L = cfg_.levels;
    const bool hybrid = cfg_.mode == ModelConfig::Mode::Hybrid2d3d;
    const int64_t enc_kd = hybrid ? 1 : 3;

    enc_blocks_.resize(static_cast<size_t>(L));
    pools_.resize(static_cast<size_t>(L - 1));
    for (int l = 0; l < L; ++l) {
        const int64_t ci = l == 0 ? 1 : cfg_.channels_at(l - 1);
        enc_blocks_[static_cast<size_t>(l)].init("enc" + std::to_string(l), ci,
                                                 cfg_.channels_at(l), enc_kd, hybrid, rng);
    }

    auto init_decoder = [&](Decoder& dec, const std::string& name) {
        dec.ups.resize(static_cast<size_t>(L - 1));
        dec.blocks.resize(static_cast<size_t>(L - 1));
        dec.split_channels.resize(static_cast<size_t>(L - 1));
        for (int j = 0; j < L - 1; ++j) {
            const int level = L - 2 - j;
            const int64_t cu = cfg_.channels_at(level + 1);
            const int64_t cs = cfg_.channels_at(level);
            dec.split_channels[static_cast<size_t>(j)] = cu;
            dec.blocks[static_cast<size_t>(j)].init(name + std::to_string(j), cu + cs, cs, 3,
                                                    false, rng);
        }
    };
    init_decoder(align_dec_, "align_dec");
    init_decoder(seg_dec_, "seg_dec");

    const int64_t c0 = cfg_.channels_at(0);
    align_w_.name = "align_head.w";
    align_w_.value = Tensor({c0});
    align_w_.grad = Tensor({c0});
    for (auto& x : align_w_.value.v) x = 0.01 * rng.gaussian();
    align_b_.name = "align_head.b";
    align_b_.value = Tensor({1});
    align_b_.grad = Tensor({1});

    surf_head_.init("surf_head", c0, cfg_.surfaces, 1, 1, 1, rng);
    sem_head_.init("sem_head", c0, cfg_.surfaces + 1, 1, 1, 1, rng);
}

void Network::check_patch(const Tensor& patch) const {
    if (patch.rank() != 4 || patch.dim(0) != 1)
        throw std::invalid_argument("forward: patch must have shape (1, bscans, rows, cols)");
    const int64_t div = int64_t(1) << (cfg_.levels - 1);
    if (patch.dim(2) % div || patch.dim(3) % div)
        throw std::invalid_argument("forward: rows and cols must be divisible by 2^(levels-1) = " +
                                    std::to_string(div));
}

void Network::encoder_forward(const Tensor& patch, bool cache, std::vector<Tensor>& feats) {
    const int L = cfg_.levels;
    feats.resize(static_cast<size_t>(L));
    Tensor x = patch;
    for (int l = 0; l < L; ++l) {
        feats[static_cast<size_t>(l)] = enc_blocks_[static_cast<size_t>(l)].forward(x, cache);
        if (l < L - 1) x = pools_[static_cast<size_t>(l)].forward(feats[static_cast<size_t>(l)]);
    }
}

FeaturePyramid Network::encode(const Tensor& patch) {
    check_patch(patch);
    FeaturePyramid p;
    encoder_forward(patch, false, p.levels);
    return p;
}

Tensor Network::Decoder::forward(const Tensor& bottleneck, const std::vector<Tensor>& skips,
                                 bool cache) {
    Tensor t = bottleneck;
    const int stages = static_cast<int>(blocks.size());
    for (int j = 0; j < stages; ++j) {
        const int level = stages - 1 - j;
        Tensor u = ups[static_cast<size_t>(j)].forward(t);
        const Tensor& s = skips[static_cast<size_t>(level)];
        Tensor cat({u.dim(0) + s.dim(0), u.dim(1), u.dim(2), u.dim(3)});
        std::memcpy(cat.data(), u.data(), sizeof(double) * static_cast<size_t>(u.numel()));
        std::memcpy(cat.data() + u.numel(), s.data(),
                    sizeof(double) * static_cast<size_t>(s.numel()));
        t = blocks[static_cast<size_t>(j)].forward(cat, cache);
    }
    return t;
}

Tensor Network::Decoder::backward(const Tensor& g_finest, std::vector<Tensor>& g_skips) {
    const int stages = static_cast<int>(blocks.size());
    g_skips.assign(static_cast<size_t>(stages), Tensor());
    Tensor g = g_finest;
    for (int j = stages - 1; j >= 0; --j) {
        const int level = stages - 1 - j;
        Tensor g_cat = blocks[static_cast<size_t>(j)].backward(g);
        const int64_t cu = split_channels[static_cast<size_t>(j)];
        const int64_t spatial = g_cat.dim(1) * g_cat.dim(2) * g_cat.dim(3);
        Tensor g_u({cu, g_cat.dim(1), g_cat.dim(2), g_cat.dim(3)});
        Tensor g_s({g_cat.dim(0) - cu, g_cat.dim(1), g_cat.dim(2), g_cat.dim(3)});
        std::memcpy(g_u.data(), g_cat.data(), sizeof(double) * static_cast<size_t>(cu * spatial));
        std::memcpy(g_s.data(), g_cat.data() + cu * spatial,
                    sizeof(double) * static_cast<size_t>((g_cat.dim(0) - cu) * spatial));
        g_skips[static_cast<size_t>(level)] = std::move(g_s);
        g = ups[static_cast<size_t>(j)].backward(g_u);
    }
    return g;
}

ForwardResult Network::forward(const Tensor& patch, const ForwardOptions& opt) {
    check_patch(patch);
    const int L = cfg_.levels;
    const int64_t B = patch.dim(1), rows = patch.dim(2), cols = patch.dim(3);
    const int64_t K = cfg_.surfaces;

    ctx_ = Ctx();
    ctx_.rows = rows;
    ctx_.cols = cols;
    ctx_.bscans = B;

    encoder_forward(patch, opt.cache, ctx_.enc_feats);
    const std::vector<Tensor>& e = ctx_.enc_feats;

    // displacement
    std::vector<double> d(static_cast<size_t>(B), 0.0);
    ctx_.align_branch = opt.d_source == DispSource::FromNetwork;
    if (ctx_.align_branch) {
        std::vector<Tensor> skips(e.begin(), e.end() - 1);
        ctx_.align_finest = align_dec_.forward(e.back(), skips, opt.cache);
        const Tensor& f = ctx_.align_finest;
        const int64_t c0 = f.dim(0);
        const double inv_hw = 1.0 / static_cast<double>(f.dim(2) * f.dim(3));
        Tensor pooled({c0, B});
        for (int64_t c = 0; c < c0; ++c)
            for (int64_t b = 0; b < B; ++b) {
                const double* base = f.data() + (c * B + b) * f.dim(2) * f.dim(3);
                double s = 0.0;
                for (int64_t i = 0; i < f.dim(2) * f.dim(3); ++i) s += base[i];
                pooled.at2(c, b) = s * inv_hw;
            }
        ctx_.align_pooled = pooled;
        double mean = 0.0;
        for (int64_t b = 0; b < B; ++b) {
            double s = align_b_.value[0];
            for (int64_t c = 0; c < c0; ++c) s += align_w_.value[c] * pooled.at2(c, b);
            d[static_cast<size_t>(b)] = s;
            mean += s;
        }
        mean /= static_cast<double>(B);
        for (auto& x : d) x -= mean;
    } else if (opt.d_source == DispSource::Fixed) {
        if (!opt.fixed_d || opt.fixed_d->size() != B)
            throw std::invalid_argument("forward: fixed displacement missing or wrong size");
        d = opt.fixed_d->d;
    }
    ctx_.d = d;

    const bool hybrid = cfg_.mode == ModelConfig::Mode::Hybrid2d3d;
    ctx_.stm_active = hybrid && opt.d_source != DispSource::Zero;

    // segmentation branch over (possibly warped) features
    std::vector<Tensor> seg_in(static_cast<size_t>(L));
    if (ctx_.stm_active) {
        ctx_.warped.resize(static_cast<size_t>(L));
        for (int l = 0; l < L; ++l) {
            const double scale = 1.0 / static_cast<double>(int64_t(1) << l);
            std::vector<double> shifts(d.size());
            for (size_t i = 0; i < d.size(); ++i) shifts[i] = d[i] * scale;
            Tensor w(e[static_cast<size_t>(l)].shape);
            kernels::warp_rows_forward(e[static_cast<size_t>(l)], shifts, w);
            seg_in[static_cast<size_t>(l)] = w;
            if (opt.cache) ctx_.warped[static_cast<size_t>(l)] = seg_in[static_cast<size_t>(l)];
        }
    } else {
        for (int l = 0; l < L; ++l) seg_in[static_cast<size_t>(l)] = e[static_cast<size_t>(l)];
    }
    std::vector<Tensor> seg_skips(seg_in.begin(), seg_in.end() - 1);
    ctx_.seg_finest = seg_dec_.forward(seg_in.back(), seg_skips, opt.cache);

    ForwardResult res;
    res.out.displacement = DisplacementVector(d);
    res.out.surface_logits = surf_head_.forward(ctx_.seg_finest, opt.cache);
    res.out.semantic_logits = sem_head_.forward(ctx_.seg_finest, opt.cache);
    res.q = softmax_over_rows(res.out.surface_logits);
    SurfaceSet raw = soft_argmax_tensor(res.q);
    res.pred_aligned = topology_guarantee(raw);
    res.pred_aligned.names.assign(static_cast<size_t>(K), "");
    res.stm_active = ctx_.stm_active;
    if (ctx_.stm_active) {
        res.pred_volume = apply_displacement_to_surfaces(res.pred_aligned,
                                                         negated(res.out.displacement));
    } else {
        res.pred_volume = res.pred_aligned;
    }

    if (opt.cache) {
        ctx_.q = res.q;
        ctx_.raw_positions = Tensor({K, B, cols});
        for (int64_t k = 0; k < K; ++k)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t a = 0; a < cols; ++a)
                    ctx_.raw_positions.at3(k, b, a) = raw.at(k, b, a);
        ctx_.valid = true;
    }
    return res;
}

void Network::backward(const OutputGrads& g) {
    if (!ctx_.valid) throw std::logic_error("backward: no cached forward pass");
    const int L = cfg_.levels;
    const int64_t K = cfg_.surfaces, B = ctx_.bscans, rows = ctx_.rows, cols = ctx_.cols;

    Tensor g_seg_finest(ctx_.seg_finest.shape);

    const bool has_q = g.g_q.numel() > 0;
    const bool has_pred = g.g_pred_aligned.numel() > 0;
    if (has_q || has_pred) {
        Tensor g_q_total = has_q ? g.g_q : Tensor({K, B, rows, cols});
        if (has_pred) {
            const Tensor g_raw = topology_backward(ctx_.raw_positions, g.g_pred_aligned);
            soft_argmax_backward_accumulate(g_raw, g_q_total);
        }
        const Tensor g_logits = softmax_over_rows_backward(ctx_.q, g_q_total);
        Tensor gi = surf_head_.backward(g_logits);
        for (int64_t i = 0; i < g_seg_finest.numel(); ++i) g_seg_finest[i] += gi[i];
    }
    if (g.g_semantic_logits.numel() > 0) {
        Tensor gi = sem_head_.backward(g.g_semantic_logits);
        for (int64_t i = 0; i < g_seg_finest.numel(); ++i) g_seg_finest[i] += gi[i];
    }

    std::vector<Tensor> g_skips;
    Tensor g_bottleneck = seg_dec_.backward(g_seg_finest, g_skips);

    // gradients w.r.t. encoder features and the displacement
    std::vector<Tensor> g_e(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) g_e[static_cast<size_t>(l)] = Tensor(ctx_.enc_feats[static_cast<size_t>(l)].shape);
    std::vector<double> g_d(static_cast<size_t>(B), 0.0);
    if (!g.g_d.empty()) {
        if (g.g_d.size() != static_cast<size_t>(B))
            throw std::invalid_argument("backward: g_d size mismatch");
        g_d = g.g_d;
    }

    for (int l = 0; l < L; ++l) {
        const Tensor& g_out_l = l < L - 1 ? g_skips[static_cast<size_t>(l)] : g_bottleneck;
        if (ctx_.stm_active) {
            const StmGrads sg = stm_backward(g_out_l, ctx_.enc_feats[static_cast<size_t>(l)],
                                             DisplacementVector(ctx_.d), l);
            for (int64_t i = 0; i < sg.g_features.numel(); ++i)
                g_e[static_cast<size_t>(l)][i] += sg.g_features[i];
            for (int64_t b = 0; b < B; ++b)
                g_d[static_cast<size_t>(b)] += sg.g_d[static_cast<size_t>(b)];
        } else {
            for (int64_t i = 0; i < g_out_l.numel(); ++i)
                g_e[static_cast<size_t>(l)][i] += g_out_l[i];
        }
    }

    if (ctx_.align_branch) {
        // mean-subtraction projection
        double gm = 0.0;
        for (double x : g_d) gm += x;
        gm /= static_cast<double>(B);
        std::vector<double> g_d0(g_d.size());
        for (size_t i = 0; i < g_d.size(); ++i) g_d0[i] = g_d[i] - gm;

        const Tensor& f = ctx_.align_finest;
        const int64_t c0 = f.dim(0), fh = f.dim(2), fw = f.dim(3);
        const double inv_hw = 1.0 / static_cast<double>(fh * fw);
        Tensor g_f(f.shape);
        for (int64_t c = 0; c < c0; ++c) {
            double gw_acc = 0.0;
            for (int64_t b = 0; b < B; ++b) {
                const double gd = g_d0[static_cast<size_t>(b)];
                gw_acc += gd * ctx_.align_pooled.at2(c, b);
                const double gpix = gd * align_w_.value[c] * inv_hw;
                double* base = g_f.data() + (c * B + b) * fh * fw;
                for (int64_t i = 0; i < fh * fw; ++i) base[i] = gpix;
            }
            align_w_.grad[c] += gw_acc;
        }
        double gb_acc = 0.0;
        for (double x : g_d0) gb_acc += x;
        align_b_.grad[0] += gb_acc;

        std::vector<Tensor> g_skips_a;
        Tensor g_bott_a = align_dec_.backward(g_f, g_skips_a);
        for (int l = 0; l < L - 1; ++l)
            for (int64_t i = 0; i < g_skips_a[static_cast<size_t>(l)].numel(); ++i)
                g_e[static_cast<size_t>(l)][i] += g_skips_a[static_cast<size_t>(l)][i];
        for (int64_t i = 0; i < g_bott_a.numel(); ++i)
            g_e[static_cast<size_t>(L - 1)][i] += g_bott_a[i];
    }

    // encoder backward through blocks and pools
    Tensor gcur = g_e[static_cast<size_t>(L - 1)];
    for (int l = L - 1; l >= 1; --l) {
        Tensor g_block_in = enc_blocks_[static_cast<size_t>(l)].backward(gcur);
        Tensor g_pool_in = pools_[static_cast<size_t>(l - 1)].backward(g_block_in);
        gcur = g_e[static_cast<size_t>(l - 1)];
        for (int64_t i = 0; i < gcur.numel(); ++i) gcur[i] += g_pool_in[i];
    }
    enc_blocks_[0].backward(gcur);

    ctx_.valid = false;
}

std::vector<layers::Param*> Network::params() {
    std::vector<layers::Param*> out;
    for (auto& b : enc_blocks_) b.collect(out);
    for (auto& b : align_dec_.blocks) b.collect(out);
    for (auto& b : seg_dec_.blocks) b.collect(out);
    out.push_back(&align_w_);
    out.push_back(&align_b_);
    surf_head_.collect(out);
    sem_head_.collect(out);
    return out;
}

void Network::zero_grad() {
    for (auto* p : params()) p->zero_grad();
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, Network& net, const std::string& extra_json) {
    const std::filesystem::path tmp = dir.string() + ".tmp";
    std::filesystem::remove_all(tmp);
    std::filesystem::create_directories(tmp);

    json cfg;
    cfg["format"] = "OCTSEGCKPT1";
    cfg["model"] = json::parse(net.config().to_json());
    if (!extra_json.empty()) cfg["extra"] = json::parse(extra_json);
    io::write_text_file(tmp / "config.json", cfg.dump(2) + "\n");

    json index = json::array();
    std::ofstream bin(tmp / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write checkpoint payload");
    int64_t offset = 0;
    for (auto* p : net.params()) {
        json e;
        e["name"] = p->name;
        e["shape"] = p->value.shape;
        e["offset"] = offset;
        index.push_back(e);
        bin.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(sizeof(double) * p->value.v.size()));
        offset += p->value.numel();
    }
    bin.close();
    io::write_text_file(tmp / "weights.json", index.dump(2) + "\n");

    std::filesystem::remove_all(dir);
    std::filesystem::rename(tmp, dir);
}

Network load_checkpoint(const std::filesystem::path& dir) {
    const json cfg = json::parse(io::read_text_file(dir / "config.json"));
    if (cfg.value("format", "") != "OCTSEGCKPT1")
        throw std::runtime_error("not a checkpoint directory: " + dir.string());
    const ModelConfig mc = ModelConfig::from_json(cfg.at("model").dump());
    Network net(mc, 0);

    const json index = json::parse(io::read_text_file(dir / "weights.json"));
    std::ifstream bin(dir / "weights.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot read checkpoint payload");

    auto params = net.params();
    size_t next = 0;
    for (const auto& e : index) {
        const std::string name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<std::vector<int64_t>>();
        if (next >= params.size() || params[next]->name != name)
            throw std::runtime_error("checkpoint/config mismatch at parameter '" + name + "'");
        if (params[next]->value.shape != shape)
            throw std::runtime_error("checkpoint shape mismatch for parameter '" + name + "'");
        bin.seekg(static_cast<std::streamoff>(sizeof(double) * e.at("offset").get<int64_t>()));
        bin.read(reinterpret_cast<char*>(params[next]->value.data()),
                 static_cast<std::streamsize>(sizeof(double) * params[next]->value.v.size()));
        if (!bin) throw std::runtime_error("checkpoint payload truncated at '" + name + "'");
        ++next;
    }
    if (next != params.size())
        throw std::runtime_error("checkpoint is missing parameters (config mismatch?)");
    return net;
}

std::string checkpoint_extra(const std::filesystem::path& dir) {
    const json cfg = json::parse(io::read_text_file(dir / "config.json"));
    return cfg.contains("extra") ? cfg.at("extra").dump() : "";
}

} // namespace octseg::model
