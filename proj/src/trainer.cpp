#include "octseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "json.hpp"

#include "octseg/io.hpp"
#include "octseg/rng.hpp"

namespace octseg::train {

using nlohmann::json;

std::string run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::Full: return "full";
        case RunMode::NoAlign: return "no_align";
        case RunMode::PreAlign: return "pre_align";
        case RunMode::NoSmooth: return "no_smooth";
        case RunMode::Full3d: return "full-3d";
    }
    return "full";
}

RunMode run_mode_from_name(const std::string& s) {
    if (s == "full") return RunMode::Full;
    if (s == "no_align") return RunMode::NoAlign;
    if (s == "pre_align") return RunMode::PreAlign;
    if (s == "no_smooth") return RunMode::NoSmooth;
    if (s == "full-3d" || s == "full_3d") return RunMode::Full3d;
    throw std::invalid_argument("unknown run mode '" + s + "'");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs >= 1 required");
    if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: learning_rate > 0 required");
    if (plateau_patience < 1) throw std::invalid_argument("TrainConfig: plateau_patience >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size >= 1 required");
    if (patch.rows < 4 || patch.cols_a < 4 || patch.bscans < 2)
        throw std::invalid_argument("TrainConfig: degenerate patch shape");
    if (ncc_window < 1 || ncc_window % 2 == 0)
        throw std::invalid_argument("TrainConfig: ncc_window must be odd");
    if (mode == RunMode::PreAlign && pre_align_file.empty())
        throw std::invalid_argument("TrainConfig: pre_align mode requires pre_align_file");
    if (monitor != "total")
        throw std::invalid_argument("TrainConfig: unsupported monitor '" + monitor + "'");
    model.validate();
    losses::LossWeights w{lambda, reduction};
    w.validate(model.surfaces);
}

std::string TrainConfig::to_json() const {
    json j;
    j["epochs"] = epochs;
    j["learning_rate"] = learning_rate;
    j["plateau_patience"] = plateau_patience;
    j["batch_size"] = batch_size;
    j["patch_shape"] = {patch.rows, patch.cols_a, patch.bscans};
    j["lambda"] = lambda;
    j["mode"] = run_mode_name(mode);
    if (!pre_align_file.empty()) j["pre_align_file"] = pre_align_file;
    j["seed"] = seed;
    j["reduction"] = reduction == losses::Reduction::Mean ? "mean" : "sum";
    j["ncc_window"] = ncc_window;
    j["model"] = json::parse(model.to_json());
    j["adam"] = {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
    j["monitor"] = monitor;
    j["deterministic"] = deterministic;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    TrainConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const json& v = it.value();
        if (k == "epochs")
            c.epochs = v.get<int>();
        else if (k == "learning_rate")
            c.learning_rate = v.get<double>();
        else if (k == "plateau_patience")
            c.plateau_patience = v.get<int>();
        else if (k == "batch_size")
            c.batch_size = v.get<int>();
        else if (k == "patch_shape") {
            c.patch.rows = v.at(0).get<int64_t>();
            c.patch.cols_a = v.at(1).get<int64_t>();
            c.patch.bscans = v.at(2).get<int64_t>();
        } else if (k == "lambda")
            c.lambda = v.get<std::vector<double>>();
        else if (k == "mode")
            c.mode = run_mode_from_name(v.get<std::string>());
        else if (k == "pre_align_file")
            c.pre_align_file = v.get<std::string>();
        else if (k == "seed")
            c.seed = v.get<uint64_t>();
        else if (k == "reduction") {
            const std::string r = v.get<std::string>();
            if (r == "mean")
                c.reduction = losses::Reduction::Mean;
            else if (r == "sum")
                c.reduction = losses::Reduction::Sum;
            else
                throw std::invalid_argument("TrainConfig: unknown reduction '" + r + "'");
        } else if (k == "ncc_window")
            c.ncc_window = v.get<int>();
        else if (k == "model")
            c.model = model::ModelConfig::from_json(v.dump());
        else if (k == "adam") {
            for (auto ai = v.begin(); ai != v.end(); ++ai) {
                if (ai.key() == "beta1")
                    c.adam.beta1 = ai.value().get<double>();
                else if (ai.key() == "beta2")
                    c.adam.beta2 = ai.value().get<double>();
                else if (ai.key() == "eps")
                    c.adam.eps = ai.value().get<double>();
                else
                    throw std::invalid_argument("TrainConfig: unknown key 'adam." + ai.key() + "'");
            }
        } else if (k == "monitor")
            c.monitor = v.get<std::string>();
        else if (k == "deterministic")
            c.deterministic = v.get<bool>();
        else
            throw std::invalid_argument("TrainConfig: unknown key '" + k + "'");
    }
    return c;
}

void PlateauScheduler::observe(double monitored) {
    if (monitored < best_) {
        best_ = monitored;
        stale_ = 0;
        return;
    }
    if (++stale_ >= patience_) {
        lr_ *= 0.5;
        stale_ = 0;
    }
}

AdamOptimizer::AdamOptimizer(std::vector<layers::Param*> params, double lr, AdamConfig cfg)
    : params_(std::move(params)), lr_(lr), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
        m_.emplace_back(p->value.shape);
        v_.emplace_back(p->value.shape);
    }
}

void AdamOptimizer::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        layers::Param* p = params_[i];
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (int64_t j = 0; j < p->value.numel(); ++j) {
            const double g = p->grad[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            p->value[j] -= lr_ * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
}

std::vector<DatasetCase> load_dataset(const std::filesystem::path& manifest_path,
                                      const std::string& split) {
    const json m = json::parse(io::read_text_file(manifest_path));
    if (m.value("format", "") != "SYNMAN1")
        throw std::runtime_error("not a dataset manifest: " + manifest_path.string());
    const auto dir = manifest_path.parent_path();
    std::vector<DatasetCase> out;
    for (const auto& rec : m.at("samples")) {
        if (!split.empty() && rec.at("split").get<std::string>() != split) continue;
        DatasetCase c;
        c.id = rec.at("id").get<std::string>();
        c.tag = rec.value("tag", "");
        c.split = rec.at("split").get<std::string>();
        c.volume = io::read_octv(dir / rec.at("volume").get<std::string>());
        c.truth = io::read_surf(dir / rec.at("surfaces").get<std::string>());
        if (rec.contains("injected_d"))
            c.injected = DisplacementVector(rec.at("injected_d").get<std::vector<double>>());
        out.push_back(std::move(c));
    }
    return out;
}

namespace {

struct SampleLoss {
    losses::TotalLossParts parts;
    bool align_trained = false;
};

model::ForwardOptions options_for(RunMode mode, const DisplacementVector* fixed_d, bool cache) {
    model::ForwardOptions opt;
    opt.cache = cache;
    switch (mode) {
        case RunMode::Full:
        case RunMode::NoSmooth:
        case RunMode::Full3d:
            opt.d_source = model::DispSource::FromNetwork;
            break;
        case RunMode::NoAlign:
            opt.d_source = model::DispSource::Zero;
            break;
        case RunMode::PreAlign:
            opt.d_source = model::DispSource::Fixed;
            opt.fixed_d = fixed_d;
            break;
    }
    return opt;
}

// Shared by training steps and loss evaluation: run the losses in the frames
// the forward pass produced and optionally push gradients back.
SampleLoss sample_loss(model::Network& net, const preprocess::Patch& patch,
                       const TrainConfig& cfg, const std::vector<double>& lambda,
                       const DisplacementVector* fixed_d, bool do_backward) {
    const auto opt = options_for(cfg.mode, fixed_d, do_backward);
    model::ForwardResult res = net.forward(patch.image, opt);
    const int64_t rows = patch.image.dim(2);

    // Targets move into the frame the predictions live in; the displacement
    // is treated as a constant here (its training signal comes from the
    // alignment terms and from backprop through the feature warps).
    SurfaceSet truth_seg = res.stm_active
                               ? apply_displacement_to_surfaces(patch.truth, res.out.displacement)
                               : patch.truth;
    SurfaceMask seg_mask = patch.mask;
    for (int64_t k = 0; k < truth_seg.n_surfaces; ++k)
        for (int64_t b = 0; b < truth_seg.n_b; ++b)
            for (int64_t a = 0; a < truth_seg.n_a; ++a) {
                double& p = truth_seg.at(k, b, a);
                if (p < 1.0 || p > static_cast<double>(rows)) {
                    seg_mask.at(k, b, a) = 0;
                    p = std::clamp(p, 1.0, static_cast<double>(rows));
                }
            }
    const LabelMap labels = surfaces_to_labelmap(truth_seg, rows);

    const losses::LossWeights weights{lambda, cfg.reduction};
    const bool align_trained = opt.d_source == model::DispSource::FromNetwork;

    SampleLoss out;
    out.align_trained = align_trained;
    Tensor g_q, g_pred, g_sem;
    std::vector<double> g_d;
    out.parts = losses::total_loss(
        patch.image, res.out.displacement, patch.truth, cfg.ncc_window, res.q, res.pred_aligned,
        res.out.semantic_logits, truth_seg, labels, seg_mask, weights,
        do_backward && align_trained ? &g_d : nullptr, do_backward ? &g_q : nullptr,
        do_backward ? &g_pred : nullptr, do_backward ? &g_sem : nullptr);
    if (!align_trained) out.parts.total = out.parts.seg.total;

    if (do_backward) {
        model::OutputGrads og;
        og.g_q = std::move(g_q);
        og.g_pred_aligned = std::move(g_pred);
        og.g_semantic_logits = std::move(g_sem);
        if (align_trained) og.g_d = std::move(g_d);
        net.backward(og);
    }
    return out;
}

void accumulate(losses::TotalLossParts& acc, const losses::TotalLossParts& x) {
    acc.ncc += x.ncc;
    acc.smooth_align += x.smooth_align;
    acc.align += x.align;
    acc.seg.dice_ce += x.seg.dice_ce;
    acc.seg.ce += x.seg.ce;
    acc.seg.l1 += x.seg.l1;
    acc.seg.smooth += x.seg.smooth;
    acc.seg.total += x.seg.total;
    acc.total += x.total;
}

void scale(losses::TotalLossParts& acc, double s) {
    acc.ncc *= s;
    acc.smooth_align *= s;
    acc.align *= s;
    acc.seg.dice_ce *= s;
    acc.seg.ce *= s;
    acc.seg.l1 *= s;
    acc.seg.smooth *= s;
    acc.seg.total *= s;
    acc.total *= s;
}

std::map<std::string, DisplacementVector> load_pre_align(const std::filesystem::path& p) {
    const json j = json::parse(io::read_text_file(p));
    std::map<std::string, DisplacementVector> out;
    for (auto it = j.begin(); it != j.end(); ++it)
        out[it.key()] = DisplacementVector(it.value().get<std::vector<double>>());
    return out;
}

} // namespace

std::string log_csv_header() {
    return "epoch,lr,total,ncc,smooth_align,align,dice_ce,ce,l1,smooth_s,seg,wall_s";
}

std::string log_csv_row(const EpochLog& e) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f", e.epoch,
                  e.lr, e.mean.total, e.mean.ncc, e.mean.smooth_align, e.mean.align,
                  e.mean.seg.dice_ce, e.mean.seg.ce, e.mean.seg.l1, e.mean.seg.smooth,
                  e.mean.seg.total, e.wall_s);
    return buf;
}

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& manifest_path,
                  const std::filesystem::path& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    TrainConfig eff = cfg;
    if (cfg.mode == RunMode::Full3d) eff.model.mode = model::ModelConfig::Mode::Full3d;
    std::vector<double> lambda = eff.lambda;
    if (cfg.mode == RunMode::NoSmooth) std::fill(lambda.begin(), lambda.end(), 0.0);

    auto cases = load_dataset(manifest_path, "train");
    if (cases.empty()) throw std::runtime_error("train: no training cases in manifest");
    for (const auto& c : cases) {
        if (c.truth.n_surfaces != eff.model.surfaces)
            throw std::runtime_error("train: model.surfaces does not match dataset (case " + c.id + ")");
        if (eff.patch.bscans > c.volume.n_b || eff.patch.rows > c.volume.n_r ||
            eff.patch.cols_a > c.volume.n_a)
            throw std::runtime_error("train: patch larger than volume (case " + c.id + ")");
    }

    std::map<std::string, DisplacementVector> pre_align;
    if (cfg.mode == RunMode::PreAlign) pre_align = load_pre_align(cfg.pre_align_file);

    model::Network net(eff.model, eff.seed);
    AdamOptimizer adam(net.params(), eff.learning_rate, eff.adam);
    PlateauScheduler sched(eff.learning_rate, eff.plateau_patience);

    std::vector<preprocess::PatchSampler> samplers;
    samplers.reserve(cases.size());
    for (size_t i = 0; i < cases.size(); ++i)
        samplers.emplace_back(cases[i].volume, cases[i].truth, eff.patch,
                              eff.seed * 7919 + i + 1);

    TrainResult result;
    result.best_monitored = std::numeric_limits<double>::infinity();
    result.log_csv = out_dir / "log.csv";
    const auto best_dir = out_dir / "checkpoints" / "best";
    const auto last_dir = out_dir / "checkpoints" / "last";

    const auto params = net.params();
    Rng order_rng(eff.seed ^ 0xabcdef1234567890ull);

    for (int epoch = 1; epoch <= eff.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        adam.set_lr(sched.lr());

        std::vector<size_t> order(cases.size());
        std::iota(order.begin(), order.end(), size_t{0});
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(order_rng.uniform_int(
                                        0, static_cast<int64_t>(i) - 1))]);

        losses::TotalLossParts epoch_acc{};
        int64_t samples_done = 0;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(eff.batch_size)) {
            const size_t stop = std::min(order.size(), start + static_cast<size_t>(eff.batch_size));
            net.zero_grad();
            for (size_t i = start; i < stop; ++i) {
                const auto& c = cases[order[i]];
                preprocess::Patch patch = samplers[order[i]].random_patch();
                DisplacementVector fixed_d;
                if (cfg.mode == RunMode::PreAlign) {
                    auto it = pre_align.find(c.id);
                    if (it == pre_align.end())
                        throw std::runtime_error("train: no pre-alignment for case " + c.id);
                    fixed_d = DisplacementVector(std::vector<double>(
                        it->second.d.begin() + patch.b0,
                        it->second.d.begin() + patch.b0 + eff.patch.bscans));
                }
                SampleLoss sl = sample_loss(net, patch, eff, lambda,
                                            cfg.mode == RunMode::PreAlign ? &fixed_d : nullptr,
                                            true);
                if (!std::isfinite(sl.parts.total)) {
                    json dump;
                    dump["epoch"] = epoch;
                    dump["case"] = c.id;
                    dump["patch_offset"] = {patch.r0, patch.a0, patch.b0};
                    dump["ncc"] = sl.parts.ncc;
                    dump["smooth_align"] = sl.parts.smooth_align;
                    dump["dice_ce"] = sl.parts.seg.dice_ce;
                    dump["ce"] = sl.parts.seg.ce;
                    dump["l1"] = sl.parts.seg.l1;
                    dump["smooth_s"] = sl.parts.seg.smooth;
                    io::write_text_file(out_dir / "diagnostics.json", dump.dump(2) + "\n");
                    throw TrainAborted("non-finite loss in epoch " + std::to_string(epoch) +
                                       ", case " + c.id + "; diagnostics written to " +
                                       (out_dir / "diagnostics.json").string());
                }
                accumulate(epoch_acc, sl.parts);
                ++samples_done;
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            for (auto* p : params)
                for (int64_t j = 0; j < p->grad.numel(); ++j) p->grad[j] *= inv;
            adam.step();
        }

        scale(epoch_acc, 1.0 / static_cast<double>(samples_done));
        const auto t1 = std::chrono::steady_clock::now();

        EpochLog row;
        row.epoch = epoch;
        row.lr = sched.lr();
        row.mean = epoch_acc;
        row.wall_s = std::chrono::duration<double>(t1 - t0).count();
        result.log.push_back(row);

        std::string csv = log_csv_header() + "\n";
        for (const auto& e : result.log) csv += log_csv_row(e) + "\n";
        io::write_text_file(result.log_csv, csv);

        json extra;
        extra["epoch"] = epoch;
        extra["monitored"] = epoch_acc.total;
        extra["train_config"] = json::parse(eff.to_json());
        if (epoch_acc.total < result.best_monitored) {
            result.best_monitored = epoch_acc.total;
            model::save_checkpoint(best_dir, net, extra.dump());
        }
        model::save_checkpoint(last_dir, net, extra.dump());

        sched.observe(epoch_acc.total);
    }

    result.best_checkpoint = best_dir;
    result.last_checkpoint = last_dir;
    return result;
}

Prediction predict_volume(model::Network& net, const OctVolume& v,
                          const preprocess::PatchShape& patch_in, RunMode mode,
                          const DisplacementVector* pre_d) {
    preprocess::PatchShape patch = patch_in;
    if (patch.bscans != v.n_b)
        throw std::invalid_argument(
            "predict_volume: all B-scans must fit in one patch (patch bscans != volume n_b)");
    const int64_t K = net.config().surfaces;

    SurfaceSet dummy(K, v.n_b, v.n_a);
    for (auto& p : dummy.positions) p = 1.0;
    preprocess::PatchSampler sampler(v, dummy, patch, 0);

    SurfaceSet acc_aligned(K, v.n_b, v.n_a), acc_volume(K, v.n_b, v.n_a);
    std::vector<double> weight(static_cast<size_t>(v.n_b * v.n_a), 0.0);
    std::vector<double> d_acc(static_cast<size_t>(v.n_b), 0.0);
    int64_t d_tiles = 0;

    for (const auto& off : sampler.tiling_offsets()) {
        preprocess::Patch p = sampler.at_offset(off[0], off[1], off[2]);
        const auto opt = options_for(mode, pre_d, false);
        model::ForwardResult res = net.forward(p.image, opt);
        for (int64_t b = 0; b < v.n_b; ++b)
            d_acc[static_cast<size_t>(b)] += res.out.displacement.d[static_cast<size_t>(b)];
        ++d_tiles;
        const double r0 = static_cast<double>(off[0]);
        for (int64_t k = 0; k < K; ++k)
            for (int64_t b = 0; b < v.n_b; ++b)
                for (int64_t a = 0; a < patch.cols_a; ++a) {
                    acc_aligned.at(k, b, off[1] + a) += res.pred_aligned.at(k, b, a) + r0;
                    acc_volume.at(k, b, off[1] + a) += res.pred_volume.at(k, b, a) + r0;
                    if (k == 0)
                        weight[static_cast<size_t>(b * v.n_a + off[1] + a)] += 1.0;
                }
    }

    Prediction out;
    out.pred_aligned = SurfaceSet(K, v.n_b, v.n_a);
    out.pred_volume = SurfaceSet(K, v.n_b, v.n_a);
    for (int64_t k = 0; k < K; ++k)
        for (int64_t b = 0; b < v.n_b; ++b)
            for (int64_t a = 0; a < v.n_a; ++a) {
                const double w = weight[static_cast<size_t>(b * v.n_a + a)];
                out.pred_aligned.at(k, b, a) = acc_aligned.at(k, b, a) / w;
                out.pred_volume.at(k, b, a) = acc_volume.at(k, b, a) / w;
            }
    out.displacement = DisplacementVector(v.n_b);
    for (int64_t b = 0; b < v.n_b; ++b)
        out.displacement.d[static_cast<size_t>(b)] = d_acc[static_cast<size_t>(b)] / d_tiles;
    return out;
}

} // namespace octseg::train
