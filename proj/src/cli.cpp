#include "octseg/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include "octseg/eval.hpp"
#include "octseg/io.hpp"
#include "octseg/model.hpp"
#include "octseg/preprocess.hpp"
#include "octseg/synth.hpp"
#include "octseg/trainer.hpp"

namespace octseg::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json parse_override_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return json(text); // plain string
    }
}

// dotted-key overrides applied onto a config tree
void apply_overrides(json& cfg, const std::vector<std::string>& overrides) {
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("override '" + ov + "' is not of the form key=value");
        const std::string key = ov.substr(0, eq);
        const json value = parse_override_value(ov.substr(eq + 1));
        json* node = &cfg;
        size_t pos = 0;
        while (true) {
            const auto dot = key.find('.', pos);
            const std::string part = key.substr(pos, dot - pos);
            if (part.empty()) throw std::invalid_argument("override key '" + key + "' is malformed");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            pos = dot + 1;
        }
    }
}

json load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json cfg = json::parse(io::read_text_file(path));
    apply_overrides(cfg, overrides);
    return cfg;
}

void write_snapshot(const fs::path& out_dir, const json& resolved) {
    io::write_text_file(out_dir / "resolved_config.json", resolved.dump(2) + "\n");
}

struct PhantomConfig {
    synth::PhantomSpec spec;
    int64_t n_train = 2, n_test = 1;
};

PhantomConfig phantom_config_from_json(const json& j) {
    PhantomConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const json& v = it.value();
        if (k == "n_a")
            c.spec.n_a = v.get<int64_t>();
        else if (k == "n_b")
            c.spec.n_b = v.get<int64_t>();
        else if (k == "n_r")
            c.spec.n_r = v.get<int64_t>();
        else if (k == "surfaces")
            c.spec.surfaces = v.get<int64_t>();
        else if (k == "smooth_cycles_a")
            c.spec.smooth_cycles_a = v.get<double>();
        else if (k == "smooth_cycles_b")
            c.spec.smooth_cycles_b = v.get<double>();
        else if (k == "drusen_count")
            c.spec.drusen_count = v.get<int>();
        else if (k == "drusen_amp_lo")
            c.spec.drusen_amp_lo = v.get<double>();
        else if (k == "drusen_amp_hi")
            c.spec.drusen_amp_hi = v.get<double>();
        else if (k == "noise_sigma")
            c.spec.noise_sigma = v.get<double>();
        else if (k == "shift_range")
            c.spec.shift_range = v.get<double>();
        else if (k == "seed")
            c.spec.seed = v.get<uint64_t>();
        else if (k == "n_train")
            c.n_train = v.get<int64_t>();
        else if (k == "n_test")
            c.n_test = v.get<int64_t>();
        else
            throw std::invalid_argument("phantom config: unknown key '" + k + "'");
    }
    return c;
}

json phantom_config_to_json(const PhantomConfig& c) {
    json j;
    j["n_a"] = c.spec.n_a;
    j["n_b"] = c.spec.n_b;
    j["n_r"] = c.spec.n_r;
    j["surfaces"] = c.spec.surfaces;
    j["smooth_cycles_a"] = c.spec.smooth_cycles_a;
    j["smooth_cycles_b"] = c.spec.smooth_cycles_b;
    j["drusen_count"] = c.spec.drusen_count;
    j["drusen_amp_lo"] = c.spec.drusen_amp_lo;
    j["drusen_amp_hi"] = c.spec.drusen_amp_hi;
    j["noise_sigma"] = c.spec.noise_sigma;
    j["shift_range"] = c.spec.shift_range;
    j["seed"] = c.spec.seed;
    j["n_train"] = c.n_train;
    j["n_test"] = c.n_test;
    return j;
}

int cmd_synth(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
    const json cfg = load_config(config_path, overrides);
    const PhantomConfig pc = phantom_config_from_json(cfg);
    fs::create_directories(out_dir);
    write_snapshot(out_dir, phantom_config_to_json(pc));
    const auto m = synth::make_dataset(pc.spec, pc.n_train, pc.n_test, out_dir);
    std::cout << "wrote " << (pc.n_train + pc.n_test) << " cases to " << out_dir << "\n"
              << "manifest: " << m.path.string() << "\n";
    return 0;
}

int cmd_preprocess(const std::string& in_path, const std::string& out_dir, int64_t target_row,
                   double gradient_floor, const std::string& surfaces_path) {
    OctVolume v = io::read_octv(in_path);
    v = preprocess::normalize_intensity(v);
    const auto bm = preprocess::estimate_bm(v, gradient_floor);
    if (target_row <= 0) target_row = (v.n_r * 3) / 4;
    auto [flat, rec] = preprocess::flatten_volume(v, bm, target_row);
    fs::create_directories(out_dir);
    json resolved;
    resolved["in"] = in_path;
    resolved["target_row"] = target_row;
    resolved["gradient_floor"] = gradient_floor;
    if (!surfaces_path.empty()) resolved["surfaces"] = surfaces_path;
    write_snapshot(out_dir, resolved);

    const std::string stem = v.id.empty() ? "volume" : v.id;
    io::write_octv(flat, fs::path(out_dir) / (stem + ".flat.octv.json"));
    preprocess::write_flatten_record(rec, fs::path(out_dir) / (stem + ".flatten.json"));
    if (!surfaces_path.empty()) {
        SurfaceSet s = io::read_surf(surfaces_path);
        io::write_surf(preprocess::flatten_surfaces(s, rec),
                       fs::path(out_dir) / (stem + ".flat.surf.json"));
    }
    std::cout << "flattened " << stem << " to target row " << target_row << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& manifest, const std::string& out_dir) {
    const json cfg_json = load_config(config_path, overrides);
    const train::TrainConfig cfg = train::TrainConfig::from_json(cfg_json.dump());
    cfg.validate();
    fs::create_directories(out_dir);
    write_snapshot(out_dir, json::parse(cfg.to_json()));
    const auto res = train::train(cfg, manifest, out_dir);
    std::cout << "trained " << cfg.epochs << " epochs; best monitored loss " << res.best_monitored
              << "\nbest checkpoint: " << res.best_checkpoint.string()
              << "\nlog: " << res.log_csv.string() << "\n";
    return 0;
}

train::RunMode predict_mode(const fs::path& checkpoint, const std::string& mode_flag) {
    if (!mode_flag.empty()) return train::run_mode_from_name(mode_flag);
    const std::string extra = model::checkpoint_extra(checkpoint);
    if (!extra.empty()) {
        const json e = json::parse(extra);
        if (e.contains("train_config") && e["train_config"].contains("mode"))
            return train::run_mode_from_name(e["train_config"]["mode"].get<std::string>());
    }
    return train::RunMode::Full;
}

preprocess::PatchShape predict_patch_for(const OctVolume& v, const model::ModelConfig& mc) {
    const int64_t div = int64_t(1) << (mc.levels - 1);
    preprocess::PatchShape p;
    p.rows = (v.n_r / div) * div;
    p.cols_a = (v.n_a / div) * div;
    p.bscans = v.n_b;
    if (p.rows < div || p.cols_a < div)
        throw std::invalid_argument("volume too small for the checkpoint's pyramid depth");
    return p;
}

int cmd_predict(const std::string& checkpoint, const std::string& in_path,
                const std::string& manifest, const std::string& split, const std::string& out_dir,
                const std::string& mode_flag, const std::string& pre_align_file) {
    model::Network net = model::load_checkpoint(checkpoint);
    const train::RunMode mode = predict_mode(checkpoint, mode_flag);

    std::map<std::string, DisplacementVector> pre_align;
    if (mode == train::RunMode::PreAlign) {
        if (pre_align_file.empty())
            throw std::invalid_argument("predict: pre_align mode requires --pre-align-file");
        const json j = json::parse(io::read_text_file(pre_align_file));
        for (auto it = j.begin(); it != j.end(); ++it)
            pre_align[it.key()] = DisplacementVector(it.value().get<std::vector<double>>());
    }

    std::vector<std::pair<std::string, OctVolume>> volumes;
    if (!in_path.empty()) {
        OctVolume v = io::read_octv(in_path);
        volumes.emplace_back(v.id.empty() ? "volume" : v.id, std::move(v));
    } else if (!manifest.empty()) {
        for (auto& c : train::load_dataset(manifest, split))
            volumes.emplace_back(c.id, std::move(c.volume));
    } else {
        throw std::invalid_argument("predict: need --in or --manifest");
    }

    fs::create_directories(out_dir);
    json resolved;
    resolved["checkpoint"] = checkpoint;
    resolved["mode"] = train::run_mode_name(mode);
    resolved["split"] = split;
    write_snapshot(out_dir, resolved);

    for (auto& [id, v] : volumes) {
        const DisplacementVector* pd = nullptr;
        if (mode == train::RunMode::PreAlign) {
            auto it = pre_align.find(id);
            if (it == pre_align.end())
                throw std::invalid_argument("predict: no pre-alignment for volume " + id);
            pd = &it->second;
        }
        const auto patch = predict_patch_for(v, net.config());
        const auto pred = train::predict_volume(net, v, patch, mode, pd);
        SurfaceSet pv = pred.pred_volume;
        pv.names.assign(static_cast<size_t>(pv.n_surfaces), "");
        io::write_surf(pred.pred_volume, fs::path(out_dir) / (id + ".pred.surf.json"));
        io::write_surf(pred.pred_aligned, fs::path(out_dir) / (id + ".aligned.surf.json"));
        json dj;
        dj["id"] = id;
        dj["d"] = pred.displacement.d;
        io::write_text_file(fs::path(out_dir) / (id + ".displacement.json"), dj.dump(2) + "\n");
        std::cout << "predicted " << id << "\n";
    }
    return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& manifest, const std::string& split,
                 const std::string& out_dir, const std::string& run_name, int ncc_window,
                 const std::vector<std::string>& compare_paths) {
    fs::create_directories(out_dir);
    if (!compare_paths.empty()) {
        std::vector<eval::MetricsReport> reports;
        for (const auto& p : compare_paths)
            reports.push_back(eval::MetricsReport::from_json(io::read_text_file(p)));
        const auto cmp = eval::compare_runs(reports);
        io::write_text_file(fs::path(out_dir) / "comparison.md", cmp.markdown);
        io::write_text_file(fs::path(out_dir) / "comparison.csv", cmp.csv);
        std::cout << cmp.markdown;
        return 0;
    }
    if (pred_dir.empty() || manifest.empty())
        throw std::invalid_argument("evaluate: need --pred and --manifest (or --compare)");

    auto cases = train::load_dataset(manifest, split);
    if (cases.empty()) throw std::invalid_argument("evaluate: no cases in split '" + split + "'");

    eval::MetricsReport report;
    report.run_name = run_name;
    report.surface_names = cases.front().truth.names;
    report.spacing_um = cases.front().volume.spacing_um[0];
    const int64_t K = cases.front().truth.n_surfaces;
    report.histogram.counts.assign(61, 0);

    std::vector<std::vector<double>> mad_by_surface(static_cast<size_t>(K));
    std::vector<std::vector<double>> amad_by_surface(static_cast<size_t>(K));
    for (auto& c : cases) {
        const fs::path pp = fs::path(pred_dir) / (c.id + ".pred.surf.json");
        SurfaceSet pred = io::read_surf(pp);
        SurfaceSet aligned = pred;
        const fs::path ap = fs::path(pred_dir) / (c.id + ".aligned.surf.json");
        if (fs::exists(ap)) aligned = io::read_surf(ap);
        DisplacementVector d(c.volume.n_b);
        const fs::path dp = fs::path(pred_dir) / (c.id + ".displacement.json");
        if (fs::exists(dp)) {
            const json dj = json::parse(io::read_text_file(dp));
            d = DisplacementVector(dj.at("d").get<std::vector<double>>());
        }

        eval::CaseMetrics cm;
        cm.id = c.id;
        cm.tag = c.tag;
        const auto mad = eval::metric_mad(pred, c.truth, report.spacing_um);
        for (int64_t k = 0; k < K; ++k) {
            cm.mad_px.push_back(mad[static_cast<size_t>(k)].mean_px);
            mad_by_surface[static_cast<size_t>(k)].push_back(mad[static_cast<size_t>(k)].mean_px);
        }
        cm.alignment_mad = eval::metric_alignment_mad(c.truth, d);
        for (int64_t k = 0; k < K; ++k)
            amad_by_surface[static_cast<size_t>(k)].push_back(cm.alignment_mad[static_cast<size_t>(k)]);
        cm.ncc = eval::metric_ncc_volume(c.volume, d, ncc_window);
        cm.mean_abs_adjacent_diff = eval::mean_abs_adjacent_diff(aligned);
        const auto h = eval::connectivity_histogram(aligned);
        for (size_t i = 0; i < h.counts.size(); ++i) report.histogram.counts[i] += h.counts[i];
        report.mean_ncc += cm.ncc;
        report.mean_abs_adjacent_diff += cm.mean_abs_adjacent_diff;
        report.cases.push_back(cm);
    }

    const double ncases = static_cast<double>(cases.size());
    report.mean_ncc /= ncases;
    report.mean_abs_adjacent_diff /= ncases;
    for (int64_t k = 0; k < K; ++k) {
        const auto& v = mad_by_surface[static_cast<size_t>(k)];
        double m = 0;
        for (double x : v) m += x;
        m /= ncases;
        double var = 0;
        for (double x : v) var += (x - m) * (x - m);
        var = v.size() > 1 ? var / ncases : 0.0;
        eval::SurfaceStat s;
        s.name = k < static_cast<int64_t>(report.surface_names.size())
                     ? report.surface_names[static_cast<size_t>(k)]
                     : "S" + std::to_string(k + 1);
        s.mean_px = m;
        s.std_px = std::sqrt(var);
        s.mean_um = s.mean_px * report.spacing_um;
        s.std_um = s.std_px * report.spacing_um;
        report.mad.push_back(s);

        double am = 0;
        for (double x : amad_by_surface[static_cast<size_t>(k)]) am += x;
        report.alignment_mad_px.push_back(am / ncases);
        report.alignment_mad_avg_px += am / ncases;
    }
    report.alignment_mad_avg_px /= static_cast<double>(K);

    io::write_text_file(fs::path(out_dir) / "report.json", report.to_json() + "\n");
    io::write_text_file(fs::path(out_dir) / "report.csv", report.to_csv());
    io::write_text_file(fs::path(out_dir) / "histogram.csv",
                        eval::histogram_to_csv(report.histogram));
    json resolved;
    resolved["pred"] = pred_dir;
    resolved["manifest"] = manifest;
    resolved["split"] = split;
    resolved["ncc_window"] = ncc_window;
    write_snapshot(out_dir, resolved);
    std::cout << report.to_csv();
    return 0;
}

int cmd_plot(const std::string& report_path, const std::string& surfaces_path,
             const std::string& out_dir) {
    fs::create_directories(out_dir);
    json resolved;
    if (!report_path.empty()) {
        const auto report = eval::MetricsReport::from_json(io::read_text_file(report_path));
        io::write_text_file(fs::path(out_dir) / "histogram.csv",
                            eval::histogram_to_csv(report.histogram));
        eval::render_histogram_pgm(report.histogram, fs::path(out_dir) / "histogram.pgm");
        resolved["report"] = report_path;
        std::cout << "histogram written\n";
    }
    if (!surfaces_path.empty()) {
        const SurfaceSet s = io::read_surf(surfaces_path);
        for (int64_t k = 0; k < s.n_surfaces; ++k) {
            const Tensor grid = eval::depth_field_export(s, k);
            const std::string stem = "depth_field_" + std::to_string(k);
            io::write_text_file(fs::path(out_dir) / (stem + ".csv"),
                                eval::depth_field_to_csv(grid));
            eval::render_depth_field_pgm(grid, fs::path(out_dir) / (stem + ".pgm"));
        }
        resolved["surfaces"] = surfaces_path;
        std::cout << "depth fields written\n";
    }
    if (report_path.empty() && surfaces_path.empty())
        throw std::invalid_argument("plot: need --report and/or --surfaces");
    write_snapshot(out_dir, resolved);
    return 0;
}

} // namespace

int run(int argc, const char* const* argv) {
#ifdef _OPENMP
    if (const char* t = std::getenv("OCTSEG_THREADS")) {
        const int n = std::atoi(t);
        if (n > 0) omp_set_num_threads(n);
    }
#endif

    CLI::App app{"Joint B-scan alignment and 3D coherent layer-surface regression for OCT volumes"};
    app.require_subcommand(1);

    std::string config_path, out_dir, in_path, manifest, split = "test", checkpoint;
    std::string surfaces_path, mode_flag, pre_align_file, report_path, run_name, pred_dir;
    std::vector<std::string> overrides, compare_paths;
    int64_t target_row = 0;
    double gradient_floor = 0.02;
    int ncc_window = 9;

    auto* synth_cmd = app.add_subcommand("synth", "generate a phantom dataset");
    synth_cmd->add_option("--config", config_path, "phantom config JSON")->required();
    synth_cmd->add_option("--out", out_dir, "output directory")->required();
    synth_cmd->add_option("--override", overrides, "dotted-key overrides key=value");

    auto* prep_cmd = app.add_subcommand("preprocess", "flatten and normalize a volume");
    prep_cmd->add_option("--in", in_path, "OCTV1 header")->required();
    prep_cmd->add_option("--out", out_dir, "output directory")->required();
    prep_cmd->add_option("--target-row", target_row, "flattening target row (default 3R/4)");
    prep_cmd->add_option("--gradient-floor", gradient_floor, "minimum gradient magnitude");
    prep_cmd->add_option("--surfaces", surfaces_path, "SURF1 to map into the flattened frame");

    auto* train_cmd = app.add_subcommand("train", "train the network");
    train_cmd->add_option("--config", config_path, "train config JSON")->required();
    train_cmd->add_option("--data", manifest, "dataset manifest")->required();
    train_cmd->add_option("--out", out_dir, "run directory")->required();
    train_cmd->add_option("--override", overrides, "dotted-key overrides key=value");

    auto* pred_cmd = app.add_subcommand("predict", "run a checkpoint over volumes");
    pred_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    pred_cmd->add_option("--in", in_path, "single OCTV1 header");
    pred_cmd->add_option("--manifest", manifest, "dataset manifest");
    pred_cmd->add_option("--split", split, "manifest split (default test)");
    pred_cmd->add_option("--out", out_dir, "output directory")->required();
    pred_cmd->add_option("--mode", mode_flag, "override run mode");
    pred_cmd->add_option("--pre-align-file", pre_align_file, "JSON {id: [d...]} for pre_align");

    auto* eval_cmd = app.add_subcommand("evaluate", "compute metrics or compare runs");
    eval_cmd->add_option("--pred", pred_dir, "prediction directory");
    eval_cmd->add_option("--manifest", manifest, "dataset manifest with ground truth");
    eval_cmd->add_option("--split", split, "manifest split (default test)");
    eval_cmd->add_option("--out", out_dir, "output directory")->required();
    eval_cmd->add_option("--run-name", run_name, "label for this run");
    eval_cmd->add_option("--ncc-window", ncc_window, "local NCC window (odd)");
    eval_cmd->add_option("--compare", compare_paths, "report JSONs to tabulate side by side");

    auto* plot_cmd = app.add_subcommand("plot", "render histogram / depth fields");
    plot_cmd->add_option("--report", report_path, "metrics report JSON");
    plot_cmd->add_option("--surfaces", surfaces_path, "SURF1 to render as depth fields");
    plot_cmd->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, const_cast<char**>(argv));
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (synth_cmd->parsed()) return cmd_synth(config_path, overrides, out_dir);
        if (prep_cmd->parsed())
            return cmd_preprocess(in_path, out_dir, target_row, gradient_floor, surfaces_path);
        if (train_cmd->parsed()) return cmd_train(config_path, overrides, manifest, out_dir);
        if (pred_cmd->parsed())
            return cmd_predict(checkpoint, in_path, manifest, split, out_dir, mode_flag,
                               pre_align_file);
        if (eval_cmd->parsed())
            return cmd_evaluate(pred_dir, manifest, split, out_dir, run_name, ncc_window,
                                compare_paths);
        if (plot_cmd->parsed()) return cmd_plot(report_path, surfaces_path, out_dir);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace octseg::cli
