#include "octseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "octseg/io.hpp"
#include "octseg/losses.hpp"

namespace octseg::eval {

using nlohmann::json;

int64_t Histogram::central_bin() const {
    const double width = (hi - lo) / static_cast<double>(bins());
    int64_t i = static_cast<int64_t>(std::floor((0.0 - lo) / width));
    return std::clamp<int64_t>(i, 0, bins() - 1);
}

int64_t Histogram::total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
}

std::vector<SurfaceStat> metric_mad(const SurfaceSet& pred, const SurfaceSet& truth,
                                    double spacing_um) {
    if (pred.n_surfaces != truth.n_surfaces || pred.n_b != truth.n_b || pred.n_a != truth.n_a)
        throw std::invalid_argument("metric_mad: shape mismatch");
    std::vector<SurfaceStat> out(static_cast<size_t>(pred.n_surfaces));
    for (int64_t k = 0; k < pred.n_surfaces; ++k) {
        double sum = 0.0, sumsq = 0.0;
        const int64_t n = pred.n_b * pred.n_a;
        for (int64_t b = 0; b < pred.n_b; ++b)
            for (int64_t a = 0; a < pred.n_a; ++a) {
                const double e = std::abs(pred.at(k, b, a) - truth.at(k, b, a));
                sum += e;
                sumsq += e * e;
            }
        SurfaceStat& s = out[static_cast<size_t>(k)];
        s.name = k < static_cast<int64_t>(truth.names.size()) ? truth.names[static_cast<size_t>(k)]
                                                              : "S" + std::to_string(k + 1);
        s.mean_px = sum / static_cast<double>(n);
        const double var = std::max(0.0, sumsq / static_cast<double>(n) - s.mean_px * s.mean_px);
        s.std_px = std::sqrt(var);
        s.mean_um = s.mean_px * spacing_um;
        s.std_um = s.std_px * spacing_um;
    }
    return out;
}

std::vector<double> metric_alignment_mad(const SurfaceSet& truth, const DisplacementVector& d) {
    if (d.size() != truth.n_b) throw std::invalid_argument("metric_alignment_mad: size mismatch");
    if (truth.n_b < 2) throw std::invalid_argument("metric_alignment_mad: need >= 2 B-scans");
    std::vector<double> out(static_cast<size_t>(truth.n_surfaces), 0.0);
    for (int64_t k = 0; k < truth.n_surfaces; ++k) {
        double acc = 0.0;
        for (int64_t b = 0; b + 1 < truth.n_b; ++b)
            for (int64_t a = 0; a < truth.n_a; ++a)
                acc += std::abs((truth.at(k, b, a) - d.d[static_cast<size_t>(b)]) -
                                (truth.at(k, b + 1, a) - d.d[static_cast<size_t>(b + 1)]));
        out[static_cast<size_t>(k)] =
            acc / static_cast<double>((truth.n_b - 1) * truth.n_a);
    }
    return out;
}

double metric_ncc_volume(const OctVolume& v, const DisplacementVector& d, int window) {
    Tensor image({1, v.n_b, v.n_r, v.n_a});
    for (int64_t b = 0; b < v.n_b; ++b)
        for (int64_t r = 0; r < v.n_r; ++r)
            for (int64_t a = 0; a < v.n_a; ++a)
                image.at4(0, b, r, a) = static_cast<double>(v.at(a, b, r));
    return -losses::local_ncc_loss(image, d, window);
}

Histogram connectivity_histogram(const SurfaceSet& pred, int64_t bins, double lo, double hi) {
    if (bins < 1 || !(hi > lo)) throw std::invalid_argument("connectivity_histogram: bad bins");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<size_t>(bins), 0);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (int64_t k = 0; k < pred.n_surfaces; ++k)
        for (int64_t b = 0; b + 1 < pred.n_b; ++b)
            for (int64_t a = 0; a < pred.n_a; ++a) {
                const double diff = pred.at(k, b + 1, a) - pred.at(k, b, a);
                int64_t i = static_cast<int64_t>(std::floor((diff - lo) / width));
                i = std::clamp<int64_t>(i, 0, bins - 1);
                ++h.counts[static_cast<size_t>(i)];
            }
    return h;
}

double mean_abs_adjacent_diff(const SurfaceSet& pred) {
    if (pred.n_b < 2) return 0.0;
    double acc = 0.0;
    for (int64_t k = 0; k < pred.n_surfaces; ++k)
        for (int64_t b = 0; b + 1 < pred.n_b; ++b)
            for (int64_t a = 0; a < pred.n_a; ++a)
                acc += std::abs(pred.at(k, b + 1, a) - pred.at(k, b, a));
    return acc / static_cast<double>(pred.n_surfaces * (pred.n_b - 1) * pred.n_a);
}

Tensor depth_field_export(const SurfaceSet& pred, int64_t surface_index) {
    if (surface_index < 0 || surface_index >= pred.n_surfaces)
        throw std::invalid_argument("depth_field_export: surface index out of range");
    Tensor grid({pred.n_b, pred.n_a});
    for (int64_t b = 0; b < pred.n_b; ++b)
        for (int64_t a = 0; a < pred.n_a; ++a) grid.at2(b, a) = pred.at(surface_index, b, a);
    return grid;
}

std::string MetricsReport::to_json() const {
    json j;
    j["run_name"] = run_name;
    j["surface_names"] = surface_names;
    j["spacing_um"] = spacing_um;
    j["mad"] = json::array();
    for (const auto& s : mad)
        j["mad"].push_back({{"name", s.name},
                            {"mean_px", s.mean_px},
                            {"std_px", s.std_px},
                            {"mean_um", s.mean_um},
                            {"std_um", s.std_um}});
    j["alignment_mad_px"] = alignment_mad_px;
    j["alignment_mad_avg_px"] = alignment_mad_avg_px;
    j["mean_ncc"] = mean_ncc;
    j["mean_abs_adjacent_diff"] = mean_abs_adjacent_diff;
    j["histogram"] = {{"lo", histogram.lo}, {"hi", histogram.hi}, {"counts", histogram.counts}};
    j["cases"] = json::array();
    for (const auto& c : cases)
        j["cases"].push_back({{"id", c.id},
                              {"tag", c.tag},
                              {"mad_px", c.mad_px},
                              {"alignment_mad", c.alignment_mad},
                              {"ncc", c.ncc},
                              {"mean_abs_adjacent_diff", c.mean_abs_adjacent_diff}});
    return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
    const json j = json::parse(text);
    MetricsReport r;
    r.run_name = j.value("run_name", "");
    r.surface_names = j.at("surface_names").get<std::vector<std::string>>();
    r.spacing_um = j.value("spacing_um", 3.24);
    for (const auto& e : j.at("mad")) {
        SurfaceStat s;
        s.name = e.at("name").get<std::string>();
        s.mean_px = e.at("mean_px").get<double>();
        s.std_px = e.at("std_px").get<double>();
        s.mean_um = e.at("mean_um").get<double>();
        s.std_um = e.at("std_um").get<double>();
        r.mad.push_back(s);
    }
    r.alignment_mad_px = j.at("alignment_mad_px").get<std::vector<double>>();
    r.alignment_mad_avg_px = j.at("alignment_mad_avg_px").get<double>();
    r.mean_ncc = j.at("mean_ncc").get<double>();
    r.mean_abs_adjacent_diff = j.value("mean_abs_adjacent_diff", 0.0);
    r.histogram.lo = j.at("histogram").at("lo").get<double>();
    r.histogram.hi = j.at("histogram").at("hi").get<double>();
    r.histogram.counts = j.at("histogram").at("counts").get<std::vector<int64_t>>();
    if (j.contains("cases"))
        for (const auto& e : j.at("cases")) {
            CaseMetrics c;
            c.id = e.at("id").get<std::string>();
            c.tag = e.value("tag", "");
            c.mad_px = e.at("mad_px").get<std::vector<double>>();
            c.alignment_mad = e.at("alignment_mad").get<std::vector<double>>();
            c.ncc = e.at("ncc").get<double>();
            c.mean_abs_adjacent_diff = e.value("mean_abs_adjacent_diff", 0.0);
            r.cases.push_back(c);
        }
    return r;
}

std::string MetricsReport::to_csv() const {
    std::string out = "metric,surface,value\n";
    char buf[256];
    for (const auto& s : mad) {
        std::snprintf(buf, sizeof(buf), "mad_px,%s,%.6f\n", s.name.c_str(), s.mean_px);
        out += buf;
        std::snprintf(buf, sizeof(buf), "mad_um,%s,%.6f\n", s.name.c_str(), s.mean_um);
        out += buf;
    }
    for (size_t k = 0; k < alignment_mad_px.size(); ++k) {
        std::snprintf(buf, sizeof(buf), "alignment_mad_px,%s,%.6f\n",
                      k < surface_names.size() ? surface_names[k].c_str() : "",
                      alignment_mad_px[k]);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "alignment_mad_avg_px,,%.6f\n", alignment_mad_avg_px);
    out += buf;
    std::snprintf(buf, sizeof(buf), "mean_ncc,,%.6f\n", mean_ncc);
    out += buf;
    std::snprintf(buf, sizeof(buf), "mean_abs_adjacent_diff,,%.6f\n", mean_abs_adjacent_diff);
    out += buf;
    return out;
}

Comparison compare_runs(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("compare_runs: no reports");
    Comparison cmp;
    const auto& names = reports.front().surface_names;
    for (const auto& r : reports)
        if (r.surface_names != names)
            throw std::invalid_argument("compare_runs: reports disagree on surfaces");

    std::string md = "| metric |";
    std::string csv = "metric";
    for (const auto& r : reports) {
        md += " " + (r.run_name.empty() ? std::string("run") : r.run_name) + " |";
        csv += "," + (r.run_name.empty() ? std::string("run") : r.run_name);
    }
    md += "\n|---|";
    for (size_t i = 0; i < reports.size(); ++i) md += "---|";
    md += "\n";
    csv += "\n";

    char buf[128];
    auto add_row = [&](const std::string& label, auto getter) {
        md += "| " + label + " |";
        csv += label;
        for (const auto& r : reports) {
            const std::string cell = getter(r);
            md += " " + cell + " |";
            csv += "," + cell;
        }
        md += "\n";
        csv += "\n";
    };

    for (size_t k = 0; k < names.size(); ++k) {
        add_row("MAD " + names[k] + " (um)", [&](const MetricsReport& r) {
            std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", r.mad[k].mean_um, r.mad[k].std_um);
            return std::string(buf);
        });
    }
    add_row("MAD overall (um)", [&](const MetricsReport& r) {
        double m = 0, s = 0;
        for (const auto& x : r.mad) {
            m += x.mean_um;
            s += x.std_um;
        }
        std::snprintf(buf, sizeof(buf), "%.2f ± %.2f", m / r.mad.size(), s / r.mad.size());
        return std::string(buf);
    });
    for (size_t k = 0; k < names.size(); ++k) {
        add_row("alignment MAD " + names[k] + " (px)", [&](const MetricsReport& r) {
            std::snprintf(buf, sizeof(buf), "%.3f", r.alignment_mad_px[k]);
            return std::string(buf);
        });
    }
    add_row("alignment MAD avg (px)", [&](const MetricsReport& r) {
        std::snprintf(buf, sizeof(buf), "%.3f", r.alignment_mad_avg_px);
        return std::string(buf);
    });
    add_row("NCC", [&](const MetricsReport& r) {
        std::snprintf(buf, sizeof(buf), "%.4f", r.mean_ncc);
        return std::string(buf);
    });
    add_row("mean |adj diff| (px)", [&](const MetricsReport& r) {
        std::snprintf(buf, sizeof(buf), "%.4f", r.mean_abs_adjacent_diff);
        return std::string(buf);
    });

    cmp.markdown = md;
    cmp.csv = csv;
    return cmp;
}

std::string histogram_to_csv(const Histogram& h) {
    std::string out = "bin_lo,bin_hi,count\n";
    char buf[128];
    for (int64_t i = 0; i < h.bins(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%lld\n", h.bin_lo(i), h.bin_hi(i),
                      static_cast<long long>(h.counts[static_cast<size_t>(i)]));
        out += buf;
    }
    return out;
}

std::string depth_field_to_csv(const Tensor& grid) {
    std::string out;
    char buf[64];
    for (int64_t b = 0; b < grid.dim(0); ++b) {
        for (int64_t a = 0; a < grid.dim(1); ++a) {
            std::snprintf(buf, sizeof(buf), a + 1 < grid.dim(1) ? "%.4f," : "%.4f\n",
                          grid.at2(b, a));
            out += buf;
        }
    }
    return out;
}

void write_pgm(const std::filesystem::path& p, const std::vector<uint8_t>& pixels, int64_t width,
               int64_t height) {
    if (pixels.size() != static_cast<size_t>(width * height))
        throw std::invalid_argument("write_pgm: pixel buffer size mismatch");
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + p.string());
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

void render_histogram_pgm(const Histogram& h, const std::filesystem::path& p) {
    const int64_t W = std::max<int64_t>(h.bins() * 6, 120), H = 240, pad = 10;
    std::vector<uint8_t> img(static_cast<size_t>(W * H), 255);
    int64_t peak = 1;
    for (int64_t c : h.counts) peak = std::max(peak, c);
    const int64_t bar_w = (W - 2 * pad) / h.bins();
    for (int64_t i = 0; i < h.bins(); ++i) {
        const int64_t bh =
            (H - 2 * pad) * h.counts[static_cast<size_t>(i)] / peak;
        for (int64_t y = H - pad - bh; y < H - pad; ++y)
            for (int64_t x = pad + i * bar_w; x < pad + (i + 1) * bar_w - 1; ++x)
                img[static_cast<size_t>(y * W + x)] = 40;
    }
    for (int64_t x = 0; x < W; ++x) img[static_cast<size_t>((H - pad) * W + x)] = 0;
    write_pgm(p, img, W, H);
}

void render_depth_field_pgm(const Tensor& grid, const std::filesystem::path& p) {
    const int64_t H = grid.dim(0), W = grid.dim(1);
    double lo = grid[0], hi = grid[0];
    for (int64_t i = 0; i < grid.numel(); ++i) {
        lo = std::min(lo, grid[i]);
        hi = std::max(hi, grid[i]);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::vector<uint8_t> img(static_cast<size_t>(W * H));
    for (int64_t i = 0; i < grid.numel(); ++i)
        img[static_cast<size_t>(i)] = static_cast<uint8_t>(255.0 * (grid[i] - lo) / span);
    write_pgm(p, img, W, H);
}

} // namespace octseg::eval
