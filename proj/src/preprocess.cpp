#include "octseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "octseg/io.hpp"

namespace octseg::preprocess {

using nlohmann::json;

std::vector<double> estimate_bm(const OctVolume& v, double gradient_floor) {
    if (v.n_r < 8) throw std::invalid_argument("estimate_bm: need at least 8 rows");
    const int64_t na = v.n_a, nb = v.n_b, nr = v.n_r;
    std::vector<double> est(static_cast<size_t>(na * nb), 0.0);
    std::vector<uint8_t> flagged(static_cast<size_t>(na * nb), 0);

    for (int64_t a = 0; a < na; ++a)
        for (int64_t b = 0; b < nb; ++b) {
            double best = 0.0;
            int64_t best_r = -1;
            for (int64_t r = nr / 2; r + 1 < nr; ++r) {
                const double g = static_cast<double>(v.at(a, b, r + 1)) - v.at(a, b, r);
                if (g < best) {
                    best = g;
                    best_r = r;
                }
            }
            if (best_r < 0 || best > -gradient_floor) {
                flagged[static_cast<size_t>(a * nb + b)] = 1;
            } else {
                est[static_cast<size_t>(a * nb + b)] = static_cast<double>(best_r + 1);
            }
        }

    bool any_valid = false;
    for (size_t i = 0; i < flagged.size(); ++i)
        if (!flagged[i]) any_valid = true;

    if (!any_valid) {
        std::fill(est.begin(), est.end(), static_cast<double>(nr) / 2.0);
        return est;
    }

    // fill flagged A-scans from the nearest valid neighbour, first along a,
    // then along b
    for (int64_t b = 0; b < nb; ++b)
        for (int64_t a = 0; a < na; ++a) {
            if (!flagged[static_cast<size_t>(a * nb + b)]) continue;
            for (int64_t off = 1; off < na; ++off) {
                const int64_t lo = a - off, hi = a + off;
                if (lo >= 0 && !flagged[static_cast<size_t>(lo * nb + b)]) {
                    est[static_cast<size_t>(a * nb + b)] = est[static_cast<size_t>(lo * nb + b)];
                    flagged[static_cast<size_t>(a * nb + b)] = 2;
                    break;
                }
                if (hi < na && !flagged[static_cast<size_t>(hi * nb + b)]) {
                    est[static_cast<size_t>(a * nb + b)] = est[static_cast<size_t>(hi * nb + b)];
                    flagged[static_cast<size_t>(a * nb + b)] = 2;
                    break;
                }
            }
        }
    for (int64_t b = 0; b < nb; ++b)
        for (int64_t a = 0; a < na; ++a) {
            if (flagged[static_cast<size_t>(a * nb + b)] != 1) continue;
            for (int64_t off = 1; off < nb; ++off) {
                const int64_t lo = b - off, hi = b + off;
                if (lo >= 0 && flagged[static_cast<size_t>(a * nb + lo)] != 1) {
                    est[static_cast<size_t>(a * nb + b)] = est[static_cast<size_t>(a * nb + lo)];
                    flagged[static_cast<size_t>(a * nb + b)] = 2;
                    break;
                }
                if (hi < nb && flagged[static_cast<size_t>(a * nb + hi)] != 1) {
                    est[static_cast<size_t>(a * nb + b)] = est[static_cast<size_t>(a * nb + hi)];
                    flagged[static_cast<size_t>(a * nb + b)] = 2;
                    break;
                }
            }
        }

    // 5x3 median across (a, b), window clamped at the borders
    std::vector<double> out(est.size());
    std::vector<double> window;
    window.reserve(15);
    for (int64_t a = 0; a < na; ++a)
        for (int64_t b = 0; b < nb; ++b) {
            window.clear();
            for (int64_t da = -2; da <= 2; ++da)
                for (int64_t db = -1; db <= 1; ++db) {
                    const int64_t aa = std::clamp<int64_t>(a + da, 0, na - 1);
                    const int64_t bb = std::clamp<int64_t>(b + db, 0, nb - 1);
                    window.push_back(est[static_cast<size_t>(aa * nb + bb)]);
                }
            std::nth_element(window.begin(), window.begin() + window.size() / 2, window.end());
            out[static_cast<size_t>(a * nb + b)] = window[window.size() / 2];
        }
    return out;
}

std::pair<OctVolume, FlattenRecord> flatten_volume(const OctVolume& v,
                                                   const std::vector<double>& bm,
                                                   int64_t target_row) {
    if (target_row < v.n_r / 2 || target_row > v.n_r - 4)
        throw std::invalid_argument("flatten_volume: target_row must lie in [R/2, R-4]");
    if (bm.size() != static_cast<size_t>(v.n_a * v.n_b))
        throw std::invalid_argument("flatten_volume: bm grid size mismatch");

    FlattenRecord rec;
    rec.n_a = v.n_a;
    rec.n_b = v.n_b;
    rec.target_row = target_row;
    rec.shifts.resize(static_cast<size_t>(v.n_a * v.n_b));

    OctVolume out(v.n_a, v.n_b, v.n_r);
    out.spacing_um = v.spacing_um;
    out.id = v.id;
    for (int64_t a = 0; a < v.n_a; ++a)
        for (int64_t b = 0; b < v.n_b; ++b) {
            const double shift_f = static_cast<double>(target_row) - bm[static_cast<size_t>(a * v.n_b + b)];
            const int32_t s = static_cast<int32_t>(std::llround(shift_f));
            rec.at(a, b) = s;
            for (int64_t r = 0; r < v.n_r; ++r) {
                const int64_t src = std::clamp<int64_t>(r - s, 0, v.n_r - 1);
                out.at(a, b, r) = v.at(a, b, src);
            }
        }
    return {std::move(out), std::move(rec)};
}

SurfaceSet unflatten_surface(const SurfaceSet& s, const FlattenRecord& rec) {
    if (s.n_a != rec.n_a || s.n_b != rec.n_b)
        throw std::invalid_argument("unflatten_surface: grid mismatch");
    SurfaceSet out = s;
    for (int64_t k = 0; k < s.n_surfaces; ++k)
        for (int64_t b = 0; b < s.n_b; ++b)
            for (int64_t a = 0; a < s.n_a; ++a)
                out.at(k, b, a) = s.at(k, b, a) - rec.at(a, b);
    return out;
}

SurfaceSet flatten_surfaces(const SurfaceSet& s, const FlattenRecord& rec) {
    if (s.n_a != rec.n_a || s.n_b != rec.n_b)
        throw std::invalid_argument("flatten_surfaces: grid mismatch");
    SurfaceSet out = s;
    for (int64_t k = 0; k < s.n_surfaces; ++k)
        for (int64_t b = 0; b < s.n_b; ++b)
            for (int64_t a = 0; a < s.n_a; ++a)
                out.at(k, b, a) = s.at(k, b, a) + rec.at(a, b);
    return out;
}

OctVolume normalize_intensity(const OctVolume& v) {
    OctVolume out = v;
    float lo = v.intensities.empty() ? 0.0f : v.intensities[0];
    float hi = lo;
    for (float x : v.intensities) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    if (hi <= lo) {
        std::fill(out.intensities.begin(), out.intensities.end(), 0.5f);
        return out;
    }
    const float span = hi - lo;
    for (auto& x : out.intensities) x = (x - lo) / span;
    return out;
}

void write_flatten_record(const FlattenRecord& rec, const std::filesystem::path& header_path) {
    std::filesystem::path raw = header_path;
    raw.replace_extension(".raw");
    json h;
    h["format"] = "FLAT1";
    h["shape"] = {rec.n_a, rec.n_b};
    h["target_row"] = rec.target_row;
    h["dtype"] = "i32";
    h["payload"] = raw.filename().string();
    io::write_text_file(header_path, h.dump(2) + "\n");
    std::ofstream f(raw, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + raw.string());
    f.write(reinterpret_cast<const char*>(rec.shifts.data()),
            static_cast<std::streamsize>(rec.shifts.size() * sizeof(int32_t)));
}

FlattenRecord read_flatten_record(const std::filesystem::path& header_path) {
    std::ifstream hf(header_path);
    if (!hf) throw std::runtime_error("cannot open for reading: " + header_path.string());
    json h;
    hf >> h;
    if (h.value("format", "") != "FLAT1")
        throw std::runtime_error("not a FLAT1 header: " + header_path.string());
    FlattenRecord rec;
    rec.n_a = h.at("shape").at(0).get<int64_t>();
    rec.n_b = h.at("shape").at(1).get<int64_t>();
    rec.target_row = h.at("target_row").get<int64_t>();
    rec.shifts.resize(static_cast<size_t>(rec.n_a * rec.n_b));
    const auto raw = header_path.parent_path() / h.at("payload").get<std::string>();
    std::ifstream f(raw, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + raw.string());
    f.read(reinterpret_cast<char*>(rec.shifts.data()),
           static_cast<std::streamsize>(rec.shifts.size() * sizeof(int32_t)));
    if (static_cast<size_t>(f.gcount()) != rec.shifts.size() * sizeof(int32_t))
        throw std::runtime_error("payload too short: " + raw.string());
    return rec;
}

PatchSampler::PatchSampler(const OctVolume& v, const SurfaceSet& truth, PatchShape shape,
                           uint64_t seed)
    : vol_(v), truth_(truth), shape_(shape), rng_(seed) {
    if (shape.rows > v.n_r || shape.cols_a > v.n_a || shape.bscans > v.n_b)
        throw std::invalid_argument("PatchSampler: patch larger than volume");
    if (shape.rows < 1 || shape.cols_a < 1 || shape.bscans < 1)
        throw std::invalid_argument("PatchSampler: empty patch shape");
    if (truth.n_a != v.n_a || truth.n_b != v.n_b)
        throw std::invalid_argument("PatchSampler: truth grid mismatch");
}

Patch PatchSampler::at_offset(int64_t r0, int64_t a0, int64_t b0) const {
    if (r0 < 0 || a0 < 0 || b0 < 0 || r0 + shape_.rows > vol_.n_r ||
        a0 + shape_.cols_a > vol_.n_a || b0 + shape_.bscans > vol_.n_b)
        throw std::invalid_argument("PatchSampler: offset out of range");
    Patch p;
    p.r0 = r0;
    p.a0 = a0;
    p.b0 = b0;
    p.image = Tensor({1, shape_.bscans, shape_.rows, shape_.cols_a});
    for (int64_t b = 0; b < shape_.bscans; ++b)
        for (int64_t r = 0; r < shape_.rows; ++r)
            for (int64_t a = 0; a < shape_.cols_a; ++a)
                p.image.at4(0, b, r, a) =
                    static_cast<double>(vol_.at(a0 + a, b0 + b, r0 + r));

    p.truth = SurfaceSet(truth_.n_surfaces, shape_.bscans, shape_.cols_a);
    p.truth.names = truth_.names;
    p.mask = SurfaceMask(truth_.n_surfaces, shape_.bscans, shape_.cols_a, true);
    const double rows = static_cast<double>(shape_.rows);
    for (int64_t k = 0; k < truth_.n_surfaces; ++k)
        for (int64_t b = 0; b < shape_.bscans; ++b)
            for (int64_t a = 0; a < shape_.cols_a; ++a) {
                const double pos = truth_.at(k, b0 + b, a0 + a) - static_cast<double>(r0);
                const bool inside = pos >= 1.0 && pos <= rows;
                p.truth.at(k, b, a) = std::clamp(pos, 1.0, rows);
                p.mask.at(k, b, a) = inside ? 1 : 0;
            }
    return p;
}

Patch PatchSampler::random_patch() {
    const int64_t r0 = rng_.uniform_int(0, vol_.n_r - shape_.rows);
    const int64_t a0 = rng_.uniform_int(0, vol_.n_a - shape_.cols_a);
    const int64_t b0 = rng_.uniform_int(0, vol_.n_b - shape_.bscans);
    return at_offset(r0, a0, b0);
}

std::vector<std::array<int64_t, 3>> PatchSampler::tiling_offsets() const {
    std::vector<std::array<int64_t, 3>> out;
    auto axis = [](int64_t total, int64_t patch) {
        std::vector<int64_t> offs;
        for (int64_t o = 0;; o += patch) {
            if (o + patch >= total) {
                offs.push_back(total - patch);
                break;
            }
            offs.push_back(o);
        }
        return offs;
    };
    for (int64_t r0 : axis(vol_.n_r, shape_.rows))
        for (int64_t a0 : axis(vol_.n_a, shape_.cols_a))
            for (int64_t b0 : axis(vol_.n_b, shape_.bscans)) out.push_back({r0, a0, b0});
    return out;
}

} // namespace octseg::preprocess
