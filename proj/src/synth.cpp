#include "octseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "octseg/io.hpp"
#include "octseg/rng.hpp"

namespace octseg::synth {

using nlohmann::json;

void PhantomSpec::validate() const {
    if (n_a < 1 || n_b < 2 || n_r < 16)
        throw std::invalid_argument("PhantomSpec: need n_a >= 1, n_b >= 2, n_r >= 16");
    if (surfaces < 1) throw std::invalid_argument("PhantomSpec: surfaces >= 1 required");
    if (noise_sigma < 0.0) throw std::invalid_argument("PhantomSpec: noise_sigma >= 0 required");
    if (!(shift_range >= 0.0) || shift_range >= static_cast<double>(n_r) / 4.0)
        throw std::invalid_argument("PhantomSpec: shift_range must be in [0, n_r/4)");
    if (drusen_amp_hi < drusen_amp_lo || drusen_amp_lo < 0.0)
        throw std::invalid_argument("PhantomSpec: bad drusen amplitude range");
}

namespace {

std::vector<double> region_means(int64_t k) {
    std::vector<double> m(static_cast<size_t>(k + 1));
    if (k == 1) {
        m = {0.65, 0.05};
        return m;
    }
    m.front() = 0.10; // above the top surface
    m.back() = 0.05;  // below the deepest surface
    m[static_cast<size_t>(k - 1)] = 0.80; // band above the deepest surface
    bool bright = true;
    for (int64_t i = 1; i < k - 1; ++i) {
        m[static_cast<size_t>(i)] = bright ? 0.55 : 0.35;
        bright = !bright;
    }
    return m;
}

std::vector<double> zero_mean_walk(Rng& rng, int64_t n, double max_abs) {
    std::vector<double> w(static_cast<size_t>(n), 0.0);
    if (max_abs <= 0.0 || n < 2) return w;
    double acc = 0.0;
    for (auto& x : w) {
        acc += rng.gaussian();
        x = acc;
    }
    double mean = 0.0;
    for (double x : w) mean += x;
    mean /= static_cast<double>(n);
    double peak = 0.0;
    for (auto& x : w) {
        x -= mean;
        peak = std::max(peak, std::abs(x));
    }
    if (peak > 0.0)
        for (auto& x : w) x *= max_abs / peak;
    return w;
}

} // namespace

PhantomSample generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const int64_t na = spec.n_a, nb = spec.n_b, nr = spec.n_r, K = spec.surfaces;
    const double R = static_cast<double>(nr);

    // Base depths spread between 25% and 75% of the axial range.
    std::vector<double> base(static_cast<size_t>(K));
    const double top = 0.25 * R, bottom = 0.75 * R;
    for (int64_t k = 0; k < K; ++k)
        base[static_cast<size_t>(k)] =
            K == 1 ? 0.5 * R : top + (bottom - top) * static_cast<double>(k) / (K - 1);
    const double gap = K > 1 ? (bottom - top) / (K - 1) : 0.3 * R;

    // A shared undulation moves all surfaces together; small per-surface
    // terms keep them distinct without breaking the ordering. Variation is
    // rich along a but kept small along b: the alignment objectives are
    // pairwise across B-scans, so any systematic mean B-profile of the
    // anatomy would be absorbed into the recovered displacement and the
    // recovered-vs-injected comparison would stop being well-posed.
    const double shared_amp = 0.05 * R;
    const double b_amp = std::min(0.6, 0.008 * R);
    const double pa = rng.uniform(0.0, 2.0 * M_PI), pb = rng.uniform(0.0, 2.0 * M_PI);
    std::vector<double> own_amp(static_cast<size_t>(K)), own_pa(static_cast<size_t>(K)),
        own_pb(static_cast<size_t>(K)), own_fa(static_cast<size_t>(K)), own_fb(static_cast<size_t>(K));
    for (int64_t k = 0; k < K; ++k) {
        own_amp[static_cast<size_t>(k)] = rng.uniform(0.1, 0.3) * std::min(gap, 0.3 * R) * 0.5;
        own_pa[static_cast<size_t>(k)] = rng.uniform(0.0, 2.0 * M_PI);
        own_pb[static_cast<size_t>(k)] = rng.uniform(0.0, 2.0 * M_PI);
        own_fa[static_cast<size_t>(k)] = spec.smooth_cycles_a * rng.uniform(0.6, 1.4);
        own_fb[static_cast<size_t>(k)] = spec.smooth_cycles_b * rng.uniform(0.6, 1.4);
    }

    struct Bump {
        double a0, b0, sa, sb, amp;
    };
    std::vector<Bump> bumps;
    bool has_drusen = false;
    if (K >= 2 && spec.drusen_count > 0 && spec.drusen_amp_hi > 0.0) {
        for (int i = 0; i < spec.drusen_count; ++i) {
            Bump bm{};
            bm.a0 = rng.uniform(0.15, 0.85) * static_cast<double>(na);
            bm.b0 = rng.uniform(0.2, 0.8) * static_cast<double>(nb);
            bm.sa = rng.uniform(0.04, 0.10) * static_cast<double>(na);
            bm.sb = rng.uniform(0.15, 0.35) * static_cast<double>(nb);
            bm.amp = rng.uniform(spec.drusen_amp_lo, spec.drusen_amp_hi);
            if (bm.amp > 0.0) has_drusen = true;
            bumps.push_back(bm);
        }
    }

    SurfaceSet truth(K, nb, na);
    truth.names.resize(static_cast<size_t>(K));
    for (int64_t k = 0; k < K; ++k)
        truth.names[static_cast<size_t>(k)] =
            (K == 3) ? std::vector<std::string>{"ILM", "IRPE", "OBM"}[static_cast<size_t>(k)]
                     : "S" + std::to_string(k + 1);

    for (int64_t b = 0; b < nb; ++b) {
        for (int64_t a = 0; a < na; ++a) {
            const double ua = static_cast<double>(a) / std::max<int64_t>(1, na - 1);
            const double ub = static_cast<double>(b) / std::max<int64_t>(1, nb - 1);
            const double shared =
                shared_amp * std::sin(2.0 * M_PI * spec.smooth_cycles_a * ua + pa) +
                b_amp * std::sin(2.0 * M_PI * spec.smooth_cycles_b * ub + pb);
            double prev = 1.0;
            for (int64_t k = 0; k < K; ++k) {
                double p = base[static_cast<size_t>(k)] + shared +
                           own_amp[static_cast<size_t>(k)] *
                               std::sin(2.0 * M_PI * own_fa[static_cast<size_t>(k)] * ua +
                                        own_pa[static_cast<size_t>(k)]) +
                           0.3 * b_amp *
                               std::sin(2.0 * M_PI * own_fb[static_cast<size_t>(k)] * ub +
                                        own_pb[static_cast<size_t>(k)]);
                if (k == K - 2) { // drusen lift the second-deepest surface upward
                    for (const Bump& bm : bumps) {
                        const double da = (static_cast<double>(a) - bm.a0) / bm.sa;
                        const double db = (static_cast<double>(b) - bm.b0) / bm.sb;
                        p -= bm.amp * std::exp(-0.5 * (da * da + db * db));
                    }
                }
                p = std::max(p, prev + 1.5);
                truth.at(k, b, a) = p;
                prev = p;
            }
        }
    }

    const double margin = 3.0;
    for (double p : truth.positions)
        if (p < 1.0 + margin || p > R - margin)
            throw std::invalid_argument("generate_phantom: surfaces exit the safe axial band");

    // Render in the unshifted frame with sub-pixel region coverage, then add
    // speckle-like multiplicative noise.
    const std::vector<double> means = region_means(K);
    OctVolume unshifted(na, nb, nr);
    for (int64_t a = 0; a < na; ++a)
        for (int64_t b = 0; b < nb; ++b)
            for (int64_t r0 = 0; r0 < nr; ++r0) {
                const double row = static_cast<double>(r0 + 1);
                double val = means[0];
                for (int64_t k = 0; k < K; ++k) {
                    const double cov =
                        std::clamp(row + 0.5 - truth.at(k, b, a), 0.0, 1.0);
                    val += (means[static_cast<size_t>(k + 1)] - means[static_cast<size_t>(k)]) * cov;
                }
                unshifted.at(a, b, r0) = static_cast<float>(val);
            }
    if (spec.noise_sigma > 0.0) {
        for (auto& x : unshifted.intensities) {
            const double noisy = x * (1.0 + spec.noise_sigma * rng.gaussian());
            x = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
        }
    }

    // Inject the per-B-scan misalignment: content moves down by d_b, so the
    // volume-frame truth is truth_scanner + d_b.
    DisplacementVector injected(std::vector<double>(zero_mean_walk(rng, nb, spec.shift_range)));
    PhantomSample out;
    out.volume = OctVolume(na, nb, nr);
    out.volume.id = "phantom-" + std::to_string(spec.seed);
    for (int64_t a = 0; a < na; ++a)
        for (int64_t b = 0; b < nb; ++b) {
            const double db = injected.d[static_cast<size_t>(b)];
            for (int64_t r0 = 0; r0 < nr; ++r0) {
                double p = static_cast<double>(r0) - db;
                p = std::clamp(p, 0.0, R - 1.0);
                const int64_t i0 = static_cast<int64_t>(std::floor(p));
                const int64_t i1 = std::min(i0 + 1, nr - 1);
                const double f = p - static_cast<double>(i0);
                out.volume.at(a, b, r0) = static_cast<float>(
                    (1.0 - f) * unshifted.at(a, b, i0) + f * unshifted.at(a, b, i1));
            }
        }
    out.truth_scanner = truth;
    out.truth = apply_displacement_to_surfaces(truth, negated(injected));
    out.truth.names = truth.names;
    out.injected = injected;
    out.tag = has_drusen ? "amd" : "normal";
    return out;
}

DatasetManifest make_dataset(const PhantomSpec& spec, int64_t n_train, int64_t n_test,
                             const std::filesystem::path& out_dir) {
    spec.validate();
    if (n_train < 0 || n_test < 0 || n_train + n_test < 1)
        throw std::invalid_argument("make_dataset: need at least one sample");
    std::filesystem::create_directories(out_dir);

    json manifest;
    manifest["format"] = "SYNMAN1";
    manifest["seed"] = spec.seed;
    json jspec;
    jspec["n_a"] = spec.n_a;
    jspec["n_b"] = spec.n_b;
    jspec["n_r"] = spec.n_r;
    jspec["surfaces"] = spec.surfaces;
    jspec["smooth_cycles_a"] = spec.smooth_cycles_a;
    jspec["smooth_cycles_b"] = spec.smooth_cycles_b;
    jspec["drusen_count"] = spec.drusen_count;
    jspec["drusen_amp_lo"] = spec.drusen_amp_lo;
    jspec["drusen_amp_hi"] = spec.drusen_amp_hi;
    jspec["noise_sigma"] = spec.noise_sigma;
    jspec["shift_range"] = spec.shift_range;
    manifest["spec"] = jspec;
    manifest["samples"] = json::array();

    const int64_t total = n_train + n_test;
    for (int64_t i = 0; i < total; ++i) {
        PhantomSpec s = spec;
        s.seed = spec.seed * 1000003ull + static_cast<uint64_t>(i) + 1;
        // drusen on a subset of cases so both tags appear in the dataset
        if (i % 3 == 2) s.drusen_count = 0;
        PhantomSample sample = generate_phantom(s);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "case%03lld", static_cast<long long>(i));
        const std::string id(buf);
        sample.volume.id = id;
        const std::string vol_name = id + ".octv.json";
        const std::string surf_name = id + ".surf.json";
        io::write_octv(sample.volume, out_dir / vol_name);
        io::write_surf(sample.truth, out_dir / surf_name);

        json rec;
        rec["id"] = id;
        rec["split"] = i < n_train ? "train" : "test";
        rec["volume"] = vol_name;
        rec["surfaces"] = surf_name;
        rec["tag"] = sample.tag;
        rec["seed"] = s.seed;
        rec["injected_d"] = sample.injected.d;
        manifest["samples"].push_back(rec);
    }

    DatasetManifest m;
    m.path = out_dir / "manifest.json";
    m.n_train = n_train;
    m.n_test = n_test;
    io::write_text_file(m.path, manifest.dump(2) + "\n");
    return m;
}

} // namespace octseg::synth
