#ifndef QMRI_EXPERIMENT_HPP
#define QMRI_EXPERIMENT_HPP

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qmri/baselines.hpp"
#include "qmri/config.hpp"
#include "qmri/lorein.hpp"
#include "qmri/metrics.hpp"
#include "qmri/phantom.hpp"
#include "qmri/subspace.hpp"
#include "qmri/tensor_io.hpp"

namespace qmri {

namespace fs = std::filesystem;

inline std::string format_real(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

inline std::string r_label(double r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "R%g", r);
    return buf;
}

struct MetricRow {
    std::string method;
    double r = 0.0;
    std::string map;
    double nrmse = 0.0;
    double seconds = 0.0;
};

/// One row per (method, R, map). The CSV written by write_csv leaves out
/// wall-clock time so that identical runs produce identical files; times
/// go to write_timings.
struct MetricsTable {
    std::vector<MetricRow> rows;

    std::optional<double> find(const std::string& method, double r, const std::string& map) const {
        for (const auto& row : rows)
            if (row.method == method && row.r == r && row.map == map) return row.nrmse;
        return std::nullopt;
    }

    std::string csv() const {
        std::ostringstream os;
        os << "method,R,map,nrmse\n";
        for (const auto& row : rows)
            os << row.method << ',' << format_real(row.r) << ',' << row.map << ',' << format_real(row.nrmse) << '\n';
        return os.str();
    }

    void write_csv(const fs::path& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("MetricsTable: cannot write " + path.string());
        f << csv();
    }

    void write_timings(const fs::path& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("MetricsTable: cannot write " + path.string());
        f << "method,R,seconds\n";
        std::map<std::pair<std::string, double>, double> seen;
        for (const auto& row : rows) seen.emplace(std::make_pair(row.method, row.r), row.seconds);
        for (const auto& [key, s] : seen) f << key.first << ',' << format_real(key.second) << ',' << format_real(s) << '\n';
    }
};

struct CellFailure {
    std::string method;
    double r = 0.0;
    std::string message;
};

struct ExperimentResult {
    MetricsTable table;
    std::vector<CellFailure> failures;
    bool ok() const { return failures.empty(); }
};

/// Everything shared by the cells of one experiment.
struct Scenario {
    GroundTruth gt;
    SequenceProtocol protocol;
    WeightedImages iw;
    CoilMaps coils;
    TemporalBasis phi;
};

inline Scenario make_scenario(const ExperimentConfig& cfg) {
    cfg.validate();
    Scenario s;
    s.gt = make_phantom(cfg.shape, cfg.phantom_seed);
    if (cfg.crop) s.gt = crop_slices(s.gt, cfg.crop->first, cfg.crop->second);
    s.protocol = cfg.protocol();
    s.iw = simulate_signal(s.gt.maps, s.protocol);
    s.coils = make_coil_maps(s.gt.dims(), cfg.coils, cfg.phantom_seed);
    const auto grid = s.protocol.kind == SequenceKind::VfaMegre
                          ? vfa_offresonance_grid(cfg.basis_freq_max_hz, cfg.basis_freq_step_hz)
                          : t2ir_default_grid(cfg.basis_freq_max_hz, cfg.basis_freq_step_hz);
    s.phi = temporal_basis(build_dictionary(s.protocol, grid), cfg.rank);
    return s;
}

inline std::uint64_t cell_seed(std::uint64_t seed, double r, std::uint64_t salt) {
    return seed * 1000003ull + static_cast<std::uint64_t>(r * 1000.0) * 7919ull + salt;
}

/// Masked, noisy k-space for one acceleration factor.
inline KSpaceData simulate_kspace(const Scenario& s, const ExperimentConfig& cfg, double r) {
    const auto mask = make_mask(s.gt.dims(), s.protocol.frames(), cfg.pattern, r, cfg.calib, cell_seed(cfg.seed, r, 1));
    const auto clean = forward(s.iw, s.coils, mask);
    if (cfg.noise_rel == 0.0) return clean;
    return add_noise(clean, cfg.noise_rel * peak_magnitude(clean), cell_seed(cfg.seed, r, 2));
}

/// Maps scored for a protocol; phase maps are not scored.
inline std::vector<MapType> scored_maps(const SequenceProtocol& p) {
    if (p.kind == SequenceKind::VfaMegre) return {MapType::A, MapType::T1, MapType::T2s};
    return {MapType::A, MapType::B, MapType::T1, MapType::T2, MapType::T2s};
}

struct CellOutput {
    ParametricMaps maps;
    std::optional<CoilMaps> coils;
    std::optional<WeightedImages> images;
    std::vector<std::pair<std::string, double>> notes;  // written to notes.csv
    std::vector<LossTerms> loss_trace;
};

using LogFn = std::function<void(const std::string&)>;

namespace detail {

inline double relaxation_score(const ParametricMaps& pred, const Scenario& s, const ClampTable& clamps) {
    double acc = 0.0;
    int n = 0;
    for (auto m : scored_maps(s.protocol)) {
        if (m == MapType::A || m == MapType::B) continue;
        acc += nrmse(pred, s.gt.maps, m, clamps, s.gt.brain_mask);
        ++n;
    }
    return acc / n;
}

inline void save_maps(const fs::path& dir, const ParametricMaps& maps, const SequenceProtocol& p) {
    for (auto m : p.active_maps()) save_volume(dir / ("map_" + std::string(map_name(m))), maps[m]);
}

inline ParametricMaps load_maps(const fs::path& dir, const SequenceProtocol& p, Dims3 d) {
    ParametricMaps maps(d);
    for (auto m : p.active_maps()) {
        maps[m] = load_volume(dir / ("map_" + std::string(map_name(m))));
        require_same_dims(maps[m].dims(), d, "load_maps " + std::string(map_name(m)));
    }
    return maps;
}

inline Volume<double> mask_as_real(const Volume<std::uint8_t>& m) {
    Volume<double> v(m.dims());
    for (index_t i = 0; i < m.size(); ++i) v[i] = m[i];
    return v;
}

inline Volume<std::uint8_t> mask_from_real(const Volume<double>& v) {
    Volume<std::uint8_t> m(v.dims());
    for (index_t i = 0; i < v.size(); ++i) m[i] = v[i] != 0.0;
    return m;
}

}  // namespace detail

inline CellOutput run_method(Method method, const Scenario& s, const KSpaceData& ks, const ExperimentConfig& cfg,
                             const LogFn& log = {}, const fs::path& checkpoint_dir = {}) {
    CellOutput out;
    switch (method) {
        case Method::ZeroFilled: {
            auto iw = recon_zero_filled(ks, s.coils, s.phi);
            iw.protocol = s.protocol;
            auto fit = fit_maps_nlls(iw, s.protocol, std::nullopt, &s.gt.brain_mask, cfg.nlls);
            out.maps = std::move(fit.maps);
            out.notes.push_back({"nlls_nonconverged", static_cast<double>(fit.nonconverged)});
            out.images = std::move(iw);
            break;
        }
        case Method::LrtAdmm: {
            const double scale = admm_lambda_scale(ks, s.coils, s.phi);
            double best = std::numeric_limits<double>::infinity();
            for (double f : cfg.admm_lambda_factors) {
                AdmmConfig a = cfg.admm;
                a.lambda_tv = f * scale;
                AdmmTrace trace;
                const auto u = recon_lrt_admm(ks, s.coils, s.phi, a, &trace);
                auto iw = compose_weighted(u, s.phi, s.protocol);
                auto fit = fit_maps_nlls(iw, s.protocol, std::nullopt, &s.gt.brain_mask, cfg.nlls);
                const double score = detail::relaxation_score(fit.maps, s, cfg.clamps);
                if (log)
                    log("  lrt_admm lambda factor " + format_real(f) + ": " + std::to_string(trace.iterations) +
                        " iterations, mean relaxation NRMSE " + format_real(score));
                out.notes.push_back({"score_lambda_factor_" + format_real(f), score});
                if (score < best) {
                    best = score;
                    out.maps = std::move(fit.maps);
                    out.images = std::move(iw);
                    out.notes.erase(std::remove_if(out.notes.begin(), out.notes.end(),
                                                   [](const auto& n) { return n.first.rfind("best_", 0) == 0; }),
                                    out.notes.end());
                    out.notes.push_back({"best_lambda_factor", f});
                    out.notes.push_back({"best_lambda_tv", a.lambda_tv});
                }
            }
            break;
        }
        case Method::Lorein: {
            LoreinConfig lc = cfg.lorein;
            lc.seed = cfg.seed;
            if (log)
                lc.on_epoch = [&](int e, const LossTerms& l) {
                    if (e % 20 == 0)
                        log("  lorein epoch " + std::to_string(e) + ": dc1 " + format_real(l.dc1) + " dc2 " +
                            format_real(l.dc2) + " prior " + format_real(l.prior) + " wnnm " + format_real(l.wnnm));
                };
            if (lc.checkpoint_every > 0 && !checkpoint_dir.empty())
                lc.on_checkpoint = [&](int e, const ParamList<float>& params) {
                    save_params(checkpoint_dir / ("epoch_" + std::to_string(e)), params);
                };
            auto r = train(ks, s.phi, s.protocol, lc);
            out.maps = std::move(r.maps);
            out.coils = std::move(r.coil_maps);
            out.images = std::move(r.weighted_pmr);
            out.loss_trace = std::move(r.loss_trace);
            break;
        }
    }
    return out;
}

inline void save_ground_truth(const fs::path& dir, const Scenario& s) {
    detail::save_maps(dir, s.gt.maps, s.protocol);
    save_volume(dir / "brain_mask", detail::mask_as_real(s.gt.brain_mask));
    save_stack(dir / "coils", s.coils.maps, "C");
}

inline void save_kspace(const fs::path& dir, const KSpaceData& ks) {
    const auto d = ks.dims;
    Tensor t{{ks.frames, ks.coils, d.nx, d.ny, d.nz}, {"T", "C", "H", "W", "D"}, true, {}};
    t.values.reserve(2 * ks.data.size());
    for (const auto& x : ks.data) {
        t.values.push_back(static_cast<float>(x.real()));
        t.values.push_back(static_cast<float>(x.imag()));
    }
    save_tensor(dir / "kspace", t);
    Tensor m{{ks.frames, d.nx, d.ny, d.nz}, {"T", "H", "W", "D"}, false, {}};
    m.values.reserve(ks.mask.bits.size());
    for (auto b : ks.mask.bits.values()) m.values.push_back(b ? 1.0f : 0.0f);
    save_tensor(dir / "mask", m);
}

inline KSpaceData load_kspace(const fs::path& dir) {
    const auto t = load_tensor(dir / "kspace");
    const auto m = load_tensor(dir / "mask");
    if (t.shape.size() != 5 || !t.is_complex) throw std::runtime_error("load_kspace: " + (dir / "kspace").string() + " is not [T,C,H,W,D] complex");
    if (m.shape.size() != 4 || m.is_complex || m.shape[0] != t.shape[0] || m.shape[1] != t.shape[2] ||
        m.shape[2] != t.shape[3] || m.shape[3] != t.shape[4])
        throw std::runtime_error("load_kspace: " + (dir / "mask").string() + " does not match the k-space shape");
    const Dims3 d{t.shape[2], t.shape[3], t.shape[4]};
    SamplingMask mask;
    mask.dims = d;
    mask.frames = t.shape[0];
    mask.bits = Stack<std::uint8_t>(d, mask.frames);
    for (index_t i = 0; i < mask.bits.size(); ++i) mask.bits[i] = m.values[static_cast<std::size_t>(i)] != 0.0f;
    KSpaceData ks(d, t.shape[1], t.shape[0], std::move(mask));
    for (std::size_t i = 0; i < ks.data.size(); ++i) ks.data[i] = {t.values[2 * i], t.values[2 * i + 1]};
    return ks;
}

/// Scores a cell directory against the saved ground truth. Coil rows are
/// added when the cell holds predicted coil maps.
inline std::vector<MetricRow> score_cell(const fs::path& root, const std::string& method, double r,
                                         const SequenceProtocol& protocol, const ClampTable& clamps) {
    const fs::path gt_dir = root / "ground_truth", cell = root / r_label(r) / method;
    const auto mask = detail::mask_from_real(load_volume(gt_dir / "brain_mask"));
    const auto gt = detail::load_maps(gt_dir, protocol, mask.dims());
    const auto pred = detail::load_maps(cell, protocol, mask.dims());
    double secs = 0.0;
    if (std::ifstream f(cell / "seconds.txt"); f) f >> secs;
    std::vector<MetricRow> rows;
    for (auto m : scored_maps(protocol))
        rows.push_back({method, r, std::string(map_name(m)), nrmse(pred, gt, m, clamps, mask), secs});
    if (fs::exists(cell / "coils.json")) {
        const CoilMaps pc{load_stack(cell / "coils")}, gc{load_stack(gt_dir / "coils")};
        rows.push_back({method, r, "coils", coil_nrmse(pc, gc, mask), secs});
    }
    return rows;
}

/// Writes the config, ground truth and per-R k-space under cfg.output_dir.
inline void simulate_stage(const ExperimentConfig& cfg, const LogFn& log = {}) {
    const auto s = make_scenario(cfg);
    const fs::path root = cfg.output_dir;
    fs::create_directories(root);
    {
        std::ofstream f(root / "config.json");
        if (!f) throw std::runtime_error("cannot write " + (root / "config.json").string());
        f << config_to_json(cfg).dump(2) << '\n';
    }
    save_ground_truth(root / "ground_truth", s);
    for (double r : cfg.r_values) {
        if (log) log("simulating " + r_label(r));
        save_kspace(root / r_label(r), simulate_kspace(s, cfg, r));
    }
}

/// Reconstructs every (method, R) cell from the saved k-space. Each cell
/// writes only inside its own directory; a failure leaves failure.txt there.
inline std::vector<CellFailure> recon_stage(const ExperimentConfig& cfg, const LogFn& log = {}) {
    const auto s = make_scenario(cfg);
    const fs::path root = cfg.output_dir;
    std::vector<CellFailure> failures;
    for (double r : cfg.r_values) {
        const fs::path rdir = root / r_label(r);
        const auto ks = load_kspace(rdir);
        for (auto method : cfg.methods) {
            const std::string name = method_name(method);
            const fs::path cell = rdir / name;
            if (log) log(name + " at " + r_label(r));
            const auto t0 = std::chrono::steady_clock::now();
            fs::remove_all(cell);
            fs::create_directories(cell);
            try {
                const auto out = run_method(method, s, ks, cfg, log, cell / "checkpoints");
                const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                detail::save_maps(cell, out.maps, s.protocol);
                if (out.coils) save_stack(cell / "coils", out.coils->maps, "C");
                if (out.images) save_stack(cell / "images", out.images->data, "T");
                std::ofstream(cell / "seconds.txt") << format_real(secs) << '\n';
                std::ofstream notes(cell / "notes.csv");
                notes << "key,value\n";
                for (const auto& [k, v] : out.notes) notes << k << ',' << format_real(v) << '\n';
                if (!out.loss_trace.empty()) {
                    std::ofstream f(cell / "loss_trace.csv");
                    f << "epoch,dc1,dc2,prior,wnnm\n";
                    for (std::size_t e = 0; e < out.loss_trace.size(); ++e) {
                        const auto& l = out.loss_trace[e];
                        f << e << ',' << format_real(l.dc1) << ',' << format_real(l.dc2) << ',' << format_real(l.prior)
                          << ',' << format_real(l.wnnm) << '\n';
                    }
                }
            } catch (const std::exception& e) {
                if (log) log("  FAILED: " + std::string(e.what()));
                std::ofstream(cell / "failure.txt") << e.what() << '\n';
                failures.push_back({name, r, e.what()});
            }
        }
    }
    return failures;
}

/// Scores every cell under a result directory and writes metrics.csv,
/// timings.csv and, when any cell failed or is missing, failures.csv.
inline ExperimentResult eval_stage(const fs::path& root, const LogFn& log = {}) {
    if (!fs::exists(root / "config.json")) throw std::runtime_error("eval: missing " + (root / "config.json").string());
    const auto cfg = load_config(root / "config.json");
    ExperimentResult result;
    for (double r : cfg.r_values)
        for (auto m : cfg.methods) {
            const std::string name = method_name(m);
            const auto cell = root / r_label(r) / name;
            if (std::ifstream f(cell / "failure.txt"); f) {
                std::string msg;
                std::getline(f, msg);
                result.failures.push_back({name, r, msg});
                continue;
            }
            try {
                auto rows = score_cell(root, name, r, cfg.protocol(), cfg.clamps);
                for (const auto& row : rows)
                    if (log) log(name + " " + r_label(r) + " " + row.map + " NRMSE " + format_real(row.nrmse));
                result.table.rows.insert(result.table.rows.end(), rows.begin(), rows.end());
            } catch (const std::exception& e) {
                result.failures.push_back({name, r, e.what()});
            }
        }
    result.table.write_csv(root / "metrics.csv");
    result.table.write_timings(root / "timings.csv");
    fs::remove(root / "failures.csv");
    if (!result.failures.empty()) {
        std::ofstream f(root / "failures.csv");
        f << "method,R,message\n";
        for (const auto& x : result.failures) {
            std::string msg = x.message;
            std::replace(msg.begin(), msg.end(), '"', '\'');
            f << x.method << ',' << format_real(x.r) << ",\"" << msg << "\"\n";
        }
    }
    return result;
}

/// simulate, reconstruct and score in one go. Reconstructions always read
/// the k-space back from disk so a staged run gives the same numbers.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const LogFn& log = {}) {
    simulate_stage(cfg, log);
    recon_stage(cfg, log);
    return eval_stage(cfg.output_dir, log);
}

}  // namespace qmri

#endif  // QMRI_EXPERIMENT_HPP
