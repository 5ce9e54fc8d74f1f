#ifndef QMRI_CONFIG_HPP
#define QMRI_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qmri/acquisition.hpp"
#include "qmri/baselines.hpp"
#include "qmri/lorein.hpp"
#include "qmri/metrics.hpp"
#include "qmri/signal.hpp"

namespace qmri {

enum class Method { Lorein, ZeroFilled, LrtAdmm };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::Lorein: return "lorein";
        case Method::ZeroFilled: return "zero_filled";
        case Method::LrtAdmm: return "lrt_admm";
    }
    return "?";
}

inline Method method_from_name(const std::string& s) {
    if (s == "lorein") return Method::Lorein;
    if (s == "zero_filled") return Method::ZeroFilled;
    if (s == "lrt_admm") return Method::LrtAdmm;
    throw std::invalid_argument("unknown method '" + s + "' (expected lorein, zero_filled or lrt_admm)");
}

struct ExperimentConfig {
    // phantom
    Dims3 shape{64, 64, 8};
    std::uint64_t phantom_seed = 0;
    std::optional<std::pair<index_t, index_t>> crop;  // (z0, nz) taken after generation
    index_t coils = 8;
    // protocol
    SequenceKind sequence = SequenceKind::VfaMegre;
    index_t t2ir_segments = 20;
    // temporal basis
    index_t rank = 15;
    double basis_freq_max_hz = 10.0;
    double basis_freq_step_hz = 2.5;
    // sampling and noise
    MaskPattern pattern = MaskPattern::VariableDensity;
    std::vector<double> r_values{1.0, 12.0, 27.0, 48.0};
    std::array<index_t, 3> calib{3, 3, 3};
    double noise_rel = 0.005;  // sigma as a fraction of the peak k-space magnitude
    std::uint64_t seed = 0;     // drives mask, noise and network initialisation
    // methods
    std::vector<Method> methods{Method::ZeroFilled, Method::LrtAdmm, Method::Lorein};
    LoreinConfig lorein = LoreinConfig::dataset1();
    AdmmConfig admm{};
    std::vector<double> admm_lambda_factors{1e-4, 1e-3, 1e-2};
    NllsOptions nlls{};
    // output
    std::filesystem::path output_dir = "results";
    ClampTable clamps = default_clamps();

    SequenceProtocol protocol() const {
        return sequence == SequenceKind::VfaMegre ? dataset1_protocol() : dataset2_protocol(t2ir_segments);
    }

    Dims3 volume() const { return crop ? Dims3{shape.nx, shape.ny, crop->second} : shape; }

    void validate() const {
        if (methods.empty()) throw std::invalid_argument("config: at least one method is required");
        if (r_values.empty()) throw std::invalid_argument("config: at least one R value is required");
        for (double r : r_values)
            if (!(r >= 1.0)) throw std::invalid_argument("config: R values must be >= 1");
        if (!shape.valid()) throw std::invalid_argument("config: invalid phantom shape " + to_string(shape));
        if (crop && (crop->first < 0 || crop->second < 1 || crop->first + crop->second > shape.nz))
            throw std::invalid_argument("config: crop range outside the phantom");
        if (coils < 1) throw std::invalid_argument("config: coils must be >= 1");
        if (rank < 1) throw std::invalid_argument("config: rank must be >= 1");
        if (!(noise_rel >= 0)) throw std::invalid_argument("config: noise must be >= 0");
        if (admm_lambda_factors.empty()) throw std::invalid_argument("config: lrt_admm needs at least one lambda factor");
        for (const auto& [m, r] : clamps)
            if (!(r.first <= r.second)) throw std::invalid_argument("config: empty clamp for " + std::string(map_name(m)));
        lorein.validate();
        admm.validate();
    }
};

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void require_object(const nlohmann::json& j, const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::read_opt;
    ExperimentConfig c;
    try {
        detail::require_object(j, "<root>");
        if (j.contains("phantom")) {
            const auto& p = j.at("phantom");
            detail::require_object(p, "phantom");
            if (p.contains("shape")) {
                const auto s = p.at("shape").get<std::vector<index_t>>();
                if (s.size() != 3) throw std::invalid_argument("config: phantom.shape needs 3 entries");
                c.shape = {s[0], s[1], s[2]};
            }
            read_opt(p, "seed", c.phantom_seed);
            read_opt(p, "coils", c.coils);
            if (p.contains("crop") && !p.at("crop").is_null()) {
                const auto s = p.at("crop").get<std::vector<index_t>>();
                if (s.size() != 2) throw std::invalid_argument("config: phantom.crop needs [z0, nz]");
                c.crop = std::make_pair(s[0], s[1]);
            }
        }
        if (j.contains("protocol")) {
            const auto& p = j.at("protocol");
            detail::require_object(p, "protocol");
            const auto kind = p.value("kind", std::string("vfa_megre"));
            if (kind == "vfa_megre") c.sequence = SequenceKind::VfaMegre;
            else if (kind == "t2ir_gre") c.sequence = SequenceKind::T2irGre;
            else throw std::invalid_argument("config: unknown protocol kind '" + kind + "'");
            read_opt(p, "segments", c.t2ir_segments);
        }
        if (j.contains("basis")) {
            const auto& b = j.at("basis");
            detail::require_object(b, "basis");
            read_opt(b, "rank", c.rank);
            read_opt(b, "freq_max_hz", c.basis_freq_max_hz);
            read_opt(b, "freq_step_hz", c.basis_freq_step_hz);
        }
        if (j.contains("mask")) {
            const auto& m = j.at("mask");
            detail::require_object(m, "mask");
            if (m.contains("pattern")) c.pattern = mask_pattern_from_name(m.at("pattern").get<std::string>());
            read_opt(m, "R", c.r_values);
            if (m.contains("calib")) {
                const auto s = m.at("calib").get<std::vector<index_t>>();
                if (s.size() != 3) throw std::invalid_argument("config: mask.calib needs 3 entries");
                c.calib = {s[0], s[1], s[2]};
            }
        }
        read_opt(j, "noise", c.noise_rel);
        read_opt(j, "seed", c.seed);
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j.at("methods")) c.methods.push_back(method_from_name(m.get<std::string>()));
        }
        if (j.contains("lorein")) {
            const auto& l = j.at("lorein");
            detail::require_object(l, "lorein");
            auto& lc = c.lorein;
            if (l.value("schedule", std::string("dataset1")) == "dataset2") lc = LoreinConfig::dataset2();
            read_opt(l, "hidden_layers", lc.hidden_layers);
            read_opt(l, "hidden_width", lc.hidden_width);
            read_opt(l, "refine", lc.refine);
            read_opt(l, "pretrain_epochs", lc.pretrain_epochs);
            read_opt(l, "epochs", lc.epochs);
            read_opt(l, "decay_every", lc.decay_every);
            read_opt(l, "lr", lc.lr);
            read_opt(l, "decay", lc.decay);
            read_opt(l, "batch_size", lc.batch_size);
            read_opt(l, "prior_weight", lc.weights.prior_weight);
            read_opt(l, "dc1_weight", lc.weights.dc1_weight);
            read_opt(l, "dc2_weight", lc.weights.dc2_weight);
            if (l.contains("lambda"))
                for (const auto& [k, v] : l.at("lambda").items()) lc.weights.lambda_wnnm[map_from_name(k)] = v.get<double>();
            read_opt(l, "checkpoint_every", lc.checkpoint_every);
        }
        if (j.contains("lrt_admm")) {
            const auto& a = j.at("lrt_admm");
            detail::require_object(a, "lrt_admm");
            read_opt(a, "lambda_factors", c.admm_lambda_factors);
            read_opt(a, "rho", c.admm.rho);
            read_opt(a, "max_iters", c.admm.max_iters);
            read_opt(a, "cg_iters", c.admm.cg_iters);
            read_opt(a, "tol", c.admm.tol);
        }
        if (j.contains("nlls")) {
            const auto& n = j.at("nlls");
            detail::require_object(n, "nlls");
            read_opt(n, "t1_seeds", c.nlls.t1_seeds);
            read_opt(n, "max_iters", c.nlls.max_iters);
        }
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("clamp")) {
            c.clamps.clear();
            for (const auto& [k, v] : j.at("clamp").items()) {
                const auto r = v.get<std::vector<double>>();
                if (r.size() != 2) throw std::invalid_argument("config: clamp." + k + " needs [lo, hi]");
                c.clamps[map_from_name(k)] = {r[0], r[1]};
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j;
    j["phantom"] = {{"shape", {c.shape.nx, c.shape.ny, c.shape.nz}}, {"seed", c.phantom_seed}, {"coils", c.coils}};
    j["phantom"]["crop"] = c.crop ? nlohmann::ordered_json{c.crop->first, c.crop->second} : nlohmann::ordered_json();
    j["protocol"] = {{"kind", c.sequence == SequenceKind::VfaMegre ? "vfa_megre" : "t2ir_gre"},
                     {"segments", c.t2ir_segments}};
    j["basis"] = {{"rank", c.rank}, {"freq_max_hz", c.basis_freq_max_hz}, {"freq_step_hz", c.basis_freq_step_hz}};
    j["mask"] = {{"pattern", mask_pattern_name(c.pattern)},
                 {"R", c.r_values},
                 {"calib", {c.calib[0], c.calib[1], c.calib[2]}}};
    j["noise"] = c.noise_rel;
    j["seed"] = c.seed;
    std::vector<std::string> ms;
    for (auto m : c.methods) ms.push_back(method_name(m));
    j["methods"] = ms;
    const auto& l = c.lorein;
    nlohmann::ordered_json lam;
    for (const auto& [m, v] : l.weights.lambda_wnnm) lam[std::string(map_name(m))] = v;
    j["lorein"] = {{"hidden_layers", l.hidden_layers}, {"hidden_width", l.hidden_width},
                   {"refine", l.refine},               {"pretrain_epochs", l.pretrain_epochs},
                   {"epochs", l.epochs},               {"decay_every", l.decay_every},
                   {"lr", l.lr},                       {"decay", l.decay},
                   {"batch_size", l.batch_size},       {"prior_weight", l.weights.prior_weight},
                   {"dc1_weight", l.weights.dc1_weight}, {"dc2_weight", l.weights.dc2_weight},
                   {"lambda", lam},                    {"checkpoint_every", l.checkpoint_every}};
    j["lrt_admm"] = {{"lambda_factors", c.admm_lambda_factors}, {"rho", c.admm.rho}, {"max_iters", c.admm.max_iters},
                     {"cg_iters", c.admm.cg_iters}, {"tol", c.admm.tol}};
    j["nlls"] = {{"t1_seeds", c.nlls.t1_seeds}, {"max_iters", c.nlls.max_iters}};
    j["output_dir"] = c.output_dir.string();
    nlohmann::ordered_json cl;
    for (const auto& [m, r] : c.clamps) cl[std::string(map_name(m))] = {r.first, r.second};
    j["clamp"] = cl;
    return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("config: cannot open " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace qmri

#endif  // QMRI_CONFIG_HPP
