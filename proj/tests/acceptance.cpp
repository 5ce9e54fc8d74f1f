#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "fd_check.hpp"
#include "qmri/experiment.hpp"

using namespace qmri;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome(const fs::path&)> run;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void quiet(const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); }

// 1 ------------------------------------------------------------------------

Outcome operator_adjoint(const fs::path&) {
    const Dims3 d{16, 12, 4};
    const index_t frames = 6, n_coils = 3;
    const auto cm = make_coil_maps(d, n_coils, 1);
    double worst = 0.0;
    int trials = 0;
    for (auto pattern : {MaskPattern::Full, MaskPattern::UniformRandom, MaskPattern::VariableDensity,
                         MaskPattern::ComplementaryShift})
        for (int t = 0; t < 10; ++t, ++trials) {
            std::mt19937_64 rng(1000 + trials);
            std::normal_distribution<double> g;
            const auto mask = make_mask(d, frames, pattern, 4.0, {4, 4, 4}, 100 + t);
            WeightedImages x{Stack<cplx>(d, frames), std::nullopt};
            for (auto& v : x.data.values()) v = {g(rng), g(rng)};
            KSpaceData y(d, n_coils, frames, mask);
            for (index_t f = 0; f < frames; ++f)
                for (index_t c = 0; c < n_coils; ++c) {
                    auto s = y.at(f, c);
                    for (index_t v = 0; v < d.voxels(); ++v)
                        if (mask(f, v)) s[v] = {g(rng), g(rng)};
                }
            const auto ax = forward(x, cm, mask);
            const auto aty = adjoint(y, cm);
            cplx lhs{}, rhs{};
            for (std::size_t i = 0; i < ax.data.size(); ++i) lhs += std::conj(ax.data[i]) * y.data[i];
            for (index_t i = 0; i < x.data.size(); ++i) rhs += std::conj(x.data[i]) * aty.data[i];
            worst = std::max(worst, std::abs(lhs - rhs) / std::abs(lhs));
        }
    return {worst < 1e-6, std::to_string(trials) + " trials, worst rel err " + fmt("%.2e", worst)};
}

// 2 ------------------------------------------------------------------------

Outcome bloch_identities(const fs::path&) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double t2 = 30 + 200 * u(rng), tau = 10 + 80 * u(rng);
        const VoxelParams<double> p{0.5 + u(rng), std::exp(tau / t2), 400 + 3000 * u(rng), t2, 10 + 100 * u(rng),
                                    u(rng), 20 * u(rng) - 10};
        const double flip = 3 + 20 * u(rng);
        const auto t2ir = SequenceProtocol::t2ir_gre(30.0, {4.5, 11.2}, {tau}, flip, 5);
        const auto vfa = SequenceProtocol::vfa_megre(30.0, {4.5, 11.2}, {flip});
        const FrameTable<double> ta(t2ir), tb(vfa);
        for (index_t t = 0; t < t2ir.frames(); ++t)
            worst = std::max(worst, std::abs(frame_signal(ta, t, p) - frame_signal(tb, t2ir.frame(t).echo, p)));
    }
    ParametricMaps m({1, 1, 1});
    m.a[0] = 2.0;
    m.b[0] = 1.0;
    m.t1[0] = 800.0;
    m.t2[0] = m.t2s[0] = 40.0;
    const double s = std::abs(signal_vfa_megre(m, SequenceProtocol::vfa_megre(1e6, {40.0}, {90.0})).data(0, 0));
    const double closed = std::abs(s - 2.0 * std::exp(-1.0));
    return {worst < 1e-12 && closed < 1e-6,
            "reduction max err " + fmt("%.2e", worst) + ", closed form err " + fmt("%.2e", closed)};
}

// 3 ------------------------------------------------------------------------

Outcome subspace_fidelity(const fs::path&) {
    const auto proto = dataset1_protocol();
    const auto dict = build_dictionary(proto, vfa_default_grid());
    const auto basis = temporal_basis(dict, 15);
    const Eigen::MatrixXcd gram = dict.adjoint() * dict;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(gram);
    const Eigen::VectorXd ev = es.eigenvalues().reverse();
    const double oracle = ev.head(15).sum() / gram.trace().real();
    const double energy = basis.captured_energy(15);

    const auto gt = make_phantom({32, 32, 8}, 1);
    const auto iw = simulate_signal(gt.maps, proto);
    const auto phi = temporal_basis(build_dictionary(proto, vfa_offresonance_grid(10.0, 2.5)), 15);
    const auto rt = compose_weighted(project_to_subspace(iw, phi), phi);
    double num = 0, den = 0;
    for (index_t i = 0; i < rt.size(); ++i) {
        num += std::norm(rt[i] - iw.data[i]);
        den += std::norm(iw.data[i]);
    }
    const double err = std::sqrt(num / den);
    const bool ok = energy > 0.999 && std::abs(energy - oracle) < 1e-9 && phi.captured_energy(15) > 0.999 && err < 1e-3;
    return {ok, "energy " + fmt("%.10f", energy) + " (oracle " + fmt("%.10f", oracle) + "), off-resonance basis " +
                    fmt("%.8f", phi.captured_energy(15)) + ", round trip " + fmt("%.2e", err)};
}

// 4 ------------------------------------------------------------------------

struct SmallProblem {
    Dims3 dims{4, 4, 2};
    SequenceProtocol protocol = SequenceProtocol::vfa_megre(46.0, {2.15, 5.2, 8.25}, {10.0, 30.0});
    TemporalBasis phi;
    KSpaceData ks;
};

SmallProblem small_problem() {
    SmallProblem p;
    ParametricMaps maps(p.dims);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (index_t v = 0; v < p.dims.voxels(); ++v) {
        maps.a[v] = 0.6 + 0.4 * u(rng);
        maps.b[v] = 1.0;
        maps.t1[v] = 800 + 1500 * u(rng);
        maps.t2[v] = 80;
        maps.t2s[v] = 30 + 40 * u(rng);
        maps.phi0[v] = 0.3 * u(rng);
        maps.freq[v] = 4 * u(rng) - 2;
    }
    const auto truth = simulate_signal(maps, p.protocol);
    p.phi = temporal_basis(build_dictionary(p.protocol, vfa_offresonance_grid(5.0, 2.5)), 3);
    const auto coils = make_coil_maps(p.dims, 2, 2);
    const auto mask = make_mask(p.dims, p.protocol.frames(), MaskPattern::UniformRandom, 2.0, {2, 2, 2}, 3);
    p.ks = add_noise(forward(truth, coils, mask), 0.01, 4);
    return p;
}

void perturb(const ParamList<double>& params, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 0.3);
    for (const auto& p : params) {
        const bool table = p.name.find(".table") != std::string::npos;
        const bool refiner_out = p.name.rfind("lrr.refiner.out", 0) == 0;
        if (table || refiner_out)
            for (auto& v : p.value) v = g(rng);
    }
}

Outcome differentiation(const fs::path&) {
    const auto prob = small_problem();
    struct Term {
        const char* name;
        double dc1, dc2, prior;
        bool wnnm;
        double tol;
        LoreinModel<double>::Stage stage;
    };
    const std::vector<Term> terms{{"dc1", 1, 0, 0, false, 1e-4, LoreinModel<double>::Stage::Pretrain},
                                  {"dc2", 0, 1, 0, false, 1e-4, LoreinModel<double>::Stage::Joint},
                                  {"prior", 0, 0, 1, false, 1e-4, LoreinModel<double>::Stage::Joint},
                                  {"wnnm", 0, 0, 0, true, 1e-3, LoreinModel<double>::Stage::Joint}};
    bool ok = true;
    std::string detail;
    std::uint64_t seed = 1;
    for (const auto& t : terms) {
        LoreinConfig c;
        c.hidden_layers = 1;
        c.hidden_width = 6;
        c.refiner.width = 4;
        c.refiner.bottleneck = 6;
        c.refiner.attention_hidden = 3;
        c.batch_size = 13;
        c.seed = 5;
        c.weights.dc1_weight = t.dc1;
        c.weights.dc2_weight = t.dc2;
        c.weights.prior_weight = t.prior;
        if (!t.wnnm)
            for (auto& [m, l] : c.weights.lambda_wnnm) l = 0.0;
        LoreinModel<double> model(prob.ks, prob.phi, prob.protocol, c);
        perturb(model.lrr_params(), seed++);
        perturb(model.pmr_params(), seed++);
        ParamList<double> all = model.lrr_params();
        for (const auto& p : model.pmr_params()) all.push_back(p);
        zero_grads(all);
        model.evaluate(t.stage, true);
        model.freeze_wnnm(true);
        const auto probes = fdcheck::probe(all, [&] { return model.evaluate(t.stage, false).total(); }, 3, 21, 1e-5);
        model.freeze_wnnm(false);
        double worst = 0.0;
        bool lrr = false, pmr = false;
        for (const auto& p : probes) (p.block.rfind("lrr", 0) == 0 ? lrr : pmr) = true;
        for (const auto& [block, err] : fdcheck::block_errors(probes)) worst = std::max(worst, err);
        const bool need_lrr = t.dc1 + t.dc2 + t.prior > 0, need_pmr = t.dc2 + t.prior > 0 || t.wnnm;
        const bool term_ok = worst < t.tol && (!need_lrr || lrr) && (!need_pmr || pmr);
        ok = ok && term_ok;
        detail += std::string(detail.empty() ? "" : ", ") + t.name + " " + fmt("%.1e", worst) + " [" +
                  (need_lrr ? "lrr" : "") + (need_lrr && need_pmr ? "," : "") + (need_pmr ? "pmr" : "") + "]";
    }
    return {ok, detail};
}

// 5 ------------------------------------------------------------------------

Outcome identifiability(const fs::path& work) {
    ExperimentConfig c;
    c.pattern = MaskPattern::Full;
    c.r_values = {1.0};
    c.noise_rel = 0.0;
    c.methods = {Method::ZeroFilled};
    c.output_dir = work / "c5_identifiability";
    const auto r = run_experiment(c, quiet);
    if (!r.ok()) return {false, "cell failed: " + r.failures[0].message};
    bool ok = true;
    std::string detail;
    for (const char* m : {"t1", "t2s", "a"}) {
        const double v = r.table.find("zero_filled", 1.0, m).value_or(1.0);
        ok = ok && v < 0.005;
        detail += std::string(detail.empty() ? "" : ", ") + m + " " + fmt("%.2e", v);
    }
    return {ok, detail};
}

// 6 ------------------------------------------------------------------------

Outcome overfit(const fs::path&) {
    const auto gt = crop_slices(make_phantom({16, 16, 8}, 0), 2, 4);
    const auto proto = dataset1_protocol();
    const auto coils = make_coil_maps(gt.dims(), 1, 0);
    const auto mask = make_mask(gt.dims(), proto.frames(), MaskPattern::Full, 1.0, {0, 0, 0}, 0);
    const auto ks = forward(simulate_signal(gt.maps, proto), coils, mask);
    const auto phi = temporal_basis(build_dictionary(proto, vfa_offresonance_grid(10.0, 2.5)), 15);
    const auto r = train(ks, phi, proto, LoreinConfig::dataset1());
    const double s2 = ks.squared_norm();
    const double dc1 = loss_dc(r.weighted_lrr, r.coil_maps, ks) / s2, dc2 = loss_dc(r.weighted_pmr, r.coil_maps, ks) / s2;
    return {dc1 < 1e-4 && dc2 < 1e-4, "dc1/|S|^2 " + fmt("%.2e", dc1) + ", dc2/|S|^2 " + fmt("%.2e", dc2) +
                                          " after " + std::to_string(r.epochs_run) + " epochs"};
}

// 7, 8 ---------------------------------------------------------------------

ExperimentConfig desk(std::uint64_t seed, const fs::path& dir) {
    ExperimentConfig c;
    c.seed = seed;
    c.r_values = {12.0, 27.0};
    c.methods = {Method::ZeroFilled, Method::LrtAdmm, Method::Lorein};
    c.output_dir = dir;
    return c;
}

fs::path desk_dir(const fs::path& work, std::uint64_t seed) { return work / ("c7_desk_seed" + std::to_string(seed)); }

Outcome comparative(const fs::path& work) {
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : {0u, 1u}) {
        const auto r = run_experiment(desk(seed, desk_dir(work, seed)), quiet);
        if (!r.ok()) return {false, "seed " + std::to_string(seed) + " cell failed: " + r.failures[0].message};
        for (double rr : {12.0, 27.0})
            for (const char* m : {"t1", "t2s"}) {
                const double lo = *r.table.find("lorein", rr, m), ad = *r.table.find("lrt_admm", rr, m),
                             zf = *r.table.find("zero_filled", rr, m);
                const bool cell = lo < ad && ad < zf && lo <= 0.8 * ad;
                ok = ok && cell;
                detail += std::string(detail.empty() ? "" : "; ") + "s" + std::to_string(seed) + " R" + r_label(rr) +
                          " " + m + " " + fmt("%.3f", lo) + "/" + fmt("%.3f", ad) + "/" + fmt("%.3f", zf) +
                          (cell ? "" : "!");
            }
    }
    return {ok, "lorein/admm/zf " + detail};
}

Outcome coil_estimation(const fs::path& work) {
    const auto dir = desk_dir(work, 0);
    std::optional<double> v;
    if (fs::exists(dir / "R12" / "lorein" / "coils.json")) v = eval_stage(dir).table.find("lorein", 12.0, "coils");
    if (!v) {
        auto c = desk(0, work / "c8_coils");
        c.r_values = {12.0};
        c.methods = {Method::Lorein};
        const auto r = run_experiment(c, quiet);
        if (!r.ok()) return {false, "cell failed: " + r.failures[0].message};
        v = r.table.find("lorein", 12.0, "coils");
    }
    if (!v) return {false, "no coil row"};
    return {*v < 0.10, "coil NRMSE " + fmt("%.4f", *v)};
}

// 9 ------------------------------------------------------------------------

Outcome reproducibility(const fs::path& work) {
    auto make = [&](const char* tag) {
        ExperimentConfig c;
        c.shape = {32, 32, 8};
        c.coils = 4;
        c.r_values = {12.0};
        c.methods = {Method::ZeroFilled, Method::LrtAdmm, Method::Lorein};
        c.seed = 3;
        c.output_dir = work / (std::string("c9_repro_") + tag);
        return c;
    };
    const auto a = make("a"), b = make("b");
    const auto ra = run_experiment(a, quiet), rb = run_experiment(b, quiet);
    if (!ra.ok() || !rb.ok()) return {false, "a cell failed"};
    const auto fa = slurp(a.output_dir / "metrics.csv"), fb = slurp(b.output_dir / "metrics.csv");
    const bool same = !fa.empty() && fa == fb && ra.table.csv() == rb.table.csv();
    return {same, std::to_string(ra.table.rows.size()) + " rows, metrics.csv " + (same ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::vector<int> only;
    std::string work = "acceptance_runs";
    app.add_option("--only", only, "criterion ids to run")->check(CLI::Range(1, 9));
    app.add_option("--work", work, "directory for experiment artifacts");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> all{
        {1, "operator adjoint", 10, operator_adjoint},
        {2, "bloch identities", 60, bloch_identities},
        {3, "subspace fidelity", 60, subspace_fidelity},
        {4, "finite-difference gradients", 120, differentiation},
        {5, "noiseless identifiability", 900, identifiability},
        {6, "overfit 16x16x4", 600, overfit},
        {7, "comparative ordering R12/R27", 7200, comparative},
        {8, "coil self-estimation", 1800, coil_estimation},
        {9, "reproducibility", 3600, reproducibility},
    };
    fs::create_directories(work);
    int failed = 0;
    for (const auto& c : all) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(work);
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > c.budget_s) {
            o.pass = false;
            o.detail += ", over budget " + fmt("%.0f", c.budget_s) + " s";
        }
        failed += !o.pass;
        std::printf("%s [%d] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
