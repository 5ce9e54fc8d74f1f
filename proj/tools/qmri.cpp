#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qmri/figures.hpp"

namespace {

qmri::ExperimentConfig resolve(const std::string& config_path, std::optional<std::uint64_t> seed,
                               const std::string& out, const std::string& method, std::optional<double> r) {
    auto cfg = config_path.empty() ? qmri::ExperimentConfig{} : qmri::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.output_dir = out;
    if (!method.empty()) cfg.methods = {qmri::method_from_name(method)};
    if (r) cfg.r_values = {*r};
    cfg.validate();
    return cfg;
}

void check_device() {
    const char* dev = std::getenv("QMRI_DEVICE");
    if (dev && std::string(dev) != "cpu")
        throw std::invalid_argument(std::string("QMRI_DEVICE='") + dev + "' is not available; only 'cpu' is supported");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Simulate, reconstruct and score quantitative MRI experiments"};
    app.require_subcommand(1);
    std::string config_path, out, method;
    std::optional<std::uint64_t> seed;
    std::optional<double> r;
    auto add_common = [&](CLI::App* sub, bool filters) {
        sub->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "seed for masks, noise and network initialisation");
        sub->add_option("--out", out, "result directory");
        if (filters) {
            sub->add_option("--method", method, "only this method (lorein, zero_filled, lrt_admm)");
            sub->add_option("--R", r, "only this acceleration factor");
        }
    };
    auto* simulate = app.add_subcommand("simulate", "write ground truth and undersampled k-space");
    auto* recon = app.add_subcommand("recon", "reconstruct every (method, R) cell from saved k-space");
    auto* eval = app.add_subcommand("eval", "score saved reconstructions into metrics.csv");
    auto* figures = app.add_subcommand("figures", "write one SVG per map type");
    auto* all = app.add_subcommand("all", "simulate, recon, eval and figures");
    add_common(simulate, false);
    add_common(recon, true);
    add_common(eval, false);
    add_common(figures, false);
    add_common(all, true);
    CLI11_PARSE(app, argc, argv);

    const auto log = [](const std::string& s) { std::cerr << s << '\n'; };
    try {
        check_device();
        if (*simulate) {
            qmri::simulate_stage(resolve(config_path, seed, out, "", std::nullopt), log);
            return 0;
        }
        if (*recon) {
            const auto failures = qmri::recon_stage(resolve(config_path, seed, out, method, r), log);
            return failures.empty() ? 0 : 1;
        }
        const auto root_of = [&] {
            if (!out.empty()) return std::filesystem::path(out);
            return std::filesystem::path(resolve(config_path, seed, out, "", std::nullopt).output_dir);
        };
        if (*eval) {
            const auto res = qmri::eval_stage(root_of(), log);
            std::cout << res.table.csv();
            return res.ok() ? 0 : 1;
        }
        if (*figures) {
            for (const auto& p : qmri::emit_figures(root_of())) std::cout << p.string() << '\n';
            return 0;
        }
        const auto cfg = resolve(config_path, seed, out, method, r);
        const auto res = qmri::run_experiment(cfg, log);
        std::cout << res.table.csv();
        if (res.ok()) qmri::emit_figures(cfg.output_dir);
        return res.ok() ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "qmri: " << e.what() << '\n';
        return 2;
    }
}
