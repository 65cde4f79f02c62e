#include <cstdlib>
#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include <clab/experiment.hpp>

namespace {

// Relative output paths land under CLAB_OUTPUT_ROOT when it is set.
std::string resolve_output(const std::string& dir) {
    const char* root = std::getenv("CLAB_OUTPUT_ROOT");
    if (root == nullptr || dir.empty() || clab::fs::path(dir).is_absolute()) { return dir; }
    return (clab::fs::path(root) / dir).string();
}

int run_from_config(const std::string& config_path, bool force,
                    const std::set<std::string>& allowed_kinds) {
    nlohmann::json raw;
    clab::ExperimentConfig cfg;
    try {
        std::ifstream is(config_path);
        if (!is) { throw std::invalid_argument("cannot open config: " + config_path); }
        is >> raw;
        cfg = clab::parse_experiment(raw);
        cfg.output_dir = resolve_output(cfg.output_dir);
        if (!allowed_kinds.empty() && allowed_kinds.count(clab::to_string(cfg.kind)) == 0) {
            throw std::invalid_argument("experiment kind \"" + clab::to_string(cfg.kind) +
                                        "\" does not belong to this subcommand");
        }
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    try {
        auto dir = clab::run_experiment(cfg, raw, {force});
        std::cout << "completed: " << dir.string() << "\n";
        return 0;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"collatz transformer lab"};
    app.require_subcommand(1);

    // accepted for interface compatibility; all work is single-threaded
    int jobs = 1;
    if (const char* j = std::getenv("CLAB_JOBS")) { jobs = std::atoi(j); }
    (void)jobs;

    std::string config_path, dir;
    bool force = false;

    auto add_config_cmd = [&](const char* name, const char* desc) {
        auto* cmd = app.add_subcommand(name, desc);
        cmd->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
        cmd->add_flag("-f,--force", force, "overwrite an existing output directory");
        return cmd;
    };

    auto* train = add_config_cmd("train", "single training run (baseline / multi_seed)");
    auto* sweep = add_config_cmd(
        "sweep", "sweep family (base_sweep / depth_sweep / distribution_ablation / carry_exposure)");
    auto* intervene =
        add_config_cmd("intervene", "causal interventions (transplant / rewind / transfer)");
    auto* probe = add_config_cmd("probe", "linear probe scan over stored checkpoints");
    auto* erase = add_config_cmd("erase", "representation-erasure scan over stored checkpoints");

    auto* entropy = app.add_subcommand("entropy", "branchwise local-predictability table");
    std::vector<int> ent_bases;
    clab::u64 ent_lo = 1, ent_hi = 100000;
    int ent_window = 2;
    entropy->add_option("--bases", ent_bases, "bases to tabulate (default: full sweep list)");
    entropy->add_option("--lo", ent_lo, "range low end");
    entropy->add_option("--hi", ent_hi, "range high end");
    entropy->add_option("--window", ent_window, "digit window width");

    auto* report = app.add_subcommand("report", "emit tidy per-figure CSVs from a completed run");
    report->add_option("dir", dir, "run directory")->required();
    auto* verify = app.add_subcommand("verify", "re-check stored artifacts and recount metrics");
    verify->add_option("dir", dir, "run directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (train->parsed()) { return run_from_config(config_path, force, {"baseline", "multi_seed"}); }
    if (sweep->parsed()) {
        return run_from_config(
            config_path, force,
            {"base_sweep", "depth_sweep", "distribution_ablation", "carry_exposure"});
    }
    if (intervene->parsed()) {
        return run_from_config(config_path, force, {"transplant", "rewind", "transfer"});
    }
    if (probe->parsed()) { return run_from_config(config_path, force, {"probe_scan"}); }
    if (erase->parsed()) { return run_from_config(config_path, force, {"erasure_scan"}); }

    if (entropy->parsed()) {
        try {
            auto bases = ent_bases.empty() ? clab::sweep_bases() : ent_bases;
            std::cout << clab::entropy_table(bases, ent_lo, ent_hi, ent_window);
            return 0;
        } catch (const std::invalid_argument& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    if (report->parsed()) {
        try {
            auto out = clab::report_run(resolve_output(dir));
            std::cout << "report: " << out.string() << "\n";
            return 0;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    if (verify->parsed()) {
        try {
            auto rep = clab::verify_run(resolve_output(dir));
            for (const auto& m : rep.passes) { std::cout << "ok: " << m << "\n"; }
            for (const auto& m : rep.failures) { std::cout << "FAIL: " << m << "\n"; }
            std::cout << (rep.ok() ? "verification passed" : "verification FAILED") << "\n";
            return rep.ok() ? 0 : 3;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    return 2;
}
