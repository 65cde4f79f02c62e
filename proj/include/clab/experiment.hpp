#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <clab/interventions.hpp>
#include <clab/metrics.hpp>
#include <clab/probe.hpp>
#include <clab/trainer.hpp>

namespace clab {

namespace fs = std::filesystem;

enum class ExperimentKind {
    baseline,
    base_sweep,
    depth_sweep,
    distribution_ablation,
    carry_exposure,
    transplant,
    rewind,
    erasure_scan,
    probe_scan,
    transfer,
    multi_seed
};

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
    static const std::map<std::string, ExperimentKind> table{
        {"baseline", ExperimentKind::baseline},
        {"base_sweep", ExperimentKind::base_sweep},
        {"depth_sweep", ExperimentKind::depth_sweep},
        {"distribution_ablation", ExperimentKind::distribution_ablation},
        {"carry_exposure", ExperimentKind::carry_exposure},
        {"transplant", ExperimentKind::transplant},
        {"rewind", ExperimentKind::rewind},
        {"erasure_scan", ExperimentKind::erasure_scan},
        {"probe_scan", ExperimentKind::probe_scan},
        {"transfer", ExperimentKind::transfer},
        {"multi_seed", ExperimentKind::multi_seed}};
    auto it = table.find(s);
    if (it == table.end()) { throw std::invalid_argument("unknown experiment kind: " + s); }
    return it->second;
}

inline std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::baseline: return "baseline";
        case ExperimentKind::base_sweep: return "base_sweep";
        case ExperimentKind::depth_sweep: return "depth_sweep";
        case ExperimentKind::distribution_ablation: return "distribution_ablation";
        case ExperimentKind::carry_exposure: return "carry_exposure";
        case ExperimentKind::transplant: return "transplant";
        case ExperimentKind::rewind: return "rewind";
        case ExperimentKind::erasure_scan: return "erasure_scan";
        case ExperimentKind::probe_scan: return "probe_scan";
        case ExperimentKind::transfer: return "transfer";
        case ExperimentKind::multi_seed: return "multi_seed";
    }
    return "?";
}

struct ExperimentConfig {
    int version{1};
    ExperimentKind kind{ExperimentKind::baseline};
    std::string output_dir;
    TrainConfig train;
    std::vector<int> bases;
    std::vector<int> decoder_depths{1, 2, 4, 6};
    std::vector<u64> seeds{0};
    std::string source_run;  // transplant/rewind/erasure_scan/probe_scan source
    int rewind_step{2000};
    std::vector<int> probe_layers;       // empty = final layer only
    std::vector<int> probe_targets{1, 2, 3};
    bool collapse_diagnostics{false};    // forced on for base-2 runs
    std::size_t probe_examples{0};       // cap on probe/erasure eval examples (0 = all)
};

// Desk-scale defaults: small enough that every experiment family completes
// on one core. The paper-scale profile carries the published configuration.
inline void apply_profile(ExperimentConfig& c, const std::string& profile) {
    if (profile == "desk") {
        c.train.model.d_model = 64;
        c.train.model.n_heads = 4;
        c.train.model.d_ff = 256;
        c.train.model.n_enc_layers = 2;
        c.train.model.n_dec_layers = 2;
        c.train.model.base = 10;
        c.train.sampling.range_lo = 1;
        c.train.sampling.range_hi = 2000;
        c.train.draw_per_step = 64;
        c.train.batch_size = 64;
        c.train.total_steps = 20000;
        c.train.eval_every = 1000;
        c.train.checkpoint_every = 1000;
        c.train.eval_size = 500;
        c.train.eval_limit = 0;
        c.train.optim.base_lr = 1e-3;
        c.train.optim.warmup_steps = 500;
    } else if (profile == "paper") {
        c.train.model = ModelConfig{};  // published architecture
        c.train.sampling.range_lo = 1;
        c.train.sampling.range_hi = 10000;
        c.train.draw_per_step = 1000;
        c.train.batch_size = 512;
        c.train.total_steps = 100000;
        c.train.eval_every = 2000;
        c.train.checkpoint_every = 2000;
        c.train.eval_size = 5000;
        c.train.optim = OptimHyper{};
    } else {
        throw std::invalid_argument("unknown profile: " + profile);
    }
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (allowed.count(key) == 0) {
            throw std::invalid_argument("unknown config key \"" + key + "\" in " + where);
        }
    }
}

inline void parse_model(const nlohmann::json& j, ModelConfig& m) {
    reject_unknown_keys(j,
                        {"d_model", "n_heads", "d_ff", "d_ff_dec", "n_enc_layers", "n_dec_layers",
                         "max_len", "base", "dropout", "pos_encoding", "activation"},
                        "model");
    ModelConfig merged = config_from_json(nlohmann::json{
        {"d_model", j.value("d_model", m.d_model)},
        {"n_heads", j.value("n_heads", m.n_heads)},
        {"d_ff", j.value("d_ff", m.d_ff)},
        {"d_ff_dec", j.value("d_ff_dec", m.d_ff_dec)},
        {"n_enc_layers", j.value("n_enc_layers", m.n_enc_layers)},
        {"n_dec_layers", j.value("n_dec_layers", m.n_dec_layers)},
        {"max_len", j.value("max_len", m.max_len)},
        {"base", j.value("base", m.base)},
        {"dropout", j.value("dropout", m.dropout)},
        {"pos_encoding",
         j.value("pos_encoding",
                 std::string(m.pos_encoding == PosEncoding::sinusoidal ? "sinusoidal" : "learned"))},
        {"activation",
         j.value("activation", std::string(m.activation == Activation::gelu ? "gelu" : "relu"))}});
    m = merged;
}

inline void parse_sampling(const nlohmann::json& j, SamplingSpec& s) {
    reject_unknown_keys(j, {"kind", "range_lo", "range_hi", "modulus", "max_depth", "depth_weights"},
                        "sampling");
    if (j.contains("kind")) { s.kind = sample_kind_from_string(j.at("kind").get<std::string>()); }
    s.range_lo = j.value("range_lo", s.range_lo);
    s.range_hi = j.value("range_hi", s.range_hi);
    s.modulus = j.value("modulus", s.modulus);
    s.max_depth = j.value("max_depth", s.max_depth);
    if (j.contains("depth_weights")) {
        s.depth_weights.clear();
        for (const auto& [k, v] : j.at("depth_weights").items()) {
            s.depth_weights[std::stoi(k)] = v.get<double>();
        }
    }
}

inline void parse_optim(const nlohmann::json& j, OptimHyper& h) {
    reject_unknown_keys(j,
                        {"beta1", "beta2", "eps", "base_lr", "weight_decay", "clip_norm",
                         "warmup_steps", "decay_matrices_only"},
                        "optim");
    nlohmann::json full = hyper_to_json(h);
    full.update(j);
    h = hyper_from_json(full);
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j,
        {"version", "kind", "output_dir", "profile", "model", "sampling", "optim", "task",
         "gcd_lo", "gcd_hi", "draw_per_step", "batch_size", "steps", "eval_every",
         "checkpoint_every", "eval_size", "eval_limit", "seed", "data_seed", "bases",
         "decoder_depths", "seeds", "source_run", "rewind_step", "probe_layers", "probe_targets",
         "collapse_diagnostics", "probe_examples"},
        "experiment");
    ExperimentConfig c;
    c.version = j.value("version", 1);
    if (c.version != 1) { throw std::invalid_argument("unsupported config version"); }
    if (!j.contains("kind")) { throw std::invalid_argument("config requires \"kind\""); }
    c.kind = experiment_kind_from_string(j.at("kind").get<std::string>());
    apply_profile(c, j.value("profile", "desk"));
    c.output_dir = j.value("output_dir", "");
    if (j.contains("model")) { detail::parse_model(j.at("model"), c.train.model); }
    if (j.contains("sampling")) { detail::parse_sampling(j.at("sampling"), c.train.sampling); }
    if (j.contains("optim")) { detail::parse_optim(j.at("optim"), c.train.optim); }
    if (j.contains("task")) {
        const std::string t = j.at("task").get<std::string>();
        if (t == "collatz") {
            c.train.task = Task::collatz;
        } else if (t == "gcd") {
            c.train.task = Task::gcd;
        } else {
            throw std::invalid_argument("unknown task: " + t);
        }
    }
    c.train.gcd_lo = j.value("gcd_lo", c.train.gcd_lo);
    c.train.gcd_hi = j.value("gcd_hi", c.train.gcd_hi);
    c.train.draw_per_step = j.value("draw_per_step", c.train.draw_per_step);
    c.train.batch_size = j.value("batch_size", c.train.batch_size);
    c.train.total_steps = j.value("steps", c.train.total_steps);
    c.train.eval_every = j.value("eval_every", c.train.eval_every);
    c.train.checkpoint_every = j.value("checkpoint_every", c.train.checkpoint_every);
    c.train.eval_size = j.value("eval_size", c.train.eval_size);
    c.train.eval_limit = j.value("eval_limit", c.train.eval_limit);
    c.train.seed = j.value("seed", c.train.seed);
    c.train.data_seed = j.value("data_seed", c.train.data_seed);
    if (j.contains("bases")) { c.bases = j.at("bases").get<std::vector<int>>(); }
    if (j.contains("decoder_depths")) {
        c.decoder_depths = j.at("decoder_depths").get<std::vector<int>>();
    }
    if (j.contains("seeds")) { c.seeds = j.at("seeds").get<std::vector<u64>>(); }
    c.source_run = j.value("source_run", c.source_run);
    c.rewind_step = j.value("rewind_step", c.rewind_step);
    if (j.contains("probe_layers")) { c.probe_layers = j.at("probe_layers").get<std::vector<int>>(); }
    if (j.contains("probe_targets")) {
        c.probe_targets = j.at("probe_targets").get<std::vector<int>>();
    }
    c.collapse_diagnostics = j.value("collapse_diagnostics", c.train.model.base == 2);
    c.probe_examples = j.value("probe_examples", c.probe_examples);
    c.train.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) { throw std::invalid_argument("cannot open config: " + path); }
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("config parse error: ") + e.what());
    }
    return parse_experiment(j);
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) { throw std::runtime_error("cannot write " + path.string()); }
    os << text;
}

inline std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) { throw std::runtime_error("cannot read " + path.string()); }
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline std::string file_hash(const fs::path& path) {
    const std::string bytes = read_text(path);
    return hash_hex(fnv1a(bytes.data(), bytes.size()));
}

// Checkpoints stored by a run, sorted by step.
inline std::vector<std::pair<int, fs::path>> list_checkpoints(const fs::path& unit_dir) {
    std::vector<std::pair<int, fs::path>> out;
    if (!fs::exists(unit_dir)) { return out; }
    for (const auto& entry : fs::directory_iterator(unit_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("ckpt_step", 0) == 0 && name.size() > 13) {
            out.emplace_back(std::stoi(name.substr(9, name.size() - 13)), entry.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Resolves either a unit directory or a run directory (first unit found)
// to its checkpoint list.
inline std::vector<std::pair<int, fs::path>> resolve_checkpoints(const fs::path& source) {
    if (!fs::exists(source)) { throw std::invalid_argument("source_run not found: " + source.string()); }
    auto ckpts = list_checkpoints(source);
    if (ckpts.empty()) {
        for (const auto& entry : fs::recursive_directory_iterator(source)) {
            if (entry.is_directory()) {
                auto inner = list_checkpoints(entry.path());
                if (!inner.empty()) { return inner; }
            }
        }
    }
    return ckpts;
}

inline std::string csv_escape(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace detail

// One training unit (a single seed of a single condition): emits
// metrics.jsonl, predictions.jsonl for the final eval, and checkpoints.
// Returns the metric trajectory.
template <class S>
std::vector<MetricRecord> run_unit(const TrainConfig& cfg, const fs::path& unit_dir,
                                   const std::string& unit_id, bool collapse_diagnostics,
                                   const Materialized<S>* mat = nullptr,
                                   const std::function<bool(const MetricRecord&)>& stop = nullptr) {
    fs::create_directories(unit_dir);
    auto trainer = Trainer<S>::fresh(cfg, unit_id);
    std::string frozen_prefix, frozen_hash;
    if (mat != nullptr) {
        trainer.set_params(mat->params.clone());
        trainer.set_freeze(mat->freeze);
        frozen_prefix = mat->frozen_prefix;
        frozen_hash = mat->frozen_hash;
    }

    std::ofstream metrics_os(unit_dir / "metrics.jsonl", std::ios::trunc);
    std::optional<Checkpoint<S>> prev_ckpt;
    std::vector<MetricRecord> records;

    auto on_checkpoint = [&](const Checkpoint<S>& ck) {
        if (!frozen_prefix.empty() &&
            param_subtree_hash(ck.params, frozen_prefix) != frozen_hash) {
            throw std::runtime_error("frozen-subtree hash drift in " + unit_id);
        }
        save_checkpoint(ck, (unit_dir / ("ckpt_step" + std::to_string(ck.schedule_step) + ".bin"))
                                .string());
    };
    // step-0 checkpoint: the assembled starting state (rewind verification
    // compares its decoder subtree against the stored early checkpoint)
    on_checkpoint(trainer.checkpoint());

    double loss = 0;
    while (trainer.step_count() < cfg.total_steps) {
        loss = trainer.step();
        const bool at_eval = trainer.step_count() % cfg.eval_every == 0 ||
                             trainer.step_count() == cfg.total_steps;
        const bool at_ckpt = trainer.step_count() % cfg.checkpoint_every == 0 ||
                             trainer.step_count() == cfg.total_steps;
        if (at_eval) {
            auto rec = trainer.evaluate_now(loss);
            if (collapse_diagnostics) {
                std::vector<std::vector<double>> pooled;
                const std::size_t cap = std::min<std::size_t>(trainer.split().eval_set.size(), 256);
                for (std::size_t i = 0; i < cap; ++i) {
                    auto ex = encode_example(cfg.task, trainer.split().eval_set[i], 0,
                                             cfg.model.base, cfg.model.max_len);
                    auto enc = encode(cfg.model, trainer.checkpoint().params, {ex.input_tokens});
                    pooled.push_back(pool_hidden(enc, cfg.model.n_enc_layers - 1, 0));
                }
                rec.participation = participation_ratio(pooled).value;
                if (prev_ckpt) { rec.ckpt_cosine = checkpoint_cosine(*prev_ckpt, trainer.checkpoint()); }
            }
            metrics_os << rec.to_json().dump() << "\n";
            records.push_back(std::move(rec));
        }
        if (at_ckpt) {
            on_checkpoint(trainer.checkpoint());
            if (collapse_diagnostics) {
                prev_ckpt = trainer.checkpoint();
                prev_ckpt->params = trainer.checkpoint().params.clone();
            }
        }
        if (at_eval && stop && stop(records.back())) { break; }
    }
    metrics_os.close();

    // final eval predictions, for exact recounting by verify
    auto ev = trainer.eval_outputs();
    std::ofstream preds_os(unit_dir / "predictions.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < ev.inputs.size(); ++i) {
        preds_os << nlohmann::json{{"n", ev.inputs[i]},
                                   {"pred", ev.predictions[i]},
                                   {"target", ev.targets[i]},
                                   {"even", ev.even_mask[i] != 0}}
                        .dump()
                 << "\n";
    }
    preds_os.close();

    nlohmann::json unit_manifest{{"unit", unit_id},
                                 {"final_step", trainer.step_count()},
                                 {"frozen_prefix", frozen_prefix},
                                 {"frozen_hash", frozen_hash}};
    detail::write_text(unit_dir / "unit.json", unit_manifest.dump(2) + "\n");
    return records;
}

struct RunOptions {
    bool force{false};
};

namespace detail {

inline void summary_header(std::ostream& os) {
    os << "unit,seed,steps,all,all_ci_lo,all_ci_hi,even,odd,digit_acc\n";
}

inline void summary_row(std::ostream& os, const std::string& unit, u64 seed,
                        const MetricRecord& rec) {
    os << unit << "," << seed << "," << rec.step << "," << csv_escape(rec.overall.acc) << ","
       << csv_escape(rec.overall.ci_lo) << "," << csv_escape(rec.overall.ci_hi) << ","
       << csv_escape(rec.even.acc) << "," << csv_escape(rec.odd.acc) << ","
       << csv_escape(rec.digit_acc) << "\n";
}

template <class S>
Checkpoint<S> load_source_checkpoint(const fs::path& source_run, int step /* -1 = latest */) {
    auto ckpts = resolve_checkpoints(source_run);
    if (ckpts.empty()) {
        throw std::invalid_argument("no checkpoints under " + source_run.string());
    }
    if (step < 0) { return load_checkpoint<S>(ckpts.back().second.string()); }
    for (const auto& [s, path] : ckpts) {
        if (s == step) { return load_checkpoint<S>(path.string()); }
    }
    throw std::invalid_argument("no checkpoint at step " + std::to_string(step) + " under " +
                                source_run.string());
}

}  // namespace detail

// Parity labels and pooled features for probe/erasure work on an eval set.
template <class S>
std::pair<std::vector<std::vector<double>>, std::vector<int>> pooled_parity_features(
    const ModelConfig& cfg, const ParamSet<S>& params, const std::vector<u64>& integers,
    int layer, std::size_t limit = 0) {
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    const std::size_t n = limit > 0 ? std::min(limit, integers.size()) : integers.size();
    for (std::size_t i = 0; i < n; ++i) {
        auto ex = encode_example(Task::collatz, integers[i], 0, cfg.base, cfg.max_len);
        auto enc = encode(cfg, params, {ex.input_tokens});
        feats.push_back(pool_hidden(enc, layer, 0));
        labels.push_back(static_cast<int>(integers[i] % 2));
    }
    return {std::move(feats), std::move(labels)};
}

// Executes an experiment; returns the result directory. Refuses to
// overwrite a completed directory unless forced, and marks partial output
// with an INCOMPLETE file.
inline fs::path run_experiment(const ExperimentConfig& cfg, const nlohmann::json& raw_config,
                               const RunOptions& opts = {}) {
    if (cfg.output_dir.empty()) { throw std::invalid_argument("output_dir is required"); }
    const fs::path dir = cfg.output_dir;
    if (fs::exists(dir / "manifest.json") && !opts.force) {
        throw std::invalid_argument("output directory already holds a completed run (use force): " +
                                    dir.string());
    }
    if (fs::exists(dir) && !fs::is_empty(dir) && !opts.force &&
        !fs::exists(dir / "INCOMPLETE")) {
        throw std::invalid_argument("output directory is not empty (use force): " + dir.string());
    }
    fs::create_directories(dir);
    detail::write_text(dir / "INCOMPLETE", "run in progress or aborted\n");
    detail::write_text(dir / "config.json", raw_config.dump(2) + "\n");

    std::ostringstream summary;
    detail::summary_header(summary);

    auto run_seeded = [&](const std::string& unit_prefix, const TrainConfig& tc,
                          const Materialized<float>* mat = nullptr) {
        std::vector<std::vector<MetricRecord>> per_seed;
        for (u64 seed : cfg.seeds) {
            TrainConfig c = tc;
            c.seed = seed;
            const std::string unit = unit_prefix + "/seed" + std::to_string(seed);
            auto recs = run_unit<float>(c, dir / unit, unit,
                                        cfg.collapse_diagnostics || c.model.base == 2, mat);
            if (!recs.empty()) { detail::summary_row(summary, unit, seed, recs.back()); }
            per_seed.push_back(std::move(recs));
        }
        return per_seed;
    };

    auto write_aggregate = [&](const std::vector<std::vector<MetricRecord>>& per_seed,
                               const std::string& name) {
        if (per_seed.empty()) { return; }
        std::size_t n = per_seed[0].size();
        for (const auto& r : per_seed) { n = std::min(n, r.size()); }
        std::ostringstream os;
        os << "step,mean,std\n";
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0, sq = 0;
            for (const auto& r : per_seed) {
                sum += r[i].overall.acc;
                sq += r[i].overall.acc * r[i].overall.acc;
            }
            const double k = static_cast<double>(per_seed.size());
            const double mean = sum / k;
            os << per_seed[0][i].step << "," << detail::csv_escape(mean) << ","
               << detail::csv_escape(std::sqrt(std::max(0.0, sq / k - mean * mean))) << "\n";
        }
        detail::write_text(dir / name, os.str());
    };

    switch (cfg.kind) {
        case ExperimentKind::baseline: {
            run_seeded("baseline", cfg.train);
            break;
        }
        case ExperimentKind::multi_seed: {
            auto per_seed = run_seeded("baseline", cfg.train);
            write_aggregate(per_seed, "aggregate.csv");
            break;
        }
        case ExperimentKind::base_sweep: {
            auto bases = cfg.bases.empty() ? sweep_bases() : cfg.bases;
            for (int b : bases) {
                TrainConfig tc = cfg.train;
                tc.model.base = b;
                run_seeded("base" + std::to_string(b), tc);
            }
            break;
        }
        case ExperimentKind::depth_sweep: {
            for (int depth : cfg.decoder_depths) {
                TrainConfig tc = cfg.train;
                tc.model.n_dec_layers = depth;
                run_seeded("depth" + std::to_string(depth), tc);
            }
            break;
        }
        case ExperimentKind::distribution_ablation: {
            for (auto kind : {SampleKind::uniform, SampleKind::log_uniform,
                              SampleKind::residue_stratified}) {
                TrainConfig tc = cfg.train;
                tc.sampling.kind = kind;
                run_seeded(to_string(kind), tc);
            }
            break;
        }
        case ExperimentKind::carry_exposure: {
            for (auto kind :
                 {SampleKind::uniform, SampleKind::carry_stratified, SampleKind::short_carry}) {
                TrainConfig tc = cfg.train;
                tc.sampling.kind = kind;
                run_seeded(to_string(kind), tc);
            }
            break;
        }
        case ExperimentKind::transplant: {
            auto converged = detail::load_source_checkpoint<float>(cfg.source_run, -1);
            for (auto kind : {InterventionKind::scratch, InterventionKind::encoder_transplant,
                              InterventionKind::decoder_transplant}) {
                std::vector<std::vector<MetricRecord>> per_seed;
                for (u64 seed : cfg.seeds) {
                    TrainConfig c = cfg.train;
                    c.seed = seed;
                    auto mat = materialize<float>(kind, c.model,
                                                  kind == InterventionKind::scratch ? nullptr
                                                                                    : &converged,
                                                  nullptr, seed);
                    const std::string unit = to_string(kind) + "/seed" + std::to_string(seed);
                    auto recs = run_unit<float>(c, dir / unit, unit, cfg.collapse_diagnostics, &mat);
                    if (!recs.empty()) { detail::summary_row(summary, unit, seed, recs.back()); }
                    per_seed.push_back(std::move(recs));
                }
                write_aggregate(per_seed, "aggregate_" + to_string(kind) + ".csv");
            }
            break;
        }
        case ExperimentKind::rewind: {
            auto converged = detail::load_source_checkpoint<float>(cfg.source_run, -1);
            auto early = detail::load_source_checkpoint<float>(cfg.source_run, cfg.rewind_step);
            std::vector<std::vector<MetricRecord>> per_seed;
            for (u64 seed : cfg.seeds) {
                TrainConfig c = cfg.train;
                c.seed = seed;
                auto mat = materialize<float>(InterventionKind::decoder_rewind, c.model, &converged,
                                              &early, seed);
                const std::string unit = "decoder_rewind/seed" + std::to_string(seed);
                auto recs = run_unit<float>(c, dir / unit, unit, cfg.collapse_diagnostics, &mat);
                if (!recs.empty()) { detail::summary_row(summary, unit, seed, recs.back()); }
                per_seed.push_back(std::move(recs));
            }
            write_aggregate(per_seed, "aggregate_decoder_rewind.csv");
            break;
        }
        case ExperimentKind::erasure_scan: {
            const auto split = build_split(cfg.train.sampling.range_lo, cfg.train.sampling.range_hi,
                                           cfg.train.eval_size, cfg.train.data_seed);
            auto ckpts = detail::resolve_checkpoints(cfg.source_run);
            if (ckpts.empty()) {
                throw std::invalid_argument("no checkpoints under " + cfg.source_run);
            }
            std::ostringstream os;
            os << "step,baseline,erased,delta,probe_acc\n";
            for (const auto& [step, path] : ckpts) {
                auto ck = load_checkpoint<float>(path.string());
                auto [feats, labels] = pooled_parity_features(
                    ck.config, ck.params, split.eval_set, ck.config.n_enc_layers - 1,
                    cfg.probe_examples);
                auto fit = fit_probe(feats, labels);
                auto res = erasure_eval(ck.config, ck.params, fit.model.direction(), split.eval_set,
                                        cfg.train.task, cfg.probe_examples);
                os << step << "," << detail::csv_escape(res.baseline.acc) << ","
                   << detail::csv_escape(res.erased.acc) << "," << detail::csv_escape(res.delta)
                   << "," << detail::csv_escape(fit.heldout_acc) << "\n";
            }
            detail::write_text(dir / "erasure.csv", os.str());
            break;
        }
        case ExperimentKind::probe_scan: {
            const auto split = build_split(cfg.train.sampling.range_lo, cfg.train.sampling.range_hi,
                                           cfg.train.eval_size, cfg.train.data_seed);
            auto ckpts = detail::resolve_checkpoints(cfg.source_run);
            if (ckpts.empty()) {
                throw std::invalid_argument("no checkpoints under " + cfg.source_run);
            }
            std::ostringstream os;
            os << "step,layer,target_k,accuracy\n";
            for (const auto& [step, path] : ckpts) {
                auto ck = load_checkpoint<float>(path.string());
                std::vector<int> layers = cfg.probe_layers;
                if (layers.empty()) { layers = {ck.config.n_enc_layers - 1}; }
                for (int layer : layers) {
                    auto [feats, labels] = pooled_parity_features(ck.config, ck.params,
                                                                  split.eval_set, layer,
                                                                  cfg.probe_examples);
                    std::vector<u64> ns(split.eval_set.begin(),
                                        split.eval_set.begin() +
                                            static_cast<long>(feats.size()));
                    for (int k : cfg.probe_targets) {
                        double acc = 0;
                        if (k == 1) {
                            acc = fit_probe(feats, labels).heldout_acc;
                        } else {
                            acc = conditional_probe(feats, ns, k).accuracy;
                        }
                        os << step << "," << layer << "," << k << "," << detail::csv_escape(acc)
                           << "\n";
                    }
                }
            }
            detail::write_text(dir / "probes.csv", os.str());
            break;
        }
        case ExperimentKind::transfer: {
            // four conditions: A->B transfer (frozen encoder, fresh decoder)
            // and the from-scratch control on B, in both directions
            struct Direction {
                Task pretrain, target;
                const char* name;
            };
            const Direction dirs[2] = {{Task::collatz, Task::gcd, "collatz_to_gcd"},
                                       {Task::gcd, Task::collatz, "gcd_to_collatz"}};
            for (const auto& d : dirs) {
                TrainConfig pre = cfg.train;
                pre.task = d.pretrain;
                pre.seed = cfg.seeds[0];
                auto pre_trainer = Trainer<float>::fresh(pre, std::string(d.name) + "/pretrain");
                pre_trainer.run(pre.total_steps);
                auto source = pre_trainer.checkpoint();

                TrainConfig tgt = cfg.train;
                tgt.task = d.target;
                auto mat = materialize<float>(InterventionKind::encoder_transplant, tgt.model,
                                              &source, nullptr, cfg.seeds[0]);
                tgt.seed = cfg.seeds[0];
                const std::string unit = std::string(d.name) + "/transfer";
                auto recs = run_unit<float>(tgt, dir / unit, unit, false, &mat);
                if (!recs.empty()) { detail::summary_row(summary, unit, cfg.seeds[0], recs.back()); }

                const std::string ctrl = std::string(d.name) + "/scratch_control";
                auto ctrl_recs = run_unit<float>(tgt, dir / ctrl, ctrl, false);
                if (!ctrl_recs.empty()) {
                    detail::summary_row(summary, ctrl, cfg.seeds[0], ctrl_recs.back());
                }
            }
            break;
        }
    }

    detail::write_text(dir / "summary.csv", summary.str());

    // manifest with content hashes of everything emitted
    nlohmann::json files = nlohmann::json::object();
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) { continue; }
        const auto rel = fs::relative(entry.path(), dir).string();
        if (rel == "manifest.json" || rel == "INCOMPLETE") { continue; }
        files[rel] = detail::file_hash(entry.path());
    }
    nlohmann::json manifest{{"version", 1},
                            {"kind", to_string(cfg.kind)},
                            {"completed", true},
                            {"files", files}};
    detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    fs::remove(dir / "INCOMPLETE");
    return dir;
}

struct VerifyReport {
    std::vector<std::string> passes;
    std::vector<std::string> failures;
    bool ok() const { return failures.empty(); }
};

// Re-checks every invariant recoverable from stored artifacts: file hashes,
// checkpoint integrity, frozen-subtree constancy, CI brackets, and exact
// metric recounts from stored predictions.
inline VerifyReport verify_run(const fs::path& dir) {
    VerifyReport report;
    auto pass = [&](const std::string& m) { report.passes.push_back(m); };
    auto fail = [&](const std::string& m) { report.failures.push_back(m); };

    if (fs::exists(dir / "INCOMPLETE")) {
        fail("INCOMPLETE marker present: run did not finish");
        return report;
    }
    if (!fs::exists(dir / "manifest.json")) {
        fail("manifest.json missing");
        return report;
    }
    nlohmann::json manifest = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
    std::size_t hash_fail = 0;
    for (const auto& [rel, expect] : manifest.at("files").items()) {
        if (!fs::exists(dir / rel)) {
            fail("missing file: " + rel);
            ++hash_fail;
            continue;
        }
        if (detail::file_hash(dir / rel) != expect.get<std::string>()) {
            fail("content hash mismatch: " + rel);
            ++hash_fail;
        }
    }
    if (hash_fail == 0) { pass("all manifest file hashes match"); }

    // unit-level checks
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().filename() != "unit.json") { continue; }
        const fs::path unit_dir = entry.path().parent_path();
        const std::string unit = fs::relative(unit_dir, dir).string();
        nlohmann::json uj = nlohmann::json::parse(detail::read_text(entry.path()));
        const std::string frozen_prefix = uj.value("frozen_prefix", "");
        const std::string frozen_hash = uj.value("frozen_hash", "");

        auto ckpts = detail::list_checkpoints(unit_dir);
        bool ckpt_ok = true, frozen_ok = true;
        for (const auto& [step, path] : ckpts) {
            try {
                auto ck = load_checkpoint<float>(path.string());
                if (!frozen_prefix.empty() &&
                    param_subtree_hash(ck.params, frozen_prefix) != frozen_hash) {
                    fail(unit + ": frozen-subtree hash drift at step " + std::to_string(step));
                    frozen_ok = false;
                }
            } catch (const std::exception& e) {
                fail(unit + ": checkpoint load failed at step " + std::to_string(step) + ": " +
                     e.what());
                ckpt_ok = false;
            }
        }
        if (ckpt_ok && !ckpts.empty()) { pass(unit + ": all checkpoints load and self-verify"); }
        if (frozen_ok && !frozen_prefix.empty()) { pass(unit + ": frozen subtree constant"); }

        // CI brackets and branch-count consistency on the metrics stream
        MetricRecord last_stored;
        bool have_metrics = false, metrics_ok = true;
        std::istringstream ms(detail::read_text(unit_dir / "metrics.jsonl"));
        std::string line;
        nlohmann::json last_j;
        while (std::getline(ms, line)) {
            if (line.empty()) { continue; }
            auto j = nlohmann::json::parse(line);
            const double acc = j.at("acc").get<double>();
            const auto ci = j.at("acc_ci");
            if (!(ci[0].get<double>() <= acc && acc <= ci[1].get<double>())) {
                fail(unit + ": CI does not bracket accuracy at step " +
                     std::to_string(j.at("step").get<long>()));
                metrics_ok = false;
            }
            last_j = j;
            have_metrics = true;
        }
        if (have_metrics && metrics_ok) { pass(unit + ": CI brackets valid"); }

        // exact recount of the stored final-eval predictions
        if (fs::exists(unit_dir / "predictions.jsonl") && have_metrics) {
            std::vector<std::vector<int>> preds, targets;
            std::vector<char> even_mask, odd_mask;
            std::istringstream ps(detail::read_text(unit_dir / "predictions.jsonl"));
            while (std::getline(ps, line)) {
                if (line.empty()) { continue; }
                auto j = nlohmann::json::parse(line);
                preds.push_back(j.at("pred").get<std::vector<int>>());
                targets.push_back(j.at("target").get<std::vector<int>>());
                even_mask.push_back(j.at("even").get<bool>());
                odd_mask.push_back(!j.at("even").get<bool>());
            }
            auto overall = acc_seq(preds, targets);
            auto even = acc_seq(preds, targets, &even_mask);
            auto odd = acc_seq(preds, targets, &odd_mask);
            const double digit = digit_accuracy(preds, targets);
            bool ok = true;
            ok &= overall.acc == last_j.at("acc").get<double>();
            ok &= even.acc == last_j.at("acc_even").get<double>();
            ok &= odd.acc == last_j.at("acc_odd").get<double>();
            ok &= digit == last_j.at("digit_acc").get<double>();
            ok &= even.total == last_j.at("n_even").get<std::int64_t>();
            ok &= odd.total == last_j.at("n_odd").get<std::int64_t>();
            ok &= even.total + odd.total == overall.total;
            if (ok) {
                pass(unit + ": prediction recount matches stored metrics exactly");
            } else {
                fail(unit + ": prediction recount disagrees with stored metrics");
            }
        }
    }
    return report;
}

// Tidy per-figure-family tables derived from a completed run directory.
inline fs::path report_run(const fs::path& dir) {
    if (fs::exists(dir / "INCOMPLETE")) {
        throw std::runtime_error("run directory is marked INCOMPLETE: " + dir.string());
    }
    if (!fs::exists(dir / "manifest.json")) {
        throw std::runtime_error("not a completed run directory (no manifest): " + dir.string());
    }
    nlohmann::json manifest = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
    const std::string kind = manifest.at("kind").get<std::string>();
    const fs::path out = dir / "report";
    fs::create_directories(out);

    // accuracy-vs-step per unit, from every metrics stream present
    std::ostringstream acc;
    acc << "unit,step,overall,even,odd,ci_lo,ci_hi\n";
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().filename() != "metrics.jsonl") { continue; }
        const std::string unit = fs::relative(entry.path().parent_path(), dir).string();
        std::istringstream ms(detail::read_text(entry.path()));
        std::string line;
        while (std::getline(ms, line)) {
            if (line.empty()) { continue; }
            auto j = nlohmann::json::parse(line);
            acc << unit << "," << j.at("step").get<long>() << ","
                << detail::csv_escape(j.at("acc").get<double>()) << ","
                << detail::csv_escape(j.at("acc_even").get<double>()) << ","
                << detail::csv_escape(j.at("acc_odd").get<double>()) << ","
                << detail::csv_escape(j.at("acc_ci")[0].get<double>()) << ","
                << detail::csv_escape(j.at("acc_ci")[1].get<double>()) << "\n";
        }
    }
    detail::write_text(out / "accuracy_vs_step.csv", acc.str());

    if (kind == "erasure_scan" && fs::exists(dir / "erasure.csv")) {
        fs::copy_file(dir / "erasure.csv", out / "erasure_vs_step.csv",
                      fs::copy_options::overwrite_existing);
    }
    if (kind == "probe_scan" && fs::exists(dir / "probes.csv")) {
        fs::copy_file(dir / "probes.csv", out / "probe_accuracy_vs_step.csv",
                      fs::copy_options::overwrite_existing);
    }
    if (fs::exists(dir / "summary.csv")) {
        fs::copy_file(dir / "summary.csv", out / "summary.csv",
                      fs::copy_options::overwrite_existing);
    }
    return out;
}

// Branchwise local-predictability table over a base list.
inline std::string entropy_table(const std::vector<int>& bases, u64 lo, u64 hi, int window = 2) {
    std::ostringstream os;
    os << "base,branch,entropy_bits\n";
    for (int b : bases) {
        os << b << ",even," << detail::csv_escape(local_predictability(b, false, lo, hi, window))
           << "\n";
        os << b << ",odd," << detail::csv_escape(local_predictability(b, true, lo, hi, window))
           << "\n";
    }
    return os.str();
}

}  // namespace clab
