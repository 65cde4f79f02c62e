#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <clab/checkpoint.hpp>
#include <clab/metrics.hpp>
#include <clab/trainer.hpp>
#include <clab/transformer.hpp>

namespace clab {

enum class InterventionKind {
    scratch,
    encoder_transplant,
    decoder_transplant,
    decoder_rewind,
    parity_erasure_eval
};

inline InterventionKind intervention_from_string(const std::string& s) {
    if (s == "scratch") { return InterventionKind::scratch; }
    if (s == "encoder_transplant") { return InterventionKind::encoder_transplant; }
    if (s == "decoder_transplant") { return InterventionKind::decoder_transplant; }
    if (s == "decoder_rewind") { return InterventionKind::decoder_rewind; }
    if (s == "parity_erasure_eval") { return InterventionKind::parity_erasure_eval; }
    throw std::invalid_argument("unknown intervention kind: " + s);
}

inline std::string to_string(InterventionKind k) {
    switch (k) {
        case InterventionKind::scratch: return "scratch";
        case InterventionKind::encoder_transplant: return "encoder_transplant";
        case InterventionKind::decoder_transplant: return "decoder_transplant";
        case InterventionKind::decoder_rewind: return "decoder_rewind";
        case InterventionKind::parity_erasure_eval: return "parity_erasure_eval";
    }
    return "?";
}

// A training condition's assembled starting state. frozen_prefix names the
// parameter subtree that must stay bit-identical for the whole run;
// frozen_hash is its hash at assembly time.
template <class S>
struct Materialized {
    ParamSet<S> params;
    FreezeMask freeze;
    std::string frozen_prefix;  // empty for scratch
    std::string frozen_hash;
};

// Assembles parameters for a condition from its source checkpoints.
// `converged` supplies the trained subtree; `early` is the rewind target.
template <class S>
Materialized<S> materialize(InterventionKind kind, const ModelConfig& cfg,
                            const Checkpoint<S>* converged, const Checkpoint<S>* early,
                            u64 fresh_seed) {
    if (kind == InterventionKind::parity_erasure_eval) {
        throw std::invalid_argument("parity_erasure_eval is inference-time; use erasure_eval");
    }
    auto require_compatible = [&](const Checkpoint<S>* src, const char* what) {
        if (src == nullptr) {
            throw std::invalid_argument(std::string("missing source checkpoint: ") + what);
        }
        if (!cfg.compatible_with(src->config)) {
            throw std::invalid_argument(std::string("config mismatch with ") + what);
        }
    };
    auto copy_subtree = [](ParamSet<S>& dst, const ParamSet<S>& src, const std::string& prefix) {
        for (std::size_t i = 0; i < dst.names.size(); ++i) {
            if (dst.names[i].rfind(prefix, 0) != 0) { continue; }
            const auto& s = src.get(dst.names[i]);
            dst.tensors[i].values() = s.values();
        }
    };

    Materialized<S> out;
    out.params = init_params<S>(cfg, fresh_seed);
    switch (kind) {
        case InterventionKind::scratch:
            out.freeze = FreezeMask::all_trainable(out.params);
            break;
        case InterventionKind::encoder_transplant:
            require_compatible(converged, "converged");
            copy_subtree(out.params, converged->params, "enc.");
            out.frozen_prefix = "enc.";
            out.freeze = FreezeMask::freeze_prefix(out.params, "enc.");
            break;
        case InterventionKind::decoder_transplant:
            require_compatible(converged, "converged");
            copy_subtree(out.params, converged->params, "dec.");
            out.frozen_prefix = "dec.";
            out.freeze = FreezeMask::freeze_prefix(out.params, "dec.");
            break;
        case InterventionKind::decoder_rewind:
            require_compatible(converged, "converged");
            require_compatible(early, "early");
            copy_subtree(out.params, converged->params, "enc.");
            copy_subtree(out.params, early->params, "dec.");
            out.frozen_prefix = "enc.";
            out.freeze = FreezeMask::freeze_prefix(out.params, "enc.");
            break;
        case InterventionKind::parity_erasure_eval:
            break;  // unreachable
    }
    if (!out.frozen_prefix.empty()) {
        out.frozen_hash = param_subtree_hash(out.params, out.frozen_prefix);
    }
    return out;
}

struct ConditionResult {
    std::vector<std::vector<MetricRecord>> per_seed;
    std::vector<std::int64_t> steps;       // eval steps common to all seeds
    std::vector<double> mean_acc, std_acc;  // overall accuracy aggregates
};

// Runs one condition across seeds; frozen hashes are verified at every
// checkpoint and drift aborts the run.
template <class S>
ConditionResult run_condition(InterventionKind kind, const TrainConfig& base_cfg,
                              const Checkpoint<S>* converged, const Checkpoint<S>* early,
                              const std::vector<u64>& seeds, int budget) {
    if (budget < 1) { throw std::invalid_argument("run_condition: budget must be positive"); }
    if (seeds.empty()) { throw std::invalid_argument("run_condition: need at least one seed"); }
    ConditionResult result;
    for (u64 seed : seeds) {
        TrainConfig cfg = base_cfg;
        cfg.seed = seed;
        auto mat = materialize(kind, cfg.model, converged, early, seed);
        auto trainer = Trainer<S>::fresh(cfg, to_string(kind) + "/seed" + std::to_string(seed));
        trainer.set_params(std::move(mat.params));
        trainer.set_freeze(mat.freeze);
        auto verify = [&](const Checkpoint<S>& ck) {
            if (mat.frozen_prefix.empty()) { return; }
            if (param_subtree_hash(ck.params, mat.frozen_prefix) != mat.frozen_hash) {
                throw std::runtime_error("frozen-subtree hash drift in " + to_string(kind));
            }
        };
        result.per_seed.push_back(trainer.run(budget, verify));
    }
    std::size_t n_records = result.per_seed[0].size();
    for (const auto& r : result.per_seed) { n_records = std::min(n_records, r.size()); }
    for (std::size_t i = 0; i < n_records; ++i) {
        double sum = 0, sq = 0;
        for (const auto& r : result.per_seed) {
            sum += r[i].overall.acc;
            sq += r[i].overall.acc * r[i].overall.acc;
        }
        const double k = static_cast<double>(result.per_seed.size());
        const double mean = sum / k;
        result.steps.push_back(result.per_seed[0][i].step);
        result.mean_acc.push_back(mean);
        result.std_acc.push_back(std::sqrt(std::max(0.0, sq / k - mean * mean)));
    }
    return result;
}

struct ErasureResult {
    AccResult baseline;
    AccResult erased;
    double delta{0};  // baseline minus erased accuracy, in proportion
};

// Evaluates the same eval set with and without projecting the unit direction
// u out of the final encoder states.
template <class S>
ErasureResult erasure_eval(const ModelConfig& cfg, const ParamSet<S>& params,
                           const std::vector<double>& u, const std::vector<u64>& eval_set,
                           Task task = Task::collatz, std::size_t limit = 0) {
    if (static_cast<int>(u.size()) != cfg.d_model) {
        throw std::invalid_argument("erasure_eval: direction dimension mismatch");
    }
    std::vector<S> us(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) { us[j] = static_cast<S>(u[j]); }

    ErasureResult res;
    auto base = evaluate_greedy(cfg, params, eval_set, task, limit);
    res.baseline = acc_seq(base.predictions, base.targets);

    std::vector<std::vector<int>> erased_preds;
    const std::size_t n = limit > 0 ? std::min(limit, eval_set.size()) : eval_set.size();
    for (std::size_t i = 0; i < n; ++i) {
        auto ex = encode_example(task, eval_set[i], 0, cfg.base, cfg.max_len);
        auto enc = encode_with_erasure(cfg, params, {ex.input_tokens}, us);
        erased_preds.push_back(greedy_decode(cfg, params, enc, cfg.max_len - 1).tokens);
    }
    res.erased = acc_seq(erased_preds, base.targets);
    res.delta = res.baseline.acc - res.erased.acc;
    return res;
}

}  // namespace clab
