#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <clab/checkpoint.hpp>
#include <clab/metrics.hpp>
#include <clab/numeral.hpp>
#include <clab/optim.hpp>
#include <clab/sampler.hpp>
#include <clab/transformer.hpp>

namespace clab {

struct TrainConfig {
    ModelConfig model;
    OptimHyper optim;
    SamplingSpec sampling;
    Task task{Task::collatz};
    u64 gcd_lo{1}, gcd_hi{10000};  // second-operand range for the gcd task
    std::size_t draw_per_step{1000};
    std::size_t batch_size{512};  // optimizer batch formed from the drawn stream
    int total_steps{20000};
    int eval_every{2000};
    int checkpoint_every{2000};
    std::size_t eval_size{5000};
    std::size_t eval_limit{0};  // 0 = evaluate the full eval set
    u64 seed{0};                // init and training stream
    u64 data_seed{0};           // split construction

    void validate() const {
        model.validate();
        sampling.validate();
        if (draw_per_step < 1 || batch_size < 1) { throw std::invalid_argument("empty batch"); }
        if (batch_size > draw_per_step) {
            throw std::invalid_argument("batch_size cannot exceed draw_per_step");
        }
        if (total_steps < 1 || eval_every < 1 || checkpoint_every < 1) {
            throw std::invalid_argument("bad step schedule");
        }
    }
};

// Greedy-decode predictions over an eval set, with per-example branch flags.
// Targets are the digit sequence of the task output (no EOS; greedy decoding
// strips it symmetrically).
struct EvalOutputs {
    std::vector<u64> inputs;
    std::vector<std::vector<int>> predictions;
    std::vector<std::vector<int>> targets;
    std::vector<char> even_mask, odd_mask;
};

template <class S>
EvalOutputs evaluate_greedy(const ModelConfig& cfg, const ParamSet<S>& params,
                            const std::vector<u64>& eval_set, Task task = Task::collatz,
                            std::size_t limit = 0, u64 gcd_lo = 1, u64 gcd_hi = 10000) {
    EvalOutputs out;
    const std::size_t n = limit > 0 ? std::min(limit, eval_set.size()) : eval_set.size();
    for (std::size_t i = 0; i < n; ++i) {
        const u64 v = eval_set[i];
        const u64 second = task == Task::gcd ? gcd_partner(v, gcd_lo, gcd_hi) : 0;
        auto ex = encode_example(task, v, second, cfg.base, cfg.max_len);
        auto enc = encode(cfg, params, {ex.input_tokens});
        auto res = greedy_decode(cfg, params, enc, cfg.max_len - 1);
        out.inputs.push_back(v);
        out.predictions.push_back(res.tokens);
        out.targets.emplace_back(ex.labels.begin(), ex.labels.end() - 1);  // strip EOS
        out.even_mask.push_back(v % 2 == 0);
        out.odd_mask.push_back(v % 2 == 1);
    }
    return out;
}

inline MetricRecord metrics_from_eval(std::int64_t step, double loss, const EvalOutputs& ev) {
    MetricRecord rec;
    rec.step = step;
    rec.loss = loss;
    rec.overall = acc_seq(ev.predictions, ev.targets);
    rec.even = acc_seq(ev.predictions, ev.targets, &ev.even_mask);
    rec.odd = acc_seq(ev.predictions, ev.targets, &ev.odd_mask);
    rec.digit_acc = digit_accuracy(ev.predictions, ev.targets);
    return rec;
}

// The training loop: owns the live checkpoint state and advances it
// deterministically. Resuming from a saved checkpoint continues the exact
// same trajectory as an uninterrupted run.
template <class S>
class Trainer {
  public:
    static Trainer fresh(const TrainConfig& cfg, const std::string& experiment_id) {
        cfg.validate();
        Trainer t(cfg);
        t.ck_.config = cfg.model;
        t.ck_.params = init_params<S>(cfg.model, cfg.seed);
        t.ck_.opt = OptimState<S>::init(t.ck_.params, cfg.optim);
        t.ck_.schedule_step = 0;
        t.ck_.total_steps = cfg.total_steps;
        t.ck_.train_rng_state = Rng(cfg.seed ^ 0x7261696e5f726e67ull).state;
        t.ck_.prov = {experiment_id, cfg.seed, cfg.data_seed};
        t.freeze_ = FreezeMask::all_trainable(t.ck_.params);
        return t;
    }

    static Trainer resume(const TrainConfig& cfg, Checkpoint<S> ck) {
        cfg.validate();
        if (!cfg.model.compatible_with(ck.config)) {
            throw std::invalid_argument("resume: config mismatch with checkpoint");
        }
        if (ck.total_steps != cfg.total_steps) {
            throw std::invalid_argument("resume: total_steps mismatch with checkpoint");
        }
        Trainer t(cfg);
        t.ck_ = std::move(ck);
        t.freeze_ = FreezeMask::all_trainable(t.ck_.params);
        return t;
    }

    // Replaces the assembled parameter set (interventions) before training.
    void set_params(ParamSet<S> params) {
        ck_.params = std::move(params);
        ck_.opt = OptimState<S>::init(ck_.params, cfg_.optim);
        freeze_ = FreezeMask::all_trainable(ck_.params);
    }
    void set_freeze(FreezeMask freeze) {
        if (freeze.trainable.size() != ck_.params.tensors.size()) {
            throw std::invalid_argument("freeze mask size mismatch");
        }
        freeze_ = std::move(freeze);
    }

    const Checkpoint<S>& checkpoint() const { return ck_; }
    Checkpoint<S>& checkpoint() { return ck_; }
    const DataSplit& split() const { return split_; }
    const TrainConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return ck_.schedule_step; }

    // One optimizer step; returns the batch loss.
    double step() {
        if (ck_.schedule_step >= cfg_.total_steps) {
            throw std::runtime_error("training budget exhausted");
        }
        Rng rng(0);
        rng.state = ck_.train_rng_state;
        auto draw = sampler_.sample(cfg_.draw_per_step, rng);

        std::vector<std::vector<int>> inputs, target_in;
        std::vector<std::vector<int>> labels;
        for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
            const u64 second =
                cfg_.task == Task::gcd ? gcd_partner(draw[i], cfg_.gcd_lo, cfg_.gcd_hi) : 0;
            auto ex = encode_example(cfg_.task, draw[i], second, cfg_.model.base, cfg_.model.max_len);
            inputs.push_back(std::move(ex.input_tokens));
            target_in.push_back(std::move(ex.target_in));
            labels.push_back(std::move(ex.labels));
        }

        ck_.params.zero_grad();
        auto enc = encode(cfg_.model, ck_.params, inputs);
        auto logits = decode_teacher_forced(cfg_.model, ck_.params, enc, target_in);
        const int tmax = logits.rows() / static_cast<int>(cfg_.batch_size);
        std::vector<int> flat;
        flat.reserve(logits.rows());
        for (const auto& l : labels) {
            for (int j = 0; j < tmax; ++j) {
                flat.push_back(j < static_cast<int>(l.size()) ? l[static_cast<std::size_t>(j)]
                                                              : cfg_.model.pad_id());
            }
        }
        auto loss = cross_entropy_rows(logits, flat, cfg_.model.pad_id());
        backward(loss);

        const double lr = lr_at(static_cast<int>(ck_.schedule_step) + 1, cfg_.total_steps, cfg_.optim);
        adamw_step(ck_.params, ck_.opt, freeze_, lr);
        ck_.schedule_step += 1;
        ck_.train_rng_state = rng.state;
        return static_cast<double>(loss.item());
    }

    MetricRecord evaluate_now(double loss) const {
        return metrics_from_eval(ck_.schedule_step, loss, eval_outputs());
    }
    EvalOutputs eval_outputs() const {
        return evaluate_greedy(cfg_.model, ck_.params, split_.eval_set, cfg_.task, cfg_.eval_limit,
                               cfg_.gcd_lo, cfg_.gcd_hi);
    }

    // Runs up to `steps` optimizer steps, emitting metric records at the eval
    // cadence and invoking the checkpoint hook at the checkpoint cadence.
    // `stop` (optional) is checked at each eval point for early termination.
    std::vector<MetricRecord> run(
        int steps,
        const std::function<void(const Checkpoint<S>&)>& on_checkpoint = nullptr,
        const std::function<bool(const MetricRecord&)>& stop = nullptr) {
        std::vector<MetricRecord> records;
        double loss = 0;
        for (int i = 0; i < steps && ck_.schedule_step < cfg_.total_steps; ++i) {
            loss = step();
            const bool at_eval = ck_.schedule_step % cfg_.eval_every == 0 ||
                                 ck_.schedule_step == cfg_.total_steps;
            const bool at_ckpt = ck_.schedule_step % cfg_.checkpoint_every == 0 ||
                                 ck_.schedule_step == cfg_.total_steps;
            if (at_eval) { records.push_back(evaluate_now(loss)); }
            if (at_ckpt && on_checkpoint) { on_checkpoint(ck_); }
            if (at_eval && stop && stop(records.back())) { break; }
        }
        return records;
    }

  private:
    explicit Trainer(const TrainConfig& cfg)
        : cfg_(cfg),
          split_(build_split(cfg.sampling.range_lo, cfg.sampling.range_hi, cfg.eval_size,
                             cfg.data_seed)),
          sampler_(cfg.sampling, split_, cfg.model.base) {}

    TrainConfig cfg_;
    DataSplit split_;
    BatchSampler sampler_;
    Checkpoint<S> ck_;
    FreezeMask freeze_{};
};

}  // namespace clab
