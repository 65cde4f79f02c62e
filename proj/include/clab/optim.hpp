#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <clab/transformer.hpp>

namespace clab {

struct OptimHyper {
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-9};
    double base_lr{1e-4};
    double weight_decay{1e-2};
    double clip_norm{5.0};
    int warmup_steps{4000};
    // decoupled decay applies to weight matrices only; layer-norm
    // gains/biases, biases and embeddings are excluded
    bool decay_matrices_only{true};
};

// Linear warmup to base_lr, then cosine decay to zero at total_steps.
inline double lr_at(int step, int total_steps, const OptimHyper& h = OptimHyper{}) {
    if (step < 0 || step > total_steps) { throw std::invalid_argument("lr_at: step out of range"); }
    const int warm = std::min(h.warmup_steps, total_steps);
    if (step <= warm) { return h.base_lr * (warm == 0 ? 1.0 : static_cast<double>(step) / warm); }
    const double t = static_cast<double>(step - warm) / (total_steps - warm);
    return h.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Per-parameter trainable flag, aligned with ParamSet order.
struct FreezeMask {
    std::vector<char> trainable;

    template <class S>
    static FreezeMask all_trainable(const ParamSet<S>& p) {
        FreezeMask m;
        m.trainable.assign(p.tensors.size(), 1);
        return m;
    }
    template <class S>
    static FreezeMask freeze_prefix(const ParamSet<S>& p, const std::string& prefix) {
        FreezeMask m = all_trainable(p);
        for (std::size_t i = 0; i < p.names.size(); ++i) {
            if (p.names[i].rfind(prefix, 0) == 0) { m.trainable[i] = 0; }
        }
        return m;
    }
    bool frozen(std::size_t i) const { return !trainable[i]; }
};

template <class S>
struct OptimState {
    OptimHyper hyper;
    std::vector<std::vector<S>> m;  // first moments, per parameter tensor
    std::vector<std::vector<S>> v;  // second moments
    std::int64_t step{0};

    static OptimState init(const ParamSet<S>& params, OptimHyper h = OptimHyper{}) {
        OptimState s;
        s.hyper = h;
        for (const auto& t : params.tensors) {
            s.m.emplace_back(t.size(), S(0));
            s.v.emplace_back(t.size(), S(0));
        }
        return s;
    }
};

namespace detail {

inline bool decayable(const std::string& name, int rows) {
    return rows > 1 && name.find("embed") == std::string::npos;
}

}  // namespace detail

// One AdamW step with decoupled weight decay and global-norm clipping over
// the trainable gradients. Frozen parameters and their moments are untouched
// bit-for-bit. Non-finite gradients abort before any mutation.
template <class S>
void adamw_step(ParamSet<S>& params, OptimState<S>& state, const FreezeMask& freeze, double lr) {
    if (freeze.trainable.size() != params.tensors.size()) {
        throw std::invalid_argument("freeze mask size mismatch");
    }
    double sq = 0;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        if (freeze.frozen(i)) { continue; }
        for (S g : params.tensors[i].grad()) {
            if (!std::isfinite(static_cast<double>(g))) {
                throw std::runtime_error("adamw_step: non-finite gradient in " + params.names[i]);
            }
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    const double norm = std::sqrt(sq);
    const double clip_scale =
        (state.hyper.clip_norm > 0 && norm > state.hyper.clip_norm) ? state.hyper.clip_norm / norm : 1.0;

    state.step += 1;
    const double b1 = state.hyper.beta1;
    const double b2 = state.hyper.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        if (freeze.frozen(i)) { continue; }
        auto& t = params.tensors[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        const bool decay = !state.hyper.decay_matrices_only || detail::decayable(params.names[i], t.rows());
        const double wd = decay ? state.hyper.weight_decay : 0.0;
        auto& grads = t.grad();
        auto& vals = t.values();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double g = static_cast<double>(grads[j]) * clip_scale;
            m[j] = static_cast<S>(b1 * m[j] + (1.0 - b1) * g);
            v[j] = static_cast<S>(b2 * v[j] + (1.0 - b2) * g * g);
            const double mhat = static_cast<double>(m[j]) / bc1;
            const double vhat = static_cast<double>(v[j]) / bc2;
            const double update = mhat / (std::sqrt(vhat) + state.hyper.eps) + wd * vals[j];
            vals[j] = static_cast<S>(vals[j] - lr * update);
        }
    }
}

}  // namespace clab
