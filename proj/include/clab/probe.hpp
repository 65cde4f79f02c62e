#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <clab/rng.hpp>
#include <clab/transformer.hpp>

namespace clab {

// Mean over the non-PAD positions of one example's hidden states at the
// chosen encoder layer.
template <class S>
std::vector<double> pool_hidden(const EncoderOutput<S>& enc, int layer, int example) {
    if (layer < 0 || layer >= static_cast<int>(enc.layers.size())) {
        throw std::invalid_argument("pool_hidden: layer out of range");
    }
    if (example < 0 || example >= enc.batch) {
        throw std::invalid_argument("pool_hidden: example out of range");
    }
    const auto& h = enc.layers[static_cast<std::size_t>(layer)];
    const int d = h.cols();
    std::vector<double> z(static_cast<std::size_t>(d), 0.0);
    int count = 0;
    for (int j = 0; j < enc.lmax; ++j) {
        const int row = example * enc.lmax + j;
        if (!enc.valid[static_cast<std::size_t>(row)]) { continue; }
        for (int c = 0; c < d; ++c) { z[static_cast<std::size_t>(c)] += static_cast<double>(h.at(row, c)); }
        ++count;
    }
    for (auto& x : z) { x /= count; }
    return z;
}

template <class S>
std::vector<std::vector<double>> pool_hidden_all(const EncoderOutput<S>& enc, int layer) {
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<std::size_t>(enc.batch));
    for (int i = 0; i < enc.batch; ++i) { out.push_back(pool_hidden(enc, layer, i)); }
    return out;
}

// L2-regularized logistic regression on standardized features. The stored
// unit direction u = w/|w| is what erasure projects out.
struct ProbeModel {
    std::vector<double> w;
    double b{0};
    std::vector<double> mean, std;
    double l2{1.0};
    std::string target;

    double logit(const std::vector<double>& z) const {
        double s = b;
        for (std::size_t j = 0; j < w.size(); ++j) { s += w[j] * (z[j] - mean[j]) / std[j]; }
        return s;
    }
    int predict(const std::vector<double>& z) const { return logit(z) > 0 ? 1 : 0; }

    std::vector<double> direction() const {
        double norm = 0;
        for (double x : w) { norm += x * x; }
        norm = std::sqrt(norm);
        if (norm == 0) { throw std::runtime_error("probe direction undefined: zero weights"); }
        std::vector<double> u(w.size());
        for (std::size_t j = 0; j < w.size(); ++j) { u[j] = w[j] / norm; }
        return u;
    }
};

struct ProbeFit {
    ProbeModel model;
    double heldout_acc{0};
    double train_acc{0};
    std::size_t n_train{0}, n_test{0};
    int iterations{0};
    bool converged{false};
};

namespace detail {

// Cholesky solve of the (small, SPD) Newton system.
inline std::vector<double> spd_solve(std::vector<double> a, std::vector<double> rhs) {
    const std::size_t n = rhs.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) { s -= a[i * n + k] * a[j * n + k]; }
            if (i == j) {
                if (s <= 0) { throw std::runtime_error("probe solve: matrix not positive definite"); }
                a[i * n + i] = std::sqrt(s);
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        double s = rhs[i];
        for (std::size_t k = 0; k < i; ++k) { s -= a[i * n + k] * rhs[k]; }
        rhs[i] = s / a[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
        double s = rhs[i];
        for (std::size_t k = i + 1; k < n; ++k) { s -= a[k * n + i] * rhs[k]; }
        rhs[i] = s / a[i * n + i];
    }
    return rhs;
}

}  // namespace detail

// Fits on a seeded 80/20 split; features are standardized with train-split
// statistics; Newton iterations with backtracking run to gradient norm
// < 1e-6 or the iteration cap. Single-class data is rejected.
inline ProbeFit fit_probe(const std::vector<std::vector<double>>& features,
                          const std::vector<int>& labels, double l2 = 1.0,
                          double split_ratio = 0.8, u64 seed = 0) {
    if (features.size() != labels.size()) { throw std::invalid_argument("fit_probe: size mismatch"); }
    if (features.size() < 5) { throw std::invalid_argument("fit_probe: too few examples"); }
    const std::size_t n = features.size();
    const std::size_t d = features[0].size();
    for (const auto& f : features) {
        if (f.size() != d) { throw std::invalid_argument("fit_probe: ragged features"); }
    }
    for (int y : labels) {
        if (y != 0 && y != 1) { throw std::invalid_argument("fit_probe: labels must be 0/1"); }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) { order[i] = i; }
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    for (std::size_t i = n; i > 1; --i) { std::swap(order[i - 1], order[rng.below(i)]); }
    const std::size_t n_train = std::max<std::size_t>(1, static_cast<std::size_t>(split_ratio * n));

    std::size_t pos = 0;
    for (std::size_t i = 0; i < n_train; ++i) { pos += static_cast<std::size_t>(labels[order[i]]); }
    if (pos < 2 || n_train - pos < 2) {
        throw std::invalid_argument("fit_probe: need >= 2 train examples per class");
    }

    ProbeFit fit;
    auto& m = fit.model;
    m.l2 = l2;
    m.mean.assign(d, 0.0);
    m.std.assign(d, 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < d; ++j) { m.mean[j] += features[order[i]][j]; }
    }
    for (auto& x : m.mean) { x /= static_cast<double>(n_train); }
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = features[order[i]][j] - m.mean[j];
            m.std[j] += c * c;
        }
    }
    for (auto& x : m.std) {
        x = std::sqrt(x / static_cast<double>(n_train));
        if (x < 1e-12) { x = 1.0; }  // constant feature contributes nothing
    }

    // standardized train matrix with a trailing bias column
    std::vector<double> X(n_train * (d + 1));
    std::vector<double> y(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            X[i * (d + 1) + j] = (features[order[i]][j] - m.mean[j]) / m.std[j];
        }
        X[i * (d + 1) + d] = 1.0;
        y[i] = static_cast<double>(labels[order[i]]);
    }

    const std::size_t p = d + 1;
    std::vector<double> theta(p, 0.0);
    auto loss_at = [&](const std::vector<double>& th) {
        double loss = 0;
        for (std::size_t i = 0; i < n_train; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < p; ++j) { s += X[i * p + j] * th[j]; }
            // log(1 + exp(-t)) with t = s for y=1, -s for y=0
            const double t = y[i] > 0.5 ? s : -s;
            loss += t > 0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t));
        }
        loss /= static_cast<double>(n_train);
        for (std::size_t j = 0; j < d; ++j) { loss += 0.5 * l2 * th[j] * th[j] / static_cast<double>(n_train); }
        return loss;
    };

    constexpr int kMaxIter = 100;
    constexpr double kTol = 1e-6;
    for (int iter = 0; iter < kMaxIter; ++iter) {
        std::vector<double> grad(p, 0.0);
        std::vector<double> hess(p * p, 0.0);
        for (std::size_t i = 0; i < n_train; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < p; ++j) { s += X[i * p + j] * theta[j]; }
            const double sig = 1.0 / (1.0 + std::exp(-s));
            const double r = sig - y[i];
            const double wgt = std::max(sig * (1.0 - sig), 1e-10);
            for (std::size_t j = 0; j < p; ++j) {
                grad[j] += r * X[i * p + j];
                for (std::size_t k = 0; k <= j; ++k) { hess[j * p + k] += wgt * X[i * p + j] * X[i * p + k]; }
            }
        }
        for (std::size_t j = 0; j < p; ++j) {
            grad[j] /= static_cast<double>(n_train);
            for (std::size_t k = 0; k <= j; ++k) {
                hess[j * p + k] /= static_cast<double>(n_train);
                hess[k * p + j] = hess[j * p + k];
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            grad[j] += l2 * theta[j] / static_cast<double>(n_train);
            hess[j * p + j] += l2 / static_cast<double>(n_train);
        }
        hess[d * p + d] += 1e-10;  // keep the bias row well-posed when separated

        double gnorm = 0;
        for (double g : grad) { gnorm += g * g; }
        gnorm = std::sqrt(gnorm);
        fit.iterations = iter;
        if (gnorm < kTol) {
            fit.converged = true;
            break;
        }

        auto step = detail::spd_solve(hess, grad);
        const double f0 = loss_at(theta);
        double alpha = 1.0;
        std::vector<double> trial(p);
        for (int back = 0; back < 40; ++back) {
            for (std::size_t j = 0; j < p; ++j) { trial[j] = theta[j] - alpha * step[j]; }
            if (loss_at(trial) <= f0) { break; }
            alpha *= 0.5;
        }
        theta = trial;
    }

    m.w.assign(theta.begin(), theta.begin() + static_cast<long>(d));
    m.b = theta[d];

    auto acc_over = [&](std::size_t from, std::size_t to) {
        std::size_t hit = 0;
        for (std::size_t i = from; i < to; ++i) {
            hit += (m.predict(features[order[i]]) == labels[order[i]]);
        }
        return static_cast<double>(hit) / static_cast<double>(to - from);
    };
    fit.n_train = n_train;
    fit.n_test = n - n_train;
    fit.train_acc = acc_over(0, n_train);
    fit.heldout_acc = fit.n_test > 0 ? acc_over(n_train, n) : fit.train_acc;
    return fit;
}

// Binary digit a_k of n (a_1 = parity).
inline int binary_digit(u64 n, int k) { return static_cast<int>((n >> (k - 1)) & 1u); }

struct ConditionalProbeResult {
    double accuracy{0};                    // example-weighted mean held-out accuracy
    std::map<u64, double> per_class;       // residue class mod 2^{k-1} -> accuracy
};

// Probes a_k conditionally: one fit per residue class of n mod 2^{k-1},
// so the target carries only the structure finer than what the class fixes.
inline ConditionalProbeResult conditional_probe(const std::vector<std::vector<double>>& features,
                                                const std::vector<u64>& n_values, int k,
                                                double l2 = 1.0, u64 seed = 0) {
    if (k < 2) { throw std::invalid_argument("conditional_probe: k must be >= 2"); }
    if (features.size() != n_values.size()) {
        throw std::invalid_argument("conditional_probe: size mismatch");
    }
    const u64 mod = u64(1) << (k - 1);
    std::map<u64, std::vector<std::size_t>> classes;
    for (std::size_t i = 0; i < n_values.size(); ++i) { classes[n_values[i] % mod].push_back(i); }
    if (classes.size() != mod) {
        throw std::invalid_argument("conditional_probe: empty residue class mod 2^(k-1)");
    }
    ConditionalProbeResult res;
    std::size_t weighted = 0;
    double acc_sum = 0;
    for (const auto& [r, idx] : classes) {
        std::vector<std::vector<double>> f;
        std::vector<int> y;
        f.reserve(idx.size());
        for (std::size_t i : idx) {
            f.push_back(features[i]);
            y.push_back(binary_digit(n_values[i], k));
        }
        auto fit = fit_probe(f, y, l2, 0.8, seed ^ r);
        res.per_class[r] = fit.heldout_acc;
        acc_sum += fit.heldout_acc * static_cast<double>(idx.size());
        weighted += idx.size();
    }
    res.accuracy = acc_sum / static_cast<double>(weighted);
    return res;
}

}  // namespace clab
