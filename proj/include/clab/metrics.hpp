#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <clab/checkpoint.hpp>
#include <clab/numeral.hpp>
#include <clab/transformer.hpp>

namespace clab {

namespace detail {

// Regularized incomplete beta I_x(a,b) by Lentz's continued fraction.
inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpmin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpmin) { d = kFpmin; }
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpmin) { d = kFpmin; }
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpmin) { c = kFpmin; }
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpmin) { d = kFpmin; }
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpmin) { c = kFpmin; }
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) { break; }
    }
    return h;
}

inline double incbeta(double a, double b, double x) {
    if (x <= 0.0) { return 0.0; }
    if (x >= 1.0) { return 1.0; }
    const double lnbeta = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(lnbeta);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

// Quantile of Beta(a,b) by bisection; monotone, so 90 halvings suffice.
inline double incbeta_inv(double a, double b, double p) {
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 90; ++i) {
        const double mid = 0.5 * (lo + hi);
        (incbeta(a, b, mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Exact binomial 95% interval via the Beta-quantile formulation.
inline std::pair<double, double> clopper_pearson(std::int64_t k, std::int64_t n,
                                                 double alpha = 0.05) {
    if (k < 0 || n < 0 || k > n) { throw std::invalid_argument("clopper_pearson: need 0 <= k <= n"); }
    if (n == 0) { return {0.0, 1.0}; }
    const double kd = static_cast<double>(k), nd = static_cast<double>(n);
    const double lo = k == 0 ? 0.0 : detail::incbeta_inv(kd, nd - kd + 1.0, alpha / 2.0);
    const double hi = k == n ? 1.0 : detail::incbeta_inv(kd + 1.0, nd - kd, 1.0 - alpha / 2.0);
    return {lo, hi};
}

struct AccResult {
    std::int64_t correct{0};
    std::int64_t total{0};
    double acc{0};
    double ci_lo{0};
    double ci_hi{1};
};

// Exact-sequence accuracy with its confidence interval. The optional mask
// restricts to a subset (e.g. a parity branch); masked-out pairs are ignored.
inline AccResult acc_seq(const std::vector<std::vector<int>>& predictions,
                         const std::vector<std::vector<int>>& targets,
                         const std::vector<char>* include = nullptr, double alpha = 0.05) {
    if (predictions.size() != targets.size()) { throw std::invalid_argument("acc_seq: length mismatch"); }
    if (include != nullptr && include->size() != targets.size()) {
        throw std::invalid_argument("acc_seq: mask length mismatch");
    }
    AccResult r;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (include != nullptr && !(*include)[i]) { continue; }
        r.total += 1;
        if (predictions[i] == targets[i]) { r.correct += 1; }
    }
    r.acc = r.total == 0 ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(r.total);
    std::tie(r.ci_lo, r.ci_hi) = clopper_pearson(r.correct, r.total, alpha);
    return r;
}

// Token-level match rate; positions past the shorter sequence count as wrong.
inline double digit_accuracy(const std::vector<std::vector<int>>& predictions,
                             const std::vector<std::vector<int>>& targets) {
    if (predictions.size() != targets.size()) {
        throw std::invalid_argument("digit_accuracy: length mismatch");
    }
    std::int64_t match = 0, total = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& p = predictions[i];
        const auto& t = targets[i];
        const std::size_t overlap = std::min(p.size(), t.size());
        for (std::size_t j = 0; j < overlap; ++j) { match += (p[j] == t[j]); }
        total += static_cast<std::int64_t>(std::max(p.size(), t.size()));
    }
    return total == 0 ? 0.0 : static_cast<double>(match) / static_cast<double>(total);
}

struct ParticipationRatio {
    double value{1.0};
    bool degenerate{false};  // all-constant states
};

// PR = (Σλ)²/Σλ² over the eigenvalues of the mean-centered covariance,
// computed as (tr C)² / ‖C‖_F² without an eigendecomposition.
template <class S>
ParticipationRatio participation_ratio(const std::vector<std::vector<S>>& states) {
    const std::size_t n = states.size();
    if (n < 2) { throw std::invalid_argument("participation_ratio: need >= 2 examples"); }
    const std::size_t d = states[0].size();
    for (const auto& s : states) {
        if (s.size() != d) { throw std::invalid_argument("participation_ratio: ragged states"); }
    }
    std::vector<double> mean(d, 0.0);
    for (const auto& s : states) {
        for (std::size_t j = 0; j < d; ++j) { mean[j] += static_cast<double>(s[j]); }
    }
    for (auto& m : mean) { m /= static_cast<double>(n); }

    std::vector<double> cov(d * d, 0.0);
    std::vector<double> row(d);
    for (const auto& s : states) {
        for (std::size_t j = 0; j < d; ++j) { row[j] = static_cast<double>(s[j]) - mean[j]; }
        for (std::size_t a = 0; a < d; ++a) {
            const double ra = row[a];
            double* c = cov.data() + a * d;
            for (std::size_t b = 0; b < d; ++b) { c[b] += ra * row[b]; }
        }
    }
    double trace = 0, frob2 = 0;
    for (std::size_t a = 0; a < d; ++a) { trace += cov[a * d + a]; }
    for (double c : cov) { frob2 += c * c; }
    ParticipationRatio pr;
    if (trace <= 0.0 || frob2 <= 0.0) {
        pr.degenerate = true;
        return pr;
    }
    pr.value = trace * trace / frob2;
    return pr;
}

enum class CosineScope { full, encoder, decoder };

// Cosine between flattened parameter vectors of two checkpoints over the
// chosen subtree. Configs must match.
template <class S>
double checkpoint_cosine(const Checkpoint<S>& a, const Checkpoint<S>& b,
                         CosineScope scope = CosineScope::full) {
    if (!a.config.compatible_with(b.config)) {
        throw std::invalid_argument("checkpoint_cosine: config mismatch");
    }
    if (a.params.names != b.params.names) {
        throw std::invalid_argument("checkpoint_cosine: parameter layout mismatch");
    }
    const std::string prefix = scope == CosineScope::encoder ? "enc."
                               : scope == CosineScope::decoder ? "dec."
                                                               : "";
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.params.names.size(); ++i) {
        if (!prefix.empty() && a.params.names[i].rfind(prefix, 0) != 0) { continue; }
        const auto& va = a.params.tensors[i].values();
        const auto& vb = b.params.tensors[i].values();
        for (std::size_t j = 0; j < va.size(); ++j) {
            dot += static_cast<double>(va[j]) * static_cast<double>(vb[j]);
            na += static_cast<double>(va[j]) * static_cast<double>(va[j]);
            nb += static_cast<double>(vb[j]) * static_cast<double>(vb[j]);
        }
    }
    if (na == 0.0 || nb == 0.0) { throw std::invalid_argument("checkpoint_cosine: zero vector"); }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Plug-in conditional entropy, in bits, of the last `window` output digits of
// T(n) given the last `window` input digits of n, over one parity branch.
// Numbers shorter than the window are zero-padded on the high side, i.e. the
// context is simply the value mod b^window.
inline double local_predictability(int b, bool odd_branch, u64 lo, u64 hi, int window = 2) {
    check_base(b);
    if (lo < 1 || lo > hi) { throw std::invalid_argument("local_predictability: bad range"); }
    if (window < 1) { throw std::invalid_argument("local_predictability: bad window"); }
    u64 mod = 1;
    for (int i = 0; i < window; ++i) { mod *= static_cast<u64>(b); }
    std::map<u64, std::map<u64, std::int64_t>> joint;  // x -> y -> count
    std::int64_t total = 0;
    for (u64 n = lo; n <= hi; ++n) {
        if ((n % 2 == 1) != odd_branch) { continue; }
        joint[n % mod][collatz_step(n) % mod] += 1;
        total += 1;
    }
    if (total == 0) { throw std::invalid_argument("local_predictability: empty branch"); }
    double h = 0;
    for (const auto& [x, ys] : joint) {
        std::int64_t nx = 0;
        for (const auto& [y, c] : ys) { nx += c; }
        const double px = static_cast<double>(nx) / static_cast<double>(total);
        double hx = 0;
        for (const auto& [y, c] : ys) {
            const double p = static_cast<double>(c) / static_cast<double>(nx);
            hx -= p * std::log2(p);
        }
        h += px * hx;
    }
    return h;
}

struct PlateauResult {
    std::vector<std::pair<int, int>> spans;  // inclusive index ranges
    int transition{-1};                      // -1 when no transition detected
};

// Flat spans of an accuracy series: every sliding window inside a span has
// spread < epsilon. Transition = first step after the longest plateau where
// the series exceeds that plateau's max by more than 5*epsilon.
inline PlateauResult plateau_detect(const std::vector<double>& series, int window, double epsilon) {
    const int n = static_cast<int>(series.size());
    if (window < 2 || n < window) { throw std::invalid_argument("plateau_detect: series shorter than window"); }
    std::vector<char> flat(static_cast<std::size_t>(n - window + 1), 0);
    for (int i = 0; i + window <= n; ++i) {
        double mn = series[static_cast<std::size_t>(i)], mx = mn;
        for (int j = i + 1; j < i + window; ++j) {
            mn = std::min(mn, series[static_cast<std::size_t>(j)]);
            mx = std::max(mx, series[static_cast<std::size_t>(j)]);
        }
        flat[static_cast<std::size_t>(i)] = (mx - mn < epsilon);
    }
    PlateauResult r;
    int i = 0;
    while (i < static_cast<int>(flat.size())) {
        if (!flat[static_cast<std::size_t>(i)]) {
            ++i;
            continue;
        }
        int j = i;
        while (j + 1 < static_cast<int>(flat.size()) && flat[static_cast<std::size_t>(j + 1)]) { ++j; }
        r.spans.emplace_back(i, j + window - 1);
        i = j + 1;
    }
    if (r.spans.empty()) { return r; }
    auto longest = *std::max_element(r.spans.begin(), r.spans.end(),
                                     [](const auto& a, const auto& b) {
                                         return a.second - a.first < b.second - b.first;
                                     });
    double plateau_max = series[static_cast<std::size_t>(longest.first)];
    for (int k = longest.first; k <= longest.second; ++k) {
        plateau_max = std::max(plateau_max, series[static_cast<std::size_t>(k)]);
    }
    for (int k = longest.second + 1; k < n; ++k) {
        if (series[static_cast<std::size_t>(k)] > plateau_max + 5 * epsilon) {
            r.transition = k;
            break;
        }
    }
    return r;
}

// One checkpoint's evaluation record; the unit of the metrics stream.
struct MetricRecord {
    std::int64_t step{0};
    double loss{0};
    AccResult overall, even, odd;
    double digit_acc{0};
    std::map<std::string, double> probe_acc;  // e.g. "layer2/k1" -> accuracy
    std::optional<double> delta_erase;
    std::optional<double> participation;
    std::optional<double> ckpt_cosine;

    nlohmann::json to_json() const {
        nlohmann::json j{{"step", step},
                         {"loss", loss},
                         {"acc", overall.acc},
                         {"acc_ci", {overall.ci_lo, overall.ci_hi}},
                         {"acc_even", even.acc},
                         {"acc_even_ci", {even.ci_lo, even.ci_hi}},
                         {"acc_odd", odd.acc},
                         {"acc_odd_ci", {odd.ci_lo, odd.ci_hi}},
                         {"n_even", even.total},
                         {"n_odd", odd.total},
                         {"n_correct", overall.correct},
                         {"digit_acc", digit_acc}};
        if (!probe_acc.empty()) { j["probe_acc"] = probe_acc; }
        if (delta_erase) { j["delta_erase"] = *delta_erase; }
        if (participation) { j["participation_ratio"] = *participation; }
        if (ckpt_cosine) { j["checkpoint_cosine"] = *ckpt_cosine; }
        return j;
    }
};

}  // namespace clab
