#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <clab/numeral.hpp>
#include <clab/rng.hpp>

namespace clab {

enum class SampleKind { uniform, log_uniform, residue_stratified, carry_stratified, short_carry };

struct SamplingSpec {
    SampleKind kind{SampleKind::uniform};
    u64 range_lo{1};
    u64 range_hi{10000};
    int modulus{64};     // residue_stratified
    int max_depth{2};    // short_carry: odd n with carry_depth > max_depth excluded
    std::map<int, double> depth_weights;  // carry_stratified; empty = equal mass per bucket

    void validate() const {
        if (range_lo < 1 || range_lo > range_hi) { throw std::invalid_argument("bad sampling range"); }
        if (modulus < 1) { throw std::invalid_argument("modulus must be positive"); }
        if (max_depth < 0) { throw std::invalid_argument("max_depth must be nonnegative"); }
    }
};

inline SampleKind sample_kind_from_string(const std::string& s) {
    if (s == "uniform") { return SampleKind::uniform; }
    if (s == "log_uniform") { return SampleKind::log_uniform; }
    if (s == "residue_stratified") { return SampleKind::residue_stratified; }
    if (s == "carry_stratified") { return SampleKind::carry_stratified; }
    if (s == "short_carry") { return SampleKind::short_carry; }
    throw std::invalid_argument("unknown sampling kind: " + s);
}

inline std::string to_string(SampleKind k) {
    switch (k) {
        case SampleKind::uniform: return "uniform";
        case SampleKind::log_uniform: return "log_uniform";
        case SampleKind::residue_stratified: return "residue_stratified";
        case SampleKind::carry_stratified: return "carry_stratified";
        case SampleKind::short_carry: return "short_carry";
    }
    return "?";
}

struct DataSplit {
    std::vector<u64> train_pool;  // ascending
    std::vector<u64> eval_set;    // in sampled order, deterministic given seed
    u64 seed{0};
};

// Partition [lo, hi] into a held-out eval set sampled without replacement
// and a disjoint training pool.
inline DataSplit build_split(u64 lo, u64 hi, std::size_t eval_size, u64 seed) {
    if (lo < 1 || lo > hi) { throw std::invalid_argument("bad split range"); }
    const std::size_t n = static_cast<std::size_t>(hi - lo + 1);
    if (eval_size >= n) { throw std::invalid_argument("eval_size must be smaller than the range"); }
    std::vector<u64> all(n);
    std::iota(all.begin(), all.end(), lo);
    Rng rng(seed ^ 0x5eedb0a7u);
    DataSplit split;
    split.seed = seed;
    for (std::size_t i = 0; i < eval_size; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(all[i], all[j]);
        split.eval_set.push_back(all[i]);
    }
    split.train_pool.assign(all.begin() + static_cast<long>(eval_size), all.end());
    std::sort(split.train_pool.begin(), split.train_pool.end());
    return split;
}

// Draws training integers from a split under one of the five sampling
// distributions. Precomputes per-spec tables once; reuse across steps.
class BatchSampler {
  public:
    BatchSampler(SamplingSpec spec, const DataSplit& split, int base)
        : spec_(spec), base_(base) {
        spec_.validate();
        check_base(base);
        pool_ = split.train_pool;
        if (pool_.empty()) { throw std::invalid_argument("empty training pool"); }
        switch (spec_.kind) {
            case SampleKind::uniform:
                break;
            case SampleKind::log_uniform: {
                cumw_.reserve(pool_.size());
                double acc = 0;
                for (u64 n : pool_) {
                    acc += 1.0 / static_cast<double>(n);
                    cumw_.push_back(acc);
                }
                break;
            }
            case SampleKind::residue_stratified: {
                std::map<u64, std::vector<u64>> classes;
                for (u64 n : pool_) { classes[n % static_cast<u64>(spec_.modulus)].push_back(n); }
                for (auto& [r, members] : classes) { strata_.push_back(std::move(members)); }
                break;
            }
            case SampleKind::carry_stratified: {
                std::map<int, std::vector<u64>> buckets;
                for (u64 n : pool_) {
                    if (n % 2 == 0) {
                        evens_.push_back(n);
                    } else {
                        buckets[carry_depth(n, base_)].push_back(n);
                    }
                }
                if (evens_.empty() || buckets.empty()) {
                    throw std::invalid_argument("carry_stratified: missing parity class in pool");
                }
                double total = 0;
                for (auto& [depth, members] : buckets) {
                    double w = 1.0;
                    if (!spec_.depth_weights.empty()) {
                        auto it = spec_.depth_weights.find(depth);
                        if (it == spec_.depth_weights.end()) {
                            throw std::invalid_argument("carry_stratified: no weight for depth " +
                                                        std::to_string(depth));
                        }
                        w = it->second;
                    }
                    total += w;
                    strata_.push_back(std::move(members));
                    cumw_.push_back(total);
                }
                break;
            }
            case SampleKind::short_carry: {
                for (u64 n : pool_) {
                    if (n % 2 == 1 && carry_depth(n, base_) > spec_.max_depth) { continue; }
                    filtered_.push_back(n);
                }
                if (filtered_.empty()) { throw std::invalid_argument("short_carry: empty filtered pool"); }
                break;
            }
        }
    }

    std::vector<u64> sample(std::size_t count, Rng& rng) const {
        if (count < 1) { throw std::invalid_argument("sample count must be >= 1"); }
        std::vector<u64> out;
        out.reserve(count);
        switch (spec_.kind) {
            case SampleKind::uniform:
                for (std::size_t i = 0; i < count; ++i) {
                    out.push_back(pool_[rng.below(pool_.size())]);
                }
                break;
            case SampleKind::log_uniform:
                for (std::size_t i = 0; i < count; ++i) {
                    const double x = rng.uniform() * cumw_.back();
                    const auto it = std::upper_bound(cumw_.begin(), cumw_.end(), x);
                    const std::size_t idx = std::min<std::size_t>(
                        static_cast<std::size_t>(it - cumw_.begin()), pool_.size() - 1);
                    out.push_back(pool_[idx]);
                }
                break;
            case SampleKind::residue_stratified: {
                // round-robin over classes, uniform member within class, then
                // a deterministic shuffle so batches are not class-ordered
                for (std::size_t i = 0; i < count; ++i) {
                    const auto& members = strata_[i % strata_.size()];
                    out.push_back(members[rng.below(members.size())]);
                }
                for (std::size_t i = out.size(); i > 1; --i) {
                    std::swap(out[i - 1], out[rng.below(i)]);
                }
                break;
            }
            case SampleKind::carry_stratified:
                for (std::size_t i = 0; i < count; ++i) {
                    if (rng.below(2) == 0) {
                        out.push_back(evens_[rng.below(evens_.size())]);
                    } else {
                        const double x = rng.uniform() * cumw_.back();
                        const auto it = std::upper_bound(cumw_.begin(), cumw_.end(), x);
                        const std::size_t b = std::min<std::size_t>(
                            static_cast<std::size_t>(it - cumw_.begin()), strata_.size() - 1);
                        out.push_back(strata_[b][rng.below(strata_[b].size())]);
                    }
                }
                break;
            case SampleKind::short_carry:
                for (std::size_t i = 0; i < count; ++i) {
                    out.push_back(filtered_[rng.below(filtered_.size())]);
                }
                break;
        }
        return out;
    }

  private:
    SamplingSpec spec_;
    int base_;
    std::vector<u64> pool_;
    std::vector<double> cumw_;
    std::vector<std::vector<u64>> strata_;
    std::vector<u64> evens_;
    std::vector<u64> filtered_;
};

inline std::vector<u64> sample_batch(const SamplingSpec& spec, const DataSplit& split, int base,
                                     std::size_t count, Rng& rng) {
    return BatchSampler(spec, split, base).sample(count, rng);
}

enum class Task { collatz, gcd };

// Deterministic second operand for the gcd task, so an integer always maps
// to the same example and evaluation is reproducible.
inline u64 gcd_partner(u64 n, u64 lo, u64 hi) {
    if (lo < 1 || lo > hi) { throw std::invalid_argument("gcd_partner: bad range"); }
    Rng r(n * 0x9e3779b97f4a7c15ull ^ 0x67636470ull);
    return lo + r.below(hi - lo + 1);
}

// One tokenized example. target_in is the BOS-prefixed teacher-forcing
// input; labels are the shifted targets ending in EOS.
struct TaskExample {
    Task task{Task::collatz};
    std::vector<int> input_tokens;
    std::vector<int> target_in;
    std::vector<int> labels;
    u64 n{0};
    u64 n2{0};          // second operand (gcd only)
    bool odd_branch{false};
    int carry_depth{-1};  // odd collatz examples only
};

// Token ids: 0..b-1 digits, b = PAD, b+1 = BOS, b+2 = EOS.
inline TaskExample encode_example(Task task, u64 n, u64 n2, int base, int max_len = 64) {
    check_base(base);
    TaskExample ex;
    ex.task = task;
    ex.n = n;
    u64 target_value = 0;
    if (task == Task::collatz) {
        ex.odd_branch = (n % 2 == 1);
        if (ex.odd_branch) { ex.carry_depth = carry_depth(n, base); }
        target_value = collatz_step(n);
        const auto in = to_digits(n, base);
        ex.input_tokens.assign(in.begin(), in.end());
    } else {
        ex.n2 = n2;
        target_value = gcd(n, n2);
        const auto da = to_digits(n, base);
        const auto db = to_digits(n2, base);
        ex.input_tokens.assign(da.begin(), da.end());
        ex.input_tokens.push_back(base + 1);  // BOS separator
        ex.input_tokens.insert(ex.input_tokens.end(), db.begin(), db.end());
    }
    const auto out = to_digits(target_value, base);
    ex.target_in.push_back(base + 1);
    ex.target_in.insert(ex.target_in.end(), out.begin(), out.end());
    ex.labels.assign(out.begin(), out.end());
    ex.labels.push_back(base + 2);
    if (static_cast<int>(ex.input_tokens.size()) > max_len ||
        static_cast<int>(ex.target_in.size()) > max_len) {
        throw std::invalid_argument("encoded example exceeds maximum sequence length");
    }
    return ex;
}

// Inverse of the input encoding: recovers the source integer(s).
inline std::vector<u64> decode_input(const std::vector<int>& tokens, int base) {
    std::vector<u64> values;
    DigitSeq digits;
    for (int t : tokens) {
        if (t == base + 1) {
            values.push_back(from_digits(digits, base));
            digits.clear();
        } else if (t < base) {
            digits.push_back(t);
        } else {
            throw std::invalid_argument("unexpected token in input");
        }
    }
    values.push_back(from_digits(digits, base));
    return values;
}

// Line-delimited record export for external inspection.
inline void export_examples(std::ostream& os, const std::vector<TaskExample>& examples, int base) {
    for (const auto& ex : examples) {
        nlohmann::json j{{"task", ex.task == Task::collatz ? "collatz" : "gcd"},
                         {"n", ex.n},
                         {"base", base},
                         {"input", ex.input_tokens},
                         {"target", ex.labels},
                         {"branch", ex.odd_branch ? "odd" : "even"},
                         {"carry_depth", ex.carry_depth}};
        if (ex.task == Task::gcd) { j["n2"] = ex.n2; }
        os << j.dump() << "\n";
    }
}

}  // namespace clab
