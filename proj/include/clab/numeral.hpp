#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace clab {

using u64 = std::uint64_t;
using DigitSeq = std::vector<int>;  // MSB-first at module boundaries

// An integer paired with its base-b digit sequence, MSB-first, no leading
// zeros except the single digit 0.
struct Numeral {
    u64 value{0};
    int base{10};
    DigitSeq digits{0};
};

// LSB-first trace of the 3n+1 digit transducer. carries[i] is the outgoing
// carry at position i; depth counts the nonzero entries.
struct CarryTrace {
    DigitSeq out_digits;  // LSB-first
    std::vector<int> carries;
    int depth{0};
};

inline void check_base(int b) {
    if (b < 2) { throw std::invalid_argument("base must be >= 2"); }
}

inline DigitSeq to_digits(u64 n, int b) {
    check_base(b);
    DigitSeq d;
    if (n == 0) { return {0}; }
    const u64 ub = static_cast<u64>(b);
    while (n > 0) {
        d.push_back(static_cast<int>(n % ub));
        n /= ub;
    }
    std::vector<int> msb(d.rbegin(), d.rend());
    return msb;
}

// Leading zeros accepted on input, never produced on output.
inline u64 from_digits(const DigitSeq& digits, int b) {
    check_base(b);
    u64 n = 0;
    const u64 ub = static_cast<u64>(b);
    for (int d : digits) {
        if (d < 0 || d >= b) { throw std::invalid_argument("digit out of range for base"); }
        if (n > (std::numeric_limits<u64>::max() - static_cast<u64>(d)) / ub) {
            throw std::overflow_error("from_digits: value exceeds 64-bit range");
        }
        n = n * ub + static_cast<u64>(d);
    }
    return n;
}

inline Numeral make_numeral(u64 n, int b) { return Numeral{n, b, to_digits(n, b)}; }

// One-step Collatz map: n/2 for even n, 3n+1 for odd n.
inline u64 collatz_step(u64 n) {
    if (n == 0) { throw std::invalid_argument("collatz_step requires n >= 1"); }
    if (n % 2 == 0) { return n / 2; }
    if (n > (std::numeric_limits<u64>::max() - 1) / 3) {
        throw std::overflow_error("collatz_step: 3n+1 exceeds 64-bit range");
    }
    return 3 * n + 1;
}

// Halving as a two-adjacent-digit window transduction (even base, even n):
// e_i = floor(d_i / 2) + (d_{i+1} mod 2) * (b / 2), with d_{k+1} = 0.
// Input and output are MSB-first; the output is leading-zero normalized.
inline DigitSeq halve_digits_local(const DigitSeq& digits, int b) {
    check_base(b);
    if (b % 2 != 0) { throw std::invalid_argument("halve_digits_local requires an even base"); }
    if (digits.empty()) { throw std::invalid_argument("empty digit sequence"); }
    for (int d : digits) {
        if (d < 0 || d >= b) { throw std::invalid_argument("digit out of range for base"); }
    }
    if (digits.back() % 2 != 0) {
        throw std::invalid_argument("halve_digits_local requires an even integer");
    }
    const int k = static_cast<int>(digits.size());
    DigitSeq out(k);
    for (int i = 0; i < k; ++i) {
        // position i counted from the LSB; MSB-first index is k-1-i
        const int di = digits[k - 1 - i];
        const int dnext = (i + 1 < k) ? digits[k - 2 - i] : 0;
        out[k - 1 - i] = di / 2 + (dnext % 2) * (b / 2);
    }
    std::size_t lead = 0;
    while (lead + 1 < out.size() && out[lead] == 0) { ++lead; }
    return DigitSeq(out.begin() + static_cast<long>(lead), out.end());
}

// LSB-first transducer for the odd branch. At position i, t = 3*d_i + c_in
// (+1 only at i = 0); emits t mod b; c_out = floor(t / b). Runs past the
// input while the carry is nonzero. Accepts MSB-first digits.
inline CarryTrace mul3_add1_digits(const DigitSeq& digits, int b) {
    check_base(b);
    if (digits.empty()) { throw std::invalid_argument("empty digit sequence"); }
    CarryTrace trace;
    const int k = static_cast<int>(digits.size());
    int carry = 0;
    for (int i = 0; i < k; ++i) {
        const int di = digits[k - 1 - i];
        if (di < 0 || di >= b) { throw std::invalid_argument("digit out of range for base"); }
        int t = 3 * di + carry + (i == 0 ? 1 : 0);
        trace.out_digits.push_back(t % b);
        carry = t / b;
        trace.carries.push_back(carry);
        if (carry != 0) { ++trace.depth; }
    }
    while (carry != 0) {
        trace.out_digits.push_back(carry % b);
        carry /= b;
        trace.carries.push_back(carry);
        if (carry != 0) { ++trace.depth; }
    }
    return trace;
}

// Number of nonzero carry propagation steps of the odd branch, defined for
// odd n only.
inline int carry_depth(u64 n, int b) {
    if (n == 0 || n % 2 == 0) {
        throw std::invalid_argument("carry_depth is defined for positive odd n");
    }
    return mul3_add1_digits(to_digits(n, b), b).depth;
}

// k-th bit of n: a_k(n) = floor(n / 2^{k-1}) mod 2; a_1 is parity.
inline int residue_target(u64 n, int k) {
    if (k < 1) { throw std::invalid_argument("residue level k must be >= 1"); }
    if (k > 64) { return 0; }
    return static_cast<int>((n >> (k - 1)) & 1u);
}

// The 15-base study set: powers of 2, powers of 3, bases divisible by both,
// and decimal.
inline const std::vector<int>& sweep_bases() {
    static const std::vector<int> bases{2, 3, 4, 6, 8, 9, 10, 12, 16, 18, 24, 27, 32, 36, 48};
    return bases;
}

inline std::vector<int> even_sweep_bases() {
    std::vector<int> out;
    for (int b : sweep_bases()) {
        if (b % 2 == 0) { out.push_back(b); }
    }
    return out;
}

inline u64 gcd(u64 a, u64 b) {
    if (a == 0 || b == 0) { throw std::invalid_argument("gcd requires positive inputs"); }
    while (b != 0) {
        const u64 t = a % b;
        a = b;
        b = t;
    }
    return a;
}

}  // namespace clab
