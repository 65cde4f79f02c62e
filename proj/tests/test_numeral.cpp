#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <clab/numeral.hpp>
#include <clab/rng.hpp>

using namespace clab;

TEST_CASE("to_digits basics") {
    CHECK(to_digits(80, 8) == DigitSeq{1, 2, 0});
    CHECK(to_digits(0, 10) == DigitSeq{0});
    CHECK(to_digits(10000, 2).size() == 14);
    CHECK_THROWS_AS(to_digits(5, 1), std::invalid_argument);
}

TEST_CASE("from_digits basics") {
    CHECK(from_digits({1, 2, 0}, 8) == 80);
    CHECK(from_digits({0, 0, 7}, 10) == 7);
    CHECK(from_digits({1, 0, 1, 1}, 2) == 11);
    CHECK_THROWS_AS(from_digits({9}, 8), std::invalid_argument);
}

TEST_CASE("round trip identity on random integers, all sweep bases") {
    Rng rng(7);
    for (int b : sweep_bases()) {
        for (int i = 0; i < 2000; ++i) {
            const u64 n = rng.below(10'000'000);
            CHECK(from_digits(to_digits(n, b), b) == n);
        }
    }
}

TEST_CASE("collatz_step") {
    CHECK(collatz_step(6) == 3);
    CHECK(collatz_step(5) == 16);
    CHECK(collatz_step(80) == 40);
    CHECK_THROWS_AS(collatz_step(0), std::invalid_argument);
}

TEST_CASE("halve_digits_local worked examples") {
    CHECK(halve_digits_local({8, 0}, 10) == DigitSeq{4, 0});
    CHECK(halve_digits_local({1, 4}, 8) == DigitSeq{6});
    CHECK_THROWS_AS(halve_digits_local({2}, 9), std::invalid_argument);   // odd base
    CHECK_THROWS_AS(halve_digits_local({3}, 10), std::invalid_argument);  // odd n
}

TEST_CASE("halve_digits_local equals exact division, bounded output digits") {
    for (int b : even_sweep_bases()) {
        for (u64 m = 1; m <= 5000; ++m) {
            const u64 n = 2 * m;
            const DigitSeq in = to_digits(n, b);
            const DigitSeq out = halve_digits_local(in, b);
            for (int e : out) {
                CHECK(e >= 0);
                CHECK(e < b);
            }
            CHECK(out == to_digits(m, b));
        }
    }
}

TEST_CASE("mul3_add1_digits worked examples") {
    auto t1 = mul3_add1_digits(to_digits(1, 10), 10);
    CHECK(t1.out_digits == DigitSeq{4});
    CHECK(t1.depth == 0);

    auto t7 = mul3_add1_digits(to_digits(7, 10), 10);
    CHECK(t7.out_digits == DigitSeq{2, 2});  // LSB-first for 22
    CHECK(t7.depth == 1);

    CHECK_THROWS_AS(mul3_add1_digits({}, 10), std::invalid_argument);
}

TEST_CASE("transducer reconstructs 3n+1") {
    Rng rng(11);
    for (int b : sweep_bases()) {
        for (int i = 0; i < 2000; ++i) {
            const u64 n = 1 + rng.below(100000);
            auto trace = mul3_add1_digits(to_digits(n, b), b);
            DigitSeq msb(trace.out_digits.rbegin(), trace.out_digits.rend());
            CHECK(from_digits(msb, b) == 3 * n + 1);
            CHECK(trace.carries.size() == trace.out_digits.size());
        }
    }
}

TEST_CASE("carry_depth examples and re-simulation oracle") {
    CHECK(carry_depth(1, 10) == 0);
    CHECK(carry_depth(7, 10) == 1);
    CHECK_THROWS_AS(carry_depth(6, 10), std::invalid_argument);

    Rng rng(13);
    for (int i = 0; i < 10000; ++i) {
        const u64 n = 2 * rng.below(50000) + 1;
        const int b = sweep_bases()[rng.below(sweep_bases().size())];
        // independent re-simulation on the raw integer, LSB-first
        int depth = 0;
        u64 src = n;
        int carry = 1;
        while (src > 0 || carry > 0) {
            const int d = static_cast<int>(src % static_cast<u64>(b));
            src /= static_cast<u64>(b);
            const int t = 3 * d + carry;
            carry = t / b;
            if (carry != 0) { ++depth; }
        }
        CHECK(carry_depth(n, b) == depth);
    }
}

TEST_CASE("residue_target") {
    CHECK(residue_target(5, 1) == 1);
    CHECK(residue_target(6, 3) == 1);
    CHECK(residue_target(24, 4) == 1);
    CHECK_THROWS_AS(residue_target(5, 0), std::invalid_argument);
    // parity consistency: a_1 equals the LSB-first digit parity in even bases
    for (u64 n = 1; n <= 200; ++n) {
        for (int b : even_sweep_bases()) {
            CHECK(residue_target(n, 1) == to_digits(n, b).back() % 2);
        }
    }
}

TEST_CASE("gcd against brute-force common-divisor scan") {
    CHECK(gcd(12, 8) == 4);
    CHECK(gcd(7, 1) == 1);
    CHECK_THROWS_AS(gcd(0, 3), std::invalid_argument);

    Rng rng(17);
    for (int i = 0; i < 2000; ++i) {
        const u64 a = 1 + rng.below(2000);
        const u64 b = 1 + rng.below(2000);
        u64 best = 1;
        for (u64 d = 1; d <= a && d <= b; ++d) {
            if (a % d == 0 && b % d == 0) { best = d; }
        }
        CHECK(gcd(a, b) == best);
    }
}
