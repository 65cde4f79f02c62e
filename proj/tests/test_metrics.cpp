#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <clab/metrics.hpp>
#include <clab/rng.hpp>

using namespace clab;

TEST_CASE("clopper_pearson matches the published reference intervals to 0.001") {
    auto [lo1, hi1] = clopper_pearson(4680, 5000);
    CHECK(std::abs(lo1 - 0.929) < 0.001);
    CHECK(std::abs(hi1 - 0.942) < 0.001);
    auto [lo2, hi2] = clopper_pearson(4720, 5000);
    CHECK(std::abs(lo2 - 0.937) < 0.001);
    CHECK(std::abs(hi2 - 0.950) < 0.001);
}

TEST_CASE("clopper_pearson boundaries, monotonicity, and nesting") {
    auto [lo0, hi0] = clopper_pearson(0, 10);
    CHECK(lo0 == 0.0);
    CHECK(hi0 < 1.0);
    auto [lon, hin] = clopper_pearson(10, 10);
    CHECK(hin == 1.0);
    CHECK(lon > 0.0);
    CHECK_THROWS_AS(clopper_pearson(11, 10), std::invalid_argument);

    double prev_lo = -1, prev_hi = -1;
    for (std::int64_t k = 0; k <= 50; k += 5) {
        auto [lo, hi] = clopper_pearson(k, 50);
        CHECK(lo <= static_cast<double>(k) / 50.0);
        CHECK(hi >= static_cast<double>(k) / 50.0);
        CHECK(lo > prev_lo);
        CHECK(hi > prev_hi);
        prev_lo = lo;
        prev_hi = hi;
    }
    auto [l95, h95] = clopper_pearson(40, 50, 0.05);
    auto [l99, h99] = clopper_pearson(40, 50, 0.01);
    CHECK(l99 < l95);
    CHECK(h99 > h95);
}

TEST_CASE("acc_seq: exact matching, masks, and branch recombination") {
    std::vector<std::vector<int>> targets{{1, 2}, {3}, {4, 5, 6}, {7}};
    auto all = acc_seq(targets, targets);
    CHECK(all.acc == 1.0);
    CHECK(all.correct == 4);

    auto preds = targets;
    preds[2][1] = 9;  // one wrong digit -> whole sequence wrong
    auto r = acc_seq(preds, targets);
    CHECK(r.acc == doctest::Approx(3.0 / 4.0));
    CHECK(r.ci_lo < r.acc);
    CHECK(r.ci_hi > r.acc);

    std::vector<char> even_mask{1, 0, 1, 0}, odd_mask{0, 1, 0, 1};
    auto even = acc_seq(preds, targets, &even_mask);
    auto odd = acc_seq(preds, targets, &odd_mask);
    CHECK(even.total + odd.total == r.total);
    CHECK(even.correct + odd.correct == r.correct);

    CHECK_THROWS_AS(acc_seq(preds, {{1}}), std::invalid_argument);
    std::vector<char> bad_mask{1};
    CHECK_THROWS_AS(acc_seq(preds, targets, &bad_mask), std::invalid_argument);
}

TEST_CASE("digit_accuracy counts length mismatches as wrong") {
    std::vector<std::vector<int>> targets{{1, 2, 3}, {4, 5}};
    CHECK(digit_accuracy(targets, targets) == 1.0);
    std::vector<std::vector<int>> preds{{1, 2, 9}, {4, 5}};
    CHECK(digit_accuracy(preds, targets) == doctest::Approx(4.0 / 5.0));
    std::vector<std::vector<int>> shorter{{1, 2}, {4, 5}};
    // the missing third position counts against the total
    CHECK(digit_accuracy(shorter, targets) == doctest::Approx(4.0 / 5.0));
    std::vector<std::vector<int>> longer{{1, 2, 3, 7}, {4, 5}};
    CHECK(digit_accuracy(longer, targets) == doctest::Approx(5.0 / 6.0));
}

TEST_CASE("participation ratio: rank-1 is 1, two equal orthogonal directions give 2") {
    std::vector<std::vector<double>> line;
    std::vector<double> v{0.3, -1.2, 0.5, 2.0};
    Rng rng(3);
    for (int i = 0; i < 40; ++i) {
        const double c = rng.normal();
        std::vector<double> s(4);
        for (int j = 0; j < 4; ++j) { s[static_cast<std::size_t>(j)] = 7.0 + c * v[static_cast<std::size_t>(j)]; }
        line.push_back(s);
    }
    auto pr1 = participation_ratio(line);
    CHECK_FALSE(pr1.degenerate);
    CHECK(pr1.value == doctest::Approx(1.0).epsilon(1e-9));

    std::vector<std::vector<double>> cross{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}};
    auto pr2 = participation_ratio(cross);
    CHECK(pr2.value == doctest::Approx(2.0).epsilon(1e-12));

    std::vector<std::vector<double>> constant(5, std::vector<double>{2.0, 2.0});
    auto prc = participation_ratio(constant);
    CHECK(prc.degenerate);
    CHECK(prc.value == 1.0);

    CHECK_THROWS_AS(participation_ratio(std::vector<std::vector<double>>{{1.0}}),
                    std::invalid_argument);
}

TEST_CASE("participation ratio: isotropic sample near d, invariant under rotation") {
    const int d = 6, n = 20000;
    Rng rng(17);
    std::vector<std::vector<double>> states;
    states.reserve(n);
    for (int i = 0; i < n; ++i) {
        std::vector<double> s(static_cast<std::size_t>(d));
        for (auto& x : s) { x = rng.normal(); }
        states.push_back(std::move(s));
    }
    auto pr = participation_ratio(states);
    CHECK(pr.value == doctest::Approx(static_cast<double>(d)).epsilon(0.10));

    // random orthogonal matrix by Gram-Schmidt
    std::vector<std::vector<double>> q;
    for (int i = 0; i < d; ++i) {
        std::vector<double> v(static_cast<std::size_t>(d));
        for (auto& x : v) { x = rng.normal(); }
        for (const auto& u : q) {
            double dot = 0;
            for (int j = 0; j < d; ++j) { dot += v[static_cast<std::size_t>(j)] * u[static_cast<std::size_t>(j)]; }
            for (int j = 0; j < d; ++j) { v[static_cast<std::size_t>(j)] -= dot * u[static_cast<std::size_t>(j)]; }
        }
        double norm = 0;
        for (double x : v) { norm += x * x; }
        for (auto& x : v) { x /= std::sqrt(norm); }
        q.push_back(std::move(v));
    }
    std::vector<std::vector<double>> rotated;
    rotated.reserve(states.size());
    for (const auto& s : states) {
        std::vector<double> r(static_cast<std::size_t>(d), 0.0);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) {
                r[static_cast<std::size_t>(i)] += q[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] * s[static_cast<std::size_t>(j)];
            }
        }
        rotated.push_back(std::move(r));
    }
    auto pr_rot = participation_ratio(rotated);
    CHECK(pr_rot.value == doctest::Approx(pr.value).epsilon(1e-9));
}

TEST_CASE("checkpoint cosine: identity, negation, scopes, config mismatch") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.n_enc_layers = 1;
    cfg.n_dec_layers = 1;
    cfg.max_len = 8;
    cfg.base = 8;
    Checkpoint<float> a;
    a.config = cfg;
    a.params = init_params<float>(cfg, 5);
    a.opt = OptimState<float>::init(a.params);

    CHECK(checkpoint_cosine(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(checkpoint_cosine(a, a, CosineScope::encoder) == doctest::Approx(1.0).epsilon(1e-12));

    Checkpoint<float> neg = a;
    neg.params = a.params.clone();
    for (auto& t : neg.params.tensors) {
        for (auto& x : t.values()) { x = -x; }
    }
    CHECK(checkpoint_cosine(a, neg) == doctest::Approx(-1.0).epsilon(1e-12));

    // changing only the decoder leaves the encoder-scope cosine at 1
    Checkpoint<float> dec_shift = a;
    dec_shift.params = a.params.clone();
    for (auto& x : dec_shift.params.get("dec.head.w").values()) { x += 0.3f; }
    CHECK(checkpoint_cosine(a, dec_shift, CosineScope::encoder) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(checkpoint_cosine(a, dec_shift, CosineScope::decoder) < 1.0);

    Checkpoint<float> other;
    other.config = cfg;
    other.config.d_model = 32;
    other.config.n_heads = 4;
    other.params = init_params<float>(other.config, 5);
    CHECK_THROWS_AS(checkpoint_cosine(a, other), std::invalid_argument);
}

TEST_CASE("local predictability: zero on the odd branch and in odd bases, positive otherwise") {
    CHECK(local_predictability(8, true, 1, 10000) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(local_predictability(3, false, 1, 10000) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(local_predictability(9, false, 1, 10000) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    const double h8 = local_predictability(8, false, 1, 10000);
    CHECK(h8 > 0.0);
    CHECK(h8 <= 2.0 * std::log2(8.0));
    for (int b : sweep_bases()) {
        CHECK(local_predictability(b, true, 1, 10000) < 1e-12);
        const double h = local_predictability(b, false, 1, 10000);
        CHECK(h >= 0.0);
        CHECK(h <= 2.0 * std::log2(static_cast<double>(b)));
        if (b % 2 == 1) { CHECK(h < 1e-12); }
    }
}

TEST_CASE("plateau detection: constant, step, and sigmoid series") {
    std::vector<double> flat(50, 0.31);
    auto r1 = plateau_detect(flat, 5, 0.01);
    REQUIRE(r1.spans.size() == 1);
    CHECK(r1.spans[0] == std::pair<int, int>(0, 49));
    CHECK(r1.transition == -1);

    std::vector<double> step;
    for (int i = 0; i < 40; ++i) { step.push_back(i < 25 ? 0.3 : 0.9); }
    auto r2 = plateau_detect(step, 5, 0.01);
    CHECK(r2.transition == 25);

    std::vector<double> sig;
    const int t0 = 60;
    for (int i = 0; i < 120; ++i) { sig.push_back(0.3 + 0.6 / (1.0 + std::exp(-(i - t0) / 2.0))); }
    auto r3 = plateau_detect(sig, 8, 0.01);
    CHECK(r3.transition >= t0 - 8);
    CHECK(r3.transition <= t0 + 8);

    CHECK_THROWS_AS(plateau_detect({0.1}, 5, 0.01), std::invalid_argument);
}

TEST_CASE("metric record serializes the advertised fields") {
    MetricRecord rec;
    rec.step = 2000;
    rec.loss = 0.12;
    rec.overall = acc_seq({{1}, {2}}, {{1}, {3}});
    rec.even = acc_seq({{1}}, {{1}});
    rec.odd = acc_seq({{2}}, {{3}});
    rec.digit_acc = 0.5;
    rec.probe_acc["layer1/k1"] = 0.97;
    rec.delta_erase = 0.2;
    auto j = rec.to_json();
    CHECK(j.at("step") == 2000);
    CHECK(j.at("n_even").get<int>() + j.at("n_odd").get<int>() == 2);
    CHECK(j.at("acc_ci").size() == 2);
    CHECK(j.at("probe_acc").at("layer1/k1") == 0.97);
    CHECK(j.at("delta_erase") == 0.2);
}
