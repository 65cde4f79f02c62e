#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <clab/autograd.hpp>
#include <clab/rng.hpp>

namespace clab {

enum class PosEncoding { sinusoidal, learned };
enum class Activation { gelu, relu };

struct ModelConfig {
    int d_model{256};
    int n_heads{8};
    int d_ff{1024};
    int d_ff_dec{-1};  // decoder FF width; -1 means same as d_ff
    int n_enc_layers{6};
    int n_dec_layers{6};
    int max_len{64};
    int base{8};
    double dropout{0.0};
    PosEncoding pos_encoding{PosEncoding::sinusoidal};
    Activation activation{Activation::gelu};

    int dec_ff() const { return d_ff_dec > 0 ? d_ff_dec : d_ff; }
    int vocab() const { return base + 3; }
    int pad_id() const { return base; }
    int bos_id() const { return base + 1; }
    int eos_id() const { return base + 2; }

    void validate() const {
        if (d_model % n_heads != 0) { throw std::invalid_argument("d_model must be divisible by n_heads"); }
        if (d_model % 2 != 0) { throw std::invalid_argument("d_model must be even"); }
        if (base < 2) { throw std::invalid_argument("base must be >= 2"); }
        if (max_len < 1) { throw std::invalid_argument("max_len must be positive"); }
        if (n_enc_layers < 1 || n_dec_layers < 1) { throw std::invalid_argument("layer counts must be positive"); }
        if (dropout != 0.0) { throw std::invalid_argument("dropout is fixed at 0"); }
    }

    bool compatible_with(const ModelConfig& o) const {
        return d_model == o.d_model && n_heads == o.n_heads && d_ff == o.d_ff &&
               dec_ff() == o.dec_ff() &&
               n_enc_layers == o.n_enc_layers && n_dec_layers == o.n_dec_layers &&
               max_len == o.max_len && base == o.base && pos_encoding == o.pos_encoding &&
               activation == o.activation;
    }
};

template <class S>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<S>> tensors;

    void add(const std::string& name, Tensor<S> t) {
        t.set_requires_grad(true);
        names.push_back(name);
        tensors.push_back(std::move(t));
    }
    int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) { return static_cast<int>(i); }
        }
        throw std::invalid_argument("unknown parameter: " + name);
    }
    Tensor<S>& get(const std::string& name) { return tensors[index_of(name)]; }
    const Tensor<S>& get(const std::string& name) const { return tensors[index_of(name)]; }
    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& t : tensors) { n += t.size(); }
        return n;
    }
    void zero_grad() {
        for (auto& t : tensors) { t.zero_grad(); }
    }
    ParamSet clone() const {
        ParamSet p;
        p.names = names;
        for (const auto& t : tensors) { p.tensors.push_back(t.clone()); }
        return p;
    }
};

namespace detail {

template <class S>
Tensor<S> xavier(int rows, int cols, Rng& rng) {
    Tensor<S> t(rows, cols);
    const double a = std::sqrt(6.0 / (rows + cols));
    for (auto& v : t.values()) { v = static_cast<S>((rng.uniform() * 2.0 - 1.0) * a); }
    return t;
}

template <class S>
Tensor<S> ones_row(int cols) {
    Tensor<S> t(1, cols);
    for (auto& v : t.values()) { v = S(1); }
    return t;
}

template <class S>
void add_attention_block(ParamSet<S>& p, const std::string& prefix, int d, Rng& rng) {
    p.add(prefix + ".wq", xavier<S>(d, d, rng));
    p.add(prefix + ".bq", Tensor<S>(1, d));
    p.add(prefix + ".wk", xavier<S>(d, d, rng));
    p.add(prefix + ".bk", Tensor<S>(1, d));
    p.add(prefix + ".wv", xavier<S>(d, d, rng));
    p.add(prefix + ".bv", Tensor<S>(1, d));
    p.add(prefix + ".wo", xavier<S>(d, d, rng));
    p.add(prefix + ".bo", Tensor<S>(1, d));
}

template <class S>
void add_ln(ParamSet<S>& p, const std::string& prefix, int d) {
    p.add(prefix + ".gain", ones_row<S>(d));
    p.add(prefix + ".bias", Tensor<S>(1, d));
}

template <class S>
void add_ff(ParamSet<S>& p, const std::string& prefix, int d, int d_ff, Rng& rng) {
    p.add(prefix + ".w1", xavier<S>(d, d_ff, rng));
    p.add(prefix + ".b1", Tensor<S>(1, d_ff));
    p.add(prefix + ".w2", xavier<S>(d_ff, d, rng));
    p.add(prefix + ".b2", Tensor<S>(1, d));
}

}  // namespace detail

// Seeded initialization; encoder parameters carry the "enc." prefix and
// decoder parameters "dec.", which is what freeze masks and transplants key
// on.
template <class S>
ParamSet<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParamSet<S> p;
    const int d = cfg.d_model;

    p.add("enc.embed", detail::xavier<S>(cfg.vocab(), d, rng));
    if (cfg.pos_encoding == PosEncoding::learned) {
        p.add("enc.pos", detail::xavier<S>(cfg.max_len, d, rng));
    }
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
        const std::string pre = "enc.l" + std::to_string(l);
        detail::add_ln(p, pre + ".ln1", d);
        detail::add_attention_block(p, pre + ".attn", d, rng);
        detail::add_ln(p, pre + ".ln2", d);
        detail::add_ff(p, pre + ".ff", d, cfg.d_ff, rng);
    }
    detail::add_ln(p, "enc.final_ln", d);

    p.add("dec.embed", detail::xavier<S>(cfg.vocab(), d, rng));
    if (cfg.pos_encoding == PosEncoding::learned) {
        p.add("dec.pos", detail::xavier<S>(cfg.max_len, d, rng));
    }
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
        const std::string pre = "dec.l" + std::to_string(l);
        detail::add_ln(p, pre + ".ln1", d);
        detail::add_attention_block(p, pre + ".self", d, rng);
        detail::add_ln(p, pre + ".ln2", d);
        detail::add_attention_block(p, pre + ".cross", d, rng);
        detail::add_ln(p, pre + ".ln3", d);
        detail::add_ff(p, pre + ".ff", d, cfg.dec_ff(), rng);
    }
    detail::add_ln(p, "dec.final_ln", d);
    // small-scale readout: near-uniform logits at init
    auto head = detail::xavier<S>(d, cfg.vocab(), rng);
    for (auto& v : head.values()) { v *= S(0.1); }
    p.add("dec.head.w", head);
    p.add("dec.head.b", Tensor<S>(1, cfg.vocab()));
    return p;
}

// Closed-form parameter count for a config; verified against the realized
// ParamSet in tests.
inline std::size_t param_count(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t v = cfg.vocab();
    const std::size_t enc_ff = 2 * d * cfg.d_ff + cfg.d_ff + d;
    const std::size_t dec_ff = 2 * d * cfg.dec_ff() + cfg.dec_ff() + d;
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t ln = 2 * d;
    const std::size_t enc_layer = 2 * ln + attn + enc_ff;
    const std::size_t dec_layer = 3 * ln + 2 * attn + dec_ff;
    std::size_t total = 2 * v * d;  // enc/dec embeddings
    if (cfg.pos_encoding == PosEncoding::learned) { total += 2 * static_cast<std::size_t>(cfg.max_len) * d; }
    total += cfg.n_enc_layers * enc_layer + ln;
    total += cfg.n_dec_layers * dec_layer + ln;
    total += d * v + v;  // output head
    return total;
}

// d_ff for a 1-layer decoder whose parameter count matches an n_dec_layers
// deep decoder of the same config (the depth-vs-width control).
inline int width_matched_dff(const ModelConfig& cfg, int target_depth) {
    const long long d = cfg.d_model;
    const long long attn = 4 * (d * d + d);
    const long long ln = 2 * d;
    const long long ff0 = 2 * d * cfg.dec_ff() + cfg.dec_ff() + d;
    const long long layer = 3 * ln + 2 * attn + ff0;
    const long long target_ff = ff0 + (target_depth - 1) * layer;
    return static_cast<int>((target_ff - d + (2 * d + 1) / 2) / (2 * d + 1));
}

template <class S>
struct EncoderOutput {
    std::vector<Tensor<S>> layers;  // per layer, (batch*lmax) x d_model
    std::vector<char> valid;        // batch*lmax, non-PAD flags
    int batch{0};
    int lmax{0};

    const Tensor<S>& final_states() const { return layers.back(); }
};

namespace detail {

template <class S>
Tensor<S> sinusoidal_rows(const std::vector<int>& positions, int d) {
    Tensor<S> t(static_cast<int>(positions.size()), d);
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const double pos = positions[i];
        for (int j = 0; j < d / 2; ++j) {
            const double freq = std::pow(10000.0, -2.0 * j / d);
            t.at(static_cast<int>(i), 2 * j) = static_cast<S>(std::sin(pos * freq));
            t.at(static_cast<int>(i), 2 * j + 1) = static_cast<S>(std::cos(pos * freq));
        }
    }
    return t;
}

template <class S>
Tensor<S> linear(const ParamSet<S>& p, const std::string& prefix, const char* w, const char* b,
                 const Tensor<S>& x) {
    return add_rowvec(matmul(x, p.get(prefix + w)), p.get(prefix + b));
}

template <class S>
Tensor<S> ln(const ParamSet<S>& p, const std::string& prefix, const Tensor<S>& x) {
    return layer_norm_rows(x, p.get(prefix + ".gain"), p.get(prefix + ".bias"), S(1e-5));
}

template <class S>
Tensor<S> feed_forward(const ParamSet<S>& p, const std::string& prefix, const Tensor<S>& x,
                       Activation act) {
    auto h = linear(p, prefix, ".w1", ".b1", x);
    auto a = act == Activation::gelu ? gelu(h) : relu(h);
    return linear(p, prefix, ".w2", ".b2", a);
}

// Per-example attention over a batch laid out as contiguous row blocks of
// stride lmax. Query rows and key/value rows may come from different blocks
// (cross-attention).
template <class S>
Tensor<S> blocked_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int batch,
                            int q_stride, int kv_stride, int n_heads,
                            const std::vector<char>& key_valid, bool causal) {
    std::vector<Tensor<S>> outs;
    outs.reserve(batch);
    for (int e = 0; e < batch; ++e) {
        auto qe = slice_rows(q, e * q_stride, (e + 1) * q_stride);
        auto ke = slice_rows(k, e * kv_stride, (e + 1) * kv_stride);
        auto ve = slice_rows(v, e * kv_stride, (e + 1) * kv_stride);
        std::vector<char> mask;
        if (!key_valid.empty()) {
            mask.assign(key_valid.begin() + static_cast<long>(e) * kv_stride,
                        key_valid.begin() + static_cast<long>(e + 1) * kv_stride);
        }
        outs.push_back(attention(qe, ke, ve, n_heads, mask, causal));
    }
    if (batch == 1) { return outs[0]; }
    return concat_rows(outs);
}

template <class S>
Tensor<S> attention_block(const ParamSet<S>& p, const std::string& prefix, const Tensor<S>& x_q,
                          const Tensor<S>& x_kv, int batch, int q_stride, int kv_stride,
                          int n_heads, const std::vector<char>& key_valid, bool causal) {
    auto q = linear(p, prefix, ".wq", ".bq", x_q);
    auto k = linear(p, prefix, ".wk", ".bk", x_kv);
    auto v = linear(p, prefix, ".wv", ".bv", x_kv);
    auto att = blocked_attention(q, k, v, batch, q_stride, kv_stride, n_heads, key_valid, causal);
    return linear(p, prefix, ".wo", ".bo", att);
}

}  // namespace detail

// Encoder forward over a batch of token sequences. Sequences are left-padded
// to the batch maximum so the least significant digit keeps the rightmost
// column; positional indices count from the right end, so padding never
// shifts a real token's position. PAD positions are masked out of attention.
// All layer states are retained for probing.
template <class S>
EncoderOutput<S> encode(const ModelConfig& cfg, const ParamSet<S>& params,
                        const std::vector<std::vector<int>>& batch_tokens) {
    cfg.validate();
    if (batch_tokens.empty()) { throw std::invalid_argument("encode: empty batch"); }
    int lmax = 0;
    for (const auto& seq : batch_tokens) {
        if (seq.empty()) { throw std::invalid_argument("encode: empty token sequence"); }
        if (static_cast<int>(seq.size()) > cfg.max_len) {
            throw std::invalid_argument("encode: input exceeds max_len");
        }
        for (int t : seq) {
            if (t < 0 || t >= cfg.vocab()) { throw std::invalid_argument("encode: token out of vocab"); }
        }
        lmax = std::max(lmax, static_cast<int>(seq.size()));
    }
    const int batch = static_cast<int>(batch_tokens.size());

    std::vector<int> flat;
    std::vector<int> positions;
    std::vector<char> valid;
    flat.reserve(static_cast<std::size_t>(batch) * lmax);
    for (const auto& seq : batch_tokens) {
        const int pad_n = lmax - static_cast<int>(seq.size());
        for (int j = 0; j < lmax; ++j) {
            const bool is_pad = j < pad_n;
            flat.push_back(is_pad ? cfg.pad_id() : seq[static_cast<std::size_t>(j - pad_n)]);
            positions.push_back(lmax - 1 - j);
            valid.push_back(is_pad ? 0 : 1);
        }
    }

    auto x = embedding(params.get("enc.embed"), flat);
    if (cfg.pos_encoding == PosEncoding::sinusoidal) {
        x = add(x, detail::sinusoidal_rows<S>(positions, cfg.d_model));
    } else {
        x = add(x, embedding(params.get("enc.pos"), positions));
    }

    EncoderOutput<S> out;
    out.batch = batch;
    out.lmax = lmax;
    out.valid = valid;
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
        const std::string pre = "enc.l" + std::to_string(l);
        auto n1 = detail::ln(params, pre + ".ln1", x);
        auto a = detail::attention_block(params, pre + ".attn", n1, n1, batch, lmax, lmax,
                                         cfg.n_heads, valid, false);
        x = add(x, a);
        auto f = detail::feed_forward(params, pre + ".ff", detail::ln(params, pre + ".ln2", x),
                                      cfg.activation);
        x = add(x, f);
        if (l == cfg.n_enc_layers - 1) { x = detail::ln(params, "enc.final_ln", x); }
        out.layers.push_back(x);
    }
    return out;
}

// Inference-time erasure: final-layer states are replaced by their
// projection orthogonal to the unit direction u; earlier layers untouched.
template <class S>
EncoderOutput<S> encode_with_erasure(const ModelConfig& cfg, const ParamSet<S>& params,
                                     const std::vector<std::vector<int>>& batch_tokens,
                                     const std::vector<S>& direction) {
    if (static_cast<int>(direction.size()) != cfg.d_model) {
        throw std::invalid_argument("erasure direction dimension mismatch");
    }
    double norm = 0;
    for (S c : direction) { norm += static_cast<double>(c) * static_cast<double>(c); }
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-4) {
        throw std::invalid_argument("erasure direction must be unit norm");
    }
    auto out = encode(cfg, params, batch_tokens);
    Tensor<S> u(1, cfg.d_model);
    for (int j = 0; j < cfg.d_model; ++j) { u.at(0, j) = direction[j]; }
    out.layers.back() = project_out(out.layers.back(), u);
    return out;
}

// Teacher-forced decoder pass. Each target_in sequence must begin with BOS;
// sequences are right-padded with PAD to the batch maximum (those rows are
// to be ignored by the loss). Returns logits, (batch*tmax) x vocab.
template <class S>
Tensor<S> decode_teacher_forced(const ModelConfig& cfg, const ParamSet<S>& params,
                                const EncoderOutput<S>& enc,
                                const std::vector<std::vector<int>>& target_in) {
    if (static_cast<int>(target_in.size()) != enc.batch) {
        throw std::invalid_argument("decode: batch size mismatch with encoder output");
    }
    int tmax = 0;
    for (const auto& seq : target_in) {
        if (seq.empty() || seq[0] != cfg.bos_id()) {
            throw std::invalid_argument("decode: target must begin with BOS");
        }
        if (static_cast<int>(seq.size()) > cfg.max_len) {
            throw std::invalid_argument("decode: target exceeds max_len");
        }
        tmax = std::max(tmax, static_cast<int>(seq.size()));
    }
    const int batch = enc.batch;

    std::vector<int> flat;
    std::vector<int> positions;
    for (const auto& seq : target_in) {
        for (int j = 0; j < tmax; ++j) {
            flat.push_back(j < static_cast<int>(seq.size()) ? seq[static_cast<std::size_t>(j)]
                                                            : cfg.pad_id());
            positions.push_back(j);
        }
    }

    auto x = embedding(params.get("dec.embed"), flat);
    if (cfg.pos_encoding == PosEncoding::sinusoidal) {
        x = add(x, detail::sinusoidal_rows<S>(positions, cfg.d_model));
    } else {
        x = add(x, embedding(params.get("dec.pos"), positions));
    }

    const Tensor<S>& mem = enc.final_states();
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
        const std::string pre = "dec.l" + std::to_string(l);
        auto n1 = detail::ln(params, pre + ".ln1", x);
        auto sa = detail::attention_block(params, pre + ".self", n1, n1, batch, tmax, tmax,
                                          cfg.n_heads, {}, true);
        x = add(x, sa);
        auto ca = detail::attention_block(params, pre + ".cross", detail::ln(params, pre + ".ln2", x),
                                          mem, batch, tmax, enc.lmax, cfg.n_heads, enc.valid, false);
        x = add(x, ca);
        auto f = detail::feed_forward(params, pre + ".ff", detail::ln(params, pre + ".ln3", x),
                                      cfg.activation);
        x = add(x, f);
    }
    x = detail::ln(params, "dec.final_ln", x);
    return detail::linear(params, "dec.head", ".w", ".b", x);
}

struct GreedyResult {
    std::vector<int> tokens;  // emitted tokens, EOS excluded
    bool truncated{false};    // hit max_len before EOS
};

// Greedy left-to-right decoding for a single-example encoder output. Ties
// break toward the lowest token id.
template <class S>
GreedyResult greedy_decode(const ModelConfig& cfg, const ParamSet<S>& params,
                           const EncoderOutput<S>& enc, int max_len) {
    if (enc.batch != 1) { throw std::invalid_argument("greedy_decode expects a single-example encoding"); }
    GreedyResult res;
    std::vector<int> target_in{cfg.bos_id()};
    const int limit = std::min(max_len, cfg.max_len);
    while (static_cast<int>(res.tokens.size()) < limit) {
        auto logits = decode_teacher_forced(cfg, params, enc, {target_in});
        const int last = logits.rows() - 1;
        int best = 0;
        for (int j = 1; j < logits.cols(); ++j) {
            if (logits.at(last, j) > logits.at(last, best)) { best = j; }
        }
        if (best == cfg.eos_id()) { return res; }
        res.tokens.push_back(best);
        target_in.push_back(best);
        if (static_cast<int>(target_in.size()) >= cfg.max_len) { break; }
    }
    res.truncated = true;
    return res;
}

}  // namespace clab
