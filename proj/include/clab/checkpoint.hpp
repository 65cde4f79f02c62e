#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <clab/optim.hpp>
#include <clab/transformer.hpp>

namespace clab {

using json = nlohmann::json;

// FNV-1a over raw bytes; used for parameter-block and frozen-subtree hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

template <class S>
std::uint64_t tensor_hash(const Tensor<S>& t) {
    return fnv1a(t.values().data(), t.size() * sizeof(S));
}

// Hash of all parameters whose name starts with prefix, in registration
// order. This is what intervention runs verify at every checkpoint.
template <class S>
std::string param_subtree_hash(const ParamSet<S>& params, const std::string& prefix) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < params.names.size(); ++i) {
        if (params.names[i].rfind(prefix, 0) != 0) { continue; }
        h = fnv1a(params.tensors[i].values().data(), params.tensors[i].size() * sizeof(S), h);
    }
    return hash_hex(h);
}

inline json config_to_json(const ModelConfig& c) {
    return json{{"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"d_ff", c.d_ff},
                {"d_ff_dec", c.d_ff_dec},
                {"n_enc_layers", c.n_enc_layers},
                {"n_dec_layers", c.n_dec_layers},
                {"max_len", c.max_len},
                {"base", c.base},
                {"dropout", c.dropout},
                {"pos_encoding", c.pos_encoding == PosEncoding::sinusoidal ? "sinusoidal" : "learned"},
                {"activation", c.activation == Activation::gelu ? "gelu" : "relu"}};
}

inline ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.d_ff_dec = j.value("d_ff_dec", -1);
    c.n_enc_layers = j.at("n_enc_layers").get<int>();
    c.n_dec_layers = j.at("n_dec_layers").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.base = j.at("base").get<int>();
    c.dropout = j.value("dropout", 0.0);
    const std::string pos = j.value("pos_encoding", "sinusoidal");
    c.pos_encoding = pos == "learned" ? PosEncoding::learned : PosEncoding::sinusoidal;
    const std::string act = j.value("activation", "gelu");
    c.activation = act == "relu" ? Activation::relu : Activation::gelu;
    return c;
}

inline json hyper_to_json(const OptimHyper& h) {
    return json{{"beta1", h.beta1},
                {"beta2", h.beta2},
                {"eps", h.eps},
                {"base_lr", h.base_lr},
                {"weight_decay", h.weight_decay},
                {"clip_norm", h.clip_norm},
                {"warmup_steps", h.warmup_steps},
                {"decay_matrices_only", h.decay_matrices_only}};
}

inline OptimHyper hyper_from_json(const json& j) {
    OptimHyper h;
    h.beta1 = j.at("beta1").get<double>();
    h.beta2 = j.at("beta2").get<double>();
    h.eps = j.at("eps").get<double>();
    h.base_lr = j.at("base_lr").get<double>();
    h.weight_decay = j.at("weight_decay").get<double>();
    h.clip_norm = j.at("clip_norm").get<double>();
    h.warmup_steps = j.at("warmup_steps").get<int>();
    h.decay_matrices_only = j.value("decay_matrices_only", true);
    return h;
}

struct Provenance {
    std::string experiment_id;
    std::uint64_t seed{0};
    std::uint64_t data_seed{0};
};

// The full training state: everything needed to resume or to assemble an
// intervention. File layout: magic, little-endian u32 manifest length, JSON
// manifest, then raw parameter and moment blocks in manifest order.
template <class S>
struct Checkpoint {
    ModelConfig config;
    ParamSet<S> params;
    OptimState<S> opt;
    std::int64_t schedule_step{0};
    int total_steps{0};
    std::uint64_t train_rng_state{0};
    Provenance prov;
};

namespace detail {

constexpr char kCkptMagic[8] = {'C', 'L', 'A', 'B', 'C', 'K', 'P', '1'};

template <class S>
void write_block(std::ostream& os, const std::vector<S>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(S)));
}

template <class S>
void read_block(std::istream& is, std::vector<S>& v) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(S)));
    if (!is) { throw std::runtime_error("checkpoint: truncated block"); }
}

}  // namespace detail

template <class S>
void save_checkpoint(const Checkpoint<S>& ck, const std::string& path) {
    json manifest;
    manifest["version"] = 1;
    manifest["dtype"] = sizeof(S) == 4 ? "f32" : "f64";
    manifest["config"] = config_to_json(ck.config);
    manifest["optim"] = hyper_to_json(ck.opt.hyper);
    manifest["optim_step"] = ck.opt.step;
    manifest["schedule_step"] = ck.schedule_step;
    manifest["total_steps"] = ck.total_steps;
    manifest["train_rng_state"] = ck.train_rng_state;
    manifest["provenance"] = {{"experiment_id", ck.prov.experiment_id},
                              {"seed", ck.prov.seed},
                              {"data_seed", ck.prov.data_seed}};
    json blocks = json::array();
    for (std::size_t i = 0; i < ck.params.names.size(); ++i) {
        const auto& t = ck.params.tensors[i];
        blocks.push_back({{"name", ck.params.names[i]},
                          {"rows", t.rows()},
                          {"cols", t.cols()},
                          {"hash", hash_hex(tensor_hash(t))}});
    }
    manifest["params"] = blocks;
    manifest["enc_hash"] = param_subtree_hash(ck.params, "enc.");
    manifest["dec_hash"] = param_subtree_hash(ck.params, "dec.");

    const std::string mstr = manifest.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) { throw std::runtime_error("checkpoint: cannot open for write: " + path); }
    os.write(detail::kCkptMagic, 8);
    const std::uint32_t mlen = static_cast<std::uint32_t>(mstr.size());
    os.write(reinterpret_cast<const char*>(&mlen), 4);
    os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& t : ck.params.tensors) { detail::write_block(os, t.values()); }
    for (const auto& m : ck.opt.m) { detail::write_block(os, m); }
    for (const auto& v : ck.opt.v) { detail::write_block(os, v); }
    if (!os) { throw std::runtime_error("checkpoint: write failed: " + path); }
}

// Loads and verifies a checkpoint; version, dtype, or content-hash mismatch
// is refused.
template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) { throw std::runtime_error("checkpoint: cannot open: " + path); }
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic");
    }
    std::uint32_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), 4);
    std::string mstr(mlen, '\0');
    is.read(mstr.data(), mlen);
    if (!is) { throw std::runtime_error("checkpoint: truncated manifest"); }
    const json manifest = json::parse(mstr);
    if (manifest.at("version").get<int>() != 1) { throw std::runtime_error("checkpoint: unsupported version"); }
    const std::string dtype = manifest.at("dtype").get<std::string>();
    if (dtype != (sizeof(S) == 4 ? "f32" : "f64")) {
        throw std::runtime_error("checkpoint: dtype mismatch");
    }

    Checkpoint<S> ck;
    ck.config = config_from_json(manifest.at("config"));
    ck.schedule_step = manifest.at("schedule_step").get<std::int64_t>();
    ck.total_steps = manifest.at("total_steps").get<int>();
    ck.train_rng_state = manifest.at("train_rng_state").get<std::uint64_t>();
    ck.prov.experiment_id = manifest.at("provenance").at("experiment_id").get<std::string>();
    ck.prov.seed = manifest.at("provenance").at("seed").get<std::uint64_t>();
    ck.prov.data_seed = manifest.at("provenance").at("data_seed").get<std::uint64_t>();

    for (const auto& b : manifest.at("params")) {
        Tensor<S> t(b.at("rows").get<int>(), b.at("cols").get<int>());
        ck.params.add(b.at("name").get<std::string>(), t);
    }
    for (auto& t : ck.params.tensors) { detail::read_block(is, t.values()); }
    ck.opt = OptimState<S>::init(ck.params, hyper_from_json(manifest.at("optim")));
    ck.opt.step = manifest.at("optim_step").get<std::int64_t>();
    for (auto& m : ck.opt.m) { detail::read_block(is, m); }
    for (auto& v : ck.opt.v) { detail::read_block(is, v); }

    std::size_t i = 0;
    for (const auto& b : manifest.at("params")) {
        const std::string expect = b.at("hash").get<std::string>();
        if (hash_hex(tensor_hash(ck.params.tensors[i])) != expect) {
            throw std::runtime_error("checkpoint: content hash mismatch in " +
                                     ck.params.names[i]);
        }
        ++i;
    }
    return ck;
}

}  // namespace clab
