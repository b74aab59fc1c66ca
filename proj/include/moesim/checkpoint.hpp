#pragma once

// Parameter checkpoint: a flat binary layout that is byte-identical across
// platforms for identical state, plus a JSON sidecar describing the config.
//
//   offset  content
//   ------  -------------------------------------------------------------
//   0       magic "MOESIMCK" (8 bytes)
//   8       u32 version (currently 1)
//   12      config block: i64 d_model, n_experts, k_top, d_expert_hidden,
//           u8 shared_expert, i64 d_shared_hidden, i64 vocab
//   ..      router stats: f64 mu_s, f64 sigma_s, i64 warmup_horizon,
//           i64 global_step, f64 stats_decay
//   ..      i64 optimizer_step (-1 when no optimizer state is stored)
//   ..      u64 tensor count, then per tensor:
//               u32 name length, name bytes,
//               u32 ndim, i64 dims..., f64 data (little-endian)
//
// Parameter tensors come first in the canonical MoEParams order, followed by
// adam.m.<name> and adam.v.<name> pairs when optimizer state is present.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "moesim/moe.hpp"
#include "moesim/optim.hpp"

#include "json.hpp"

namespace moesim {

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}

inline void put_u32(std::string& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(out, b, 4);
}

inline void put_u64(std::string& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(out, b, 8);
}

inline void put_i64(std::string& out, std::int64_t v) { put_u64(out, static_cast<std::uint64_t>(v)); }

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw invalid_input("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

inline void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name.data(), name.size());
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::int64_t d : t.shape) put_i64(out, d);
    for (double v : t.data) put_f64(out, v);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'S', 'I', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Serialize params (and optional optimizer state) to the flat layout.
inline std::string encode_checkpoint(MoEParams& params, const AdamWState* opt = nullptr) {
    std::string out;
    detail::put_bytes(out, kCheckpointMagic, 8);
    detail::put_u32(out, kCheckpointVersion);
    const MoEConfig& c = params.config;
    detail::put_i64(out, c.d_model);
    detail::put_i64(out, c.n_experts);
    detail::put_i64(out, c.k_top);
    detail::put_i64(out, c.d_expert_hidden);
    out.push_back(c.shared_expert ? '\1' : '\0');
    detail::put_i64(out, c.d_shared_hidden);
    detail::put_i64(out, c.vocab);
    detail::put_f64(out, params.router.mu_s);
    detail::put_f64(out, params.router.sigma_s);
    detail::put_i64(out, params.router.warmup_horizon);
    detail::put_i64(out, params.router.global_step);
    detail::put_f64(out, params.router.stats_decay);
    detail::put_i64(out, opt ? opt->step : -1);

    std::vector<std::pair<std::string, const Tensor*>> blobs;
    params.for_each_tensor([&](const std::string& n, Tensor& t) { blobs.emplace_back(n, &t); });
    if (opt) {
        std::vector<std::string> names = params.tensor_names();
        if (names.size() != opt->m.size())
            throw invalid_input("checkpoint: optimizer state does not match params");
        for (std::size_t i = 0; i < names.size(); ++i) blobs.emplace_back("adam.m." + names[i], &opt->m[i]);
        for (std::size_t i = 0; i < names.size(); ++i) blobs.emplace_back("adam.v." + names[i], &opt->v[i]);
    }
    detail::put_u64(out, blobs.size());
    for (const auto& [name, t] : blobs) detail::put_tensor(out, name, *t);
    return out;
}

struct Checkpoint {
    MoEParams params;
    AdamWState opt;
    bool has_optimizer = false;
};

inline Checkpoint decode_checkpoint(const std::string& buf) {
    detail::Reader r{buf};
    if (r.str(8) != std::string(kCheckpointMagic, 8)) throw invalid_input("checkpoint: bad magic");
    if (r.u32() != kCheckpointVersion) throw invalid_input("checkpoint: unsupported version");
    Checkpoint ck;
    MoEConfig& c = ck.params.config;
    c.d_model = r.i64();
    c.n_experts = r.i64();
    c.k_top = r.i64();
    c.d_expert_hidden = r.i64();
    c.shared_expert = r.str(1)[0] != '\0';
    c.d_shared_hidden = r.i64();
    c.vocab = r.i64();
    c.validate();
    ck.params.router.mu_s = r.f64();
    ck.params.router.sigma_s = r.f64();
    ck.params.router.warmup_horizon = r.i64();
    ck.params.router.global_step = r.i64();
    ck.params.router.stats_decay = r.f64();
    const std::int64_t opt_step = r.i64();

    const std::uint64_t count = r.u64();
    std::vector<std::pair<std::string, Tensor>> blobs;
    blobs.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const std::uint32_t ndim = r.u32();
        std::vector<std::int64_t> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.i64());
        Tensor t(shape);
        for (double& v : t.data) v = r.f64();
        blobs.emplace_back(std::move(name), std::move(t));
    }

    ck.params.experts.resize(static_cast<std::size_t>(c.n_experts));
    auto find = [&](const std::string& name) -> Tensor& {
        for (auto& [n, t] : blobs)
            if (n == name) return t;
        throw invalid_input("checkpoint: missing tensor " + name);
    };
    ck.params.for_each_tensor([&](const std::string& n, Tensor& t) { t = find(n); });
    if (opt_step >= 0) {
        ck.has_optimizer = true;
        ck.opt.step = opt_step;
        std::vector<std::string> names = ck.params.tensor_names();
        for (const std::string& n : names) ck.opt.m.push_back(find("adam.m." + n));
        for (const std::string& n : names) ck.opt.v.push_back(find("adam.v." + n));
    }
    return ck;
}

inline nlohmann::json checkpoint_sidecar(const MoEParams& params, bool has_optimizer) {
    const MoEConfig& c = params.config;
    return nlohmann::json{{"schema_version", 1},
                          {"format", "moesim-checkpoint-v1"},
                          {"model",
                           {{"d_model", c.d_model},
                            {"n_experts", c.n_experts},
                            {"k_top", c.k_top},
                            {"d_expert_hidden", c.d_expert_hidden},
                            {"shared_expert", c.shared_expert},
                            {"d_shared_hidden", c.d_shared_hidden},
                            {"vocab", c.vocab}}},
                          {"router",
                           {{"mu_s", params.router.mu_s},
                            {"sigma_s", params.router.sigma_s},
                            {"warmup_horizon", params.router.warmup_horizon},
                            {"global_step", params.router.global_step},
                            {"stats_decay", params.router.stats_decay}}},
                          {"has_optimizer", has_optimizer}};
}

inline void save_checkpoint(const std::string& path, MoEParams& params,
                            const AdamWState* opt = nullptr) {
    const std::string buf = encode_checkpoint(params, opt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    std::ofstream side(path + ".json", std::ios::trunc);
    side << checkpoint_sidecar(params, opt != nullptr).dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(buf);
}

// ---- digests (bitwise state comparison) ----

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t digest(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (double v : t.data) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        h = fnv1a64(&bits, 8, h);
    }
    return h;
}

/// Bitwise digest over parameters and, when given, optimizer moments.
inline std::uint64_t state_digest(MoEParams& params, const AdamWState* opt = nullptr) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    params.for_each_tensor([&](const std::string&, Tensor& t) { h = digest(t, h); });
    if (opt) {
        for (const Tensor& t : opt->m) h = digest(t, h);
        for (const Tensor& t : opt->v) h = digest(t, h);
        h = fnv1a64(&opt->step, sizeof(opt->step), h);
    }
    return h;
}

}  // namespace moesim
