#pragma once

// Self-describing binary checkpoint: format-version header, model config,
// named parameter tensors, then an optional control-token section. All
// multi-byte values are little-endian; floats are IEEE-754 binary64.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "meet/adapters.hpp"
#include "meet/model.hpp"

namespace meet {

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'M', 'E', 'E', 'T', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
T to_le(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        T out{};
        auto* src = reinterpret_cast<const unsigned char*>(&v);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
        return out;
    }
    return v;
}

template <typename T>
void write_int(std::ostream& os, T v) {
    v = to_le(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_int(os, bits);
}

inline void write_str(std::ostream& os, const std::string& s) {
    write_int(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_int(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) write_int(os, static_cast<std::uint64_t>(d));
    for (std::size_t i = 0; i < t.numel(); ++i) write_f64(os, t[i]);
}

template <typename T>
T read_int(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return to_le(v);
}

inline double read_f64(std::istream& is) {
    const std::uint64_t bits = read_int<std::uint64_t>(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

inline std::string read_str(std::istream& is) {
    const std::uint32_t n = read_int<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint: truncated string");
    return s;
}

inline Tensor read_tensor(std::istream& is) {
    const std::uint32_t ndim = read_int<std::uint32_t>(is);
    std::vector<std::size_t> shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
        d = static_cast<std::size_t>(read_int<std::uint64_t>(is));
        numel *= d;
    }
    std::vector<double> v(numel);
    for (double& x : v) x = read_f64(is);
    return Tensor(std::move(shape), std::move(v));
}

inline void write_adapter(std::ostream& os, const ControlAdapter& a) {
    write_str(os, a.label());
    write_int(os, static_cast<std::uint32_t>(a.kind()));
    switch (a.kind()) {
        case AdapterKind::handcrafted:
            write_str(os, a.handcrafted().text);
            break;
        case AdapterKind::soft_prompt:
            write_tensor(os, a.soft_prompt().rows);
            break;
        case AdapterKind::lora: {
            const LoraAdapter& l = a.lora();
            write_int(os, static_cast<std::uint32_t>(l.rank));
            write_f64(os, l.alpha);
            write_int(os, static_cast<std::uint8_t>(l.merged ? 1 : 0));
            write_int(os, static_cast<std::uint32_t>(l.targets.size()));
            for (const LoraTarget& t : l.targets) {
                write_str(os, t.target);
                write_tensor(os, t.a);
                write_tensor(os, t.b);
            }
            break;
        }
    }
}

inline ControlAdapter read_adapter(std::istream& is, const Tokenizer& tok) {
    const std::string label = read_str(is);
    const auto kind = static_cast<AdapterKind>(read_int<std::uint32_t>(is));
    switch (kind) {
        case AdapterKind::handcrafted: {
            const std::string text = read_str(is);
            return make_handcrafted(label, text, tok);
        }
        case AdapterKind::soft_prompt:
            return ControlAdapter(label, SoftPrompt{read_tensor(is)});
        case AdapterKind::lora: {
            LoraAdapter l;
            l.rank = static_cast<int>(read_int<std::uint32_t>(is));
            l.alpha = read_f64(is);
            l.merged = read_int<std::uint8_t>(is) != 0;
            const std::uint32_t n = read_int<std::uint32_t>(is);
            for (std::uint32_t i = 0; i < n; ++i) {
                LoraTarget t;
                t.target = read_str(is);
                t.a = read_tensor(is);
                t.b = read_tensor(is);
                l.targets.push_back(std::move(t));
            }
            return ControlAdapter(label, std::move(l));
        }
    }
    throw std::runtime_error("checkpoint: unknown adapter kind tag");
}

} // namespace ckpt_detail

struct Checkpoint {
    ModelState state;
    std::optional<ControlTokenSet> tokens;
};

inline void save_checkpoint(const std::string& path, const ModelState& state,
                            const ControlTokenSet* tokens = nullptr) {
    namespace d = ckpt_detail;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(d::kMagic, 8);
    d::write_int(os, d::kVersion);
    const ModelConfig& c = state.config();
    d::write_int(os, static_cast<std::uint32_t>(c.vocab_size));
    d::write_int(os, static_cast<std::uint32_t>(c.context_length));
    d::write_int(os, static_cast<std::uint32_t>(c.n_layers));
    d::write_int(os, static_cast<std::uint32_t>(c.n_heads));
    d::write_int(os, static_cast<std::uint32_t>(c.hidden_dim));
    d::write_int(os, static_cast<std::uint64_t>(state.params().size()));
    for (const Param& p : state.params()) {
        d::write_str(os, p.name);
        d::write_int(os, static_cast<std::uint8_t>(p.trainable ? 1 : 0));
        d::write_tensor(os, p.tensor);
    }
    if (tokens) {
        d::write_int(os, static_cast<std::uint8_t>(1));
        d::write_adapter(os, tokens->good);
        d::write_adapter(os, tokens->bad);
        d::write_int(os, static_cast<std::uint32_t>(tokens->levels.size()));
        for (const ControlAdapter& a : tokens->levels) d::write_adapter(os, a);
    } else {
        d::write_int(os, static_cast<std::uint8_t>(0));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path, const Tokenizer& tok = Tokenizer()) {
    namespace d = ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, d::kMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    const std::uint32_t version = d::read_int<std::uint32_t>(is);
    if (version != d::kVersion) {
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
    }
    Checkpoint out;
    ModelConfig c;
    c.vocab_size = static_cast<int>(d::read_int<std::uint32_t>(is));
    c.context_length = static_cast<int>(d::read_int<std::uint32_t>(is));
    c.n_layers = static_cast<int>(d::read_int<std::uint32_t>(is));
    c.n_heads = static_cast<int>(d::read_int<std::uint32_t>(is));
    c.hidden_dim = static_cast<int>(d::read_int<std::uint32_t>(is));
    out.state.set_config(c);
    const std::uint64_t n_params = d::read_int<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n_params; ++i) {
        std::string name = d::read_str(is);
        const bool trainable = d::read_int<std::uint8_t>(is) != 0;
        Tensor t = d::read_tensor(is);
        out.state.add(name, std::move(t));
        out.state.set_trainable(name, trainable);
    }
    if (d::read_int<std::uint8_t>(is) != 0) {
        ControlAdapter good = d::read_adapter(is, tok);
        ControlAdapter bad = d::read_adapter(is, tok);
        ControlTokenSet set{std::move(good), std::move(bad), {}};
        const std::uint32_t n_levels = d::read_int<std::uint32_t>(is);
        for (std::uint32_t i = 0; i < n_levels; ++i) set.levels.push_back(d::read_adapter(is, tok));
        out.tokens = std::move(set);
    }
    return out;
}

} // namespace meet
