#pragma once

// Control tokens: hand-crafted text prefixes, trainable soft prompts, and
// LoRA weight sets. A ControlTokenSet pairs one adapter per preference side
// (plus optional quantized levels); adapters in a set never share storage.

#include <functional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "meet/rng.hpp"
#include "meet/tensor.hpp"
#include "meet/tokenizer.hpp"

namespace meet {

enum class AdapterKind { handcrafted, soft_prompt, lora };

inline std::string to_string(AdapterKind k) {
    switch (k) {
        case AdapterKind::handcrafted: return "handcrafted";
        case AdapterKind::soft_prompt: return "soft_prompt";
        case AdapterKind::lora: return "lora";
    }
    return "?";
}

inline AdapterKind adapter_kind_from_string(const std::string& s) {
    if (s == "handcrafted") return AdapterKind::handcrafted;
    if (s == "soft_prompt") return AdapterKind::soft_prompt;
    if (s == "lora") return AdapterKind::lora;
    throw std::invalid_argument("unknown adapter kind: " + s);
}

struct HandcraftedPrefix {
    std::string text;
    std::vector<int> ids;  // cached token ids; decode(ids) == text
};

struct SoftPrompt {
    Tensor rows;  // [L x hidden_dim]
};

struct LoraTarget {
    std::string target;  // parameter name of the adapted weight
    Tensor a;            // [r x d_in]
    Tensor b;            // [d_out x r], zero at initialization
};

struct LoraAdapter {
    int rank = 0;
    double alpha = 0.0;
    std::vector<LoraTarget> targets;
    bool merged = false;
};

struct LoraTargetSpec {
    std::string name;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
};

class ControlAdapter {
public:
    ControlAdapter(std::string label, HandcraftedPrefix p) : label_(std::move(label)), impl_(std::move(p)) {}
    ControlAdapter(std::string label, SoftPrompt p) : label_(std::move(label)), impl_(std::move(p)) {}
    ControlAdapter(std::string label, LoraAdapter p) : label_(std::move(label)), impl_(std::move(p)) {}

    AdapterKind kind() const { return static_cast<AdapterKind>(impl_.index()); }

    const std::string& label() const { return label_; }

    const HandcraftedPrefix& handcrafted() const { return std::get<HandcraftedPrefix>(impl_); }
    const SoftPrompt& soft_prompt() const { return std::get<SoftPrompt>(impl_); }
    SoftPrompt& soft_prompt() { return std::get<SoftPrompt>(impl_); }
    const LoraAdapter& lora() const { return std::get<LoraAdapter>(impl_); }
    LoraAdapter& lora() { return std::get<LoraAdapter>(impl_); }

    // Context positions the adapter occupies when injected.
    std::size_t prefix_length() const {
        switch (kind()) {
            case AdapterKind::handcrafted: return handcrafted().ids.size();
            case AdapterKind::soft_prompt: return soft_prompt().rows.rows();
            case AdapterKind::lora: return 0;
        }
        return 0;
    }

    std::size_t trainable_param_count() const {
        switch (kind()) {
            case AdapterKind::handcrafted: return 0;
            case AdapterKind::soft_prompt: return soft_prompt().rows.numel();
            case AdapterKind::lora: {
                std::size_t n = 0;
                for (const LoraTarget& t : lora().targets) n += t.a.numel() + t.b.numel();
                return n;
            }
        }
        return 0;
    }

    // Visit every trainable tensor with its parameter name ("ctl.<label>...").
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        if (kind() == AdapterKind::soft_prompt) {
            fn(param_prefix() + ".rows", soft_prompt().rows);
        } else if (kind() == AdapterKind::lora) {
            for (LoraTarget& t : lora().targets) {
                fn(param_prefix() + "." + t.target + ".A", t.a);
                fn(param_prefix() + "." + t.target + ".B", t.b);
            }
        }
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        const_cast<ControlAdapter*>(this)->for_each_param(
            [&](const std::string& name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
    }

    std::string param_prefix() const { return "ctl." + label_; }

private:
    std::string label_;
    std::variant<HandcraftedPrefix, SoftPrompt, LoraAdapter> impl_;
};

struct ControlTokenSet {
    ControlAdapter good;                  // conditions preferred-style generation
    ControlAdapter bad;                   // conditions dispreferred-style generation
    std::vector<ControlAdapter> levels;   // optional quantized pointwise levels

    AdapterKind kind() const { return good.kind(); }

    std::size_t trainable_param_count() const {
        std::size_t n = good.trainable_param_count() + bad.trainable_param_count();
        for (const ControlAdapter& a : levels) n += a.trainable_param_count();
        return n;
    }

    const ControlAdapter& by_choice(const std::string& choice) const {
        if (choice == "good") return good;
        if (choice == "bad") return bad;
        if (choice.rfind("level-", 0) == 0) {
            const int k = std::stoi(choice.substr(6));
            if (k < 0 || static_cast<std::size_t>(k) >= levels.size()) {
                throw std::invalid_argument("adapter choice out of range: " + choice);
            }
            return levels[static_cast<std::size_t>(k)];
        }
        throw std::invalid_argument("unknown adapter choice: " + choice);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn) {
        good.for_each_param(fn);
        bad.for_each_param(fn);
        for (ControlAdapter& a : levels) a.for_each_param(fn);
    }
};

// Soft prompt initialization: tokenize the word and tile its token embeddings
// cyclically to length L. Rows are copies, so later training never writes
// back into the embedding table.
inline SoftPrompt init_soft_prompt(const std::string& word, std::size_t length, const Tensor& embeddings,
                                   const Tokenizer& tokenizer) {
    if (length < 1) throw std::invalid_argument("init_soft_prompt: length must be >= 1");
    const std::vector<int> ids = tokenizer.encode(word);
    if (ids.empty()) throw std::invalid_argument("init_soft_prompt: word tokenizes to nothing");
    const std::size_t h = embeddings.cols();
    Tensor rows({length, h});
    for (std::size_t i = 0; i < length; ++i) {
        const std::size_t tok = static_cast<std::size_t>(ids[i % ids.size()]);
        const double* src = embeddings.data() + tok * h;
        std::copy(src, src + h, rows.data() + i * h);
    }
    return SoftPrompt{std::move(rows)};
}

// LoRA initialization: A ~ Gaussian(0, 0.02^2), B = 0, so the effective delta
// (alpha/r) * B * A starts exactly zero.
inline LoraAdapter init_lora(int rank, double alpha, const std::vector<LoraTargetSpec>& targets, SeededRng rng) {
    if (rank < 1) throw std::invalid_argument("init_lora: rank must be >= 1");
    LoraAdapter a;
    a.rank = rank;
    a.alpha = alpha;
    for (const LoraTargetSpec& spec : targets) {
        const std::size_t r = static_cast<std::size_t>(rank);
        if (r > spec.d_in || r > spec.d_out) {
            throw std::invalid_argument("init_lora: rank " + std::to_string(rank) + " too large for target " +
                                        spec.name + " (" + std::to_string(spec.d_in) + "x" +
                                        std::to_string(spec.d_out) + ")");
        }
        SeededRng tr = rng.stream(spec.name);
        LoraTarget t;
        t.target = spec.name;
        t.a = Tensor::gaussian({r, spec.d_in}, 0.02, tr);
        t.b = Tensor::zeros({spec.d_out, r});
        a.targets.push_back(std::move(t));
    }
    return a;
}

// y = W*x + (alpha/r) * B * (A*x), column-vector convention (W is d_out x d_in).
inline Tensor lora_effective_forward(const Tensor& w, const LoraTarget& entry, double alpha, int rank,
                                     const Tensor& x) {
    if (x.ndim() != 1) throw std::invalid_argument("lora_effective_forward: x must be 1-D");
    Tensor xc({x.numel(), 1});
    std::copy(x.data(), x.data() + x.numel(), xc.data());
    Tensor base = matmul_raw(w, xc);            // [d_out x 1]
    Tensor ax = matmul_raw(entry.a, xc);        // [r x 1]
    Tensor bax = matmul_raw(entry.b, ax);       // [d_out x 1]
    const double s = alpha / static_cast<double>(rank);
    Tensor out({base.rows()});
    for (std::size_t i = 0; i < base.rows(); ++i) out[i] = base.at(i, 0) + s * bax.at(i, 0);
    return out;
}

inline ControlAdapter make_handcrafted(const std::string& label, const std::string& text,
                                       const Tokenizer& tokenizer) {
    HandcraftedPrefix p;
    p.text = text;
    p.ids = tokenizer.encode(text);
    return ControlAdapter(label, std::move(p));
}

// The fixed control prompts per dataset kind.
inline ControlTokenSet make_handcrafted_set(const std::string& dataset_kind, const Tokenizer& tokenizer) {
    std::string good_text, bad_text;
    if (dataset_kind == "dialogue") {
        good_text = "A good conversation is";
        bad_text = "A bad conversation is";
    } else if (dataset_kind == "summary") {
        good_text = "A good summary is";
        bad_text = "A bad summary is";
    } else if (dataset_kind == "synthetic") {
        good_text = "A good response is";
        bad_text = "A bad response is";
    } else {
        throw std::invalid_argument("make_handcrafted_set: unknown dataset kind '" + dataset_kind + "'");
    }
    return ControlTokenSet{make_handcrafted("good", good_text, tokenizer),
                           make_handcrafted("bad", bad_text, tokenizer),
                           {}};
}

inline ControlTokenSet make_soft_prompt_set(std::size_t length, const Tensor& embeddings,
                                            const Tokenizer& tokenizer) {
    return ControlTokenSet{ControlAdapter("good", init_soft_prompt("good", length, embeddings, tokenizer)),
                           ControlAdapter("bad", init_soft_prompt("bad", length, embeddings, tokenizer)),
                           {}};
}

inline ControlTokenSet make_lora_set(int rank, double alpha, const std::vector<LoraTargetSpec>& targets,
                                     const SeededRng& rng) {
    return ControlTokenSet{ControlAdapter("good", init_lora(rank, alpha, targets, rng.stream("lora.good"))),
                           ControlAdapter("bad", init_lora(rank, alpha, targets, rng.stream("lora.bad"))),
                           {}};
}

// Pointwise support: one soft prompt per quantized score level, seeded from
// the words "level0".."levelK-1". Level K-1 plays the preferred-side role.
inline ControlTokenSet make_quantized_soft_set(int k_levels, std::size_t length, const Tensor& embeddings,
                                               const Tokenizer& tokenizer) {
    if (k_levels < 1) throw std::invalid_argument("make_quantized_soft_set: need at least one level");
    std::vector<ControlAdapter> levels;
    for (int k = 0; k < k_levels; ++k) {
        const std::string word = "level" + std::to_string(k);
        levels.emplace_back("level" + std::to_string(k), init_soft_prompt(word, length, embeddings, tokenizer));
    }
    ControlTokenSet set{levels.back(), levels.front(), {}};
    set.levels = std::move(levels);
    return set;
}

} // namespace meet
