#pragma once

// Decoder-only transformer over the byte vocabulary, built from tape
// primitives so the same code path serves inference and training. Control
// adapters inject either as prefix rows (text / soft prompts) or as low-rank
// weight deltas (LoRA).

#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "meet/adapters.hpp"
#include "meet/rng.hpp"
#include "meet/tape.hpp"
#include "meet/tensor.hpp"
#include "meet/tokenizer.hpp"

namespace meet {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr int kMlpRatio = 4;
inline constexpr int kDefaultMaxGenerate = 128;

struct ModelConfig {
    int vocab_size = 260;
    int context_length = 256;
    int n_layers = 2;
    int n_heads = 4;
    int hidden_dim = 64;

    void validate() const {
        if (vocab_size < 1 || context_length < 1 || n_layers < 1 || n_heads < 1 || hidden_dim < 1) {
            throw std::invalid_argument("model config: all dimensions must be positive");
        }
        if (hidden_dim % n_heads != 0) {
            throw std::invalid_argument("model config: hidden_dim " + std::to_string(hidden_dim) +
                                        " not divisible by n_heads " + std::to_string(n_heads));
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

struct Param {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

class ModelState {
public:
    ModelState() = default;

    static ModelState init(const ModelConfig& config, const SeededRng& rng, double init_std = 0.02) {
        config.validate();
        ModelState s;
        s.config_ = config;
        const std::size_t v = static_cast<std::size_t>(config.vocab_size);
        const std::size_t c = static_cast<std::size_t>(config.context_length);
        const std::size_t h = static_cast<std::size_t>(config.hidden_dim);
        const std::size_t m = h * kMlpRatio;
        auto gauss = [&](const std::string& name, std::vector<std::size_t> shape) {
            SeededRng pr = rng.stream(name);
            s.add(name, Tensor::gaussian(std::move(shape), init_std, pr));
        };
        auto zeros = [&](const std::string& name, std::vector<std::size_t> shape) {
            s.add(name, Tensor::zeros(std::move(shape)));
        };
        auto ones = [&](const std::string& name, std::vector<std::size_t> shape) {
            s.add(name, Tensor::full(std::move(shape), 1.0));
        };
        gauss("tok_emb", {v, h});
        gauss("pos_emb", {c, h});
        for (int l = 0; l < config.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            ones(p + "ln1.g", {h});
            zeros(p + "ln1.b", {h});
            gauss(p + "attn.wq", {h, h});
            zeros(p + "attn.bq", {h});
            gauss(p + "attn.wk", {h, h});
            zeros(p + "attn.bk", {h});
            gauss(p + "attn.wv", {h, h});
            zeros(p + "attn.bv", {h});
            gauss(p + "attn.wo", {h, h});
            zeros(p + "attn.bo", {h});
            ones(p + "ln2.g", {h});
            zeros(p + "ln2.b", {h});
            gauss(p + "mlp.w1", {h, m});
            zeros(p + "mlp.b1", {m});
            gauss(p + "mlp.w2", {m, h});
            zeros(p + "mlp.b2", {h});
        }
        ones("final.ln.g", {h});
        zeros("final.ln.b", {h});
        gauss("final.w", {h, v});
        zeros("final.b", {v});
        return s;
    }

    const ModelConfig& config() const { return config_; }
    void set_config(ModelConfig c) {
        c.validate();
        config_ = c;
    }

    void add(std::string name, Tensor t) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        index_[name] = params_.size();
        params_.push_back(Param{std::move(name), std::move(t), true});
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& param(const std::string& name) const { return params_[find(name)].tensor; }
    Tensor& param_mut(const std::string& name) { return params_[find(name)].tensor; }

    bool trainable(const std::string& name) const { return params_[find(name)].trainable; }
    void set_trainable(const std::string& name, bool v) { params_[find(name)].trainable = v; }

    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params_mut() { return params_; }

    std::size_t total_param_count() const {
        std::size_t n = 0;
        for (const Param& p : params_) n += p.tensor.numel();
        return n;
    }

private:
    std::size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("no such parameter: " + name);
        return it->second;
    }

    ModelConfig config_;
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
};

// LoRA attaches to the attention query and value projections of every layer.
inline std::vector<LoraTargetSpec> lora_targets(const ModelState& state) {
    std::vector<LoraTargetSpec> specs;
    for (int l = 0; l < state.config().n_layers; ++l) {
        for (const char* which : {"attn.wq", "attn.wv"}) {
            const std::string name = "layers." + std::to_string(l) + "." + which;
            const Tensor& w = state.param(name);
            specs.push_back({name, w.rows(), w.cols()});
        }
    }
    return specs;
}

// Returns a new state with W' = W + (alpha/r) * (B*A) applied per target; the
// input state is untouched. Second merges of the same adapter stack another
// delta on top, so the merged flag guards against accidental reapplication.
inline ModelState merge_lora(const ModelState& state, ControlAdapter& adapter) {
    if (adapter.kind() != AdapterKind::lora) {
        throw std::invalid_argument("merge_lora: adapter '" + adapter.label() + "' is not a LoRA adapter");
    }
    LoraAdapter& lora = adapter.lora();
    if (lora.merged) {
        throw std::invalid_argument("merge_lora: adapter '" + adapter.label() + "' was already merged");
    }
    ModelState out = state;
    const double s = lora.alpha / static_cast<double>(lora.rank);
    for (const LoraTarget& t : lora.targets) {
        if (!out.has(t.target)) throw std::invalid_argument("merge_lora: no such target " + t.target);
        Tensor& w = out.param_mut(t.target);
        // Weights are stored input-major (y = x*W), so the delta lands as
        // (B*A)^T = A^T * B^T.
        Tensor delta = matmul_raw(t.a, t.b, true, true);
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] += s * delta[i];
    }
    lora.merged = true;
    return out;
}

// ---- tape bindings ----------------------------------------------------------

// Decides which parameters are registered as trainable leaves.
using TrainablePredicate = std::function<bool(const std::string&)>;

inline TrainablePredicate trainable_none() {
    return [](const std::string&) { return false; };
}
inline TrainablePredicate trainable_all() {
    return [](const std::string&) { return true; };
}

struct StateBinding {
    const ModelState* state = nullptr;
    std::map<std::string, Tape::NodeId> ids;

    Tape::NodeId at(const std::string& name) const { return ids.at(name); }
};

inline StateBinding bind_state(Tape& tape, const ModelState& state, const TrainablePredicate& trainable) {
    StateBinding b;
    b.state = &state;
    for (const Param& p : state.params()) {
        b.ids[p.name] = tape.leaf(p.tensor, p.name, trainable(p.name));
    }
    return b;
}

struct AdapterBinding {
    AdapterKind kind = AdapterKind::handcrafted;
    std::vector<int> prefix_ids;                  // handcrafted
    Tape::NodeId prompt_rows = -1;                // soft prompt
    double lora_scale = 0.0;                      // alpha / r
    std::map<std::string, std::pair<Tape::NodeId, Tape::NodeId>> lora_ab;  // target -> (A, B)
    bool present = false;
};

inline AdapterBinding bind_adapter(Tape& tape, ControlAdapter& adapter, const TrainablePredicate& trainable) {
    AdapterBinding b;
    b.present = true;
    b.kind = adapter.kind();
    switch (adapter.kind()) {
        case AdapterKind::handcrafted:
            b.prefix_ids = adapter.handcrafted().ids;
            break;
        case AdapterKind::soft_prompt: {
            const std::string name = adapter.param_prefix() + ".rows";
            b.prompt_rows = tape.leaf(adapter.soft_prompt().rows, name, trainable(name));
            break;
        }
        case AdapterKind::lora: {
            const LoraAdapter& l = adapter.lora();
            b.lora_scale = l.alpha / static_cast<double>(l.rank);
            for (const LoraTarget& t : l.targets) {
                const std::string an = adapter.param_prefix() + "." + t.target + ".A";
                const std::string bn = adapter.param_prefix() + "." + t.target + ".B";
                b.lora_ab[t.target] = {tape.leaf(t.a, an, trainable(an)), tape.leaf(t.b, bn, trainable(bn))};
            }
            break;
        }
    }
    return b;
}

// ---- forward ----------------------------------------------------------------

namespace detail {

inline std::vector<Tape::NodeId> head_selectors(Tape& tape, std::size_t h, std::size_t n_heads) {
    const std::size_t dh = h / n_heads;
    std::vector<Tape::NodeId> sel;
    sel.reserve(n_heads);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
        Tensor s({h, dh});
        for (std::size_t j = 0; j < dh; ++j) s.at(hd * dh + j, j) = 1.0;
        sel.push_back(tape.input(std::move(s)));
    }
    return sel;
}

inline Tape::NodeId projection(Tape& tape, const StateBinding& sb, const AdapterBinding& ab,
                               Tape::NodeId x, const std::string& w_name, const std::string& b_name) {
    Tape::NodeId y = tape.add(tape.matmul(x, sb.at(w_name)), sb.at(b_name));
    if (ab.present && ab.kind == AdapterKind::lora) {
        auto it = ab.lora_ab.find(w_name);
        if (it != ab.lora_ab.end()) {
            const auto [a_id, b_id] = it->second;
            Tape::NodeId delta = tape.matmul(tape.matmul(x, a_id, false, true), b_id, false, true);
            y = tape.add(y, tape.scale(delta, ab.lora_scale));
        }
    }
    return y;
}

} // namespace detail

// Builds logits for [prefix, tokens] on the tape. Rows are positions, columns
// vocabulary; the adapter's prefix (if any) occupies the leading rows.
inline Tape::NodeId logits_node(Tape& tape, const StateBinding& sb, const AdapterBinding& ab,
                                std::vector<int> tokens) {
    const ModelConfig& cfg = sb.state->config();
    const std::size_t h = static_cast<std::size_t>(cfg.hidden_dim);
    const std::size_t n_heads = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t dh = h / n_heads;

    std::vector<int> ids;
    if (ab.present && ab.kind == AdapterKind::handcrafted) {
        ids = ab.prefix_ids;
    }
    ids.insert(ids.end(), tokens.begin(), tokens.end());
    if (ids.empty()) throw std::invalid_argument("forward: empty token sequence");

    const std::size_t soft_len =
        (ab.present && ab.kind == AdapterKind::soft_prompt) ? tape.value(ab.prompt_rows).rows() : 0;
    const std::size_t total = soft_len + ids.size();
    if (total > static_cast<std::size_t>(cfg.context_length)) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(ids.size()) + " + prefix " +
                                    std::to_string(soft_len) + " exceeds context " +
                                    std::to_string(cfg.context_length));
    }
    for (int id : ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::invalid_argument("forward: token id " + std::to_string(id) + " outside vocab");
        }
    }

    Tape::NodeId x = tape.embedding(sb.at("tok_emb"), ids);
    if (soft_len > 0) x = tape.concat(ab.prompt_rows, x);

    std::vector<int> positions(total);
    for (std::size_t i = 0; i < total; ++i) positions[i] = static_cast<int>(i);
    x = tape.add(x, tape.embedding(sb.at("pos_emb"), positions));

    const std::vector<Tape::NodeId> sel = detail::head_selectors(tape, h, n_heads);
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Tape::NodeId norm1 = tape.layer_norm(x, sb.at(p + "ln1.g"), sb.at(p + "ln1.b"), kLayerNormEps);
        Tape::NodeId q = detail::projection(tape, sb, ab, norm1, p + "attn.wq", p + "attn.bq");
        Tape::NodeId k = detail::projection(tape, sb, ab, norm1, p + "attn.wk", p + "attn.bk");
        Tape::NodeId v = detail::projection(tape, sb, ab, norm1, p + "attn.wv", p + "attn.bv");

        Tape::NodeId merged = -1;
        for (std::size_t hd = 0; hd < n_heads; ++hd) {
            Tape::NodeId qh = tape.matmul(q, sel[hd]);
            Tape::NodeId kh = tape.matmul(k, sel[hd]);
            Tape::NodeId vh = tape.matmul(v, sel[hd]);
            Tape::NodeId scores = tape.scale(tape.matmul(qh, kh, false, true), att_scale);
            Tape::NodeId att = tape.softmax(tape.causal_mask_fill(scores));
            Tape::NodeId oh = tape.matmul(att, vh);
            Tape::NodeId back = tape.matmul(oh, sel[hd], false, true);
            merged = (merged < 0) ? back : tape.add(merged, back);
        }
        Tape::NodeId attn_out = tape.add(tape.matmul(merged, sb.at(p + "attn.wo")), sb.at(p + "attn.bo"));
        x = tape.add(x, attn_out);

        Tape::NodeId norm2 = tape.layer_norm(x, sb.at(p + "ln2.g"), sb.at(p + "ln2.b"), kLayerNormEps);
        Tape::NodeId up = tape.gelu(tape.add(tape.matmul(norm2, sb.at(p + "mlp.w1")), sb.at(p + "mlp.b1")));
        Tape::NodeId down = tape.add(tape.matmul(up, sb.at(p + "mlp.w2")), sb.at(p + "mlp.b2"));
        x = tape.add(x, down);
    }

    Tape::NodeId fin = tape.layer_norm(x, sb.at("final.ln.g"), sb.at("final.ln.b"), kLayerNormEps);
    return tape.add(tape.matmul(fin, sb.at("final.w")), sb.at("final.b"));
}

namespace detail {

inline AdapterBinding bind_optional(Tape& tape, ControlAdapter* adapter, const TrainablePredicate& trainable) {
    if (!adapter) return AdapterBinding{};
    return bind_adapter(tape, *adapter, trainable);
}

} // namespace detail

// Inference-path forward: logits for [adapter prefix, tokens].
inline Tensor forward_logits(const ModelState& state, const std::vector<int>& tokens,
                             ControlAdapter* adapter = nullptr) {
    Tape tape;
    StateBinding sb = bind_state(tape, state, trainable_none());
    AdapterBinding ab = detail::bind_optional(tape, adapter, trainable_none());
    return tape.value(logits_node(tape, sb, ab, tokens));
}

// Forward with explicit virtual prefix rows instead of an adapter; the rows
// are treated as frozen inputs. Injection-by-prefix and injection-by-
// concatenation agree through this path.
inline Tensor forward_logits_with_prefix_rows(const ModelState& state, const Tensor& prefix_rows,
                                              const std::vector<int>& tokens) {
    Tape tape;
    StateBinding sb = bind_state(tape, state, trainable_none());
    AdapterBinding ab;
    ab.present = true;
    ab.kind = AdapterKind::soft_prompt;
    ab.prompt_rows = tape.input(prefix_rows);
    return tape.value(logits_node(tape, sb, ab, tokens));
}

// Per-token log-probabilities of y conditioned on (adapter, x, preceding y
// tokens); the building block under both the mean-NLL and summed-DPO losses.
inline Tape::NodeId response_logprob_picks(Tape& tape, const StateBinding& sb, const AdapterBinding& ab,
                                           const std::vector<int>& x, const std::vector<int>& y) {
    if (x.empty()) throw std::invalid_argument("lm_loss: empty prompt");
    if (y.empty()) throw std::invalid_argument("lm_loss: empty response");
    for (int id : y) {
        if (id == Tokenizer::kPad) throw std::invalid_argument("lm_loss: response contains PAD");
    }
    std::vector<int> seq = x;
    seq.insert(seq.end(), y.begin(), y.end());
    Tape::NodeId logits = logits_node(tape, sb, ab, seq);

    const std::size_t total = tape.value(logits).rows();
    const std::size_t y_len = y.size();
    // Rows predicting y[j] sit one position earlier in the sequence.
    const std::size_t first = total - y_len - 1;
    Tensor sel({y_len, total});
    for (std::size_t j = 0; j < y_len; ++j) sel.at(j, first + j) = 1.0;
    Tape::NodeId picked_logits = tape.matmul(tape.input(std::move(sel)), logits);
    Tape::NodeId logprobs = tape.log_softmax(picked_logits);
    return tape.gather(logprobs, y);
}

// Mean NLL of y's tokens. Prompt and control-prefix positions contribute no
// loss.
inline Tape::NodeId lm_loss_node(Tape& tape, const StateBinding& sb, const AdapterBinding& ab,
                                 const std::vector<int>& x, const std::vector<int>& y) {
    Tape::NodeId picks = response_logprob_picks(tape, sb, ab, x, y);
    return tape.scale(tape.sum(picks), -1.0 / static_cast<double>(y.size()));
}

inline double lm_loss(const ModelState& state, const std::vector<int>& x, const std::vector<int>& y,
                      ControlAdapter* adapter = nullptr) {
    Tape tape;
    StateBinding sb = bind_state(tape, state, trainable_none());
    AdapterBinding ab = detail::bind_optional(tape, adapter, trainable_none());
    return tape.value(lm_loss_node(tape, sb, ab, x, y)).item();
}

// ---- sampling -----------------------------------------------------------------

// Greedy pick with ties broken toward the lowest token id.
inline int greedy_pick(const Tensor& logits_row) {
    int best = 0;
    for (std::size_t i = 1; i < logits_row.numel(); ++i) {
        if (logits_row[i] > logits_row[best]) best = static_cast<int>(i);
    }
    return best;
}

// Draw from softmax(logits / temperature) by inverse CDF on one uniform.
inline int temperature_pick(const Tensor& logits_row, double temperature, SeededRng& rng) {
    const std::size_t v = logits_row.numel();
    double mx = logits_row[0];
    for (std::size_t i = 1; i < v; ++i) mx = std::max(mx, logits_row[i]);
    std::vector<double> p(v);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
        p[i] = std::exp((logits_row[i] - mx) / temperature);
        z += p[i];
    }
    const double u = rng.next_uniform() * z;
    double acc = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
        acc += p[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(v - 1);
}

// Generic autoregressive loop over a next-token logits function; stops at EOS
// or after max_len generated tokens.
inline std::vector<int> sample_from(const std::function<Tensor(const std::vector<int>&)>& next_logits,
                                    std::vector<int> context, double temperature, int max_len, SeededRng& rng) {
    if (temperature < 0.0) throw std::invalid_argument("sample: negative temperature");
    if (max_len < 1) throw std::invalid_argument("sample: max_len must be >= 1");
    std::vector<int> out;
    for (int step = 0; step < max_len; ++step) {
        Tensor row = next_logits(context);
        const int tok = (temperature == 0.0) ? greedy_pick(row) : temperature_pick(row, temperature, rng);
        if (tok == Tokenizer::kEos) break;
        out.push_back(tok);
        context.push_back(tok);
    }
    return out;
}

inline std::vector<int> sample(const ModelState& state, const std::vector<int>& x, ControlAdapter* adapter,
                               double temperature, int max_len, SeededRng& rng) {
    const std::size_t prefix = adapter ? adapter->prefix_length() : 0;
    const std::size_t budget = static_cast<std::size_t>(state.config().context_length);
    auto next = [&](const std::vector<int>& ctx) -> Tensor {
        Tensor logits = forward_logits(state, ctx, adapter);
        const std::size_t last = logits.rows() - 1;
        Tensor row({logits.cols()});
        std::copy(logits.data() + last * logits.cols(), logits.data() + (last + 1) * logits.cols(), row.data());
        return row;
    };
    // Clip generation so prefix + context never overruns the window.
    const std::size_t room = budget > prefix + x.size() ? budget - prefix - x.size() : 0;
    const int len = std::min<std::size_t>(static_cast<std::size_t>(max_len), room);
    if (len < 1) throw std::invalid_argument("sample: no room left in context window");
    return sample_from(next, x, temperature, len, rng);
}

} // namespace meet
