#pragma once

// Training objectives: the controllable-generation loss, its parameter-
// efficient variant (same value, gradients restricted to control tokens), the
// DPO baseline, trainable-set masks, and pointwise score quantization.

#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "meet/adapters.hpp"
#include "meet/data.hpp"
#include "meet/model.hpp"
#include "meet/tape.hpp"

namespace meet {

struct Batch {
    std::vector<PreferenceExample> items;
    DataKind kind = DataKind::pairwise;

    void validate() const {
        if (items.empty()) throw std::invalid_argument("batch: empty");
    }
};

// ---- trainable masks ----------------------------------------------------------

enum class Stage { pet, joint };

struct TrainableMask {
    std::set<std::string> names;

    bool contains(const std::string& name) const { return names.count(name) != 0; }

    TrainablePredicate predicate() const {
        return [this](const std::string& name) { return contains(name); };
    }

    bool adapter_only() const {
        for (const std::string& n : names) {
            if (n.rfind("ctl.", 0) != 0) return false;
        }
        return true;
    }
};

inline TrainableMask build_mask(Stage stage, const ModelState& state, ControlTokenSet& tokens) {
    TrainableMask mask;
    if (stage == Stage::pet && tokens.kind() == AdapterKind::handcrafted) {
        throw std::invalid_argument("build_mask: hand-crafted prefixes have no trainable control tokens");
    }
    tokens.for_each_param([&](const std::string& name, Tensor&) { mask.names.insert(name); });
    if (stage == Stage::joint) {
        for (const Param& p : state.params()) mask.names.insert(p.name);
    }
    return mask;
}

// ---- controllable-generation loss ----------------------------------------------

struct LossResult {
    double value = 0.0;
    GradMap grads;
};

namespace obj_detail {

inline void require_quantized(const Batch& batch, const ControlTokenSet& tokens) {
    if (tokens.levels.empty()) {
        throw std::invalid_argument("loss: pointwise batch needs quantized control levels (use quantize_scores "
                                    "first)");
    }
    for (const PreferenceExample& ex : batch.items) {
        if (ex.level < 0 || static_cast<std::size_t>(ex.level) >= tokens.levels.size()) {
            throw std::invalid_argument("loss: pointwise example missing a level tag (use quantize_scores first)");
        }
    }
}

// Zero-filled gradient entries for every masked parameter, so the returned
// map always has one entry per trainable parameter.
inline void complete_grads(GradMap& grads, const ModelState& state, ControlTokenSet& tokens,
                           const TrainableMask& mask) {
    for (const Param& p : state.params()) {
        if (mask.contains(p.name) && !grads.count(p.name)) grads.emplace(p.name, Tensor(p.tensor.shape()));
    }
    tokens.for_each_param([&](const std::string& name, Tensor& t) {
        if (mask.contains(name) && !grads.count(name)) grads.emplace(name, Tensor(t.shape()));
    });
}

inline LossResult eval_cg(const ModelState& state, ControlTokenSet& tokens, const Batch& batch,
                          const TrainableMask* mask, bool with_grads, const Tokenizer& tok) {
    batch.validate();
    Tape tape;
    const TrainablePredicate pred = (with_grads && mask) ? mask->predicate() : trainable_none();
    StateBinding sb = bind_state(tape, state, pred);

    Tape::NodeId acc = -1;
    auto accumulate = [&](Tape::NodeId term) { acc = acc < 0 ? term : tape.add(acc, term); };

    if (batch.kind == DataKind::pairwise) {
        AdapterBinding good_b = bind_adapter(tape, tokens.good, pred);
        AdapterBinding bad_b = bind_adapter(tape, tokens.bad, pred);
        for (const PreferenceExample& ex : batch.items) {
            const std::vector<int> x = encode_prompt(tok, ex.prompt);
            Tape::NodeId lose = lm_loss_node(tape, sb, bad_b, x, encode_response(tok, ex.rejected));
            Tape::NodeId win = lm_loss_node(tape, sb, good_b, x, encode_response(tok, ex.chosen));
            accumulate(tape.add(lose, win));
        }
    } else {
        require_quantized(batch, tokens);
        std::vector<AdapterBinding> level_b;
        for (ControlAdapter& a : tokens.levels) level_b.push_back(bind_adapter(tape, a, pred));
        for (const PreferenceExample& ex : batch.items) {
            const std::vector<int> x = encode_prompt(tok, ex.prompt);
            accumulate(lm_loss_node(tape, sb, level_b[static_cast<std::size_t>(ex.level)], x,
                                    encode_response(tok, ex.response)));
        }
    }

    Tape::NodeId loss = tape.scale(acc, 1.0 / static_cast<double>(batch.items.size()));
    LossResult r;
    r.value = tape.value(loss).item();
    if (with_grads && mask) {
        r.grads = tape.backward(loss);
        complete_grads(r.grads, state, tokens, *mask);
    }
    return r;
}

} // namespace obj_detail

// Eq.-style controllable-generation loss: mean over the batch of
// [NLL(y_l | x, bad) + NLL(y_w | x, good)]. Gradients may flow to all
// parameters.
inline double loss_cg(const ModelState& state, ControlTokenSet& tokens, const Batch& batch,
                      const Tokenizer& tok = Tokenizer()) {
    return obj_detail::eval_cg(state, tokens, batch, nullptr, false, tok).value;
}

inline LossResult loss_cg_grad(const ModelState& state, ControlTokenSet& tokens, const Batch& batch,
                               const TrainableMask& mask, const Tokenizer& tok = Tokenizer()) {
    return obj_detail::eval_cg(state, tokens, batch, &mask, true, tok);
}

// Parameter-efficient variant: same scalar value as loss_cg on the same
// inputs; the gradient map carries exact zeros for every base parameter.
inline void require_pet_mask(const TrainableMask& mask) {
    if (mask.names.empty()) throw std::invalid_argument("loss_pet: empty trainable mask");
    if (!mask.adapter_only()) {
        throw std::invalid_argument("loss_pet: mask includes base model parameters");
    }
}

inline double loss_pet(const ModelState& state, ControlTokenSet& tokens, const Batch& batch,
                       const TrainableMask& mask, const Tokenizer& tok = Tokenizer()) {
    require_pet_mask(mask);
    return obj_detail::eval_cg(state, tokens, batch, nullptr, false, tok).value;
}

inline LossResult loss_pet_grad(const ModelState& state, ControlTokenSet& tokens, const Batch& batch,
                                const TrainableMask& mask, const Tokenizer& tok = Tokenizer()) {
    require_pet_mask(mask);
    LossResult r = obj_detail::eval_cg(state, tokens, batch, &mask, true, tok);
    // Explicit zero entries for the frozen base parameters.
    for (const Param& p : state.params()) {
        if (!r.grads.count(p.name)) r.grads.emplace(p.name, Tensor(p.tensor.shape()));
    }
    return r;
}

// ---- DPO baseline ----------------------------------------------------------------

struct DpoConfig {
    double beta = 0.1;
    const ModelState* reference = nullptr;
};

// -log sigmoid(u) evaluated via softplus; numerically stable for any u.
inline double dpo_loss_from_logps(double policy_w, double policy_l, double ref_w, double ref_l, double beta) {
    const double u = beta * ((policy_w - ref_w) - (policy_l - ref_l));
    return u >= 0.0 ? std::log1p(std::exp(-u)) : -u + std::log1p(std::exp(u));
}

namespace obj_detail {

inline double summed_logprob(const ModelState& state, const std::vector<int>& x, const std::vector<int>& y) {
    Tape tape;
    StateBinding sb = bind_state(tape, state, trainable_none());
    AdapterBinding none;
    return tape.value(tape.sum(response_logprob_picks(tape, sb, none, x, y))).item();
}

inline LossResult eval_dpo(const ModelState& state, const DpoConfig& config, const Batch& batch,
                           const TrainableMask* mask, bool with_grads, const Tokenizer& tok) {
    batch.validate();
    if (batch.kind != DataKind::pairwise) throw std::invalid_argument("loss_dpo: batch must be pairwise");
    if (config.reference == nullptr) throw std::invalid_argument("loss_dpo: reference state missing");

    Tape tape;
    const TrainablePredicate pred = (with_grads && mask) ? mask->predicate() : trainable_none();
    StateBinding sb = bind_state(tape, state, pred);
    AdapterBinding none;

    Tape::NodeId acc = -1;
    for (const PreferenceExample& ex : batch.items) {
        const std::vector<int> x = encode_prompt(tok, ex.prompt);
        const std::vector<int> yw = encode_response(tok, ex.chosen);
        const std::vector<int> yl = encode_response(tok, ex.rejected);
        Tape::NodeId lw = tape.sum(response_logprob_picks(tape, sb, none, x, yw));
        Tape::NodeId ll = tape.sum(response_logprob_picks(tape, sb, none, x, yl));
        const double ref_margin = summed_logprob(*config.reference, x, yw) -
                                  summed_logprob(*config.reference, x, yl);
        // u = beta * ((lw - ll) - ref_margin); loss = -log sigmoid(u), written
        // as -log_softmax([u, 0])[0].
        Tape::NodeId margin = tape.add(lw, tape.scale(ll, -1.0));
        Tape::NodeId u = tape.scale(tape.add(margin, tape.input(Tensor::scalar(-ref_margin))), config.beta);
        Tape::NodeId pair = tape.concat(u, tape.input(Tensor::scalar(0.0)));
        Tape::NodeId log_sig = tape.gather(tape.log_softmax(pair), {0});
        Tape::NodeId term = tape.scale(tape.sum(log_sig), -1.0);
        acc = acc < 0 ? term : tape.add(acc, term);
    }
    Tape::NodeId loss = tape.scale(acc, 1.0 / static_cast<double>(batch.items.size()));

    LossResult r;
    r.value = tape.value(loss).item();
    if (with_grads && mask) {
        r.grads = tape.backward(loss);
        for (const Param& p : state.params()) {
            if (mask->contains(p.name) && !r.grads.count(p.name)) r.grads.emplace(p.name, Tensor(p.tensor.shape()));
        }
    }
    return r;
}

} // namespace obj_detail

inline double loss_dpo(const ModelState& state, const DpoConfig& config, const Batch& batch,
                       const Tokenizer& tok = Tokenizer()) {
    return obj_detail::eval_dpo(state, config, batch, nullptr, false, tok).value;
}

inline LossResult loss_dpo_grad(const ModelState& state, const DpoConfig& config, const Batch& batch,
                                const TrainableMask& mask, const Tokenizer& tok = Tokenizer()) {
    return obj_detail::eval_dpo(state, config, batch, &mask, true, tok);
}

// ---- pointwise score quantization -----------------------------------------------

struct QuantizeResult {
    Batch batch;                          // examples tagged with level ids
    std::vector<std::size_t> bin_counts;  // per level; empty bins are visible here
};

// Quantile binning into K levels over the batch; tied scores share the lower
// bin and level K-1 marks the highest-scoring band.
inline QuantizeResult quantize_scores(const Batch& batch, int k_levels) {
    batch.validate();
    if (batch.kind != DataKind::pointwise) throw std::invalid_argument("quantize_scores: batch must be pointwise");
    if (k_levels < 1) throw std::invalid_argument("quantize_scores: K must be >= 1");
    for (const PreferenceExample& ex : batch.items) {
        if (!std::isfinite(ex.score)) throw std::invalid_argument("quantize_scores: non-finite score");
    }

    std::vector<double> sorted;
    sorted.reserve(batch.items.size());
    for (const PreferenceExample& ex : batch.items) sorted.push_back(ex.score);
    std::sort(sorted.begin(), sorted.end());

    QuantizeResult out;
    out.batch = batch;
    out.bin_counts.assign(static_cast<std::size_t>(k_levels), 0);
    const std::size_t n = sorted.size();
    for (PreferenceExample& ex : out.batch.items) {
        // rank = number of scores strictly below; ties collapse to the first
        // occurrence, which lands them in the lower bin.
        const std::size_t rank = static_cast<std::size_t>(
            std::lower_bound(sorted.begin(), sorted.end(), ex.score) - sorted.begin());
        ex.level = static_cast<int>(rank * static_cast<std::size_t>(k_levels) / n);
        ++out.bin_counts[static_cast<std::size_t>(ex.level)];
    }
    return out;
}

} // namespace meet
