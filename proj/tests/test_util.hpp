#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <map>
#include <string>
#include <vector>

#include "meet/adapters.hpp"
#include "meet/data.hpp"
#include "meet/gradcheck.hpp"
#include "meet/model.hpp"
#include "meet/objectives.hpp"

namespace meet_test {

inline meet::ModelConfig micro_config() {
    meet::ModelConfig c;
    c.vocab_size = 260;
    c.context_length = 256;
    c.n_layers = 2;
    c.n_heads = 4;
    c.hidden_dim = 64;
    return c;
}

inline meet::ModelState micro_state(std::uint64_t seed, double init_std = 0.02) {
    return meet::ModelState::init(micro_config(), meet::SeededRng(seed, "model_init"), init_std);
}

// All trainable tensors (model + control tokens) as a flat parameter map.
inline meet::Params snapshot_params(const meet::ModelState& state, meet::ControlTokenSet& tokens) {
    meet::Params p;
    for (const meet::Param& prm : state.params()) p.emplace(prm.name, prm.tensor);
    tokens.for_each_param([&](const std::string& name, meet::Tensor& t) { p.emplace(name, t); });
    return p;
}

inline void apply_params(meet::ModelState& state, meet::ControlTokenSet& tokens, const meet::Params& p) {
    for (meet::Param& prm : state.params_mut()) {
        auto it = p.find(prm.name);
        if (it != p.end()) prm.tensor = it->second;
    }
    tokens.for_each_param([&](const std::string& name, meet::Tensor& t) {
        auto it = p.find(name);
        if (it != p.end()) t = it->second;
    });
}

// Small random pairwise batch over the letter alphabet.
inline meet::Batch random_batch(std::uint64_t seed, std::size_t n, std::size_t min_len = 3,
                                std::size_t max_len = 6) {
    meet::SeededRng rng(seed, "batch");
    meet::Batch b;
    b.kind = meet::DataKind::pairwise;
    for (std::size_t i = 0; i < n; ++i) {
        meet::PreferenceExample ex;
        const std::size_t len = min_len + rng.next_below(max_len - min_len + 1);
        for (std::size_t j = 0; j < len; ++j) {
            ex.prompt.push_back(static_cast<char>('a' + rng.next_below(26)));
            ex.chosen.push_back(static_cast<char>('a' + rng.next_below(26)));
            ex.rejected.push_back(static_cast<char>('a' + rng.next_below(26)));
        }
        if (ex.chosen == ex.rejected) ex.rejected[0] = ex.rejected[0] == 'a' ? 'b' : 'a';
        b.items.push_back(std::move(ex));
    }
    return b;
}

// A handful of coordinates per parameter tensor, for sampled finite-difference
// checks on the full model.
inline std::vector<meet::Coord> sample_coords(const meet::Params& params, std::uint64_t seed,
                                              std::size_t per_tensor = 2) {
    meet::SeededRng rng(seed, "coords");
    std::vector<meet::Coord> coords;
    for (const auto& [name, tensor] : params) {
        for (std::size_t k = 0; k < per_tensor; ++k) {
            coords.push_back({name, static_cast<std::size_t>(rng.next_below(tensor.numel()))});
        }
    }
    return coords;
}

inline double grad_at(const meet::GradMap& grads, const meet::Coord& c) {
    return grads.at(c.param)[c.index];
}

} // namespace meet_test
