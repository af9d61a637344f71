#pragma once

// Evaluation protocol: reward-based win/lose/tie with a sigmoid tie band,
// delta reporting, Rouge metrics, two-order judge aggregation, and
// temperature sweeps.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "meet/data.hpp"
#include "meet/model.hpp"

namespace meet {

// ---- verdicts -------------------------------------------------------------------

enum class Verdict { win, lose, tie };

inline std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::win: return "win";
        case Verdict::lose: return "lose";
        case Verdict::tie: return "tie";
    }
    return "?";
}

struct RewardPair {
    double r1 = 0.0;  // candidate A
    double r2 = 0.0;  // baseline B
};

// Tie iff sigmoid(r1 - r2) lies in [0.45, 0.55] inclusive. The band is
// checked in log-odds space (|d| <= logit(0.55)), which is the same interval
// but keeps both closed endpoints exact in floating point; evaluating the
// sigmoid directly rounds the lower endpoint just below 0.45.
inline Verdict compare(const RewardPair& p) {
    if (!std::isfinite(p.r1) || !std::isfinite(p.r2)) {
        throw std::invalid_argument("compare: rewards must be finite");
    }
    const double band = std::log(0.55 / 0.45);
    const double d = p.r1 - p.r2;
    if (d > band) return Verdict::win;
    if (d < -band) return Verdict::lose;
    return Verdict::tie;
}

// Two-order judge aggregation, both verdicts from candidate A's perspective:
// win twice or win+draw -> win; lose twice or lose+draw -> lose; otherwise tie.
inline Verdict aggregate_two_orders(Verdict ab, Verdict ba) {
    const int score = (ab == Verdict::win ? 1 : ab == Verdict::lose ? -1 : 0) +
                      (ba == Verdict::win ? 1 : ba == Verdict::lose ? -1 : 0);
    if (score > 0) return Verdict::win;
    if (score < 0) return Verdict::lose;
    return Verdict::tie;
}

// ---- rewarders ------------------------------------------------------------------

struct Rewarder {
    std::string id;
    std::function<double(const std::string& prompt, const std::string& response)> score;
};

// Programmatic reward oracle over a synthetic task.
inline double oracle_reward(const SyntheticTask& task, const std::string& prompt, const std::string& response) {
    return task_reward(task, prompt, response);
}

inline Rewarder make_oracle_rewarder(const SyntheticTask& task) {
    return Rewarder{"oracle:" + task.name(), [task](const std::string& p, const std::string& r) {
                        return oracle_reward(task, p, r);
                    }};
}

// ---- win-rate reports -------------------------------------------------------------

struct WinRateReport {
    double win_pct = 0.0;
    double lose_pct = 0.0;
    double tie_pct = 0.0;
    double delta = 0.0;  // win_pct - lose_pct
    std::size_t n = 0;
    std::string evaluator;
    std::string candidate;
    std::string baseline;
};

struct Generation {
    std::string prompt;
    std::string response;
    std::string adapter;
    double temperature = 0.0;
};

inline WinRateReport winrate_from_verdicts(const std::vector<Verdict>& verdicts, std::string evaluator,
                                           std::string candidate, std::string baseline) {
    if (verdicts.empty()) throw std::invalid_argument("winrate: no verdicts");
    std::size_t w = 0, l = 0, t = 0;
    for (Verdict v : verdicts) {
        if (v == Verdict::win) ++w;
        else if (v == Verdict::lose) ++l;
        else ++t;
    }
    WinRateReport r;
    r.n = verdicts.size();
    const double n = static_cast<double>(r.n);
    r.win_pct = 100.0 * static_cast<double>(w) / n;
    r.lose_pct = 100.0 * static_cast<double>(l) / n;
    r.tie_pct = 100.0 * static_cast<double>(t) / n;
    r.delta = r.win_pct - r.lose_pct;
    r.evaluator = std::move(evaluator);
    r.candidate = std::move(candidate);
    r.baseline = std::move(baseline);
    return r;
}

// Per-prompt reward comparison of two aligned output sets.
inline WinRateReport winrate(const std::vector<Generation>& candidate, const std::vector<Generation>& baseline,
                             const Rewarder& rewarder, const std::string& candidate_id = "candidate",
                             const std::string& baseline_id = "baseline") {
    if (candidate.size() != baseline.size()) {
        throw std::invalid_argument("winrate: output counts differ (" + std::to_string(candidate.size()) + " vs " +
                                    std::to_string(baseline.size()) + ")");
    }
    std::vector<Verdict> verdicts;
    verdicts.reserve(candidate.size());
    for (std::size_t i = 0; i < candidate.size(); ++i) {
        if (candidate[i].prompt != baseline[i].prompt) {
            throw std::invalid_argument("winrate: prompt mismatch at index " + std::to_string(i) + ": '" +
                                        candidate[i].prompt + "' vs '" + baseline[i].prompt + "'");
        }
        verdicts.push_back(compare({rewarder.score(candidate[i].prompt, candidate[i].response),
                                    rewarder.score(baseline[i].prompt, baseline[i].response)}));
    }
    return winrate_from_verdicts(verdicts, rewarder.id, candidate_id, baseline_id);
}

// ---- Rouge ---------------------------------------------------------------------

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

namespace eval_detail {

inline std::vector<std::string> rouge_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline RougeScore score_from_counts(double match, double cand_total, double ref_total) {
    RougeScore s;
    s.precision = cand_total > 0 ? match / cand_total : 0.0;
    s.recall = ref_total > 0 ? match / ref_total : 0.0;
    s.f1 = (s.precision + s.recall) > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

// Clipped n-gram overlap F1.
inline RougeScore rouge_n(const std::vector<std::string>& cand, const std::vector<std::string>& ref,
                          std::size_t n) {
    auto grams = [n](const std::vector<std::string>& toks) {
        std::map<std::string, std::size_t> g;
        if (toks.size() >= n) {
            for (std::size_t i = 0; i + n <= toks.size(); ++i) {
                std::string key;
                for (std::size_t j = 0; j < n; ++j) {
                    key += toks[i + j];
                    key += '\x1f';
                }
                ++g[key];
            }
        }
        return g;
    };
    const auto gc = grams(cand);
    const auto gr = grams(ref);
    std::size_t match = 0, cand_total = 0, ref_total = 0;
    for (const auto& [k, v] : gc) cand_total += v;
    for (const auto& [k, v] : gr) ref_total += v;
    for (const auto& [k, v] : gc) {
        auto it = gr.find(k);
        if (it != gr.end()) match += std::min(v, it->second);
    }
    return score_from_counts(static_cast<double>(match), static_cast<double>(cand_total),
                             static_cast<double>(ref_total));
}

} // namespace eval_detail

// LCS-based Rouge-L over lowercased whitespace tokens.
inline RougeScore rouge_l(const std::string& candidate, const std::string& reference) {
    const auto c = eval_detail::rouge_tokens(candidate);
    const auto r = eval_detail::rouge_tokens(reference);
    const std::size_t lcs = eval_detail::lcs_length(c, r);
    return eval_detail::score_from_counts(static_cast<double>(lcs), static_cast<double>(c.size()),
                                          static_cast<double>(r.size()));
}

// Arithmetic mean of Rouge-1, Rouge-2 and Rouge-L F1.
inline double rouge_avg(const std::string& candidate, const std::string& reference) {
    const auto c = eval_detail::rouge_tokens(candidate);
    const auto r = eval_detail::rouge_tokens(reference);
    const double r1 = eval_detail::rouge_n(c, r, 1).f1;
    const double r2 = eval_detail::rouge_n(c, r, 2).f1;
    const double rl = rouge_l(candidate, reference).f1;
    return (r1 + r2 + rl) / 3.0;
}

// ---- dumps ---------------------------------------------------------------------

// Responses sampled from a byte-level model can contain arbitrary bytes;
// invalid UTF-8 sequences are replaced with U+FFFD so the dump stays valid
// JSONL. Ill-formed output scores zero under every rewarder either way.
inline void write_generations_jsonl(const std::string& path, const std::vector<Generation>& gens) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    for (const Generation& g : gens) {
        nlohmann::json j;
        j["prompt"] = g.prompt;
        j["response"] = g.response;
        j["adapter"] = g.adapter;
        j["temperature"] = g.temperature;
        os << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    }
}

inline std::vector<Generation> read_generations_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::vector<Generation> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + " line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
        }
        Generation g;
        g.prompt = j.at("prompt").get<std::string>();
        g.response = j.at("response").get<std::string>();
        g.adapter = j.value("adapter", "");
        g.temperature = j.value("temperature", 0.0);
        out.push_back(std::move(g));
    }
    return out;
}

// ---- temperature sweep ------------------------------------------------------------

struct SweepRow {
    double temperature = 0.0;
    double delta = 0.0;
};

// For each temperature, sample every validation prompt (fresh fixed-seed
// stream per temperature) and compute delta against the fixed baseline
// outputs. Rows come back in input order.
inline std::vector<SweepRow> temperature_sweep(const ModelState& state, ControlAdapter& adapter,
                                               const std::vector<std::string>& prompts,
                                               const std::vector<double>& temps, const Rewarder& rewarder,
                                               const std::vector<Generation>& baseline_outputs,
                                               std::uint64_t seed, int max_len = kDefaultMaxGenerate,
                                               const Tokenizer& tok = Tokenizer()) {
    if (temps.empty()) throw std::invalid_argument("temperature_sweep: no temperatures");
    for (double t : temps) {
        if (t < 0.0) throw std::invalid_argument("temperature_sweep: negative temperature");
    }
    std::vector<SweepRow> rows;
    for (std::size_t ti = 0; ti < temps.size(); ++ti) {
        std::vector<Generation> outputs;
        outputs.reserve(prompts.size());
        SeededRng rng = SeededRng(seed, "sweep").stream(ti);
        for (const std::string& prompt : prompts) {
            std::vector<int> ids = sample(state, encode_prompt(tok, prompt), &adapter, temps[ti], max_len, rng);
            outputs.push_back(Generation{prompt, tok.decode(ids), adapter.label(), temps[ti]});
        }
        const WinRateReport r = winrate(outputs, baseline_outputs, rewarder, "sweep", "baseline");
        rows.push_back(SweepRow{temps[ti], r.delta});
    }
    return rows;
}

// ---- report serialization -----------------------------------------------------------

inline nlohmann::json report_to_json(const WinRateReport& r) {
    nlohmann::json j;
    j["evaluator"] = r.evaluator;
    j["candidate"] = r.candidate;
    j["baseline"] = r.baseline;
    j["n"] = r.n;
    j["win_pct"] = r.win_pct;
    j["lose_pct"] = r.lose_pct;
    j["tie_pct"] = r.tie_pct;
    j["delta"] = r.delta;
    return j;
}

inline std::string report_csv_header() { return "evaluator,baseline,n,win_pct,lose_pct,tie_pct,delta"; }

inline std::string report_csv_row(const WinRateReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.evaluator << ',' << r.baseline << ',' << r.n << ',' << r.win_pct << ',' << r.lose_pct << ','
       << r.tie_pct << ',' << r.delta;
    return os.str();
}

} // namespace meet
