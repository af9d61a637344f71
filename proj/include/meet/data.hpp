#pragma once

// Synthetic preference tasks with programmatic ground truth, plus ingestion
// of external pairwise/pointwise JSONL files. Generation is deterministic in
// (task, n, seed) down to the byte level.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "meet/rng.hpp"
#include "meet/tokenizer.hpp"

namespace meet {

enum class DataKind { pairwise, pointwise };

inline std::string to_string(DataKind k) { return k == DataKind::pairwise ? "pairwise" : "pointwise"; }

inline DataKind data_kind_from_string(const std::string& s) {
    if (s == "pairwise") return DataKind::pairwise;
    if (s == "pointwise") return DataKind::pointwise;
    throw std::invalid_argument("unknown data kind: " + s);
}

struct PreferenceExample {
    std::string prompt;
    // pairwise fields
    std::string chosen;
    std::string rejected;
    // pointwise fields
    std::string response;
    double score = 0.0;
    int level = -1;  // filled by score quantization
};

struct SyntheticTask {
    enum class Type { sort, upper };

    Type type = Type::sort;
    std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
    int min_len = 3;
    int max_len = 8;

    std::string name() const { return type == Type::sort ? "sort" : "upper"; }

    void validate() const {
        if (alphabet.empty()) throw std::invalid_argument("task: empty alphabet");
        if (min_len < 1) throw std::invalid_argument("task: min_len must be >= 1");
        if (max_len < min_len) {
            throw std::invalid_argument("task: degenerate length range [" + std::to_string(min_len) + ", " +
                                        std::to_string(max_len) + "]");
        }
    }

    static SyntheticTask from_name(const std::string& name) {
        SyntheticTask t;
        if (name == "sort") {
            t.type = Type::sort;
        } else if (name == "upper") {
            t.type = Type::upper;
        } else {
            throw std::invalid_argument("unknown task: " + name);
        }
        return t;
    }
};

// Ground-truth reward in [0, 1].
//  sort:  0 unless the response is a permutation of the prompt's letters;
//         otherwise the fraction of adjacent response pairs in non-decreasing
//         order (a single-character response scores 1).
//  upper: fraction of positions correctly uppercased, 0 on length mismatch.
inline double task_reward(const SyntheticTask& task, const std::string& prompt, const std::string& response) {
    if (task.type == SyntheticTask::Type::sort) {
        std::string a = prompt, b = response;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b) return 0.0;
        if (response.size() <= 1) return 1.0;
        std::size_t ordered = 0;
        for (std::size_t i = 0; i + 1 < response.size(); ++i) {
            if (response[i] <= response[i + 1]) ++ordered;
        }
        return static_cast<double>(ordered) / static_cast<double>(response.size() - 1);
    }
    if (response.size() != prompt.size()) return 0.0;
    if (prompt.empty()) return 1.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        if (response[i] == static_cast<char>(std::toupper(static_cast<unsigned char>(prompt[i])))) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(prompt.size());
}

struct Dataset {
    DataKind kind = DataKind::pairwise;
    std::vector<PreferenceExample> train;
    std::vector<PreferenceExample> validation;
    std::string provenance;  // task name or file path
    std::string task_name;
    std::uint64_t seed = 0;
    std::size_t dropped = 0;
    std::size_t deduped = 0;

    std::size_t size() const { return train.size() + validation.size(); }
};

namespace data_detail {

inline std::string random_prompt(const SyntheticTask& task, SeededRng& rng) {
    const std::size_t len =
        static_cast<std::size_t>(task.min_len) +
        static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(task.max_len - task.min_len + 1)));
    std::string s(len, '\0');
    for (char& c : s) c = task.alphabet[rng.next_below(task.alphabet.size())];
    return s;
}

inline bool all_same(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [&](char c) { return c == s[0]; });
}

// A uniformly random permutation that is not in sorted order.
inline std::string unsorted_permutation(const std::string& sorted, SeededRng& rng) {
    std::string p = sorted;
    do {
        rng.shuffle(p);
    } while (p == sorted);
    return p;
}

inline std::string flip_some_lowercase(const std::string& upper, SeededRng& rng) {
    std::string out;
    do {
        out = upper;
        for (char& c : out) {
            if (rng.next_below(2) == 0) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    } while (out == upper);
    return out;
}

} // namespace data_detail

// Deterministic synthetic dataset with a 90/10 train/validation split and
// distinct prompts, so the splits never share an x.
inline Dataset gen_synthetic(const SyntheticTask& task, std::size_t n, std::uint64_t seed,
                             DataKind kind = DataKind::pairwise) {
    task.validate();
    if (n < 1) throw std::invalid_argument("gen_synthetic: n must be >= 1");

    SeededRng rng(seed, "gen." + task.name());
    std::set<std::string> seen;
    std::vector<PreferenceExample> all;
    all.reserve(n);
    while (all.size() < n) {
        std::string prompt = data_detail::random_prompt(task, rng);
        if (task.type == SyntheticTask::Type::sort && data_detail::all_same(prompt)) {
            continue;  // no non-sorted permutation exists
        }
        if (!seen.insert(prompt).second) continue;

        PreferenceExample ex;
        ex.prompt = prompt;
        std::string good, bad;
        if (task.type == SyntheticTask::Type::sort) {
            good = prompt;
            std::sort(good.begin(), good.end());
            bad = data_detail::unsorted_permutation(good, rng);
        } else {
            good = prompt;
            for (char& c : good) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            bad = data_detail::flip_some_lowercase(good, rng);
        }
        if (kind == DataKind::pairwise) {
            ex.chosen = good;
            ex.rejected = bad;
        } else {
            ex.response = (rng.next_below(2) == 0) ? good : bad;
            ex.score = task_reward(task, prompt, ex.response);
        }
        all.push_back(std::move(ex));
    }

    Dataset ds;
    ds.kind = kind;
    ds.provenance = "synthetic:" + task.name();
    ds.task_name = task.name();
    ds.seed = seed;
    const std::size_t n_val = n / 10;
    const std::size_t n_train = n - n_val;
    ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.validation.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
    return ds;
}

// Token length of the longest sequence this example can produce in training:
// BOS + prompt + response + EOS (pairwise takes the longer response).
inline std::size_t example_token_length(const PreferenceExample& ex, DataKind kind, const Tokenizer& tok) {
    const std::size_t prompt_len = tok.encode(ex.prompt).size() + 1;
    if (kind == DataKind::pairwise) {
        return prompt_len + std::max(tok.encode(ex.chosen).size(), tok.encode(ex.rejected).size()) + 1;
    }
    return prompt_len + tok.encode(ex.response).size() + 1;
}

// Parses pairwise {"prompt","chosen","rejected"} or pointwise
// {"prompt","response","score"} JSONL. Schema violations abort with the line
// number; over-length examples and duplicates are dropped with counts.
inline Dataset load_jsonl(const std::string& path, DataKind kind, std::size_t max_input_len = 256,
                          const Tokenizer& tok = Tokenizer()) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_jsonl: cannot open " + path);

    Dataset ds;
    ds.kind = kind;
    ds.provenance = path;

    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    std::size_t parsed = 0;
    auto fail = [&](const std::string& why) {
        throw std::runtime_error("load_jsonl: " + path + " line " + std::to_string(line_no) + ": " + why);
    };
    auto text_field = [&](const nlohmann::json& j, const char* key) -> std::string {
        if (!j.contains(key)) fail(std::string("missing field '") + key + "'");
        if (!j.at(key).is_string()) fail(std::string("field '") + key + "' is not a string");
        std::string v = j.at(key).get<std::string>();
        if (v.empty()) fail(std::string("field '") + key + "' is empty");
        return v;
    };

    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) fail("not a JSON object");

        PreferenceExample ex;
        ex.prompt = text_field(j, "prompt");
        std::string dedup_key;
        if (kind == DataKind::pairwise) {
            ex.chosen = text_field(j, "chosen");
            ex.rejected = text_field(j, "rejected");
            if (ex.chosen == ex.rejected) fail("chosen and rejected are identical");
            dedup_key = ex.prompt + '\x1f' + ex.chosen + '\x1f' + ex.rejected;
        } else {
            ex.response = text_field(j, "response");
            if (!j.contains("score")) fail("missing field 'score'");
            if (!j.at("score").is_number()) fail("field 'score' is not a number");
            ex.score = j.at("score").get<double>();
            if (!std::isfinite(ex.score)) fail("field 'score' is not finite");
            dedup_key = ex.prompt + '\x1f' + ex.response + '\x1f' + std::to_string(ex.score);
        }
        ++parsed;
        if (!seen.insert(dedup_key).second) {
            ++ds.deduped;
            continue;
        }
        if (example_token_length(ex, kind, tok) > max_input_len) {
            ++ds.dropped;
            continue;
        }
        ds.train.push_back(std::move(ex));
    }
    if (parsed == 0) throw std::runtime_error("load_jsonl: " + path + " contains no examples");
    return ds;
}

inline void save_jsonl(const std::vector<PreferenceExample>& examples, DataKind kind, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_jsonl: cannot open for write: " + path);
    for (const PreferenceExample& ex : examples) {
        nlohmann::json j;
        j["prompt"] = ex.prompt;
        if (kind == DataKind::pairwise) {
            j["chosen"] = ex.chosen;
            j["rejected"] = ex.rejected;
        } else {
            j["response"] = ex.response;
            j["score"] = ex.score;
        }
        os << j.dump() << '\n';
    }
}

inline nlohmann::json dataset_manifest(const Dataset& ds) {
    nlohmann::json j;
    j["kind"] = to_string(ds.kind);
    j["counts"] = {{"train", ds.train.size()}, {"validation", ds.validation.size()}};
    j["dropped"] = ds.dropped;
    j["deduped"] = ds.deduped;
    j["seed"] = ds.seed;
    j["task"] = ds.task_name.empty() ? nlohmann::json(nullptr) : nlohmann::json(ds.task_name);
    j["provenance"] = ds.provenance;
    return j;
}

} // namespace meet
