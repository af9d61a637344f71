#pragma once

// Pluggable remote judge. The client posts one comparison per request and
// parses an "A"/"B"/"C" verdict; the driver queries both presentation orders
// and folds them with aggregate_two_orders. Failed or unparseable requests
// leave the example unjudged and excluded from the report, never defaulted
// to a tie.

#include <atomic>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "meet/eval.hpp"

namespace meet {

inline constexpr const char* kJudgePath = "/judge";

// Comparison prompt templates, filled with {question}/{answer_a}/{answer_b}.
inline std::string judge_template(const std::string& template_id) {
    if (template_id == "summary") {
        return "Which of the following summaries does a better job of summarizing the most "
               "important points in the given forum post, without including unimportant or "
               "irrelevant details? A good summary is both precise and concise.\n\n"
               "Post:\n{question}\n\n"
               "Summary A:\n{answer_a}\n\n"
               "Summary B:\n{answer_b}\n\n"
               "FIRST provide a one-sentence comparison of the two summaries, explaining which "
               "you prefer and why. SECOND, on a new line, state only \"A\" or \"B\" to indicate "
               "your choice. Your response should use the format:\n"
               "Comparison: <one-sentence comparison and explanation>\n"
               "Preferred: <\"A\" or \"B\">";
    }
    if (template_id == "dialogue") {
        return "Please act as an impartial judge and evaluate the quality of the responses "
               "provided by two AI assistants to the user question displayed below. You should "
               "choose the assistant that follows the user's instructions and answers the "
               "user's question better. Your evaluation should consider factors such as the "
               "helpfulness, relevance, accuracy, depth, creativity, and level of detail of "
               "their responses. Begin your evaluation by comparing the two responses and "
               "provide a short explanation. Avoid any positional biases and ensure that the "
               "order in which the responses were presented does not influence your decision. "
               "Do not allow the length of the responses to influence your evaluation. Do not "
               "favor certain names of the assistants. Be as objective as possible. After "
               "providing your explanation, output your final verdict by strictly following "
               "this format: \"[[A]]\" if assistant A is better, \"[[B]]\" if assistant B is "
               "better, and \"[[C]]\" for a tie.\n\n"
               "[User Question]\n{question}\n"
               "[The Start of Assistant A's Answer]\n{answer_a}\n[The End of Assistant A's Answer]\n"
               "[The Start of Assistant B's Answer]\n{answer_b}\n[The End of Assistant B's Answer]";
    }
    throw std::invalid_argument("unknown judge template: " + template_id);
}

inline std::string render_judge_prompt(const std::string& template_id, const std::string& question,
                                       const std::string& answer_a, const std::string& answer_b) {
    std::string text = judge_template(template_id);
    auto replace = [&text](const std::string& key, const std::string& value) {
        const std::size_t pos = text.find(key);
        if (pos != std::string::npos) text.replace(pos, key.size(), value);
    };
    replace("{question}", question);
    replace("{answer_a}", answer_a);
    replace("{answer_b}", answer_b);
    return text;
}

// One judged comparison. The returned verdict is from the perspective of the
// response in slot A of this request; nullopt means the example could not be
// judged (network failure or unparseable verdict).
inline std::optional<Verdict> remote_judge(const std::string& endpoint, const std::string& prompt,
                                           const std::string& answer_a, const std::string& answer_b,
                                           const std::string& template_id = "summary",
                                           int timeout_seconds = 10) {
    httplib::Client client(endpoint);
    client.set_connection_timeout(timeout_seconds, 0);
    client.set_read_timeout(timeout_seconds, 0);
    nlohmann::json req;
    req["prompt"] = prompt;
    req["answer_a"] = answer_a;
    req["answer_b"] = answer_b;
    req["template_id"] = template_id;
    httplib::Result res = client.Post(kJudgePath, req.dump(), "application/json");
    if (!res || res->status != 200) return std::nullopt;
    try {
        const nlohmann::json body = nlohmann::json::parse(res->body);
        const std::string verdict = body.at("verdict").get<std::string>();
        if (verdict == "A") return Verdict::win;
        if (verdict == "B") return Verdict::lose;
        if (verdict == "C") return Verdict::tie;
    } catch (const nlohmann::json::exception&) {
    }
    return std::nullopt;
}

struct JudgeOutcome {
    std::vector<Verdict> verdicts;  // judged examples only, input order
    std::size_t unjudged = 0;
};

// Judges candidate-vs-baseline over both presentation orders with bounded
// concurrency. For the swapped order the token is read from the candidate's
// perspective (slot B holds the candidate), so a judge that always prefers
// slot A cancels out to a tie.
inline JudgeOutcome judge_outputs(const std::string& endpoint, const std::vector<Generation>& candidate,
                                  const std::vector<Generation>& baseline, const std::string& template_id,
                                  int concurrency = 4, int timeout_seconds = 10) {
    if (candidate.size() != baseline.size()) {
        throw std::invalid_argument("judge_outputs: output counts differ");
    }
    const std::size_t n = candidate.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (candidate[i].prompt != baseline[i].prompt) {
            throw std::invalid_argument("judge_outputs: prompt mismatch at index " + std::to_string(i));
        }
    }
    std::vector<std::optional<Verdict>> results(n);
    std::atomic<std::size_t> cursor{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = cursor.fetch_add(1);
            if (i >= n) return;
            const std::optional<Verdict> ab = remote_judge(endpoint, candidate[i].prompt, candidate[i].response,
                                                           baseline[i].response, template_id, timeout_seconds);
            if (!ab) continue;
            const std::optional<Verdict> ba_raw = remote_judge(endpoint, candidate[i].prompt,
                                                               baseline[i].response, candidate[i].response,
                                                               template_id, timeout_seconds);
            if (!ba_raw) continue;
            const Verdict ba = *ba_raw == Verdict::win    ? Verdict::lose
                               : *ba_raw == Verdict::lose ? Verdict::win
                                                          : Verdict::tie;
            results[i] = aggregate_two_orders(*ab, ba);
        }
    };
    const int n_threads = std::max(1, std::min<int>(concurrency, static_cast<int>(n)));
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();

    JudgeOutcome out;
    for (const auto& r : results) {
        if (r) out.verdicts.push_back(*r);
        else ++out.unjudged;
    }
    return out;
}

} // namespace meet
