#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "meet/eval.hpp"
#include "meet/rng.hpp"
#include "test_util.hpp"

using meet::Generation;
using meet::RewardPair;
using meet::SeededRng;
using meet::SyntheticTask;
using meet::Verdict;

namespace {

// Independent LCS oracle: top-down memoized recursion (the library uses an
// iterative two-row table).
std::size_t lcs_memo(const std::vector<int>& a, const std::vector<int>& b, std::size_t i, std::size_t j,
                     std::map<std::pair<std::size_t, std::size_t>, std::size_t>& memo) {
    if (i == a.size() || j == b.size()) return 0;
    const auto key = std::make_pair(i, j);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    std::size_t r;
    if (a[i] == b[j]) {
        r = 1 + lcs_memo(a, b, i + 1, j + 1, memo);
    } else {
        r = std::max(lcs_memo(a, b, i + 1, j, memo), lcs_memo(a, b, i, j + 1, memo));
    }
    memo[key] = r;
    return r;
}

std::string token_string(const std::vector<int>& toks) {
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) s += ' ';
        s += "w" + std::to_string(toks[i]);
    }
    return s;
}

} // namespace

TEST_CASE("oracle reward for the sort task") {
    SyntheticTask sort_task;
    CHECK(meet::oracle_reward(sort_task, "cab", "abc") == 1.0);
    CHECK(meet::oracle_reward(sort_task, "cab", "xyz") == 0.0);
    CHECK(meet::oracle_reward(sort_task, "cab", "cab") == 0.5);  // (c,a) out of order, (a,b) in order
    CHECK(meet::oracle_reward(sort_task, "cab", "") == 0.0);
    CHECK(meet::oracle_reward(sort_task, "a", "a") == 1.0);  // single char
    CHECK(meet::oracle_reward(sort_task, "cab", "bac") == 0.5);
}

TEST_CASE("oracle reward for the upper task") {
    SyntheticTask upper;
    upper.type = SyntheticTask::Type::upper;
    CHECK(meet::oracle_reward(upper, "abc", "ABC") == 1.0);
    CHECK(meet::oracle_reward(upper, "abc", "AbC") == Catch::Approx(2.0 / 3.0));
    CHECK(meet::oracle_reward(upper, "abc", "AB") == 0.0);  // length mismatch
}

TEST_CASE("tie band: closed interval in sigmoid space") {
    CHECK(meet::compare({1.0, 1.0}) == Verdict::tie);  // sigma(0) = 0.5
    CHECK(meet::compare({0.5, 0.0}) == Verdict::win);   // sigma(0.5) ~ 0.6225
    CHECK(meet::compare({0.0, 1.0}) == Verdict::lose);  // sigma(-1) ~ 0.2689

    const double band = std::log(0.55 / 0.45);  // independent oracle for the edge
    CHECK(meet::compare({band, 0.0}) == Verdict::tie);
    CHECK(meet::compare({-band, 0.0}) == Verdict::tie);
    CHECK(meet::compare({band + 1e-9, 0.0}) == Verdict::win);
    CHECK(meet::compare({-band - 1e-9, 0.0}) == Verdict::lose);
}

TEST_CASE("compare is antisymmetric and translation invariant") {
    SeededRng rng(3, "cmp");
    for (int i = 0; i < 200; ++i) {
        const double r1 = rng.next_uniform();
        const double r2 = rng.next_uniform();
        const Verdict fwd = meet::compare({r1, r2});
        const Verdict rev = meet::compare({r2, r1});
        if (fwd == Verdict::win) REQUIRE(rev == Verdict::lose);
        if (fwd == Verdict::lose) REQUIRE(rev == Verdict::win);
        if (fwd == Verdict::tie) REQUIRE(rev == Verdict::tie);
        const double shift = 10.0 * (rng.next_uniform() - 0.5);
        REQUIRE(meet::compare({r1 + shift, r2 + shift}) == fwd);
    }
}

TEST_CASE("winrate arithmetic: 6 wins, 3 losses, 1 tie") {
    std::vector<Verdict> verdicts;
    for (int i = 0; i < 6; ++i) verdicts.push_back(Verdict::win);
    for (int i = 0; i < 3; ++i) verdicts.push_back(Verdict::lose);
    verdicts.push_back(Verdict::tie);
    const auto r = meet::winrate_from_verdicts(verdicts, "oracle:test", "a", "b");
    CHECK(r.win_pct == 60.0);
    CHECK(r.lose_pct == 30.0);
    CHECK(r.tie_pct == 10.0);
    CHECK(r.delta == 30.0);
    CHECK(r.n == 10);
    CHECK(std::abs(r.win_pct + r.lose_pct + r.tie_pct - 100.0) < 1e-9);
}

TEST_CASE("self-comparison is 100 percent tie") {
    SyntheticTask task;
    std::vector<Generation> outs;
    outs.push_back({"cab", "abc", "good", 0.0});
    outs.push_back({"dba", "abd", "good", 0.0});
    const auto r = meet::winrate(outs, outs, meet::make_oracle_rewarder(task));
    CHECK(r.tie_pct == 100.0);
    CHECK(r.delta == 0.0);
}

TEST_CASE("winrate rejects prompt mismatches naming the first one") {
    SyntheticTask task;
    std::vector<Generation> a{{"abc", "abc", "good", 0.0}};
    std::vector<Generation> b{{"abd", "abd", "good", 0.0}};
    try {
        meet::winrate(a, b, meet::make_oracle_rewarder(task));
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("index 0") != std::string::npos);
        CHECK(msg.find("abc") != std::string::npos);
        CHECK(msg.find("abd") != std::string::npos);
    }
}

TEST_CASE("percentages sum to 100 within 1e-9 on awkward counts") {
    SeededRng rng(17, "vr");
    for (std::size_t n : {3u, 7u, 11u, 13u, 37u}) {
        std::vector<Verdict> v;
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = rng.next_below(3);
            v.push_back(k == 0 ? Verdict::win : k == 1 ? Verdict::lose : Verdict::tie);
        }
        const auto r = meet::winrate_from_verdicts(v, "e", "a", "b");
        REQUIRE(std::abs(r.win_pct + r.lose_pct + r.tie_pct - 100.0) < 1e-9);
        REQUIRE(r.delta >= -100.0);
        REQUIRE(r.delta <= 100.0);
        REQUIRE(r.delta == r.win_pct - r.lose_pct);
    }
}

TEST_CASE("rouge-l on the worked example: cand 'a b c' vs ref 'a c'") {
    const auto s = meet::rouge_l("a b c", "a c");
    CHECK(s.precision == Catch::Approx(2.0 / 3.0));
    CHECK(s.recall == Catch::Approx(1.0));
    CHECK(s.f1 == Catch::Approx(0.8));
}

TEST_CASE("rouge-l identity and disjoint texts") {
    CHECK(meet::rouge_l("the quick fox", "the quick fox").f1 == Catch::Approx(1.0));
    CHECK(meet::rouge_l("aa bb", "cc dd").f1 == 0.0);
    const auto empty = meet::rouge_l("", "x");
    CHECK(empty.f1 == 0.0);
    CHECK(meet::rouge_l("   ", "").f1 == 0.0);  // empty after tokenization is all-zero, not an error
}

TEST_CASE("rouge tokenization lowercases and splits on whitespace") {
    CHECK(meet::rouge_l("A  B\tC", "a b c").f1 == Catch::Approx(1.0));
}

TEST_CASE("rouge-avg: mean of rouge-1/2/l F1 on the worked example") {
    CHECK(meet::rouge_avg("a b c", "a c") == Catch::Approx((0.8 + 0.0 + 0.8) / 3.0));
    CHECK(meet::rouge_avg("x y", "x y") == Catch::Approx(1.0));
    CHECK(meet::rouge_avg("x y", "p q") == 0.0);
}

TEST_CASE("rouge-l matches an independent memoized LCS on 1000 random pairs") {
    SeededRng rng(2025, "lcs");
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t la = rng.next_below(21);
        const std::size_t lb = rng.next_below(21);
        std::vector<int> a, b;
        for (std::size_t i = 0; i < la; ++i) a.push_back(static_cast<int>(rng.next_below(5)));
        for (std::size_t i = 0; i < lb; ++i) b.push_back(static_cast<int>(rng.next_below(5)));
        std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
        const std::size_t lcs = lcs_memo(a, b, 0, 0, memo);

        const auto got = meet::rouge_l(token_string(a), token_string(b));
        const double p = la ? static_cast<double>(lcs) / la : 0.0;
        const double r = lb ? static_cast<double>(lcs) / lb : 0.0;
        const double f1 = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
        REQUIRE(got.precision == p);
        REQUIRE(got.recall == r);
        REQUIRE(got.f1 == f1);
    }
}

TEST_CASE("rouge-l F1 is symmetric when lengths match") {
    SeededRng rng(31, "sym");
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t len = 1 + rng.next_below(10);
        std::vector<int> a, b;
        for (std::size_t i = 0; i < len; ++i) {
            a.push_back(static_cast<int>(rng.next_below(4)));
            b.push_back(static_cast<int>(rng.next_below(4)));
        }
        REQUIRE(meet::rouge_l(token_string(a), token_string(b)).f1 ==
                meet::rouge_l(token_string(b), token_string(a)).f1);
    }
}

TEST_CASE("two-order aggregation implements the full nine-entry table") {
    using V = Verdict;
    CHECK(meet::aggregate_two_orders(V::win, V::win) == V::win);
    CHECK(meet::aggregate_two_orders(V::win, V::tie) == V::win);
    CHECK(meet::aggregate_two_orders(V::tie, V::win) == V::win);
    CHECK(meet::aggregate_two_orders(V::lose, V::lose) == V::lose);
    CHECK(meet::aggregate_two_orders(V::lose, V::tie) == V::lose);
    CHECK(meet::aggregate_two_orders(V::tie, V::lose) == V::lose);
    CHECK(meet::aggregate_two_orders(V::tie, V::tie) == V::tie);
    CHECK(meet::aggregate_two_orders(V::win, V::lose) == V::tie);
    CHECK(meet::aggregate_two_orders(V::lose, V::win) == V::tie);
}

TEST_CASE("aggregation is symmetric under swapping the two orders") {
    for (Verdict a : {Verdict::win, Verdict::lose, Verdict::tie}) {
        for (Verdict b : {Verdict::win, Verdict::lose, Verdict::tie}) {
            REQUIRE(meet::aggregate_two_orders(a, b) == meet::aggregate_two_orders(b, a));
        }
    }
}

TEST_CASE("temperature sweep: self-tie at zero, one row per temperature") {
    meet::ModelConfig c;
    c.vocab_size = 260;
    c.context_length = 64;
    c.n_layers = 1;
    c.n_heads = 2;
    c.hidden_dim = 16;
    meet::ModelState s = meet::ModelState::init(c, SeededRng(1), 0.02);
    meet::Tokenizer tok;
    meet::ControlTokenSet set = meet::make_soft_prompt_set(2, s.param("tok_emb"), tok);

    std::vector<std::string> prompts = {"abc", "bca", "cab"};
    // Baseline = the model's own greedy outputs.
    std::vector<Generation> baseline;
    for (const auto& p : prompts) {
        SeededRng rng(9, "baseline");
        auto ids = meet::sample(s, meet::encode_prompt(tok, p), &set.good, 0.0, 8, rng);
        baseline.push_back({p, tok.decode(ids), "good", 0.0});
    }
    SyntheticTask task;
    const auto rows = meet::temperature_sweep(s, set.good, prompts, {0.0}, meet::make_oracle_rewarder(task),
                                              baseline, 9, 8, tok);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].temperature == 0.0);
    CHECK(rows[0].delta == 0.0);  // greedy outputs tie with themselves

    const auto grid = meet::temperature_sweep(s, set.good, prompts, {0.0, 0.25, 0.5, 0.75, 1.0},
                                              meet::make_oracle_rewarder(task), baseline, 9, 8, tok);
    REQUIRE(grid.size() == 5);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        REQUIRE(grid[i].temperature == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}[i]);
    }

    CHECK_THROWS_AS(meet::temperature_sweep(s, set.good, prompts, {}, meet::make_oracle_rewarder(task),
                                            baseline, 9, 8, tok),
                    std::invalid_argument);
    CHECK_THROWS_AS(meet::temperature_sweep(s, set.good, prompts, {-1.0}, meet::make_oracle_rewarder(task),
                                            baseline, 9, 8, tok),
                    std::invalid_argument);
}

TEST_CASE("generation dumps round-trip through JSONL") {
    std::vector<Generation> gens;
    gens.push_back({"p1", "r1", "good", 0.0});
    gens.push_back({"p2", "r2", "bad", 0.5});
    const std::string path =
        (std::filesystem::temp_directory_path() / "meet_eval_dump.jsonl").string();
    meet::write_generations_jsonl(path, gens);
    const auto loaded = meet::read_generations_jsonl(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].prompt == "p1");
    CHECK(loaded[1].adapter == "bad");
    CHECK(loaded[1].temperature == 0.5);
    std::filesystem::remove(path);
}

TEST_CASE("csv report row carries the spec columns") {
    meet::WinRateReport r;
    r.evaluator = "oracle:sort";
    r.candidate = "meet";
    r.baseline = "coh";
    r.n = 10;
    r.win_pct = 60;
    r.lose_pct = 30;
    r.tie_pct = 10;
    r.delta = 30;
    CHECK(meet::report_csv_header() == "evaluator,baseline,n,win_pct,lose_pct,tie_pct,delta");
    CHECK(meet::report_csv_row(r) == "oracle:sort,coh,10,60,30,10,30");
}
