#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "meet/data.hpp"
#include "meet/tokenizer.hpp"

using meet::DataKind;
using meet::Dataset;
using meet::SyntheticTask;

namespace fs = std::filesystem;

namespace {

std::string temp_file(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    os << content;
}

} // namespace

TEST_CASE("sort task: chosen is the sorted permutation, rejected is an unsorted one") {
    SyntheticTask task;  // sort, lengths 3..8
    Dataset ds = meet::gen_synthetic(task, 50, 7);
    for (const auto& ex : ds.train) {
        std::string sorted = ex.prompt;
        std::sort(sorted.begin(), sorted.end());
        REQUIRE(ex.chosen == sorted);
        std::string rej_sorted = ex.rejected;
        std::sort(rej_sorted.begin(), rej_sorted.end());
        REQUIRE(rej_sorted == sorted);  // same multiset
        REQUIRE(ex.rejected != ex.chosen);
    }
}

TEST_CASE("same (task, n, seed) twice gives identical datasets") {
    SyntheticTask task;
    Dataset a = meet::gen_synthetic(task, 200, 42);
    Dataset b = meet::gen_synthetic(task, 200, 42);
    REQUIRE(a.train.size() == b.train.size());
    REQUIRE(a.validation.size() == b.validation.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        REQUIRE(a.train[i].prompt == b.train[i].prompt);
        REQUIRE(a.train[i].chosen == b.train[i].chosen);
        REQUIRE(a.train[i].rejected == b.train[i].rejected);
    }
}

TEST_CASE("2000 sorted examples all satisfy the reward invariants") {
    SyntheticTask task;
    Dataset ds = meet::gen_synthetic(task, 2000, 1);
    REQUIRE(ds.size() == 2000);
    REQUIRE(ds.validation.size() == 200);  // 90/10 split
    auto check = [&](const meet::PreferenceExample& ex) {
        REQUIRE(meet::task_reward(task, ex.prompt, ex.chosen) == 1.0);
        REQUIRE(meet::task_reward(task, ex.prompt, ex.rejected) < 1.0);
    };
    for (const auto& ex : ds.train) check(ex);
    for (const auto& ex : ds.validation) check(ex);
}

TEST_CASE("upper task rewards: preferred at 1.0, rejected strictly below") {
    SyntheticTask task;
    task.type = SyntheticTask::Type::upper;
    Dataset ds = meet::gen_synthetic(task, 300, 5);
    for (const auto& ex : ds.train) {
        REQUIRE(meet::task_reward(task, ex.prompt, ex.chosen) == 1.0);
        REQUIRE(meet::task_reward(task, ex.prompt, ex.rejected) < 1.0);
        REQUIRE(meet::task_reward(task, ex.prompt, ex.rejected) >= 0.0);
    }
}

TEST_CASE("splits never share a prompt") {
    SyntheticTask task;
    Dataset ds = meet::gen_synthetic(task, 500, 9);
    std::set<std::string> train_prompts;
    for (const auto& ex : ds.train) train_prompts.insert(ex.prompt);
    for (const auto& ex : ds.validation) REQUIRE(train_prompts.count(ex.prompt) == 0);
}

TEST_CASE("pointwise generation attaches the oracle score") {
    SyntheticTask task;
    Dataset ds = meet::gen_synthetic(task, 120, 3, DataKind::pointwise);
    bool saw_perfect = false, saw_imperfect = false;
    for (const auto& ex : ds.train) {
        REQUIRE(ex.score == meet::task_reward(task, ex.prompt, ex.response));
        if (ex.score == 1.0) saw_perfect = true;
        if (ex.score < 1.0) saw_imperfect = true;
    }
    CHECK(saw_perfect);
    CHECK(saw_imperfect);
}

TEST_CASE("degenerate length ranges and zero n are rejected") {
    SyntheticTask task;
    task.min_len = 5;
    task.max_len = 4;
    CHECK_THROWS_AS(meet::gen_synthetic(task, 10, 1), std::invalid_argument);
    SyntheticTask ok;
    CHECK_THROWS_AS(meet::gen_synthetic(ok, 0, 1), std::invalid_argument);
}

TEST_CASE("load_jsonl parses the pairwise schema") {
    const std::string path = temp_file("meet_data_ok.jsonl");
    write_file(path, R"({"prompt":"p","chosen":"a","rejected":"b"})" "\n");
    Dataset ds = meet::load_jsonl(path, DataKind::pairwise);
    REQUIRE(ds.train.size() == 1);
    CHECK(ds.train[0].prompt == "p");
    CHECK(ds.train[0].chosen == "a");
    CHECK(ds.train[0].rejected == "b");
    fs::remove(path);
}

TEST_CASE("schema violations are rejected with the line number") {
    const std::string path = temp_file("meet_data_bad.jsonl");
    write_file(path, R"({"prompt":"p","chosen":"a"})" "\n");
    try {
        meet::load_jsonl(path, DataKind::pairwise);
        FAIL("expected throw");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 1") != std::string::npos);
        CHECK(msg.find("rejected") != std::string::npos);
    }

    write_file(path, R"({"prompt":"p","chosen":"a","rejected":"b"})" "\n" R"(not json)" "\n");
    try {
        meet::load_jsonl(path, DataKind::pairwise);
        FAIL("expected throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    fs::remove(path);
}

TEST_CASE("over-length examples are dropped with a count") {
    const std::string path = temp_file("meet_data_long.jsonl");
    std::ostringstream os;
    const std::string long_text(300, 'x');
    for (int i = 0; i < 8; ++i) {
        os << R"({"prompt":"p)" << i << R"(","chosen":"a","rejected":"b"})" << "\n";
    }
    os << R"({"prompt":")" << long_text << R"(","chosen":"a","rejected":"b"})" << "\n";
    os << R"({"prompt":"q","chosen":")" << long_text << R"(","rejected":"b"})" << "\n";
    write_file(path, os.str());
    Dataset ds = meet::load_jsonl(path, DataKind::pairwise, 256);
    CHECK(ds.train.size() == 8);
    CHECK(ds.dropped == 2);
    fs::remove(path);
}

TEST_CASE("duplicate triples are deduplicated with a count") {
    const std::string path = temp_file("meet_data_dup.jsonl");
    write_file(path,
               R"({"prompt":"p","chosen":"a","rejected":"b"})" "\n"
               R"({"prompt":"p","chosen":"a","rejected":"b"})" "\n"
               R"({"prompt":"p","chosen":"a","rejected":"c"})" "\n");
    Dataset ds = meet::load_jsonl(path, DataKind::pairwise);
    CHECK(ds.train.size() == 2);
    CHECK(ds.deduped == 1);
    fs::remove(path);
}

TEST_CASE("empty files and empty fields are rejected") {
    const std::string path = temp_file("meet_data_empty.jsonl");
    write_file(path, "\n\n");
    CHECK_THROWS_AS(meet::load_jsonl(path, DataKind::pairwise), std::runtime_error);
    write_file(path, R"({"prompt":"","chosen":"a","rejected":"b"})" "\n");
    CHECK_THROWS_AS(meet::load_jsonl(path, DataKind::pairwise), std::runtime_error);
    write_file(path, R"({"prompt":"p","chosen":"a","rejected":"a"})" "\n");
    CHECK_THROWS_AS(meet::load_jsonl(path, DataKind::pairwise), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("pointwise schema: response and finite numeric score") {
    const std::string path = temp_file("meet_data_pw.jsonl");
    write_file(path, R"({"prompt":"p","response":"r","score":0.75})" "\n");
    Dataset ds = meet::load_jsonl(path, DataKind::pointwise);
    REQUIRE(ds.train.size() == 1);
    CHECK(ds.train[0].score == 0.75);

    write_file(path, R"({"prompt":"p","response":"r","score":"high"})" "\n");
    CHECK_THROWS_AS(meet::load_jsonl(path, DataKind::pointwise), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("ingestion round-trips text byte-exactly") {
    SyntheticTask task;
    Dataset ds = meet::gen_synthetic(task, 60, 11);
    const std::string path = temp_file("meet_data_rt.jsonl");
    meet::save_jsonl(ds.train, DataKind::pairwise, path);
    Dataset loaded = meet::load_jsonl(path, DataKind::pairwise);
    REQUIRE(loaded.train.size() == ds.train.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        REQUIRE(loaded.train[i].prompt == ds.train[i].prompt);
        REQUIRE(loaded.train[i].chosen == ds.train[i].chosen);
        REQUIRE(loaded.train[i].rejected == ds.train[i].rejected);
    }
    // Multibyte UTF-8 survives too.
    meet::PreferenceExample utf8;
    utf8.prompt = "caf\xC3\xA9 \xE2\x9C\x93";
    utf8.chosen = "\xC3\xBC";
    utf8.rejected = "x";
    meet::save_jsonl({utf8}, DataKind::pairwise, path);
    Dataset loaded2 = meet::load_jsonl(path, DataKind::pairwise);
    REQUIRE(loaded2.train[0].prompt == utf8.prompt);
    REQUIRE(loaded2.train[0].chosen == utf8.chosen);
    fs::remove(path);
}

TEST_CASE("dataset manifest records counts, seed, task, and drop stats") {
    SyntheticTask task;
    Dataset ds = meet::gen_synthetic(task, 100, 13);
    nlohmann::json m = meet::dataset_manifest(ds);
    CHECK(m["kind"] == "pairwise");
    CHECK(m["counts"]["train"] == 90);
    CHECK(m["counts"]["validation"] == 10);
    CHECK(m["seed"] == 13);
    CHECK(m["task"] == "sort");
    CHECK(m["dropped"] == 0);
    CHECK(m["deduped"] == 0);
}
