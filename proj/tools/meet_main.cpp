// meet: train and evaluate controllable-preference models on synthetic
// preference tasks. Subcommands cover dataset generation, training runs,
// generation dumps, win-rate evaluation, the ablation matrix, and the
// temperature / capacity sweeps.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "meet/checkpoint.hpp"
#include "meet/config.hpp"
#include "meet/data.hpp"
#include "meet/eval.hpp"
#include "meet/judge.hpp"
#include "meet/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::string default_out_dir() {
    const char* env = std::getenv("MEET_OUT_DIR");
    return env && *env ? std::string(env) : std::string("out");
}

std::string file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return "missing";
    std::stringstream ss;
    ss << is.rdbuf();
    return meet::pipe_detail::hex64(meet::detail::fnv1a64(ss.str()));
}

bool use_color() { return ::isatty(::fileno(stdout)) != 0; }

std::string colored_delta(double delta) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%+.2f", delta);
    if (!use_color()) return buf;
    const char* color = delta > 0 ? "\x1b[32m" : delta < 0 ? "\x1b[31m" : "\x1b[0m";
    return std::string(color) + buf + "\x1b[0m";
}

void print_report_table(const std::vector<meet::WinRateReport>& reports) {
    std::printf("%-28s %-22s %6s %8s %8s %8s %10s\n", "candidate", "baseline", "n", "win%", "lose%", "tie%",
                "delta");
    for (const meet::WinRateReport& r : reports) {
        std::printf("%-28s %-22s %6zu %8.2f %8.2f %8.2f %10s\n", r.candidate.c_str(), r.baseline.c_str(), r.n,
                    r.win_pct, r.lose_pct, r.tie_pct, colored_delta(r.delta).c_str());
    }
}

void write_reports(const std::vector<meet::WinRateReport>& reports, const std::string& prefix,
                   const json& extra = json::object()) {
    json j;
    j["reports"] = json::array();
    for (const meet::WinRateReport& r : reports) j["reports"].push_back(meet::report_to_json(r));
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream js(prefix + ".json", std::ios::trunc);
    js << j.dump(2) << '\n';
    std::ofstream cs(prefix + ".csv", std::ios::trunc);
    cs << meet::report_csv_header() << '\n';
    for (const meet::WinRateReport& r : reports) cs << meet::report_csv_row(r) << '\n';
}

meet::Rewarder rewarder_from_name(const std::string& name) {
    return meet::make_oracle_rewarder(meet::SyntheticTask::from_name(name));
}

struct DumpMeta {
    std::string path;
};

void write_dump_with_meta(const std::string& path, const std::vector<meet::Generation>& gens,
                          const json& meta) {
    meet::write_generations_jsonl(path, gens);
    json m = meta;
    m["n"] = gens.size();
    m["dump_hash"] = file_hash(path);
    std::ofstream os(path + ".meta.json", std::ios::trunc);
    os << m.dump(2) << '\n';
}

json read_dump_meta(const std::string& dump_path) {
    std::ifstream is(dump_path + ".meta.json");
    if (!is) return json{{"path", dump_path}, {"hash", file_hash(dump_path)}};
    json j = json::parse(is, nullptr, false);
    if (j.is_discarded()) j = json::object();
    j["path"] = dump_path;
    j["hash"] = file_hash(dump_path);
    return j;
}

// Trains one variant and dumps greedy validation outputs for the adapter
// choice that variant generates with.
struct VariantOutput {
    meet::RunRecord record;
    std::vector<meet::Generation> good_dump;
    std::string dump_path;
};

VariantOutput train_and_dump(meet::RunConfig cfg, meet::RunKind kind, const std::string& out_dir,
                             double temperature) {
    cfg.kind = meet::to_string(kind);
    cfg.out_dir = out_dir;
    meet::RunSettings settings = cfg.make_settings();
    VariantOutput out;
    out.record = meet::run_variant(settings);
    const std::vector<std::string> prompts = meet::validation_prompts(out.record.dataset);
    const std::string choice = kind == meet::RunKind::dpo ? "none" : "good";
    out.good_dump = meet::generate_eval_dump(out.record.state, out.record.has_tokens ? &out.record.tokens : nullptr,
                                             prompts, choice, temperature, settings.seed, cfg.max_gen_len);
    out.dump_path = out_dir + "/dump_" + choice + ".jsonl";
    write_dump_with_meta(out.dump_path, out.good_dump,
                         json{{"run_kind", meet::to_string(kind)},
                              {"adapter", choice},
                              {"temperature", temperature},
                              {"seed", settings.seed},
                              {"config_hash", settings.config_hash},
                              {"checkpoint", out.record.checkpoint_path},
                              {"checkpoint_hash", file_hash(out.record.checkpoint_path)}});
    return out;
}

// Applies --set section.key=value overrides.
void apply_overrides(meet::RunConfig& cfg, const std::vector<std::string>& sets) {
    for (const std::string& s : sets) {
        const std::size_t eq = s.find('=');
        const std::size_t dot = s.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
            throw CLI::ValidationError("--set expects section.key=value, got '" + s + "'");
        }
        cfg.set(s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1));
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"controllable-preference alignment trainer and evaluator"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "run configuration file")->configurable(false);
    app.add_option("--set", overrides, "override a config value (section.key=value, repeatable)");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic preference dataset");
    gen->fallthrough();
    std::string gen_task = "sort", gen_kind = "pairwise", gen_out;
    std::uint64_t gen_seed = 1;
    int gen_n = 2000, gen_min = 3, gen_max = 8;
    std::string gen_alphabet = "abcdefghijklmnopqrstuvwxyz";
    gen->add_option("--task", gen_task, "sort | upper");
    gen->add_option("--n", gen_n, "number of examples");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--kind", gen_kind, "pairwise | pointwise");
    gen->add_option("--min-len", gen_min, "minimum prompt length");
    gen->add_option("--max-len", gen_max, "maximum prompt length");
    gen->add_option("--alphabet", gen_alphabet, "prompt alphabet");
    gen->add_option("--out", gen_out, "output directory");

    // train
    auto* train = app.add_subcommand("train", "run one training variant");
    train->fallthrough();
    std::string train_kind, train_task, train_out, train_adapter;
    std::optional<std::uint64_t> train_seed;
    train->add_option("--kind", train_kind, "meet | first_only | second_only | coh | dpo");
    train->add_option("--task", train_task, "sort | upper");
    train->add_option("--seed", train_seed, "run seed");
    train->add_option("--adapter", train_adapter, "lora | soft_prompt | handcrafted");
    train->add_option("--out", train_out, "output directory");

    // generate
    auto* genr = app.add_subcommand("generate", "dump generations from a checkpoint");
    genr->fallthrough();
    std::string g_ckpt, g_data, g_choice = "good", g_out = "dump.jsonl";
    double g_temp = 0.0;
    std::uint64_t g_seed = 1;
    int g_maxlen = meet::kDefaultMaxGenerate;
    genr->add_option("--checkpoint", g_ckpt, "model checkpoint")->required();
    genr->add_option("--data", g_data, "JSONL file supplying prompts")->required();
    genr->add_option("--adapter-choice", g_choice, "good | bad | level-k | none");
    genr->add_option("--temperature", g_temp, "sampling temperature");
    genr->add_option("--seed", g_seed, "sampling seed");
    genr->add_option("--max-len", g_maxlen, "max generated tokens");
    genr->add_option("--out", g_out, "output dump path");

    // eval
    auto* ev = app.add_subcommand("eval", "win-rate report for two dumps");
    ev->fallthrough();
    std::string e_a, e_b, e_rewarder, e_refs, e_out = "report", e_judge, e_template = "summary";
    int e_concurrency = 4;
    ev->add_option("--a", e_a, "candidate dump")->required();
    ev->add_option("--b", e_b, "baseline dump")->required();
    ev->add_option("--rewarder", e_rewarder, "sort | upper (reward oracle)");
    ev->add_option("--judge-endpoint", e_judge, "remote judge base URL");
    ev->add_option("--judge-template", e_template, "summary | dialogue");
    ev->add_option("--judge-concurrency", e_concurrency, "parallel judge requests");
    ev->add_option("--refs", e_refs, "pairwise JSONL with reference responses (adds Rouge)");
    ev->add_option("--out", e_out, "report path prefix");

    // ablate
    auto* ab = app.add_subcommand("ablate", "run all five variants and compare");
    ab->fallthrough();
    std::string ab_task, ab_out;
    std::optional<std::uint64_t> ab_seed;
    int ab_jobs = 1;
    ab->add_option("--task", ab_task, "sort | upper");
    ab->add_option("--seed", ab_seed, "run seed");
    ab->add_option("--jobs", ab_jobs, "parallel variant workers");
    ab->add_option("--out", ab_out, "output directory");

    // sweep-temp
    auto* st = app.add_subcommand("sweep-temp", "delta vs temperature for a checkpoint");
    st->fallthrough();
    std::string st_ckpt, st_baseline, st_data, st_rewarder = "sort", st_out = "sweep_temp.csv", st_temps;
    std::string st_choice = "good";
    std::uint64_t st_seed = 1;
    st->add_option("--checkpoint", st_ckpt, "trained checkpoint with control tokens")->required();
    st->add_option("--baseline-dump", st_baseline, "fixed baseline outputs (JSONL)")->required();
    st->add_option("--data", st_data, "JSONL file supplying prompts")->required();
    st->add_option("--temps", st_temps, "comma-separated temperatures");
    st->add_option("--rewarder", st_rewarder, "sort | upper");
    st->add_option("--adapter-choice", st_choice, "good | bad | level-k");
    st->add_option("--seed", st_seed, "sampling seed");
    st->add_option("--out", st_out, "output CSV");

    // sweep-capacity
    auto* sc = app.add_subcommand("sweep-capacity", "delta vs control-token capacity");
    sc->fallthrough();
    std::string sc_task, sc_adapter = "soft_prompt", sc_grid, sc_out;
    std::optional<std::uint64_t> sc_seed;
    bool sc_paper_grid = false;
    sc->add_option("--task", sc_task, "sort | upper");
    sc->add_option("--adapter", sc_adapter, "soft_prompt | lora");
    sc->add_option("--grid", sc_grid, "comma-separated capacities (prompt lengths or ranks)");
    sc->add_flag("--paper-grid", sc_paper_grid, "use the full-scale grid instead of the desk grid");
    sc->add_option("--seed", sc_seed, "run seed");
    sc->add_option("--out", sc_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        meet::RunConfig cfg;
        cfg.out_dir = default_out_dir();
        if (!config_path.empty()) cfg = meet::load_run_config(config_path, cfg);
        apply_overrides(cfg, overrides);

        if (gen->parsed()) {
            meet::SyntheticTask task = meet::SyntheticTask::from_name(gen_task);
            task.min_len = gen_min;
            task.max_len = gen_max;
            task.alphabet = gen_alphabet;
            const meet::DataKind kind = meet::data_kind_from_string(gen_kind);
            meet::Dataset ds = meet::gen_synthetic(task, static_cast<std::size_t>(gen_n), gen_seed, kind);
            const std::string dir = gen_out.empty() ? cfg.out_dir : gen_out;
            fs::create_directories(dir);
            meet::save_jsonl(ds.train, kind, dir + "/train.jsonl");
            meet::save_jsonl(ds.validation, kind, dir + "/validation.jsonl");
            std::ofstream ms(dir + "/manifest.json", std::ios::trunc);
            ms << meet::dataset_manifest(ds).dump(2) << '\n';
            std::printf("wrote %zu train / %zu validation examples to %s\n", ds.train.size(),
                        ds.validation.size(), dir.c_str());
            return kExitOk;
        }

        if (train->parsed()) {
            if (!train_kind.empty()) cfg.kind = train_kind;
            if (!train_task.empty()) cfg.task = train_task;
            if (!train_adapter.empty()) cfg.adapter_kind = train_adapter;
            if (train_seed) cfg.seed = *train_seed;
            if (!train_out.empty()) cfg.out_dir = train_out;
            meet::RunRecord rec = meet::run_variant(cfg.make_settings());
            std::printf("run %s seed %llu finished in %.1fs; checkpoint %s\n", meet::to_string(rec.kind).c_str(),
                        static_cast<unsigned long long>(rec.seed), rec.wall_seconds,
                        rec.checkpoint_path.c_str());
            if (!rec.trace.empty()) {
                std::printf("final batch loss %.6f (trace: %s)\n", rec.trace.back().loss, rec.trace_path.c_str());
            }
            return kExitOk;
        }

        if (genr->parsed()) {
            meet::Checkpoint ck = meet::load_checkpoint(g_ckpt);
            meet::Dataset prompts_ds = meet::load_jsonl(
                g_data, g_data.find("pointwise") != std::string::npos ? meet::DataKind::pointwise
                                                                      : meet::DataKind::pairwise,
                static_cast<std::size_t>(cfg.max_input_len));
            std::vector<std::string> prompts;
            for (const auto& ex : prompts_ds.train) prompts.push_back(ex.prompt);
            auto gens = meet::generate_eval_dump(ck.state, ck.tokens ? &*ck.tokens : nullptr, prompts, g_choice,
                                                 g_temp, g_seed, g_maxlen);
            write_dump_with_meta(g_out, gens,
                                 json{{"adapter", g_choice},
                                      {"temperature", g_temp},
                                      {"seed", g_seed},
                                      {"checkpoint", g_ckpt},
                                      {"checkpoint_hash", file_hash(g_ckpt)},
                                      {"data", g_data},
                                      {"data_hash", file_hash(g_data)}});
            std::printf("wrote %zu generations to %s\n", gens.size(), g_out.c_str());
            return kExitOk;
        }

        if (ev->parsed()) {
            if (e_judge.empty() && e_rewarder.empty()) {
                throw CLI::ValidationError("eval needs --rewarder or --judge-endpoint");
            }
            const auto a = meet::read_generations_jsonl(e_a);
            const auto b = meet::read_generations_jsonl(e_b);
            std::vector<meet::WinRateReport> reports;
            json extra;
            extra["inputs"] = {{"a", read_dump_meta(e_a)}, {"b", read_dump_meta(e_b)}};
            if (!e_judge.empty()) {
                meet::JudgeOutcome outcome = meet::judge_outputs(e_judge, a, b, e_template, e_concurrency);
                if (outcome.verdicts.empty()) throw std::runtime_error("eval: every example was unjudged");
                reports.push_back(meet::winrate_from_verdicts(outcome.verdicts, "judge:" + e_judge, e_a, e_b));
                extra["unjudged"] = outcome.unjudged;
            } else if (!e_rewarder.empty()) {
                reports.push_back(meet::winrate(a, b, rewarder_from_name(e_rewarder), e_a, e_b));
            } else {
                throw CLI::ValidationError("eval needs --rewarder or --judge-endpoint");
            }
            if (!e_refs.empty()) {
                meet::Dataset refs = meet::load_jsonl(e_refs, meet::DataKind::pairwise,
                                                      static_cast<std::size_t>(cfg.max_input_len));
                std::map<std::string, std::string> ref_by_prompt;
                for (const auto& ex : refs.train) ref_by_prompt[ex.prompt] = ex.chosen;
                auto mean_rouge = [&](const std::vector<meet::Generation>& gens, double& rl, double& ravg) {
                    double sl = 0.0, sa = 0.0;
                    std::size_t n = 0;
                    for (const auto& g : gens) {
                        auto it = ref_by_prompt.find(g.prompt);
                        if (it == ref_by_prompt.end()) continue;
                        sl += meet::rouge_l(g.response, it->second).f1;
                        sa += meet::rouge_avg(g.response, it->second);
                        ++n;
                    }
                    rl = n ? sl / static_cast<double>(n) : 0.0;
                    ravg = n ? sa / static_cast<double>(n) : 0.0;
                };
                double rl_a, ravg_a, rl_b, ravg_b;
                mean_rouge(a, rl_a, ravg_a);
                mean_rouge(b, rl_b, ravg_b);
                // rouge_avg = mean of Rouge-1/2/L F1; flagged as a convention
                // choice in the report itself.
                extra["rouge"] = {{"a", {{"rouge_l", rl_a}, {"rouge_avg", ravg_a}}},
                                  {"b", {{"rouge_l", rl_b}, {"rouge_avg", ravg_b}}},
                                  {"rouge_avg_definition", "mean of rouge-1, rouge-2, rouge-l F1"}};
                std::printf("rouge-l/avg  a: %.4f / %.4f   b: %.4f / %.4f\n", rl_a, ravg_a, rl_b, ravg_b);
            }
            print_report_table(reports);
            write_reports(reports, e_out, extra);
            return kExitOk;
        }

        if (ab->parsed()) {
            if (!ab_task.empty()) cfg.task = ab_task;
            if (ab_seed) cfg.seed = *ab_seed;
            if (!ab_out.empty()) cfg.out_dir = ab_out;
            const std::string base_dir = cfg.out_dir;
            fs::create_directories(base_dir);
            const std::vector<meet::RunKind> kinds = {meet::RunKind::meet, meet::RunKind::first_only,
                                                      meet::RunKind::second_only, meet::RunKind::coh,
                                                      meet::RunKind::dpo};
            std::vector<VariantOutput> outputs(kinds.size());
            std::atomic<std::size_t> next{0};
            auto worker = [&]() {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= kinds.size()) return;
                    outputs[i] = train_and_dump(cfg, kinds[i], base_dir + "/" + meet::to_string(kinds[i]), 0.0);
                }
            };
            const int jobs = std::max(1, std::min<int>(ab_jobs, static_cast<int>(kinds.size())));
            std::vector<std::thread> pool;
            for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
            for (auto& t : pool) t.join();

            const meet::Rewarder rewarder = rewarder_from_name(cfg.task);
            std::vector<meet::WinRateReport> reports;
            const auto& coh = outputs[3].good_dump;
            for (std::size_t i = 0; i < kinds.size(); ++i) {
                if (kinds[i] == meet::RunKind::coh) continue;
                reports.push_back(meet::winrate(outputs[i].good_dump, coh, rewarder,
                                                meet::to_string(kinds[i]), "coh"));
            }
            for (std::size_t i = 1; i < kinds.size(); ++i) {
                reports.push_back(meet::winrate(outputs[0].good_dump, outputs[i].good_dump, rewarder, "meet",
                                                meet::to_string(kinds[i])));
            }
            json extra;
            extra["config_hash"] = cfg.hash();
            extra["runs"] = json::array();
            for (std::size_t i = 0; i < kinds.size(); ++i) {
                extra["runs"].push_back({{"kind", meet::to_string(kinds[i])},
                                         {"manifest", outputs[i].record.manifest_path},
                                         {"checkpoint_hash", file_hash(outputs[i].record.checkpoint_path)},
                                         {"dump", outputs[i].dump_path}});
            }
            print_report_table(reports);
            write_reports(reports, base_dir + "/comparison", extra);
            return kExitOk;
        }

        if (st->parsed()) {
            meet::Checkpoint ck = meet::load_checkpoint(st_ckpt);
            if (!ck.tokens) throw std::runtime_error("sweep-temp: checkpoint has no control tokens");
            const auto baseline = meet::read_generations_jsonl(st_baseline);
            meet::Dataset prompts_ds = meet::load_jsonl(st_data, meet::DataKind::pairwise,
                                                        static_cast<std::size_t>(cfg.max_input_len));
            std::vector<std::string> prompts;
            for (const auto& ex : prompts_ds.train) prompts.push_back(ex.prompt);
            std::vector<double> temps;
            if (!st_temps.empty()) cfg.temperatures = st_temps;
            temps = cfg.temperature_grid();
            meet::ControlAdapter adapter = ck.tokens->by_choice(st_choice);
            const auto rows = meet::temperature_sweep(ck.state, adapter, prompts, temps,
                                                      rewarder_from_name(st_rewarder), baseline, st_seed,
                                                      cfg.max_gen_len);
            std::ofstream os(st_out, std::ios::trunc);
            os << "temperature,delta\n";
            os.precision(17);
            for (const auto& row : rows) os << row.temperature << ',' << row.delta << '\n';
            for (const auto& row : rows) std::printf("T=%.2f  delta %s\n", row.temperature,
                                                     colored_delta(row.delta).c_str());
            return kExitOk;
        }

        if (sc->parsed()) {
            if (!sc_task.empty()) cfg.task = sc_task;
            if (sc_seed) cfg.seed = *sc_seed;
            if (!sc_out.empty()) cfg.out_dir = sc_out;
            cfg.adapter_kind = sc_adapter;
            const meet::AdapterKind kind = meet::adapter_kind_from_string(sc_adapter);
            std::vector<int> grid;
            if (!sc_grid.empty()) {
                std::stringstream ss(sc_grid);
                std::string item;
                while (std::getline(ss, item, ',')) grid.push_back(std::stoi(item));
            } else if (sc_paper_grid) {
                grid = kind == meet::AdapterKind::lora ? std::vector<int>{1, 4, 64}
                                                       : std::vector<int>{1, 20, 50, 100};
            } else {
                grid = {1, 8, 32};  // desk-scale default
            }
            const std::string base_dir = cfg.out_dir;
            fs::create_directories(base_dir);

            VariantOutput coh = train_and_dump(cfg, meet::RunKind::coh, base_dir + "/coh", 0.0);
            const meet::Rewarder rewarder = rewarder_from_name(cfg.task);

            std::ofstream os(base_dir + "/capacity.csv", std::ios::trunc);
            os << "adapter,capacity,delta\n";
            std::vector<meet::WinRateReport> reports;
            for (int cap : grid) {
                meet::RunConfig run_cfg = cfg;
                if (kind == meet::AdapterKind::lora) run_cfg.lora_rank = cap;
                else run_cfg.prompt_length = cap;
                VariantOutput v = train_and_dump(run_cfg, meet::RunKind::meet,
                                                 base_dir + "/" + sc_adapter + "_" + std::to_string(cap), 0.0);
                meet::WinRateReport r = meet::winrate(v.good_dump, coh.good_dump, rewarder,
                                                      sc_adapter + ":" + std::to_string(cap), "coh");
                reports.push_back(r);
                os.precision(17);
                os << sc_adapter << ',' << cap << ',' << r.delta << '\n';
            }
            print_report_table(reports);
            write_reports(reports, base_dir + "/capacity_report", json{{"config_hash", cfg.hash()}});
            return kExitOk;
        }

        return kExitUsage;
    } catch (const CLI::ValidationError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
