#pragma once

// Declarative run configuration: INI-style sections with key = value lines,
// '#' comments, every field defaulted, unknown sections/keys rejected so a
// typo never silently falls back to a default.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "meet/pipeline.hpp"

namespace meet {

struct RunConfig {
    // [model]
    int vocab_size = 260;
    int context_length = 256;
    int n_layers = 2;
    int n_heads = 4;
    int hidden_dim = 64;
    double init_std = 0.02;

    // [adapter]
    std::string adapter_kind = "lora";
    int prompt_length = 8;
    int lora_rank = 4;
    double lora_alpha = 0.0;  // 0 = same as rank
    int quantize_levels = 4;

    // [task]
    std::string task = "sort";
    int n_examples = 2000;
    int min_len = 3;
    int max_len = 8;
    std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
    std::string data_kind = "pairwise";
    std::string dataset = "";     // path to train JSONL; empty = synthesize
    std::string validation = "";  // path to validation JSONL
    int max_input_len = 256;

    // [train]
    std::string kind = "meet";
    std::uint64_t seed = 1;
    int batch_size = 16;
    double stage1_lr = 1e-3;
    double stage2_lr = 2e-5;
    int stage1_epochs = 5;
    int stage2_epochs = 5;
    double dpo_beta = 0.1;
    double grad_clip = 0.0;

    // [eval]
    std::string temperatures = "0,0.25,0.5,0.75,1.0";
    int max_gen_len = 128;
    std::string judge_endpoint = "";
    std::string judge_template = "summary";
    int judge_concurrency = 4;

    // [out]
    std::string out_dir = "out";

    void set(const std::string& section, const std::string& key, const std::string& value);

    nlohmann::json canonical() const {
        nlohmann::json j;
        j["model"] = {{"vocab_size", vocab_size}, {"context_length", context_length}, {"n_layers", n_layers},
                      {"n_heads", n_heads},       {"hidden_dim", hidden_dim},         {"init_std", init_std}};
        j["adapter"] = {{"kind", adapter_kind},
                        {"prompt_length", prompt_length},
                        {"rank", lora_rank},
                        {"alpha", lora_alpha},
                        {"levels", quantize_levels}};
        j["task"] = {{"name", task},       {"n", n_examples},           {"min_len", min_len},
                     {"max_len", max_len}, {"alphabet", alphabet},      {"kind", data_kind},
                     {"dataset", dataset}, {"validation", validation},  {"max_input_len", max_input_len}};
        j["train"] = {{"kind", kind},           {"seed", seed},
                      {"batch_size", batch_size}, {"stage1_lr", stage1_lr},
                      {"stage2_lr", stage2_lr},   {"stage1_epochs", stage1_epochs},
                      {"stage2_epochs", stage2_epochs}, {"dpo_beta", dpo_beta},
                      {"grad_clip", grad_clip}};
        j["eval"] = {{"temperatures", temperatures},
                     {"max_gen_len", max_gen_len},
                     {"judge_endpoint", judge_endpoint},
                     {"judge_template", judge_template},
                     {"judge_concurrency", judge_concurrency}};
        return j;
    }

    std::string hash() const { return pipe_detail::hex64(detail::fnv1a64(canonical().dump())); }

    SyntheticTask make_task() const {
        SyntheticTask t = SyntheticTask::from_name(task);
        t.min_len = min_len;
        t.max_len = max_len;
        t.alphabet = alphabet;
        t.validate();
        return t;
    }

    RunSettings make_settings() const {
        RunSettings s;
        s.model.vocab_size = vocab_size;
        s.model.context_length = context_length;
        s.model.n_layers = n_layers;
        s.model.n_heads = n_heads;
        s.model.hidden_dim = hidden_dim;
        s.init_std = init_std;
        s.adapter_kind = adapter_kind_from_string(adapter_kind);
        s.prompt_length = static_cast<std::size_t>(prompt_length);
        s.lora_rank = lora_rank;
        s.lora_alpha = lora_alpha;
        s.quantize_levels = quantize_levels;
        s.task = make_task();
        s.n_examples = static_cast<std::size_t>(n_examples);
        s.data_kind = data_kind_from_string(data_kind);
        s.dataset_path = dataset;
        s.validation_path = validation;
        s.max_input_len = static_cast<std::size_t>(max_input_len);
        s.kind = run_kind_from_string(kind);
        s.seed = seed;
        s.batch_size = batch_size;
        s.stage1_lr = stage1_lr;
        s.stage2_lr = stage2_lr;
        s.stage1_epochs = stage1_epochs;
        s.stage2_epochs = stage2_epochs;
        s.dpo_beta = dpo_beta;
        s.grad_clip = grad_clip;
        s.out_dir = out_dir;
        s.config_hash = hash();
        return s;
    }

    std::vector<double> temperature_grid() const {
        std::vector<double> temps;
        std::stringstream ss(temperatures);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) temps.push_back(std::stod(item));
        }
        return temps;
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

inline int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

} // namespace config_detail

inline void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    namespace cd = config_detail;
    const std::string full = section + "." + key;
    if (section == "model") {
        if (key == "vocab_size") vocab_size = cd::to_int(full, value);
        else if (key == "context_length") context_length = cd::to_int(full, value);
        else if (key == "n_layers") n_layers = cd::to_int(full, value);
        else if (key == "n_heads") n_heads = cd::to_int(full, value);
        else if (key == "hidden_dim") hidden_dim = cd::to_int(full, value);
        else if (key == "init_std") init_std = cd::to_double(full, value);
        else throw std::invalid_argument("config: unknown key '" + full + "'");
    } else if (section == "adapter") {
        if (key == "kind") adapter_kind = value;
        else if (key == "prompt_length") prompt_length = cd::to_int(full, value);
        else if (key == "rank") lora_rank = cd::to_int(full, value);
        else if (key == "alpha") lora_alpha = cd::to_double(full, value);
        else if (key == "levels") quantize_levels = cd::to_int(full, value);
        else throw std::invalid_argument("config: unknown key '" + full + "'");
    } else if (section == "task") {
        if (key == "name") task = value;
        else if (key == "n") n_examples = cd::to_int(full, value);
        else if (key == "min_len") min_len = cd::to_int(full, value);
        else if (key == "max_len") max_len = cd::to_int(full, value);
        else if (key == "alphabet") alphabet = value;
        else if (key == "kind") data_kind = value;
        else if (key == "dataset") dataset = value;
        else if (key == "validation") validation = value;
        else if (key == "max_input_len") max_input_len = cd::to_int(full, value);
        else throw std::invalid_argument("config: unknown key '" + full + "'");
    } else if (section == "train") {
        if (key == "kind") kind = value;
        else if (key == "seed") seed = cd::to_u64(full, value);
        else if (key == "batch_size") batch_size = cd::to_int(full, value);
        else if (key == "stage1_lr") stage1_lr = cd::to_double(full, value);
        else if (key == "stage2_lr") stage2_lr = cd::to_double(full, value);
        else if (key == "stage1_epochs") stage1_epochs = cd::to_int(full, value);
        else if (key == "stage2_epochs") stage2_epochs = cd::to_int(full, value);
        else if (key == "dpo_beta") dpo_beta = cd::to_double(full, value);
        else if (key == "grad_clip") grad_clip = cd::to_double(full, value);
        else throw std::invalid_argument("config: unknown key '" + full + "'");
    } else if (section == "eval") {
        if (key == "temperatures") temperatures = value;
        else if (key == "max_gen_len") max_gen_len = cd::to_int(full, value);
        else if (key == "judge_endpoint") judge_endpoint = value;
        else if (key == "judge_template") judge_template = value;
        else if (key == "judge_concurrency") judge_concurrency = cd::to_int(full, value);
        else throw std::invalid_argument("config: unknown key '" + full + "'");
    } else if (section == "out") {
        if (key == "dir") out_dir = value;
        else throw std::invalid_argument("config: unknown key '" + full + "'");
    } else {
        throw std::invalid_argument("config: unknown section '" + section + "'");
    }
}

inline RunConfig parse_run_config_text(const std::string& text, RunConfig base = RunConfig()) {
    namespace cd = config_detail;
    std::istringstream is(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = cd::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw std::invalid_argument("config: malformed section header at line " + std::to_string(line_no));
            }
            section = cd::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config: expected 'key = value' at line " + std::to_string(line_no));
        }
        const std::string key = cd::trim(line.substr(0, eq));
        const std::string value = cd::trim(line.substr(eq + 1));
        if (section.empty()) {
            throw std::invalid_argument("config: key '" + key + "' before any [section] at line " +
                                        std::to_string(line_no));
        }
        base.set(section, key, value);
    }
    return base;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = RunConfig()) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_run_config_text(ss.str(), std::move(base));
}

} // namespace meet
