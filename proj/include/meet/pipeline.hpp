#pragma once

// Training orchestration: the two-step schedule, its ablation variants, CoH
// and DPO baseline runs, the Adam optimizer, and checkpoint/manifest output.
// Every run is a pure function of (config, seed); optimizer moments reset at
// stage boundaries.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "meet/checkpoint.hpp"
#include "meet/data.hpp"
#include "meet/eval.hpp"
#include "meet/model.hpp"
#include "meet/objectives.hpp"

namespace meet {

enum class Objective { pet, cg, dpo };

inline std::string to_string(Objective o) {
    switch (o) {
        case Objective::pet: return "pet";
        case Objective::cg: return "cg";
        case Objective::dpo: return "dpo";
    }
    return "?";
}

enum class RunKind { meet, first_only, second_only, coh, dpo };

inline std::string to_string(RunKind k) {
    switch (k) {
        case RunKind::meet: return "meet";
        case RunKind::first_only: return "first_only";
        case RunKind::second_only: return "second_only";
        case RunKind::coh: return "coh";
        case RunKind::dpo: return "dpo";
    }
    return "?";
}

inline RunKind run_kind_from_string(const std::string& s) {
    if (s == "meet") return RunKind::meet;
    if (s == "first_only") return RunKind::first_only;
    if (s == "second_only") return RunKind::second_only;
    if (s == "coh") return RunKind::coh;
    if (s == "dpo") return RunKind::dpo;
    throw std::invalid_argument("unknown run kind: " + s);
}

struct StagePlan {
    std::string name;  // "pet", "cg", "dpo", "warmstart"
    Objective objective = Objective::cg;
    TrainableMask mask;
    double learning_rate = 0.0;
    int epochs = 1;
    int batch_size = 16;
    double grad_clip = 0.0;  // 0 disables

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("stage plan: learning_rate must be > 0");
        if (epochs < 1) throw std::invalid_argument("stage plan: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("stage plan: batch_size must be >= 1");
        if (objective == Objective::pet && !mask.adapter_only()) {
            throw std::invalid_argument("stage plan: pet stage mask must cover adapters only");
        }
        if (mask.names.empty()) throw std::invalid_argument("stage plan: empty trainable mask");
    }
};

struct TraceRow {
    std::string stage;
    int epoch = 0;
    int batch = 0;
    double loss = 0.0;
};

// ---- optimizer -----------------------------------------------------------------

class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::map<std::string, Tensor*>& params, const GradMap& grads, const TrainableMask& mask,
              double grad_clip = 0.0) {
        ++t_;
        double clip_scale = 1.0;
        if (grad_clip > 0.0) {
            double sq = 0.0;
            for (const std::string& name : mask.names) {
                const Tensor& g = grads.at(name);
                for (std::size_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
            }
            const double norm = std::sqrt(sq);
            if (norm > grad_clip) clip_scale = grad_clip / norm;
        }
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const std::string& name : mask.names) {
            Tensor& p = *params.at(name);
            const Tensor& g = grads.at(name);
            auto mit = m_.find(name);
            if (mit == m_.end()) {
                mit = m_.emplace(name, Tensor(p.shape())).first;
                v_.emplace(name, Tensor(p.shape()));
            }
            Tensor& m = mit->second;
            Tensor& v = v_.at(name);
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double gi = g[i] * clip_scale;
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    long steps_taken() const { return t_; }
    bool has_moments() const { return !m_.empty(); }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

inline std::map<std::string, Tensor*> collect_param_refs(ModelState& state, ControlTokenSet& tokens) {
    std::map<std::string, Tensor*> refs;
    for (Param& p : state.params_mut()) refs[p.name] = &p.tensor;
    tokens.for_each_param([&](const std::string& name, Tensor& t) { refs[name] = &t; });
    return refs;
}

// ---- single-stage training -----------------------------------------------------

// Runs one stage over the dataset: per-epoch shuffles drawn from the given
// rng, Adam on masked parameters only (fresh moments for the stage), one
// trace row per batch. Non-finite losses abort with the batch index.
inline std::vector<TraceRow> optimize(ModelState& state, ControlTokenSet& tokens, const StagePlan& plan,
                                      const std::vector<PreferenceExample>& examples, DataKind kind,
                                      SeededRng rng, const DpoConfig* dpo = nullptr,
                                      const Tokenizer& tok = Tokenizer()) {
    plan.validate();
    if (examples.empty()) throw std::invalid_argument("optimize: empty dataset");
    if (plan.objective == Objective::dpo) {
        if (dpo == nullptr || dpo->reference == nullptr) {
            throw std::invalid_argument("optimize: dpo stage without reference state");
        }
        if (!(dpo->beta > 0.0)) throw std::invalid_argument("optimize: dpo beta must be > 0");
        if (kind != DataKind::pairwise) throw std::invalid_argument("optimize: dpo requires pairwise data");
    }

    std::map<std::string, Tensor*> refs = collect_param_refs(state, tokens);
    AdamOptimizer opt(plan.learning_rate);
    std::vector<TraceRow> trace;

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
        SeededRng shuffle_rng = rng.stream("epoch").stream(static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);
        const std::size_t n_batches = (order.size() + plan.batch_size - 1) / plan.batch_size;
        for (std::size_t b = 0; b < n_batches; ++b) {
            Batch batch;
            batch.kind = kind;
            const std::size_t lo = b * plan.batch_size;
            const std::size_t hi = std::min(order.size(), lo + plan.batch_size);
            for (std::size_t i = lo; i < hi; ++i) batch.items.push_back(examples[order[i]]);

            LossResult result;
            try {
                switch (plan.objective) {
                    case Objective::pet:
                        result = loss_pet_grad(state, tokens, batch, plan.mask, tok);
                        break;
                    case Objective::cg:
                        result = loss_cg_grad(state, tokens, batch, plan.mask, tok);
                        break;
                    case Objective::dpo:
                        result = loss_dpo_grad(state, *dpo, batch, plan.mask, tok);
                        break;
                }
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("optimize: aborted at stage " + plan.name + " epoch " +
                                         std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
            }
            if (!std::isfinite(result.value)) {
                throw std::runtime_error("optimize: non-finite loss at stage " + plan.name + " epoch " +
                                         std::to_string(epoch) + " batch " + std::to_string(b));
            }
            opt.step(refs, result.grads, plan.mask, plan.grad_clip);
            trace.push_back(TraceRow{plan.name, epoch, static_cast<int>(b), result.value});
        }
    }
    return trace;
}

// Supervised warm start for the DPO baseline: one pass of NLL on the
// preferred responses, no control tokens.
inline std::vector<TraceRow> dpo_warm_start(ModelState& state, const std::vector<PreferenceExample>& examples,
                                            double lr, int batch_size, SeededRng rng,
                                            const Tokenizer& tok = Tokenizer()) {
    if (examples.empty()) throw std::invalid_argument("warm start: empty dataset");
    TrainableMask mask;
    for (const Param& p : state.params()) mask.names.insert(p.name);
    std::map<std::string, Tensor*> refs;
    for (Param& p : state.params_mut()) refs[p.name] = &p.tensor;
    AdamOptimizer opt(lr);
    std::vector<TraceRow> trace;

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SeededRng shuffle_rng = rng.stream("warmstart");
    shuffle_rng.shuffle(order);

    const std::size_t n_batches = (order.size() + batch_size - 1) / batch_size;
    for (std::size_t b = 0; b < n_batches; ++b) {
        const std::size_t lo = b * static_cast<std::size_t>(batch_size);
        const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(batch_size));
        Tape tape;
        StateBinding sb = bind_state(tape, state, mask.predicate());
        AdapterBinding none;
        Tape::NodeId acc = -1;
        for (std::size_t i = lo; i < hi; ++i) {
            const PreferenceExample& ex = examples[order[i]];
            Tape::NodeId term = lm_loss_node(tape, sb, none, encode_prompt(tok, ex.prompt),
                                             encode_response(tok, ex.chosen));
            acc = acc < 0 ? term : tape.add(acc, term);
        }
        Tape::NodeId loss = tape.scale(acc, 1.0 / static_cast<double>(hi - lo));
        const double value = tape.value(loss).item();
        if (!std::isfinite(value)) {
            throw std::runtime_error("warm start: non-finite loss at batch " + std::to_string(b));
        }
        GradMap grads = tape.backward(loss);
        for (const Param& p : state.params()) {
            if (!grads.count(p.name)) grads.emplace(p.name, Tensor(p.tensor.shape()));
        }
        opt.step(refs, grads, mask, 0.0);
        trace.push_back(TraceRow{"warmstart", 0, static_cast<int>(b), value});
    }
    return trace;
}

// ---- full runs -------------------------------------------------------------------

struct RunSettings {
    ModelConfig model;
    double init_std = 0.02;

    AdapterKind adapter_kind = AdapterKind::lora;
    std::size_t prompt_length = 8;
    int lora_rank = 4;
    double lora_alpha = 0.0;  // 0 means "equal to rank"
    int quantize_levels = 4;  // pointwise only

    SyntheticTask task;
    std::size_t n_examples = 2000;
    DataKind data_kind = DataKind::pairwise;
    std::string dataset_path;     // non-empty: load instead of generating
    std::string validation_path;  // optional with dataset_path
    std::size_t max_input_len = 256;

    RunKind kind = RunKind::meet;
    std::uint64_t seed = 1;
    int batch_size = 16;
    double stage1_lr = 1e-3;
    double stage2_lr = 2e-5;
    int stage1_epochs = 5;
    int stage2_epochs = 5;
    double dpo_beta = 0.1;
    double grad_clip = 0.0;

    std::string out_dir = "out";
    std::string config_hash;  // echoed into manifests when set
};

struct RunRecord {
    RunKind kind = RunKind::meet;
    std::uint64_t seed = 0;
    ModelState state;
    ControlTokenSet tokens{ControlAdapter("good", HandcraftedPrefix{}), ControlAdapter("bad", HandcraftedPrefix{}),
                           {}};
    bool has_tokens = false;
    Dataset dataset;
    std::vector<TraceRow> trace;
    std::vector<std::string> stage_names;
    std::string checkpoint_path;
    std::string stage1_checkpoint_path;  // two-stage runs only
    std::string manifest_path;
    std::string trace_path;
    double wall_seconds = 0.0;
    std::string config_hash;
};

namespace pipe_detail {

inline ControlTokenSet build_token_set(const RunSettings& s, const ModelState& state, const Tokenizer& tok) {
    if (s.kind == RunKind::coh) return make_handcrafted_set("synthetic", tok);
    if (s.kind == RunKind::dpo) return make_handcrafted_set("synthetic", tok);  // placeholder, unused
    switch (s.adapter_kind) {
        case AdapterKind::handcrafted:
            return make_handcrafted_set("synthetic", tok);
        case AdapterKind::soft_prompt:
            if (s.data_kind == DataKind::pointwise) {
                return make_quantized_soft_set(s.quantize_levels, s.prompt_length, state.param("tok_emb"), tok);
            }
            return make_soft_prompt_set(s.prompt_length, state.param("tok_emb"), tok);
        case AdapterKind::lora: {
            const double alpha = s.lora_alpha > 0.0 ? s.lora_alpha : static_cast<double>(s.lora_rank);
            return make_lora_set(s.lora_rank, alpha, lora_targets(state), SeededRng(s.seed, "adapters"));
        }
    }
    throw std::invalid_argument("run: unknown adapter kind");
}

inline std::uint64_t json_hash(const nlohmann::json& j) { return detail::fnv1a64(j.dump()); }

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

} // namespace pipe_detail

// Executes the stage list for the run kind, persists checkpoint + manifest +
// loss trace under out_dir, and returns the full record. Deterministic given
// (settings, seed).
inline RunRecord run_variant(const RunSettings& settings, const Tokenizer& tok = Tokenizer()) {
    const auto t_start = std::chrono::steady_clock::now();

    RunSettings s = settings;
    s.model.validate();
    if (s.kind == RunKind::dpo && s.data_kind != DataKind::pairwise) {
        throw std::invalid_argument("run: dpo requires pairwise data");
    }
    if ((s.kind == RunKind::meet || s.kind == RunKind::first_only) && s.adapter_kind == AdapterKind::handcrafted) {
        throw std::invalid_argument("run: " + to_string(s.kind) +
                                    " needs trainable control tokens; hand-crafted prefixes have none");
    }

    std::filesystem::create_directories(s.out_dir);

    RunRecord rec;
    rec.kind = s.kind;
    rec.seed = s.seed;
    rec.config_hash = s.config_hash;

    // Data.
    if (!s.dataset_path.empty()) {
        rec.dataset = load_jsonl(s.dataset_path, s.data_kind, s.max_input_len, tok);
        if (!s.validation_path.empty()) {
            Dataset val = load_jsonl(s.validation_path, s.data_kind, s.max_input_len, tok);
            rec.dataset.validation = std::move(val.train);
        }
    } else {
        rec.dataset = gen_synthetic(s.task, s.n_examples, s.seed, s.data_kind);
    }

    // Model and control tokens.
    rec.state = ModelState::init(s.model, SeededRng(s.seed, "model_init"), s.init_std);
    rec.tokens = pipe_detail::build_token_set(s, rec.state, tok);
    rec.has_tokens = s.kind != RunKind::dpo;

    // Pointwise data trains against quantized levels.
    if (s.data_kind == DataKind::pointwise && s.kind != RunKind::dpo) {
        Batch all;
        all.kind = DataKind::pointwise;
        all.items = rec.dataset.train;
        QuantizeResult q = quantize_scores(all, s.quantize_levels);
        rec.dataset.train = std::move(q.batch.items);
    }

    // Stage list.
    std::vector<StagePlan> stages;
    auto pet_stage = [&]() {
        StagePlan p;
        p.name = "pet";
        p.objective = Objective::pet;
        p.mask = build_mask(Stage::pet, rec.state, rec.tokens);
        p.learning_rate = s.stage1_lr;
        p.epochs = s.stage1_epochs;
        p.batch_size = s.batch_size;
        p.grad_clip = s.grad_clip;
        return p;
    };
    auto cg_stage = [&]() {
        StagePlan p;
        p.name = "cg";
        p.objective = Objective::cg;
        p.mask = build_mask(Stage::joint, rec.state, rec.tokens);
        p.learning_rate = s.stage2_lr;
        p.epochs = s.stage2_epochs;
        p.batch_size = s.batch_size;
        p.grad_clip = s.grad_clip;
        return p;
    };

    std::unique_ptr<ModelState> dpo_reference;
    DpoConfig dpo_config;
    switch (s.kind) {
        case RunKind::meet:
            stages.push_back(pet_stage());
            stages.push_back(cg_stage());
            break;
        case RunKind::first_only:
            stages.push_back(pet_stage());
            break;
        case RunKind::second_only:
        case RunKind::coh:
            stages.push_back(cg_stage());
            break;
        case RunKind::dpo: {
            // Reference = supervised warm start on preferred responses.
            auto warm_trace = dpo_warm_start(rec.state, rec.dataset.train, s.stage2_lr, s.batch_size,
                                             SeededRng(s.seed, "stage.warmstart"), tok);
            rec.trace.insert(rec.trace.end(), warm_trace.begin(), warm_trace.end());
            dpo_reference = std::make_unique<ModelState>(rec.state);
            dpo_config.beta = s.dpo_beta;
            dpo_config.reference = dpo_reference.get();
            StagePlan p;
            p.name = "dpo";
            p.objective = Objective::dpo;
            TrainableMask mask;
            for (const Param& prm : rec.state.params()) mask.names.insert(prm.name);
            p.mask = mask;
            p.learning_rate = s.stage2_lr;
            p.epochs = s.stage2_epochs;
            p.batch_size = s.batch_size;
            p.grad_clip = s.grad_clip;
            stages.push_back(p);
            break;
        }
    }

    // Execute stages; optimizer state is created fresh inside optimize() for
    // each stage, and each stage draws an independent shuffle stream.
    for (std::size_t si = 0; si < stages.size(); ++si) {
        const StagePlan& plan = stages[si];
        rec.stage_names.push_back(plan.name);
        SeededRng stage_rng = SeededRng(s.seed, "stage." + plan.name);
        auto trace = optimize(rec.state, rec.tokens, plan, rec.dataset.train, rec.dataset.kind, stage_rng,
                              plan.objective == Objective::dpo ? &dpo_config : nullptr, tok);
        rec.trace.insert(rec.trace.end(), trace.begin(), trace.end());
        if (stages.size() > 1 && si == 0) {
            rec.stage1_checkpoint_path = s.out_dir + "/stage1.ckpt";
            save_checkpoint(rec.stage1_checkpoint_path, rec.state, rec.has_tokens ? &rec.tokens : nullptr);
        }
    }

    // Persist artifacts.
    rec.checkpoint_path = s.out_dir + "/final.ckpt";
    save_checkpoint(rec.checkpoint_path, rec.state, rec.has_tokens ? &rec.tokens : nullptr);

    rec.trace_path = s.out_dir + "/loss_trace.csv";
    {
        std::ofstream os(rec.trace_path, std::ios::trunc);
        os << "stage,epoch,batch,loss\n";
        os.precision(17);
        for (const TraceRow& row : rec.trace) {
            os << row.stage << ',' << row.epoch << ',' << row.batch << ',' << row.loss << '\n';
        }
    }

    const auto t_end = std::chrono::steady_clock::now();
    rec.wall_seconds = std::chrono::duration<double>(t_end - t_start).count();

    rec.manifest_path = s.out_dir + "/manifest.json";
    {
        nlohmann::json stages_json = nlohmann::json::array();
        for (const StagePlan& plan : stages) {
            stages_json.push_back({{"name", plan.name},
                                   {"objective", to_string(plan.objective)},
                                   {"learning_rate", plan.learning_rate},
                                   {"epochs", plan.epochs},
                                   {"batch_size", plan.batch_size},
                                   {"trainable_params", plan.mask.names.size()}});
        }
        nlohmann::json manifest;
        manifest["kind"] = to_string(s.kind);
        manifest["seed"] = s.seed;
        manifest["stages"] = stages_json;
        manifest["dataset"] = dataset_manifest(rec.dataset);
        manifest["dataset_manifest_hash"] = pipe_detail::hex64(pipe_detail::json_hash(dataset_manifest(rec.dataset)));
        manifest["checkpoint"] = rec.checkpoint_path;
        manifest["loss_trace"] = rec.trace_path;
        manifest["config_hash"] = rec.config_hash;
        manifest["wall_seconds"] = rec.wall_seconds;
        std::ofstream os(rec.manifest_path, std::ios::trunc);
        os << manifest.dump(2) << '\n';
    }
    return rec;
}

// One generated response per validation prompt under the chosen control
// token; JSONL dump consumable by the win-rate evaluator.
inline std::vector<Generation> generate_eval_dump(const ModelState& state, const ControlTokenSet* tokens,
                                                  const std::vector<std::string>& prompts,
                                                  const std::string& adapter_choice, double temperature,
                                                  std::uint64_t seed, int max_len = kDefaultMaxGenerate,
                                                  const Tokenizer& tok = Tokenizer()) {
    ControlAdapter* adapter = nullptr;
    ControlAdapter scratch("none", HandcraftedPrefix{});
    if (adapter_choice != "none") {
        if (tokens == nullptr) throw std::invalid_argument("generate: run has no control tokens");
        scratch = tokens->by_choice(adapter_choice);
        adapter = &scratch;
    }
    std::vector<Generation> out;
    out.reserve(prompts.size());
    SeededRng rng(seed, "dump." + adapter_choice);
    for (const std::string& prompt : prompts) {
        std::vector<int> ids = sample(state, encode_prompt(tok, prompt), adapter, temperature, max_len, rng);
        out.push_back(Generation{prompt, tok.decode(ids), adapter_choice, temperature});
    }
    return out;
}

inline std::vector<std::string> validation_prompts(const Dataset& ds) {
    std::vector<std::string> prompts;
    prompts.reserve(ds.validation.size());
    for (const PreferenceExample& ex : ds.validation) prompts.push_back(ex.prompt);
    return prompts;
}

} // namespace meet
