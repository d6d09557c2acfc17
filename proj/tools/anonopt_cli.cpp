// anonopt: learn task-adapted text-anonymization instructions by evolutionary
// prompt search over an explicit privacy-utility objective pair.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "anonopt/dataset.hpp"
#include "anonopt/frontier.hpp"
#include "anonopt/harness.hpp"
#include "anonopt/http_backends.hpp"
#include "anonopt/optimizer.hpp"
#include "anonopt/transcript.hpp"

namespace fs = std::filesystem;
using namespace anonopt;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string task_path;
    std::string data_path;
    std::string backend_chat = "mock:";
    std::string backend_embed = "mock:";
    std::string backend_sim = "mock:";
    std::string chat_model = "local-model";
    std::string embed_model = "local-embed";
    int budget = 1500;
    int patience = 5;
    double alpha = 0.3;
    int minibatch = 3;
    uint64_t seed = 0;
    std::string mode = "two_stage";
    std::string out_dir = "out";
    int workers = 4;
};

void add_common_options(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "plain key-value config file; flags override");
    cmd->add_option("--task", opts.task_path, "task spec JSON file");
    cmd->add_option("--data", opts.data_path, "dataset (line-delimited JSON)");
    cmd->add_option("--backend-chat", opts.backend_chat,
                    "chat backend URL, or mock:<script> / mock:");
    cmd->add_option("--backend-embed", opts.backend_embed, "embedding backend URL or mock:");
    cmd->add_option("--backend-sim", opts.backend_sim, "similarity backend URL or mock:");
    cmd->add_option("--chat-model", opts.chat_model, "model name sent to the chat backend");
    cmd->add_option("--embed-model", opts.embed_model, "model name sent to the embed backend");
    cmd->add_option("--budget", opts.budget, "rollout budget B in forward passes");
    cmd->add_option("--patience", opts.patience, "warm-start early-stop patience");
    cmd->add_option("--alpha", opts.alpha, "refinement validation sampling ratio");
    cmd->add_option("--minibatch", opts.minibatch, "reflection minibatch size");
    cmd->add_option("--seed", opts.seed, "run seed (rng and dataset split)");
    cmd->add_option("--mode", opts.mode, "two_stage | simple_only | rich_only");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--workers", opts.workers, "gateway worker count");
}

// Plain key=value config; '#' starts a comment. A key applies only when the
// matching flag was not given on the command line.
void apply_config_file(CLI::App* cmd, CommonOpts& opts) {
    if (opts.config_path.empty()) return;
    std::ifstream in(opts.config_path);
    if (!in) throw ConfigError("cannot open config file '" + opts.config_path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(opts.config_path + ":" + std::to_string(lineno) +
                              ": expected key = value");
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    auto apply_str = [&](const char* key, std::string& field) {
        if (kv.count(key) && cmd->count(std::string("--") + key) == 0) field = kv[key];
    };
    auto apply_int = [&](const char* key, int& field) {
        if (kv.count(key) && cmd->count(std::string("--") + key) == 0) field = std::stoi(kv[key]);
    };
    apply_str("task", opts.task_path);
    apply_str("data", opts.data_path);
    apply_str("backend-chat", opts.backend_chat);
    apply_str("backend-embed", opts.backend_embed);
    apply_str("backend-sim", opts.backend_sim);
    apply_str("chat-model", opts.chat_model);
    apply_str("embed-model", opts.embed_model);
    apply_str("mode", opts.mode);
    apply_str("out", opts.out_dir);
    apply_int("budget", opts.budget);
    apply_int("patience", opts.patience);
    apply_int("minibatch", opts.minibatch);
    apply_int("workers", opts.workers);
    if (kv.count("alpha") && cmd->count("--alpha") == 0) opts.alpha = std::stod(kv["alpha"]);
    if (kv.count("seed") && cmd->count("--seed") == 0)
        opts.seed = std::stoull(kv["seed"]);
}

json effective_config(const CommonOpts& opts) {
    return json{{"task", opts.task_path},
                {"data", opts.data_path},
                {"backend-chat", opts.backend_chat},
                {"backend-embed", opts.backend_embed},
                {"backend-sim", opts.backend_sim},
                {"chat-model", opts.chat_model},
                {"embed-model", opts.embed_model},
                {"budget", opts.budget},
                {"patience", opts.patience},
                {"alpha", opts.alpha},
                {"minibatch", opts.minibatch},
                {"seed", opts.seed},
                {"mode", opts.mode},
                {"out", opts.out_dir},
                {"workers", opts.workers}};
}

struct RunSetup {
    TaskSpec task;
    DatasetSplits splits;
    std::shared_ptr<ChatBackend> chat;
    std::shared_ptr<EmbedBackend> embed;
    std::shared_ptr<SimilarityBackend> sim;
    OptimizerConfig config;
};

RunSetup prepare(const CommonOpts& opts) {
    RunSetup setup;
    if (opts.task_path.empty()) throw ConfigError("--task is required");
    if (opts.data_path.empty()) throw ConfigError("--data is required");
    setup.task = load_task(opts.task_path);
    auto examples = load_examples(opts.data_path, setup.task);
    setup.splits = split_examples(std::move(examples), opts.seed, &std::cerr);
    setup.chat = make_chat_backend(opts.backend_chat, opts.chat_model);
    setup.embed = make_embed_backend(opts.backend_embed, opts.embed_model);
    setup.sim = make_similarity_backend(opts.backend_sim);
    setup.config.budget = opts.budget;
    setup.config.patience = opts.patience;
    setup.config.alpha = opts.alpha;
    setup.config.minibatch_size = opts.minibatch;
    setup.config.rng_seed = opts.seed;
    setup.config.mode = run_mode_from_string(opts.mode);
    setup.config.workers = opts.workers;
    setup.config.validate();
    return setup;
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << content;
}

int cmd_optimize(CLI::App* cmd, CommonOpts& opts) {
    apply_config_file(cmd, opts);
    RunSetup setup = prepare(opts);
    fs::create_directories(opts.out_dir);

    Gateway gateway(setup.chat, setup.embed, setup.sim);
    const fs::path transcript_path = fs::path(opts.out_dir) / "transcript.jsonl";
    TranscriptWriter transcript(transcript_path.string());
    OptimizationRun run(setup.config, setup.task, setup.splits, gateway, transcript);
    run.set_header_extra(effective_config(opts));
    const RunResult result = run.run();

    write_text_file(fs::path(opts.out_dir) / "pool.json", run.pool_checkpoint().dump(2) + "\n");
    write_text_file(fs::path(opts.out_dir) / "best_prompt.txt", result.best.instruction + "\n");
    const auto points = points_from_transcript(load_transcript(transcript_path.string()));
    export_frontier(extract_frontier(points), FrontierFormat::csv,
                    (fs::path(opts.out_dir) / "frontier.csv").string());

    std::cout << "best candidate: " << result.best.candidate_id << "\n"
              << "privacy: " << format_double(result.final_score.privacy, 4) << "\n"
              << "utility: " << format_double(result.final_score.utility, 4) << "\n"
              << "aggregate: " << format_double(aggregate(result.final_score), 4) << "\n"
              << "budget spent: " << result.spent << "/" << setup.config.budget << "\n";
    return 0;
}

int cmd_evaluate(CLI::App* cmd, CommonOpts& opts, const std::string& prompt_path,
                 const std::string& split_name) {
    apply_config_file(cmd, opts);
    RunSetup setup = prepare(opts);

    std::ifstream prompt_in(prompt_path);
    if (!prompt_in) throw ConfigError("cannot open prompt file '" + prompt_path + "'");
    std::stringstream ss;
    ss << prompt_in.rdbuf();
    const std::string instruction = trim(ss.str());
    if (instruction.empty()) throw ConfigError("prompt file '" + prompt_path + "' is empty");

    const std::vector<Example>* split = nullptr;
    if (split_name == "train") split = &setup.splits.train;
    else if (split_name == "valid") split = &setup.splits.valid;
    else if (split_name == "test") split = &setup.splits.test;
    else throw ConfigError("unknown split '" + split_name + "'");
    if (split->empty()) throw DataError("split '" + split_name + "' is empty");

    Gateway gateway(setup.chat, setup.embed, setup.sim);
    Evaluator evaluator(gateway, setup.task, setup.config.workers);
    CandidatePrompt candidate = make_seed_candidate(instruction);

    // Evaluation-only mode: no ledger, zero chargeable calls.
    auto batch = evaluator.evaluate_batch(candidate, *split, nullptr);
    json per_example = json::array();
    double sum_privacy = 0.0, sum_utility = 0.0;
    for (size_t i = 0; i < split->size(); ++i) {
        const auto& outcome = *batch.outcomes[i];
        sum_privacy += outcome.score.privacy;
        sum_utility += outcome.score.utility;
        per_example.push_back(json{{"id", (*split)[i].id},
                                   {"privacy", outcome.score.privacy},
                                   {"utility", outcome.score.utility},
                                   {"aggregate", aggregate(outcome.score)}});
    }
    const double n = static_cast<double>(split->size());
    const ScoreVector mean{sum_privacy / n, sum_utility / n};
    json report{{"prompt_file", prompt_path},
                {"split", split_name},
                {"examples", split->size()},
                {"mean_privacy", mean.privacy},
                {"mean_utility", mean.utility},
                {"aggregate", aggregate(mean)},
                {"per_example", per_example}};
    fs::create_directories(opts.out_dir);
    write_text_file(fs::path(opts.out_dir) / "evaluation.json", report.dump(2) + "\n");
    std::cout << "split: " << split_name << " (" << split->size() << " examples)\n"
              << "privacy: " << format_double(mean.privacy, 4) << "\n"
              << "utility: " << format_double(mean.utility, 4) << "\n"
              << "aggregate: " << format_double(aggregate(mean), 4) << "\n";
    return 0;
}

int cmd_frontier(const std::vector<std::string>& transcript_paths, const std::string& format,
                 const std::string& out_path) {
    std::vector<std::vector<FrontierPoint>> frontiers;
    for (const auto& path : transcript_paths)
        frontiers.push_back(extract_frontier(load_transcript(path), path));
    const auto merged = frontiers.size() == 1 ? frontiers[0] : merge_frontiers(frontiers);
    const FrontierFormat fmt =
        format == "json" ? FrontierFormat::json_format : FrontierFormat::csv;
    export_frontier(merged, fmt, out_path);
    std::cout << merged.size() << " frontier points -> " << out_path << "\n";
    return 0;
}

int cmd_curve(const std::string& transcript_path, const std::string& out_path) {
    const LearningCurve curve = emit_curve(load_transcript(transcript_path));
    write_text_file(out_path, curve.to_csv());
    std::cout << curve.points.size() << " curve points -> " << out_path << "\n";
    return 0;
}

int cmd_ablation(CLI::App* cmd, CommonOpts& opts, const std::vector<std::string>& mode_names,
                 const std::vector<uint64_t>& seeds, bool check_ordering) {
    apply_config_file(cmd, opts);
    RunSetup setup = prepare(opts);
    fs::create_directories(opts.out_dir);

    std::vector<RunMode> modes;
    for (const auto& name : mode_names) modes.push_back(run_mode_from_string(name));

    auto run_one = [&](RunMode mode, uint64_t seed) {
        OptimizerConfig config = setup.config;
        config.mode = mode;
        config.rng_seed = seed;
        Gateway gateway(setup.chat, setup.embed, setup.sim);
        const fs::path path = fs::path(opts.out_dir) /
                              ("ablation_" + std::string(to_string(mode)) + "_" +
                               std::to_string(seed) + ".jsonl");
        TranscriptWriter transcript(path.string());
        OptimizationRun run(config, setup.task, setup.splits, gateway, transcript);
        const RunResult result = run.run();
        AblationRow row;
        row.final_privacy = result.final_score.privacy;
        row.final_utility = result.final_score.utility;
        row.final_aggregate = aggregate(result.final_score);
        row.spent = result.spent;
        row.best_candidate = result.best.candidate_id;
        const LearningCurve curve = emit_curve(load_transcript(path.string()));
        write_text_file(fs::path(opts.out_dir) /
                            ("curve_" + std::string(to_string(mode)) + "_" +
                             std::to_string(seed) + ".csv"),
                        curve.to_csv());
        return row;
    };

    const AblationTable table = run_ablation_suite(run_one, modes, seeds, check_ordering);
    write_text_file(fs::path(opts.out_dir) / "ablation.csv", table.to_csv());
    std::cout << table.to_csv();
    if (table.ordering_checked) {
        std::cout << "two_stage >= single-mode means: "
                  << (table.ordering_holds ? "yes" : "NO") << "\n";
        if (!table.ordering_holds) return 1;
    }
    return 0;
}

json error_json(const char* cls, const std::exception& e) {
    return json{{"error", cls}, {"message", e.what()}};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"anonopt: evolutionary prompt search for text anonymization"};
    app.require_subcommand(1);

    CommonOpts opts;

    CLI::App* optimize = app.add_subcommand("optimize", "run the optimization pipeline");
    add_common_options(optimize, opts);

    CLI::App* evaluate = app.add_subcommand("evaluate", "score a prompt on a held-out split");
    std::string prompt_path;
    std::string split_name = "test";
    add_common_options(evaluate, opts);
    evaluate->add_option("--prompt", prompt_path, "prompt text file")->required();
    evaluate->add_option("--split", split_name, "train | valid | test");

    CLI::App* frontier = app.add_subcommand("frontier", "export the trade-off frontier");
    std::vector<std::string> transcript_paths;
    std::string frontier_format = "csv";
    std::string frontier_out = "frontier.csv";
    frontier->add_option("--transcript", transcript_paths, "run transcript(s); repeat to merge")
        ->required();
    frontier->add_option("--format", frontier_format, "csv | json");
    frontier->add_option("--out", frontier_out, "output file");

    CLI::App* curve = app.add_subcommand("curve", "emit a learning curve from a transcript");
    std::string curve_transcript;
    std::string curve_out = "curve.csv";
    curve->add_option("--transcript", curve_transcript, "run transcript")->required();
    curve->add_option("--out", curve_out, "output CSV");

    CLI::App* ablation = app.add_subcommand("ablation", "compare run modes across seeds");
    std::vector<std::string> mode_names = {"two_stage", "simple_only", "rich_only"};
    std::vector<uint64_t> ablation_seeds = {1, 2, 3, 4, 5};
    bool check_ordering = false;
    add_common_options(ablation, opts);
    ablation->add_option("--modes", mode_names, "run modes to compare")->delimiter(',');
    ablation->add_option("--seeds", ablation_seeds, "seeds per mode")->delimiter(',');
    ablation->add_flag("--check-ordering", check_ordering,
                       "require two_stage mean >= each single-mode mean");

    CLI11_PARSE(app, argc, argv);

    try {
        if (optimize->parsed()) return cmd_optimize(optimize, opts);
        if (evaluate->parsed()) return cmd_evaluate(evaluate, opts, prompt_path, split_name);
        if (frontier->parsed())
            return cmd_frontier(transcript_paths, frontier_format, frontier_out);
        if (curve->parsed()) return cmd_curve(curve_transcript, curve_out);
        if (ablation->parsed())
            return cmd_ablation(ablation, opts, mode_names, ablation_seeds, check_ordering);
    } catch (const ConfigError& e) {
        std::cerr << error_json("ConfigError", e).dump() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const DataError& e) {
        std::cerr << error_json("DataError", e).dump() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const BackendError& e) {
        std::cerr << error_json("BackendError", e).dump() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const BudgetExhausted& e) {
        std::cerr << error_json("BudgetExhausted", e).dump() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const Error& e) {
        std::cerr << error_json("Error", e).dump() << "\n";
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::cerr << error_json("Error", e).dump() << "\n";
        return 1;
    }
    return 0;
}
