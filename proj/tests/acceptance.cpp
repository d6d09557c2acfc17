// Acceptance suite: runs every release criterion end to end and prints one
// pass/fail line each. Exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "anonopt/dataset.hpp"
#include "anonopt/frontier.hpp"
#include "anonopt/harness.hpp"
#include "anonopt/metrics.hpp"
#include "anonopt/optimizer.hpp"
#include "anonopt/transcript.hpp"
#include "fixtures.hpp"

using namespace anonopt;
namespace fs = std::filesystem;

namespace {

int failures = 0;
std::vector<std::string> checks_failed;

#define REQUIRE_A(cond)                                                          \
    do {                                                                         \
        if (!(cond)) {                                                           \
            checks_failed.push_back(std::string(__FILE__) + ":" +                \
                                    std::to_string(__LINE__) + "  " #cond);      \
        }                                                                        \
    } while (0)

void criterion(int number, const std::string& name, const std::function<void()>& body) {
    checks_failed.clear();
    const auto start = std::chrono::steady_clock::now();
    try {
        body();
    } catch (const std::exception& e) {
        checks_failed.push_back(std::string("exception: ") + e.what());
    }
    const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - start)
                             .count();
    if (checks_failed.empty()) {
        std::cout << "[PASS] criterion " << number << ": " << name << " (" << elapsed
                  << " ms)\n";
    } else {
        ++failures;
        std::cout << "[FAIL] criterion " << number << ": " << name << " (" << elapsed
                  << " ms)\n";
        for (const auto& c : checks_failed) std::cout << "       " << c << "\n";
    }
}

RetryPolicy fast_retry() { return RetryPolicy{3, std::chrono::milliseconds(0), 2.0, false}; }

struct PlantedRun {
    TranscriptWriter transcript;
    RunResult result;
    std::vector<json> records;
    std::vector<int> sampler_counts;
    bool pool_pure = false;
    int budget = 0;
};

PlantedRun run_planted(RunMode mode, uint64_t seed, int budget, int n_examples,
                       const std::string& script_text, OptimizerConfig base = {}) {
    PlantedRun out;
    out.budget = budget;
    Gateway gateway(std::make_shared<MockChatBackend>(MockScript::parse(script_text)), nullptr,
                    nullptr, fast_retry());
    OptimizerConfig config = base;
    config.budget = budget;
    config.rng_seed = seed;
    config.mode = mode;
    if (config.workers == 4) config.workers = 2;
    DatasetSplits splits = split_examples(fixtures::planted_examples(n_examples), seed);
    OptimizationRun run(config, fixtures::planted_task(), std::move(splits), gateway,
                        out.transcript);
    out.result = run.run();
    for (const auto& line : out.transcript.lines()) out.records.push_back(json::parse(line));
    out.sampler_counts = run.sampler().eval_counts();
    out.pool_pure = fixtures::pool_is_pure(run.pool());
    return out;
}

int run_cli(const std::string& args) {
    const char* cli = std::getenv("ANONOPT_CLI");
    const std::string binary = cli ? cli : "./tools/anonopt";
    const int status = std::system((binary + " " + args).c_str());
    if (status == -1) return -1;
    return WEXITSTATUS(status);
}

} // namespace

// ---------------------------------------------------------------------------

int main() {
    const fs::path tmp =
        fs::temp_directory_path() / ("anonopt_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(tmp);

    criterion(1, "default-config transcript header records the protocol constants", [&] {
        Gateway gateway(std::make_shared<MockChatBackend>(fixtures::planted_script()), nullptr,
                        nullptr, fast_retry());
        TranscriptWriter transcript;
        OptimizerConfig config; // defaults reproduce the protocol
        config.rng_seed = 1;
        config.workers = 2;
        DatasetSplits splits = split_examples(fixtures::planted_examples(300), 1);
        OptimizationRun run(config, fixtures::planted_task(), std::move(splits), gateway,
                            transcript);
        const RunResult result = run.run();
        const json header = json::parse(transcript.lines().at(0));
        REQUIRE_A(header.at("record") == "header");
        REQUIRE_A(header.at("budget") == 1500);
        REQUIRE_A(header.at("patience") == 5);
        REQUIRE_A(header.at("alpha") == 0.3);
        REQUIRE_A(header.at("minibatch") == 3);
        REQUIRE_A(header.at("train_size") == 111);
        REQUIRE_A(header.at("valid_size") == 111);
        REQUIRE_A(result.spent <= 1500);
    });

    criterion(2, "feedback strings reproduce the published formats", [&] {
        const FeedbackRecord base = base_feedback(0.55, 0.75);
        REQUIRE_A(std::abs(base.score - 0.65) < 1e-12);
        REQUIRE_A(base.text ==
                  fixtures::read_file(fixtures::data_dir() + "/base_feedback.golden.txt"));

        TaskSpec tab;
        tab.task_id = "tab";
        tab.privacy_metric = PrivacyMetric::span_recall;
        tab.utility_metric = UtilityMetric::semantic_similarity;
        finalize_task(tab);
        Example ex;
        ex.id = "tab-1";
        ex.text = "John Smith can be reached at 555-1234 or john@example.com";
        ex.labels = json{{"gold_spans", {"John Smith", "555-1234", "john@example.com"}}};
        MetricResult privacy{0.55, {"John Smith", "555-1234", "john@example.com"}};
        MetricResult utility{0.75, {}};
        const FeedbackRecord rich = rich_feedback(tab, ex, "partially anonymized", privacy,
                                                  utility);
        const std::string golden =
            fixtures::read_file(fixtures::data_dir() + "/rich_feedback_tab.golden.txt");
        REQUIRE_A(rich.text == golden);

        // order-insensitivity of the entity list: a permuted findings vector
        // renders the same text up to the itemized section
        MetricResult permuted{0.55, {"555-1234", "john@example.com", "John Smith"}};
        const FeedbackRecord rich2 = rich_feedback(tab, ex, "partially anonymized", permuted,
                                                   utility);
        auto entity_set = [](const FeedbackRecord& r) {
            return std::set<std::string>(r.findings.begin(), r.findings.end());
        };
        REQUIRE_A(entity_set(rich) == entity_set(rich2));
        REQUIRE_A(rich2.score == rich.score);
        const auto parsed = parse_feedback_scores(rich.text);
        REQUIRE_A(parsed.has_value());
        REQUIRE_A(std::abs(parsed->score - 0.65) < 5e-4);
        REQUIRE_A(std::abs(parsed->privacy - 0.55) < 5e-4);
        REQUIRE_A(std::abs(parsed->utility - 0.75) < 5e-4);
    });

    criterion(3, "metric implementations match brute-force oracles (1e-9)", [&] {
        SplitMix64 rng(616);
        const std::vector<std::string> vocab = {"a", "b", "c", "d", "e", "f", "g", "h",
                                                "ii", "jj", "kk", "ll"};
        auto sentence = [&](size_t max_len) {
            const size_t len = 1 + rng.next_below(max_len);
            std::string out;
            for (size_t i = 0; i < len; ++i) {
                if (i) out += " ";
                out += vocab[rng.next_below(vocab.size())];
            }
            return out;
        };

        // rouge1_f against an independent union-vocabulary oracle
        for (int i = 0; i < 1000; ++i) {
            const std::string ref = sentence(14), cand = sentence(14);
            std::map<std::string, int> rc, cc;
            for (const auto& t : tokenize(ref)) rc[t]++;
            for (const auto& t : tokenize(cand)) cc[t]++;
            int overlap = 0;
            for (const auto& [tok, n] : rc)
                if (cc.count(tok)) overlap += std::min(n, cc[tok]);
            const double p = double(overlap) / double(tokenize(cand).size());
            const double r = double(overlap) / double(tokenize(ref).size());
            const double expect = (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
            REQUIRE_A(std::abs(MetricEngine::rouge1_f(ref, cand) - expect) <= 1e-9);
        }

        // masking_recall against direct containment counting
        for (int i = 0; i < 1000; ++i) {
            const std::string text = sentence(16);
            std::vector<std::string> spans;
            const size_t n_spans = 1 + rng.next_below(4);
            for (size_t s = 0; s < n_spans; ++s) spans.push_back(sentence(2));
            int present = 0;
            for (const auto& span : spans)
                if (normalize_whitespace(text).find(normalize_whitespace(span)) !=
                    std::string::npos)
                    ++present;
            const double expect = 1.0 - double(present) / double(spans.size());
            REQUIRE_A(std::abs(MetricEngine::masking_recall(spans, text) - expect) <= 1e-9);
        }

        // pii leakage arithmetic against the closed form
        for (int i = 0; i < 1000; ++i) {
            const int units = static_cast<int>(rng.next_below(12));
            const int leaked = units == 0 ? 0 : static_cast<int>(rng.next_below(units + 1));
            const std::string script =
                "rule system=\"Count the personally identifying\"\nrespond UNITS: " +
                std::to_string(units) + "\\nLEAKED: " + std::to_string(leaked) +
                "\\nITEMS: none\nrule default\nrespond x\n";
            Gateway gw(std::make_shared<MockChatBackend>(MockScript::parse(script)), nullptr,
                       nullptr, fast_retry());
            TaskSpec task;
            task.task_id = "t";
            task.privacy_metric = PrivacyMetric::pii_leakage;
            task.utility_metric = UtilityMetric::rouge1_f;
            finalize_task(task);
            MetricEngine engine(gw, task);
            const double expect = units == 0 ? 1.0 : 1.0 - double(leaked) / double(units);
            REQUIRE_A(std::abs(engine.pii_leakage("o", "a").value - expect) <= 1e-9);
        }

        // cosine-distance clamping against a direct dot-product computation
        for (int i = 0; i < 1000; ++i) {
            EmbeddingVector u, v;
            for (int d = 0; d < 8; ++d) {
                u.values.push_back(rng.next_double() * 2.0 - 1.0);
                v.values.push_back(rng.next_double() * 2.0 - 1.0);
            }
            double dot = 0, nu = 0, nv = 0;
            for (int d = 0; d < 8; ++d) {
                dot += u.values[d] * v.values[d];
                nu += u.values[d] * u.values[d];
                nv += v.values[d] * v.values[d];
            }
            const double cosine = dot / (std::sqrt(nu) * std::sqrt(nv));
            const double expect = std::min(1.0, std::max(0.0, 1.0 - cosine));
            const double got = clamp01(1.0 - cosine_similarity(u, v));
            REQUIRE_A(std::abs(got - expect) <= 1e-9);
            REQUIRE_A(got >= 0.0 && got <= 1.0);
        }
    });

    criterion(4, "optimizer invariants hold across 200 fuzzed runs", [&] {
        SplitMix64 rng(987654321);
        int deterministic_checked = 0;
        for (int i = 0; i < 200; ++i) {
            const fixtures::FuzzCase fuzz = fixtures::make_fuzz_case(rng);
            PlantedRun run = run_planted(fuzz.config.mode, fuzz.config.rng_seed,
                                         fuzz.config.budget, fuzz.n_examples, fuzz.script,
                                         fuzz.config);
            REQUIRE_A(run.result.spent <= fuzz.config.budget);
            REQUIRE_A(run.pool_pure);
            REQUIRE_A(fixtures::counts_are_fair(run.sampler_counts));
            double best = -1.0;
            for (const auto& r : run.records) {
                if (r.contains("best")) {
                    REQUIRE_A(r["best"].get<double>() >= best);
                    best = r["best"].get<double>();
                }
                if (r.contains("spent"))
                    REQUIRE_A(r["spent"].get<int>() <= fuzz.config.budget);
            }
            if (i % 10 == 0) {
                PlantedRun again = run_planted(fuzz.config.mode, fuzz.config.rng_seed,
                                               fuzz.config.budget, fuzz.n_examples,
                                               fuzz.script, fuzz.config);
                REQUIRE_A(run.transcript.dump() == again.transcript.dump());
                ++deterministic_checked;
            }
        }
        REQUIRE_A(deterministic_checked == 20);
    });

    criterion(5, "planted-optimum convergence in at least 18 of 20 seeded runs", [&] {
        int converged = 0;
        for (uint64_t seed = 1; seed <= 20; ++seed) {
            PlantedRun run =
                run_planted(RunMode::two_stage, seed, 200, 30, fixtures::planted_script_text());
            const std::string& instruction = run.result.best.instruction;
            if (contains(instruction, fixtures::kTokenNames) &&
                contains(instruction, fixtures::kTokenNumbers))
                ++converged;
        }
        std::cout << "       planted-optimum convergence: " << converged << "/20 runs\n";
        REQUIRE_A(converged >= 18);
    });

    criterion(6, "two_stage mean final aggregate >= each single mode over 5 seeds", [&] {
        auto runner = [&](RunMode mode, uint64_t seed) {
            PlantedRun run =
                run_planted(mode, seed, 200, 30, fixtures::planted_script_text());
            AblationRow row;
            row.final_privacy = run.result.final_score.privacy;
            row.final_utility = run.result.final_score.utility;
            row.final_aggregate = aggregate(run.result.final_score);
            row.spent = run.result.spent;
            row.best_candidate = run.result.best.candidate_id;
            return row;
        };
        const AblationTable table = run_ablation_suite(
            runner, {RunMode::two_stage, RunMode::simple_only, RunMode::rich_only},
            {1, 2, 3, 4, 5}, true);
        REQUIRE_A(table.rows.size() == 15);
        std::cout << "       mean finals: two_stage="
                  << format_double(table.mean_final(RunMode::two_stage), 4)
                  << " simple_only=" << format_double(table.mean_final(RunMode::simple_only), 4)
                  << " rich_only=" << format_double(table.mean_final(RunMode::rich_only), 4)
                  << "\n";
        REQUIRE_A(table.ordering_holds);
        REQUIRE_A(table.mean_final(RunMode::two_stage) >=
                  table.mean_final(RunMode::simple_only));
        REQUIRE_A(table.mean_final(RunMode::two_stage) >=
                  table.mean_final(RunMode::rich_only));
    });

    criterion(7, "frontier extraction, merging and exports are correct", [&] {
        SplitMix64 rng(5150);
        auto random_points = [&](int n, const std::string& source) {
            std::vector<FrontierPoint> points;
            for (int i = 0; i < n; ++i) {
                FrontierPoint p;
                p.candidate_id = source + "p" + std::to_string(i);
                p.privacy = static_cast<double>(rng.next_below(41)) / 40.0;
                p.utility = static_cast<double>(rng.next_below(41)) / 40.0;
                p.stage = "warmstart";
                p.instruction = "i";
                p.source = source;
                points.push_back(std::move(p));
            }
            return points;
        };
        auto brute_force = [](const std::vector<FrontierPoint>& points) {
            std::set<std::string> keep;
            for (size_t i = 0; i < points.size(); ++i) {
                bool dominated = false;
                for (size_t j = 0; j < points.size() && !dominated; ++j) {
                    if (i == j) continue;
                    dominated = dominates(ScoreVector{points[j].privacy, points[j].utility},
                                          ScoreVector{points[i].privacy, points[i].utility});
                }
                if (!dominated) keep.insert(points[i].candidate_id);
            }
            return keep;
        };
        auto ids_of = [](const std::vector<FrontierPoint>& points) {
            std::set<std::string> ids;
            for (const auto& p : points) ids.insert(p.candidate_id);
            return ids;
        };

        const auto cloud = random_points(1000, "solo");
        REQUIRE_A(ids_of(non_dominated(cloud)) == brute_force(cloud));

        // three synthetic runs merged, checked against the union brute force
        std::vector<std::vector<FrontierPoint>> runs;
        std::vector<FrontierPoint> all;
        for (int f = 0; f < 3; ++f) {
            auto frontier = non_dominated(random_points(300, "run" + std::to_string(f)));
            all.insert(all.end(), frontier.begin(), frontier.end());
            runs.push_back(std::move(frontier));
        }
        const auto merged = merge_frontiers(runs);
        REQUIRE_A(ids_of(merged) == brute_force(all));

        const auto exported = frontier_from_json(frontier_to_json(merged));
        for (size_t i = 1; i < exported.size(); ++i) {
            REQUIRE_A(exported[i].privacy >= exported[i - 1].privacy);
            REQUIRE_A(exported[i].utility <= exported[i - 1].utility);
        }
        REQUIRE_A(frontier_to_csv(merged) == frontier_to_csv(merged));
    });

    criterion(8, "cmd_optimize smoke run at B=50 emits all four artifacts", [&] {
        const fs::path dataset = tmp / "data.jsonl";
        const fs::path task = tmp / "task.json";
        const fs::path script = tmp / "script.txt";
        const fs::path conf = tmp / "run.conf";
        fixtures::write_planted_dataset(dataset.string(), 30);
        fixtures::write_planted_task_file(task.string());
        fixtures::write_file(script.string(), fixtures::planted_script_text());
        fixtures::write_file(conf.string(),
                             "task = " + task.string() + "\n" +
                             "data = " + dataset.string() + "\n" +
                             "backend-chat = mock:" + script.string() + "\n" +
                             "budget = 50\nseed = 7\nworkers = 2\n");

        const auto start = std::chrono::steady_clock::now();
        const fs::path out1 = tmp / "out1";
        const int code = run_cli("optimize --config " + conf.string() + " --out " +
                                 out1.string() + " > " + (tmp / "stdout1.txt").string());
        const auto elapsed = std::chrono::duration_cast<std::chrono::seconds>(
                                 std::chrono::steady_clock::now() - start)
                                 .count();
        REQUIRE_A(code == 0);
        REQUIRE_A(elapsed < 60);
        REQUIRE_A(fs::exists(out1 / "transcript.jsonl"));
        REQUIRE_A(fs::exists(out1 / "pool.json"));
        REQUIRE_A(fs::exists(out1 / "best_prompt.txt"));
        REQUIRE_A(fs::exists(out1 / "frontier.csv"));
        const auto records = load_transcript((out1 / "transcript.jsonl").string());
        REQUIRE_A(records.front().at("record") == "header");
        REQUIRE_A(records.back().at("record") == "final");
        REQUIRE_A(records.back().at("spent").get<int>() <= 50);

        // same seed, mock and effective config: byte-identical transcript
        const fs::path first_copy = tmp / "transcript_first.jsonl";
        fs::copy_file(out1 / "transcript.jsonl", first_copy);
        REQUIRE_A(run_cli("optimize --config " + conf.string() + " --out " + out1.string() +
                          " > /dev/null") == 0);
        REQUIRE_A(fixtures::read_file(first_copy.string()) ==
                  fixtures::read_file((out1 / "transcript.jsonl").string()));

        // unreachable backend: BackendUnavailable exit code, no best-prompt file
        const fs::path out3 = tmp / "out3";
        const int bad = run_cli("optimize --config " + conf.string() +
                                " --backend-chat http://127.0.0.1:9 --out " + out3.string() +
                                " 2> /dev/null");
        REQUIRE_A(bad == 4);
        REQUIRE_A(!fs::exists(out3 / "best_prompt.txt"));

        // evaluation-only mode: the seed prompt passes text through, so every
        // test example scores privacy 0 (spans intact) and utility 1
        const fs::path out4 = tmp / "out4";
        const fs::path seed_prompt = tmp / "seed_prompt.txt";
        fixtures::write_file(seed_prompt.string(), std::string(kSeedInstruction) + "\n");
        REQUIRE_A(run_cli("evaluate --config " + conf.string() + " --prompt " +
                          seed_prompt.string() + " --split test --out " + out4.string() +
                          " > /dev/null") == 0);
        REQUIRE_A(fs::exists(out4 / "evaluation.json"));
        {
            std::ifstream in((out4 / "evaluation.json").string());
            const json report = json::parse(in);
            REQUIRE_A(report.at("mean_privacy") == 0.0);
            REQUIRE_A(report.at("mean_utility") == 1.0);
            REQUIRE_A(report.at("aggregate") == 0.5);
            double sum_privacy = 0.0, sum_utility = 0.0;
            for (const auto& row : report.at("per_example")) {
                sum_privacy += row.at("privacy").get<double>();
                sum_utility += row.at("utility").get<double>();
            }
            const double n = report.at("per_example").size();
            REQUIRE_A(report.at("mean_privacy").get<double>() == sum_privacy / n);
            REQUIRE_A(report.at("mean_utility").get<double>() == sum_utility / n);
        }

        // a 222-example corpus leaves the test split empty: data error, no report
        const fs::path dataset222 = tmp / "data222.jsonl";
        fixtures::write_planted_dataset(dataset222.string(), 222);
        const fs::path out5 = tmp / "out5";
        REQUIRE_A(run_cli("evaluate --config " + conf.string() + " --data " +
                          dataset222.string() + " --prompt " + seed_prompt.string() +
                          " --split test --out " + out5.string() + " 2> /dev/null") == 3);
        REQUIRE_A(!fs::exists(out5 / "evaluation.json"));

        // frontier and curve exports from the finished transcript
        const fs::path frontier_json = tmp / "frontier.json";
        REQUIRE_A(run_cli("frontier --transcript " + (out1 / "transcript.jsonl").string() +
                          " --format json --out " + frontier_json.string() +
                          " > /dev/null") == 0);
        {
            std::ifstream in(frontier_json.string());
            const json points = json::parse(in);
            REQUIRE_A(points.is_array());
            REQUIRE_A(!points.empty());
        }
        const fs::path merged_csv = tmp / "merged.csv";
        REQUIRE_A(run_cli("frontier --transcript " + (out1 / "transcript.jsonl").string() +
                          " --transcript " + (out1 / "transcript.jsonl").string() +
                          " --out " + merged_csv.string() + " > /dev/null") == 0);
        REQUIRE_A(fs::exists(merged_csv));
        const fs::path curve_csv = tmp / "curve.csv";
        REQUIRE_A(run_cli("curve --transcript " + (out1 / "transcript.jsonl").string() +
                          " --out " + curve_csv.string() + " > /dev/null") == 0);
        REQUIRE_A(fixtures::read_file(curve_csv.string()).rfind(
                      "budget_spent,best_valid_aggregate\n", 0) == 0);

        // mode-comparison driver over the same config
        const fs::path out6 = tmp / "out6";
        REQUIRE_A(run_cli("ablation --config " + conf.string() + " --modes two_stage" +
                          " --seeds 1 --out " + out6.string() + " > /dev/null") == 0);
        REQUIRE_A(fs::exists(out6 / "ablation.csv"));
        REQUIRE_A(fs::exists(out6 / "curve_two_stage_1.csv"));
    });

    fs::remove_all(tmp);
    if (failures == 0) {
        std::cout << "all acceptance criteria passed\n";
        return 0;
    }
    std::cout << failures << " acceptance criteria FAILED\n";
    return 1;
}
