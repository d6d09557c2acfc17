#pragma once

#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anonopt/core.hpp"
#include "anonopt/errors.hpp"
#include "anonopt/metrics.hpp"
#include "anonopt/rng.hpp"

namespace anonopt {

// Datasets are line-delimited JSON: {"id": ..., "text": ..., "labels": {...}}
// with one canonical schema across tasks; label keys vary per task.

inline json example_to_json(const Example& ex) {
    return json{{"id", ex.id}, {"text", ex.text}, {"labels", ex.labels}};
}

inline Example example_from_json(const json& j) {
    Example ex;
    ex.id = j.at("id").get<std::string>();
    ex.text = j.at("text").get<std::string>();
    ex.labels = j.value("labels", json::object());
    return ex;
}

// Checks the task's label requirements for one record. gold_spans must be a
// nonempty list when the task scores span masking.
inline void validate_example(const Example& ex, const TaskSpec& task) {
    auto check = [&](const std::vector<std::string>& keys) {
        for (const auto& key : keys) {
            if (!ex.has_label(key)) throw SchemaError(ex.id, key);
            if (key == "gold_spans") {
                const json& v = ex.labels.at(key);
                if (!v.is_array() || v.empty()) throw SchemaError(ex.id, key);
            }
        }
    };
    check(required_label_keys(task.privacy_metric));
    check(required_label_keys(task.utility_metric));
}

inline std::vector<Example> parse_examples(std::istream& in, const TaskSpec& task,
                                           const std::string& path = "<stream>") {
    std::vector<Example> out;
    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(path, lineno, e.what());
        }
        Example ex;
        try {
            ex = example_from_json(j);
        } catch (const json::exception& e) {
            throw ParseError(path, lineno, e.what());
        }
        if (ex.id.empty()) throw ParseError(path, lineno, "empty id");
        if (!seen.insert(ex.id).second) throw DuplicateId(ex.id);
        validate_example(ex, task);
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::vector<Example> load_examples(const std::string& path, const TaskSpec& task) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset '" + path + "'");
    return parse_examples(in, task, path);
}

inline void save_examples(const std::vector<Example>& examples, std::ostream& out) {
    for (const auto& ex : examples) out << example_to_json(ex).dump() << "\n";
}

// Default protocol: seeded shuffle, 111 train + 111 valid, remainder test.
// Smaller corpora fall back to floor(0.4 * n) per split with a warning.
constexpr int kDefaultSplitSize = 111;

inline DatasetSplits split_examples(std::vector<Example> examples, uint64_t seed,
                                    std::ostream* warn = nullptr) {
    const size_t n = examples.size();
    size_t per_split = kDefaultSplitSize;
    if (n < 2 * kDefaultSplitSize) {
        per_split = static_cast<size_t>(0.4 * static_cast<double>(n));
        if (per_split < 3)
            throw TooFewExamples("dataset of " + std::to_string(n) +
                                 " examples is too small to split (need >= 3 per split)");
        if (warn)
            *warn << "warning: only " << n << " examples; using reduced splits of "
                  << per_split << "/" << per_split << "\n";
    }
    SplitMix64 rng(seed);
    rng.shuffle(examples);
    DatasetSplits splits;
    splits.split_seed = seed;
    splits.train.assign(examples.begin(), examples.begin() + per_split);
    splits.valid.assign(examples.begin() + per_split, examples.begin() + 2 * per_split);
    splits.test.assign(examples.begin() + 2 * per_split, examples.end());
    return splits;
}

// ---------------------------------------------------------------------------
// Task files
// ---------------------------------------------------------------------------

// Task file schema:
//   {"task_id": "...", "privacy_metric": "...", "utility_metric": "...",
//    "judge_templates": {...overrides...}}
inline TaskSpec task_from_json(const json& j) {
    TaskSpec task;
    try {
        task.task_id = j.at("task_id").get<std::string>();
        task.privacy_metric = privacy_metric_from_string(j.at("privacy_metric").get<std::string>());
        task.utility_metric = utility_metric_from_string(j.at("utility_metric").get<std::string>());
        if (j.contains("judge_templates")) {
            for (const auto& [name, tpl] : j.at("judge_templates").items())
                task.judge_templates[name] = tpl.get<std::string>();
        }
        if (j.value("aggregation", "mean") != "mean")
            throw ConfigError("only 'mean' aggregation is supported");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid task file: ") + e.what());
    }
    finalize_task(task);
    return task;
}

inline TaskSpec load_task(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open task file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("invalid task file '" + path + "': " + e.what());
    }
    return task_from_json(j);
}

} // namespace anonopt
