#pragma once

// Shared test fixtures: a synthetic span-masking dataset with a planted
// two-token optimum, and the mock script that realizes the landscape.
//
// Directive tokens and what the scripted agent does with them:
//   (none)                          passthrough            privacy 0.0, utility 1.0
//   REDACT-NAMES                    mask capitalized words privacy 0.5, utility ~0.91
//   REDACT-NUMBERS                  mask digit tokens      privacy 0.5, utility ~0.91
//   REDACT-NAMES + REDACT-NUMBERS   both                   privacy 1.0, utility ~0.83
// The unique aggregate optimum is the two-token instruction. The scripted
// proposer suggests REDACT-NAMES from any trace, but REDACT-NUMBERS only
// when the rich findings list the leaked numbers, so scalar-only runs
// plateau at one token.

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "anonopt/core.hpp"
#include "anonopt/dataset.hpp"
#include "anonopt/gateway.hpp"
#include "anonopt/metrics.hpp"
#include "anonopt/optimizer.hpp"

namespace fixtures {

inline const char* kTokenNames = "REDACT-NAMES";
inline const char* kTokenNumbers = "REDACT-NUMBERS";

inline std::vector<anonopt::Example> planted_examples(int n) {
    static const char* first[] = {"Alice", "Bruno", "Carla", "Derek", "Elena",
                                  "Felix", "Greta", "Henry", "Irene", "Jonas"};
    static const char* last[] = {"Marlow", "Norris", "Olsen", "Petrov", "Quinn",
                                 "Ruiz", "Salter", "Tanaka", "Unwin", "Vance"};
    std::vector<anonopt::Example> out;
    for (int i = 0; i < n; ++i) {
        const std::string name =
            std::string(first[i % 10]) + " " + last[(i / 10) % 10];
        const std::string phone = "555-0" + std::to_string(100 + i);
        anonopt::Example ex;
        ex.id = "ex" + std::to_string(i);
        ex.text = "case note " + std::to_string(i) + ": client " + name +
                  " phoned from " + phone +
                  " asking about the delayed shipment of garden tools and requested a "
                  "refund before friday";
        ex.labels = anonopt::json{{"gold_spans", {name, phone}}};
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::string planted_script_text() {
    return R"(# planted-optimum landscape
rule system="REDACT-NAMES&REDACT-NUMBERS"
respond {user:redact_caps,redact_digits}

rule system="REDACT-NAMES"
respond {user:redact_caps}

rule system="REDACT-NUMBERS"
respond {user:redact_digits}

# proposer under scalar feedback: only the name redaction idea
rule system="Propose a revised instruction"
respond Anonymize the text. Replace personal names with placeholders. REDACT-NAMES

# proposer when rich findings itemize the leaked numbers
rule system="Propose a revised instruction" user="Remaining Sensitive Entities&REDACT-NAMES"
respond Anonymize the text. Replace personal names and phone numbers with placeholders. REDACT-NAMES REDACT-NUMBERS

rule default
respond {user}
)";
}

inline anonopt::MockScript planted_script() {
    return anonopt::MockScript::parse(planted_script_text());
}

inline anonopt::TaskSpec planted_task() {
    anonopt::TaskSpec task;
    task.task_id = "planted-span-masking";
    task.privacy_metric = anonopt::PrivacyMetric::span_recall;
    task.utility_metric = anonopt::UtilityMetric::rouge1_f;
    anonopt::finalize_task(task);
    return task;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

inline void write_planted_dataset(const std::string& path, int n) {
    std::ofstream out(path);
    anonopt::save_examples(planted_examples(n), out);
}

inline void write_planted_task_file(const std::string& path) {
    write_file(path, R"({"task_id": "planted-span-masking", "privacy_metric": "span_recall", "utility_metric": "rouge1_f"})"
                     "\n");
}

inline std::string data_dir() { return ANONOPT_TEST_DATA_DIR; }

inline std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

// ---------------------------------------------------------------------------
// Fuzzed optimizer runs: random landscapes, budgets and run modes for the
// invariant property suite. Rule specificities are kept distinct so no run
// trips AmbiguousScript.
// ---------------------------------------------------------------------------

struct FuzzCase {
    std::string script;
    anonopt::OptimizerConfig config;
    int n_examples = 0;
};

inline FuzzCase make_fuzz_case(anonopt::SplitMix64& rng) {
    using anonopt::RunMode;
    FuzzCase fuzz;
    fuzz.n_examples = 8 + static_cast<int>(rng.next_below(32));
    const int valid_size = static_cast<int>(0.4 * fuzz.n_examples);

    anonopt::OptimizerConfig& cfg = fuzz.config;
    cfg.budget = valid_size + static_cast<int>(rng.next_below(300));
    cfg.patience = 1 + static_cast<int>(rng.next_below(6));
    cfg.alpha = 0.1 + 0.1 * static_cast<double>(rng.next_below(10));
    cfg.minibatch_size = 1 + static_cast<int>(rng.next_below(4));
    cfg.workers = 1 + static_cast<int>(rng.next_below(4));
    cfg.rng_seed = rng.next();
    switch (rng.next_below(3)) {
        case 0: cfg.mode = RunMode::two_stage; break;
        case 1: cfg.mode = RunMode::simple_only; break;
        default: cfg.mode = RunMode::rich_only; break;
    }

    const char* transforms[] = {"{user:redact_caps}", "{user:redact_digits}",
                                "{user:redact_caps,redact_digits}", "{user}",
                                "{user:drop_all}"};
    std::string script;
    script += "rule system=\"REDACT-NAMES&REDACT-NUMBERS\"\nrespond " +
              std::string(transforms[rng.next_below(5)]) + "\n";
    script += "rule system=\"REDACT-NAMES\"\nrespond " +
              std::string(transforms[rng.next_below(5)]) + "\n";
    script += "rule system=\"REDACT-NUMBERS\"\nrespond " +
              std::string(transforms[rng.next_below(5)]) + "\n";

    // proposer rules: sometimes useful, sometimes junk, no-ops or empty
    const std::string proposals[] = {
        "Anonymize the text. REDACT-NAMES",
        "Anonymize the text. REDACT-NUMBERS",
        "Anonymize the text. REDACT-NAMES REDACT-NUMBERS",
        "Do something unrelated entirely.",
        std::string(anonopt::kSeedInstruction), // no-op against the seed
        "",                                     // malformed proposal
    };
    script += "rule system=\"Propose a revised instruction\"\nrespond " +
              proposals[rng.next_below(6)] + "\n";
    script += "rule system=\"Propose a revised instruction\" user=\"REDACT-NAMES\"\nrespond " +
              proposals[rng.next_below(6)] + "\n";
    script +=
        "rule system=\"Propose a revised instruction\" user=\"Remaining Sensitive Entities\"\n"
        "respond " + proposals[rng.next_below(6)] + "\n";
    script += "rule default\nrespond {user}\n";
    fuzz.script = script;
    return fuzz;
}

// No pool member may dominate another on aggregate.
inline bool pool_is_pure(const anonopt::Pool& pool) {
    const auto& members = pool.members();
    for (size_t i = 0; i < members.size(); ++i) {
        for (size_t j = 0; j < members.size(); ++j) {
            if (i == j) continue;
            if (!members[i].aggregate_score || !members[j].aggregate_score) continue;
            if (anonopt::dominates(*members[i].aggregate_score, *members[j].aggregate_score))
                return false;
        }
    }
    return true;
}

inline bool counts_are_fair(const std::vector<int>& counts) {
    if (counts.empty()) return true;
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    return *hi - *lo <= 1;
}

} // namespace fixtures
