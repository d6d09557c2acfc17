#pragma once

#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anonopt/errors.hpp"
#include "anonopt/text.hpp"

namespace anonopt {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Metric selection
// ---------------------------------------------------------------------------

enum class PrivacyMetric { reidentify_top3, attribute_match, span_recall, pii_leakage, style_distance };
enum class UtilityMetric { label_accuracy, rouge1_f, semantic_similarity, response_quality, qa_accuracy };
enum class Aggregation { mean }; // fixed in v1

inline const char* to_string(PrivacyMetric m) {
    switch (m) {
        case PrivacyMetric::reidentify_top3: return "reidentify_top3";
        case PrivacyMetric::attribute_match: return "attribute_match";
        case PrivacyMetric::span_recall: return "span_recall";
        case PrivacyMetric::pii_leakage: return "pii_leakage";
        case PrivacyMetric::style_distance: return "style_distance";
    }
    return "?";
}

inline const char* to_string(UtilityMetric m) {
    switch (m) {
        case UtilityMetric::label_accuracy: return "label_accuracy";
        case UtilityMetric::rouge1_f: return "rouge1_f";
        case UtilityMetric::semantic_similarity: return "semantic_similarity";
        case UtilityMetric::response_quality: return "response_quality";
        case UtilityMetric::qa_accuracy: return "qa_accuracy";
    }
    return "?";
}

inline PrivacyMetric privacy_metric_from_string(const std::string& s) {
    if (s == "reidentify_top3") return PrivacyMetric::reidentify_top3;
    if (s == "attribute_match") return PrivacyMetric::attribute_match;
    if (s == "span_recall") return PrivacyMetric::span_recall;
    if (s == "pii_leakage") return PrivacyMetric::pii_leakage;
    if (s == "style_distance") return PrivacyMetric::style_distance;
    throw ConfigError("unknown privacy metric '" + s + "'");
}

inline UtilityMetric utility_metric_from_string(const std::string& s) {
    if (s == "label_accuracy") return UtilityMetric::label_accuracy;
    if (s == "rouge1_f") return UtilityMetric::rouge1_f;
    if (s == "semantic_similarity") return UtilityMetric::semantic_similarity;
    if (s == "response_quality") return UtilityMetric::response_quality;
    if (s == "qa_accuracy") return UtilityMetric::qa_accuracy;
    throw ConfigError("unknown utility metric '" + s + "'");
}

// ---------------------------------------------------------------------------
// TaskSpec
// ---------------------------------------------------------------------------

// One anonymization task: what must be hidden, what must be preserved, and
// the judge prompts used to measure both.
struct TaskSpec {
    std::string task_id;
    PrivacyMetric privacy_metric = PrivacyMetric::span_recall;
    UtilityMetric utility_metric = UtilityMetric::rouge1_f;
    std::map<std::string, std::string> judge_templates;
    Aggregation aggregation = Aggregation::mean;
};

// ---------------------------------------------------------------------------
// Example
// ---------------------------------------------------------------------------

// One input record with its task-specific gold labels. The anonymized
// rewrite is an operation result, never stored here.
struct Example {
    std::string id;
    std::string text;
    json labels = json::object();

    bool has_label(const std::string& key) const {
        return labels.is_object() && labels.contains(key);
    }
    std::string label_string(const std::string& key) const {
        if (!has_label(key)) throw SchemaError(id, key);
        const json& v = labels.at(key);
        if (v.is_string()) return v.get<std::string>();
        return v.dump();
    }
    std::vector<std::string> label_strings(const std::string& key) const {
        if (!has_label(key)) throw SchemaError(id, key);
        const json& v = labels.at(key);
        std::vector<std::string> out;
        if (v.is_array()) {
            for (const auto& e : v) {
                out.push_back(e.is_string() ? e.get<std::string>() : e.dump());
            }
        } else if (v.is_string()) {
            out.push_back(v.get<std::string>());
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// ScoreVector
// ---------------------------------------------------------------------------

inline double clamp01(double v) {
    if (!std::isfinite(v)) return 0.0; // pessimistic on NaN/inf from judges
    if (v < 0.0) return 0.0;
    if (v > 1.0) return 1.0;
    return v;
}

struct ScoreVector {
    double privacy = 0.0;
    double utility = 0.0;

    static ScoreVector clamped(double privacy, double utility) {
        return ScoreVector{clamp01(privacy), clamp01(utility)};
    }
};

inline double aggregate(const ScoreVector& s) { return (s.privacy + s.utility) / 2.0; }

// Pareto dominance: at least as good on both axes, strictly better on one.
inline bool dominates(const ScoreVector& a, const ScoreVector& b) {
    return a.privacy >= b.privacy && a.utility >= b.utility &&
           (a.privacy > b.privacy || a.utility > b.utility);
}

// ---------------------------------------------------------------------------
// CandidatePrompt
// ---------------------------------------------------------------------------

enum class Stage { seed, warmstart, refinement };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::seed: return "seed";
        case Stage::warmstart: return "warmstart";
        case Stage::refinement: return "refinement";
    }
    return "?";
}

inline Stage stage_from_string(const std::string& s) {
    if (s == "seed") return Stage::seed;
    if (s == "warmstart") return Stage::warmstart;
    if (s == "refinement") return Stage::refinement;
    throw DataError("unknown stage '" + s + "'");
}

// Content-addressed id: identical (instruction, parent) pairs dedupe instead
// of bloating the pool.
inline std::string make_candidate_id(const std::string& instruction,
                                     const std::string& parent_id) {
    return hex64(fnv1a64(instruction + '\x1f' + parent_id));
}

struct CandidatePrompt {
    std::string candidate_id;
    std::string instruction;
    std::optional<std::string> parent_id;
    Stage stage_created = Stage::seed;
    std::map<std::string, ScoreVector> per_instance; // example_id -> score
    std::optional<ScoreVector> aggregate_score;      // mean over evaluated instances
    std::map<std::string, int> eval_count;           // example_id -> evaluations
    int creation_index = 0;                          // tie-break: earliest wins

    void record_score(const std::string& example_id, const ScoreVector& s) {
        per_instance[example_id] = s;
        eval_count[example_id] += 1;
        recompute_aggregate();
    }

    void recompute_aggregate() {
        if (per_instance.empty()) {
            aggregate_score.reset();
            return;
        }
        double p = 0.0, u = 0.0;
        for (const auto& [_, s] : per_instance) {
            p += s.privacy;
            u += s.utility;
        }
        const double n = static_cast<double>(per_instance.size());
        aggregate_score = ScoreVector{p / n, u / n};
    }

    double coverage(size_t valid_size) const {
        if (valid_size == 0) return 0.0;
        return static_cast<double>(per_instance.size()) / static_cast<double>(valid_size);
    }
};

inline CandidatePrompt make_seed_candidate(const std::string& seed_instruction) {
    CandidatePrompt c;
    c.instruction = seed_instruction;
    c.candidate_id = make_candidate_id(seed_instruction, "");
    c.stage_created = Stage::seed;
    c.creation_index = 0;
    return c;
}

inline CandidatePrompt make_child_candidate(const std::string& instruction,
                                            const CandidatePrompt& parent,
                                            Stage stage, int creation_index) {
    CandidatePrompt c;
    c.instruction = instruction;
    c.parent_id = parent.candidate_id;
    c.candidate_id = make_candidate_id(instruction, parent.candidate_id);
    c.stage_created = stage;
    c.creation_index = creation_index;
    return c;
}

// ---------------------------------------------------------------------------
// BudgetLedger
// ---------------------------------------------------------------------------

enum class Charge { anonymize, propose };

inline const char* to_string(Charge c) {
    return c == Charge::anonymize ? "anonymize" : "propose";
}

// Monotone counter of countable model forward passes against a fixed limit.
// Charges are linearizable; a Reservation spans an in-flight call so that
// retries charge once and failed calls charge nothing, while the limit is
// never overshot by concurrent workers.
class BudgetLedger {
public:
    explicit BudgetLedger(int limit) : limit_(limit) {
        if (limit <= 0) throw ConfigError("budget limit must be positive");
    }

    BudgetLedger(const BudgetLedger&) = delete;
    BudgetLedger& operator=(const BudgetLedger&) = delete;

    int limit() const { return limit_; }

    int spent() const {
        std::lock_guard<std::mutex> lock(mu_);
        return spent_;
    }

    int remaining() const {
        std::lock_guard<std::mutex> lock(mu_);
        return limit_ - spent_ - reserved_;
    }

    std::map<std::string, int> breakdown() const {
        std::lock_guard<std::mutex> lock(mu_);
        return {{"anonymize", by_category_[0]}, {"propose", by_category_[1]}};
    }

    // Immediate charge; false means the charge would exceed the limit and
    // nothing was recorded.
    bool try_charge(Charge category, int n) {
        std::lock_guard<std::mutex> lock(mu_);
        if (n < 1 || spent_ + reserved_ + n > limit_) return false;
        spent_ += n;
        by_category_[static_cast<int>(category)] += n;
        return true;
    }

    class Reservation {
    public:
        Reservation() = default;
        Reservation(BudgetLedger* ledger, Charge category, int n)
            : ledger_(ledger), category_(category), n_(n) {}
        Reservation(Reservation&& other) noexcept { *this = std::move(other); }
        Reservation& operator=(Reservation&& other) noexcept {
            release();
            ledger_ = other.ledger_;
            category_ = other.category_;
            n_ = other.n_;
            other.ledger_ = nullptr;
            return *this;
        }
        Reservation(const Reservation&) = delete;
        Reservation& operator=(const Reservation&) = delete;
        ~Reservation() { release(); }

        // Converts the reserved units into spent units.
        void commit() {
            if (!ledger_) return;
            std::lock_guard<std::mutex> lock(ledger_->mu_);
            ledger_->reserved_ -= n_;
            ledger_->spent_ += n_;
            ledger_->by_category_[static_cast<int>(category_)] += n_;
            ledger_ = nullptr;
        }

        // Frees the reserved units without spending them.
        void release() {
            if (!ledger_) return;
            std::lock_guard<std::mutex> lock(ledger_->mu_);
            ledger_->reserved_ -= n_;
            ledger_ = nullptr;
        }

        bool active() const { return ledger_ != nullptr; }

    private:
        BudgetLedger* ledger_ = nullptr;
        Charge category_ = Charge::anonymize;
        int n_ = 0;
    };

    // Throws BudgetExhausted when the units are not available.
    Reservation reserve(Charge category, int n) {
        std::lock_guard<std::mutex> lock(mu_);
        if (n < 1 || spent_ + reserved_ + n > limit_)
            throw BudgetExhausted("budget exhausted: spent " + std::to_string(spent_) +
                                  " of " + std::to_string(limit_));
        reserved_ += n;
        return Reservation(this, category, n);
    }

private:
    friend class Reservation;

    mutable std::mutex mu_;
    int limit_;
    int spent_ = 0;
    int reserved_ = 0;
    std::array<int, 2> by_category_ = {0, 0};
};

// ---------------------------------------------------------------------------
// DatasetSplits
// ---------------------------------------------------------------------------

struct DatasetSplits {
    std::vector<Example> train;
    std::vector<Example> valid;
    std::vector<Example> test;
    uint64_t split_seed = 0;
};

} // namespace anonopt
