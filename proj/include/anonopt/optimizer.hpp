#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "anonopt/core.hpp"
#include "anonopt/gateway.hpp"
#include "anonopt/metrics.hpp"
#include "anonopt/rng.hpp"
#include "anonopt/transcript.hpp"

namespace anonopt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Run variants: the full two-stage pipeline, warm-start-only with scalar
// feedback, or refinement-only with rich feedback.
enum class RunMode { two_stage, simple_only, rich_only };

inline const char* to_string(RunMode m) {
    switch (m) {
        case RunMode::two_stage: return "two_stage";
        case RunMode::simple_only: return "simple_only";
        case RunMode::rich_only: return "rich_only";
    }
    return "?";
}

inline RunMode run_mode_from_string(const std::string& s) {
    if (s == "two_stage") return RunMode::two_stage;
    if (s == "simple_only") return RunMode::simple_only;
    if (s == "rich_only") return RunMode::rich_only;
    throw ConfigError("unknown run mode '" + s + "'");
}

// The universal seed instruction every run starts from.
inline const char* kSeedInstruction =
    "Given the field `text`, produce the field `anonymized_text`.";

struct OptimizerConfig {
    int budget = 1500;       // B, in countable forward passes
    int patience = 5;        // n, consecutive non-improving warm-start iterations
    double alpha = 0.3;      // validation sampling ratio in refinement
    int minibatch_size = 3;  // reflection minibatch
    uint64_t rng_seed = 0;
    RunMode mode = RunMode::two_stage;
    int workers = 4;

    bool stage2_enabled() const { return mode != RunMode::rich_only; }
    bool stage3_enabled() const { return mode == RunMode::two_stage; }
    bool rich_enabled() const { return mode != RunMode::simple_only; }
    // The warm-start-only variant keeps optimizing with scalar feedback for
    // the whole budget instead of stopping at the plateau.
    bool stage2_patience_enabled() const { return mode != RunMode::simple_only; }

    void validate() const {
        if (budget < 1) throw ConfigError("budget must be positive");
        if (patience < 1) throw ConfigError("patience must be positive");
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in (0, 1]");
        if (minibatch_size < 1) throw ConfigError("minibatch size must be positive");
        if (workers < 1) throw ConfigError("workers must be positive");
    }
};

// ---------------------------------------------------------------------------
// parallel_for: bounded fan-out with deterministic join
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
void parallel_for(size_t n, int workers, Fn fn) {
    if (n == 0) return;
    const size_t nthreads = std::min<size_t>(std::max(workers, 1), n);
    if (nthreads == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> threads;
    threads.reserve(nthreads);
    for (size_t t = 0; t < nthreads; ++t) {
        threads.emplace_back([&] {
            for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : threads) th.join();
    for (size_t i = 0; i < n; ++i)
        if (errors[i]) std::rethrow_exception(errors[i]);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Pool
// ---------------------------------------------------------------------------

struct InstanceFrontier {
    double best_aggregate = 0.0;
    std::vector<std::string> holders; // candidate ids tied at the best score
};

// Candidate population. After every update no member is dominated on the
// aggregate (privacy, utility) by another member, and the instance frontier
// maps every evaluated validation example to its best aggregate and holders.
class Pool {
public:
    bool contains(const std::string& candidate_id) const {
        return find(candidate_id) != nullptr;
    }

    const CandidatePrompt* find(const std::string& candidate_id) const {
        for (const auto& m : members_)
            if (m.candidate_id == candidate_id) return &m;
        return nullptr;
    }

    CandidatePrompt* find_mutable(const std::string& candidate_id) {
        for (auto& m : members_)
            if (m.candidate_id == candidate_id) return &m;
        return nullptr;
    }

    // Inserts the candidate and removes every member (possibly the new one)
    // dominated on aggregate. Returns the ids that were pruned.
    std::vector<std::string> insert_and_prune(CandidatePrompt candidate) {
        if (!contains(candidate.candidate_id)) members_.push_back(std::move(candidate));
        return prune_dominated();
    }

    std::vector<std::string> prune_dominated() {
        std::vector<bool> dominated(members_.size(), false);
        for (size_t i = 0; i < members_.size(); ++i) {
            if (!members_[i].aggregate_score) continue;
            for (size_t j = 0; j < members_.size(); ++j) {
                if (i == j || !members_[j].aggregate_score) continue;
                if (dominates(*members_[j].aggregate_score, *members_[i].aggregate_score)) {
                    dominated[i] = true;
                    break;
                }
            }
        }
        std::vector<std::string> pruned;
        std::vector<CandidatePrompt> kept;
        kept.reserve(members_.size());
        for (size_t i = 0; i < members_.size(); ++i) {
            if (dominated[i])
                pruned.push_back(members_[i].candidate_id);
            else
                kept.push_back(std::move(members_[i]));
        }
        members_ = std::move(kept);
        rebuild_frontier_index();
        return pruned;
    }

    void replace(const CandidatePrompt& updated) {
        if (CandidatePrompt* m = find_mutable(updated.candidate_id)) *m = updated;
        rebuild_frontier_index();
    }

    const std::vector<CandidatePrompt>& members() const { return members_; }
    const std::map<std::string, InstanceFrontier>& frontier_index() const { return frontier_; }

    void rebuild_frontier_index() {
        frontier_.clear();
        for (const auto& m : members_) {
            for (const auto& [example_id, score] : m.per_instance) {
                const double agg = aggregate(score);
                auto it = frontier_.find(example_id);
                if (it == frontier_.end()) {
                    frontier_[example_id] = InstanceFrontier{agg, {m.candidate_id}};
                } else if (agg > it->second.best_aggregate) {
                    it->second = InstanceFrontier{agg, {m.candidate_id}};
                } else if (agg == it->second.best_aggregate) {
                    it->second.holders.push_back(m.candidate_id);
                }
            }
        }
    }

private:
    std::vector<CandidatePrompt> members_; // creation order preserved
    std::map<std::string, InstanceFrontier> frontier_;
};

// GEPA-style parent selection: probability proportional to the number of
// validation instances on which the candidate holds the instance-level best
// aggregate; ties credit every co-holder. A lone seed is selected as-is.
inline const CandidatePrompt& select_parent(const Pool& pool, SplitMix64& rng) {
    const auto& members = pool.members();
    if (members.empty()) throw ConfigError("select_parent on an empty pool");
    if (members.size() == 1) return members[0];

    std::vector<uint64_t> weights(members.size(), 0);
    for (const auto& [_, frontier] : pool.frontier_index()) {
        for (const auto& holder : frontier.holders) {
            for (size_t i = 0; i < members.size(); ++i) {
                if (members[i].candidate_id == holder) {
                    ++weights[i];
                    break;
                }
            }
        }
    }
    const uint64_t total = std::accumulate(weights.begin(), weights.end(), uint64_t{0});
    if (total == 0) return members[0];
    uint64_t r = rng.next_below(total);
    for (size_t i = 0; i < members.size(); ++i) {
        if (r < weights[i]) return members[i];
        r -= weights[i];
    }
    return members.back();
}

// ---------------------------------------------------------------------------
// Adaptive validation sampler
// ---------------------------------------------------------------------------

// Round-robin subset sampler prioritizing under-evaluated examples. After
// any draw sequence, max(eval_counts) - min(eval_counts) <= 1.
class SamplerState {
public:
    SamplerState() = default;

    explicit SamplerState(const std::vector<Example>& valid) {
        ids_.reserve(valid.size());
        for (const auto& ex : valid) ids_.push_back(ex.id);
        counts_.assign(valid.size(), 0);
    }

    // Indices of the ceil(alpha*n) least-evaluated examples, ties broken by
    // stable index order; counts are incremented for the drawn examples.
    std::vector<size_t> draw(double alpha) {
        const size_t n = ids_.size();
        if (n == 0) return {};
        size_t k = static_cast<size_t>(std::ceil(alpha * static_cast<double>(n)));
        k = std::min(std::max<size_t>(k, 1), n);
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return counts_[a] < counts_[b];
        });
        order.resize(k);
        std::sort(order.begin(), order.end()); // stable presentation order
        for (size_t i : order) ++counts_[i];
        ++cursor_;
        return order;
    }

    const std::vector<int>& eval_counts() const { return counts_; }
    int cursor() const { return cursor_; }

    json to_json() const {
        json counts = json::object();
        for (size_t i = 0; i < ids_.size(); ++i) counts[ids_[i]] = counts_[i];
        return json{{"eval_counts", counts}, {"cursor", cursor_}};
    }

private:
    std::vector<std::string> ids_;
    std::vector<int> counts_;
    int cursor_ = 0;
};

inline std::vector<Example> sample_validation_subset(SamplerState& sampler,
                                                     const std::vector<Example>& valid,
                                                     double alpha) {
    std::vector<Example> subset;
    for (size_t i : sampler.draw(alpha)) subset.push_back(valid[i]);
    return subset;
}

// ---------------------------------------------------------------------------
// Evaluator: anonymize + score one candidate on examples, with caching
// ---------------------------------------------------------------------------

class Evaluator {
public:
    struct Outcome {
        std::string anonymized;
        MetricResult privacy;
        MetricResult utility;
        ScoreVector score;
    };

    struct BatchResult {
        std::vector<std::optional<Outcome>> outcomes; // index-aligned with input
        bool exhausted = false;                       // budget ran out mid-batch

        size_t evaluated() const {
            size_t n = 0;
            for (const auto& o : outcomes)
                if (o) ++n;
            return n;
        }

        // Mean aggregate over the evaluated outcomes.
        double mean_aggregate() const {
            double sum = 0.0;
            size_t n = 0;
            for (const auto& o : outcomes)
                if (o) {
                    sum += aggregate(o->score);
                    ++n;
                }
            return n == 0 ? 0.0 : sum / static_cast<double>(n);
        }
    };

    Evaluator(Gateway& gateway, TaskSpec task, int workers)
        : gateway_(gateway), engine_(gateway, std::move(task)), workers_(workers) {}

    MetricEngine& metrics() { return engine_; }
    const TaskSpec& task() const { return engine_.task(); }

    // Evaluates the candidate on each example, charging one anonymize unit
    // per uncached agent call. Budget for the whole batch is reserved in
    // example order before any call is made, so exhaustion cuts the batch at
    // a deterministic point. A null ledger makes the batch budget-exempt.
    BatchResult evaluate_batch(const CandidatePrompt& candidate,
                               const std::vector<Example>& examples, BudgetLedger* ledger) {
        BatchResult result;
        result.outcomes.resize(examples.size());

        struct Pending {
            size_t index;
            BudgetLedger::Reservation reservation;
        };
        std::vector<Pending> pending;
        for (size_t i = 0; i < examples.size(); ++i) {
            const std::string key = cache_key(candidate.candidate_id, examples[i].id);
            auto it = cache_.find(key);
            if (it != cache_.end()) {
                result.outcomes[i] = it->second;
                continue;
            }
            if (result.exhausted) continue;
            Pending p;
            p.index = i;
            if (ledger) {
                try {
                    p.reservation = ledger->reserve(Charge::anonymize, 1);
                } catch (const BudgetExhausted&) {
                    result.exhausted = true;
                    continue;
                }
            }
            pending.push_back(std::move(p));
        }

        std::vector<std::optional<Outcome>> fresh(pending.size());
        detail::parallel_for(pending.size(), workers_, [&](size_t k) {
            fresh[k] = run_one(candidate, examples[pending[k].index],
                               std::move(pending[k].reservation));
        });
        for (size_t k = 0; k < pending.size(); ++k) {
            const size_t i = pending[k].index;
            result.outcomes[i] = fresh[k];
            if (fresh[k])
                cache_[cache_key(candidate.candidate_id, examples[i].id)] = *fresh[k];
        }
        return result;
    }

    std::optional<Outcome> evaluate_one(const CandidatePrompt& candidate, const Example& example,
                                        BudgetLedger* ledger) {
        std::vector<Example> one{example};
        BatchResult r = evaluate_batch(candidate, one, ledger);
        if (r.exhausted && !r.outcomes[0]) throw BudgetExhausted("budget exhausted");
        return r.outcomes[0];
    }

    FeedbackRecord feedback(const Example& example, const Outcome& outcome,
                            Richness richness) const {
        if (richness == Richness::rich)
            return rich_feedback(engine_.task(), example, outcome.anonymized, outcome.privacy,
                                 outcome.utility);
        return base_feedback(outcome.privacy.value, outcome.utility.value);
    }

private:
    static std::string cache_key(const std::string& candidate_id, const std::string& example_id) {
        return candidate_id + '\x1f' + example_id;
    }

    Outcome run_one(const CandidatePrompt& candidate, const Example& example,
                    BudgetLedger::Reservation reservation) {
        ChatRequest req;
        req.system = candidate.instruction;
        req.user = example.text;
        req.temperature = kAgentTemperature;
        req.backend_tag = BackendTag::agent;

        Outcome outcome;
        try {
            outcome.anonymized = trim(gateway_.complete_chat_reserved(req, std::move(reservation)).text);
        } catch (const MalformedResponse&) {
            // The rewrite produced nothing usable; score it pessimistically
            // rather than killing the run. The reservation was released, so
            // the failed call is uncharged.
            outcome.privacy = MetricResult{0.0, {"agent returned no usable output"}};
            outcome.utility = MetricResult{0.0, {}};
            outcome.score = ScoreVector{0.0, 0.0};
            return outcome;
        }
        outcome.privacy = engine_.privacy(example, outcome.anonymized);
        outcome.utility = engine_.utility(example, outcome.anonymized);
        outcome.score = ScoreVector::clamped(outcome.privacy.value, outcome.utility.value);
        return outcome;
    }

    Gateway& gateway_;
    MetricEngine engine_;
    int workers_;
    std::unordered_map<std::string, Outcome> cache_;
};

// ---------------------------------------------------------------------------
// Reflective mutation
// ---------------------------------------------------------------------------

struct Trace {
    std::string input;
    std::string output;
    std::string feedback_text;
};

inline const char* kProposerSystemPrompt =
    "You are a prompt engineer improving a text anonymization instruction. "
    "Propose a revised instruction that fixes the weaknesses shown in the "
    "execution traces. Reply with the revised instruction only.";

inline std::string render_reflection_prompt(const CandidatePrompt& parent,
                                            const std::vector<Trace>& traces) {
    std::string out = "Current instruction:\n" + parent.instruction + "\n";
    for (size_t i = 0; i < traces.size(); ++i) {
        out += "\n--- Example " + std::to_string(i + 1) + " ---\n";
        out += "Input: " + traces[i].input + "\n";
        out += "Output: " + traces[i].output + "\n";
        out += "Feedback: " + traces[i].feedback_text + "\n";
    }
    out += "\nWrite the improved instruction.";
    return out;
}

// ---------------------------------------------------------------------------
// OptimizationRun: Algorithm driver
// ---------------------------------------------------------------------------

struct RunResult {
    CandidatePrompt best;
    ScoreVector final_score;
    int spent = 0;
    std::map<std::string, int> breakdown;
};

class OptimizationRun {
public:
    OptimizationRun(OptimizerConfig config, TaskSpec task, DatasetSplits splits,
                    Gateway& gateway, TranscriptWriter& transcript)
        : config_(config), splits_(std::move(splits)), gateway_(gateway),
          transcript_(transcript), ledger_(config.budget), rng_(config.rng_seed),
          sampler_(splits_.valid), evaluator_(gateway, std::move(task), config.workers) {
        config_.validate();
        if (splits_.valid.empty()) throw ConfigError("validation split is empty");
        if (splits_.train.empty()) throw ConfigError("training split is empty");
        if (config_.budget < static_cast<int>(splits_.valid.size()))
            throw BudgetExhausted("budget " + std::to_string(config_.budget) +
                                  " is too small to evaluate the seed once (needs " +
                                  std::to_string(splits_.valid.size()) + ")");
        seed_pool();
    }

    // Runs the whole pipeline and returns the selected candidate.
    RunResult run() {
        write_header();
        evaluate_seed();
        if (config_.stage2_enabled()) run_warmstart();
        if (config_.stage3_enabled() || config_.mode == RunMode::rich_only) run_refinement();
        return finalize();
    }

    Pool& pool() { return pool_; }
    BudgetLedger& ledger() { return ledger_; }
    SamplerState& sampler() { return sampler_; }
    Evaluator& evaluator() { return evaluator_; }
    const OptimizerConfig& config() const { return config_; }
    const std::vector<Example>& valid_split() const { return splits_.valid; }
    const std::vector<Example>& train_split() const { return splits_.train; }
    double best_so_far() const { return best_; }

    // Extra fields (e.g. the CLI's effective configuration) merged into the
    // header record under "config".
    void set_header_extra(json extra) { header_extra_ = std::move(extra); }

    void write_header() {
        json header{
            {"record", "header"},
            {"task", evaluator_.task().task_id},
            {"privacy_metric", to_string(evaluator_.task().privacy_metric)},
            {"utility_metric", to_string(evaluator_.task().utility_metric)},
            {"budget", config_.budget},
            {"patience", config_.patience},
            {"alpha", config_.alpha},
            {"minibatch", config_.minibatch_size},
            {"train_size", splits_.train.size()},
            {"valid_size", splits_.valid.size()},
            {"test_size", splits_.test.size()},
            {"split_seed", splits_.split_seed},
            {"seed", config_.rng_seed},
            {"mode", to_string(config_.mode)},
            {"rich_enabled", config_.rich_enabled()},
            {"stage3_enabled", config_.stage3_enabled()},
            {"workers", config_.workers},
        };
        if (!header_extra_.is_null()) header["config"] = header_extra_;
        transcript_.write(header);
    }

    void evaluate_seed() {
        CandidatePrompt* seed = pool_.find_mutable(seed_id_);
        auto batch = evaluator_.evaluate_batch(*seed, splits_.valid, &ledger_);
        apply_batch(*seed, splits_.valid, batch);
        pool_.rebuild_frontier_index();
        best_ = seed->aggregate_score ? aggregate(*seed->aggregate_score) : 0.0;
        transcript_.write(json{
            {"record", "seed_eval"},
            {"candidate", seed->candidate_id},
            {"instruction", seed->instruction},
            {"privacy", seed->aggregate_score->privacy},
            {"utility", seed->aggregate_score->utility},
            {"aggregate", best_},
            {"coverage", seed->coverage(splits_.valid.size())},
            {"spent", ledger_.spent()},
            {"best", best_},
        });
    }

    // One select -> propose -> gate -> validate cycle. Returns true when the
    // admitted candidate set a new best aggregate. Throws BudgetExhausted
    // when the budget ran out mid-iteration.
    bool iteration(int stage_number) {
        const bool refine = stage_number == 3;
        const Richness richness =
            (refine && config_.rich_enabled()) || config_.mode == RunMode::rich_only
                ? Richness::rich
                : Richness::base;
        const Stage stage = refine ? Stage::refinement : Stage::warmstart;

        ++iteration_count_;
        const CandidatePrompt parent = select_parent(pool_, rng_);
        transcript_.write(json{{"record", "iteration"},
                               {"iter", iteration_count_},
                               {"stage", stage_number},
                               {"parent", parent.candidate_id},
                               {"spent", ledger_.spent()}});

        // Reflection minibatch: uniform without replacement from the train split.
        std::vector<Example> minibatch;
        const size_t k = std::min<size_t>(config_.minibatch_size, splits_.train.size());
        for (size_t i : rng_.sample_indices(splits_.train.size(), k))
            minibatch.push_back(splits_.train[i]);

        auto parent_batch = evaluator_.evaluate_batch(parent, minibatch, &ledger_);
        if (parent_batch.exhausted)
            throw BudgetExhausted("budget exhausted while tracing the parent");

        std::vector<Trace> traces;
        for (size_t i = 0; i < minibatch.size(); ++i) {
            const auto& outcome = *parent_batch.outcomes[i];
            traces.push_back(Trace{minibatch[i].text, outcome.anonymized,
                                   evaluator_.feedback(minibatch[i], outcome, richness).text});
        }

        std::optional<CandidatePrompt> child;
        try {
            child = propose_mutation(parent, traces, &ledger_, stage);
        } catch (const MalformedResponse&) {
            transcript_.write(json{{"record", "proposal"},
                                   {"iter", iteration_count_},
                                   {"parent", parent.candidate_id},
                                   {"noop", true},
                                   {"reason", "malformed"}});
            return false;
        }
        if (!child) {
            transcript_.write(json{{"record", "proposal"},
                                   {"iter", iteration_count_},
                                   {"parent", parent.candidate_id},
                                   {"noop", true},
                                   {"reason", "identical"}});
            return false;
        }
        if (pool_.contains(child->candidate_id)) {
            transcript_.write(json{{"record", "proposal"},
                                   {"iter", iteration_count_},
                                   {"parent", parent.candidate_id},
                                   {"noop", true},
                                   {"reason", "duplicate"}});
            return false;
        }
        transcript_.write(json{{"record", "proposal"},
                               {"iter", iteration_count_},
                               {"parent", parent.candidate_id},
                               {"child", child->candidate_id},
                               {"noop", false}});

        if (minibatch_gate(parent, *child, minibatch, richness) == GateDecision::reject)
            return false;

        std::vector<Example> validation = refine
            ? sample_validation_subset(sampler_, splits_.valid, config_.alpha)
            : splits_.valid;
        const AdmitOutcome admitted = validate_and_admit(*child, validation);
        if (admitted.exhausted_after)
            throw BudgetExhausted("budget exhausted during validation");
        return admitted.improved;
    }

    enum class GateDecision { accept, reject };

    // Strict-improvement acceptance test on the shared minibatch.
    GateDecision minibatch_gate(const CandidatePrompt& parent, const CandidatePrompt& child,
                                const std::vector<Example>& minibatch, Richness) {
        auto parent_batch = evaluator_.evaluate_batch(parent, minibatch, &ledger_);
        if (parent_batch.exhausted)
            throw BudgetExhausted("budget exhausted while scoring the parent minibatch");
        auto child_batch = evaluator_.evaluate_batch(child, minibatch, &ledger_);
        if (child_batch.exhausted)
            throw BudgetExhausted("budget exhausted while gating the child");
        const double parent_mean = parent_batch.mean_aggregate();
        const double child_mean = child_batch.mean_aggregate();
        const bool accepted = child_mean > parent_mean; // ties rejected
        transcript_.write(json{{"record", "gate"},
                               {"iter", iteration_count_},
                               {"child", child.candidate_id},
                               {"parent_mean", parent_mean},
                               {"child_mean", child_mean},
                               {"accepted", accepted},
                               {"spent", ledger_.spent()}});
        return accepted ? GateDecision::accept : GateDecision::reject;
    }

    struct AdmitOutcome {
        bool admitted = false;
        bool improved = false;
        bool exhausted_after = false;
    };

    // Evaluates the child on the validation subset and inserts it, pruning
    // dominated members. Under exhaustion the child is kept only when at
    // least 80% of the subset was scored.
    AdmitOutcome validate_and_admit(CandidatePrompt child, const std::vector<Example>& subset) {
        AdmitOutcome out;
        auto batch = evaluator_.evaluate_batch(child, subset, &ledger_);
        const double coverage =
            subset.empty() ? 0.0
                           : static_cast<double>(batch.evaluated()) /
                                 static_cast<double>(subset.size());
        out.exhausted_after = batch.exhausted;
        if (batch.exhausted && coverage < 0.8) {
            transcript_.write(json{{"record", "admit"},
                                   {"iter", iteration_count_},
                                   {"candidate", child.candidate_id},
                                   {"discarded", true},
                                   {"coverage", coverage},
                                   {"spent", ledger_.spent()}});
            return out;
        }
        apply_batch(child, subset, batch);
        const ScoreVector agg = *child.aggregate_score;
        const double agg_value = aggregate(agg);
        const std::string child_id = child.candidate_id;
        const std::string instruction = child.instruction;
        const Stage stage = child.stage_created;
        const auto pruned = pool_.insert_and_prune(std::move(child));
        out.admitted = true;
        if (agg_value > best_) {
            best_ = agg_value;
            out.improved = true;
        }
        transcript_.write(json{{"record", "admit"},
                               {"iter", iteration_count_},
                               {"candidate", child_id},
                               {"stage_created", to_string(stage)},
                               {"instruction", instruction},
                               {"privacy", agg.privacy},
                               {"utility", agg.utility},
                               {"aggregate", agg_value},
                               {"coverage", coverage},
                               {"pruned", pruned},
                               {"spent", ledger_.spent()},
                               {"best", best_}});
        return out;
    }

    // Renders the reflection prompt and asks the proposer for a revised
    // instruction (one propose unit). Returns nullopt for a no-op proposal
    // (completion identical to the parent).
    std::optional<CandidatePrompt> propose_mutation(const CandidatePrompt& parent,
                                                    const std::vector<Trace>& traces,
                                                    BudgetLedger* ledger, Stage stage) {
        ChatRequest req;
        req.system = kProposerSystemPrompt;
        req.user = render_reflection_prompt(parent, traces);
        req.temperature = kAgentTemperature;
        req.backend_tag = BackendTag::proposer;
        const std::string instruction = trim(gateway_.complete_chat(req, ledger).text);
        if (instruction.empty())
            throw MalformedResponse("proposer returned an empty instruction");
        if (instruction == parent.instruction) return std::nullopt;
        return make_child_candidate(instruction, parent, stage, ++creation_counter_);
    }

    // Consecutive iterations that consume no budget (fully cached traces plus
    // a no-op or malformed proposal) can never change the run state, so the
    // loops bail out after this many rather than spin on a degenerate
    // backend. Real proposals always charge.
    static constexpr int kStallLimit = 25;

    // Stage 2: warm-start with basic feedback on the full validation set.
    void run_warmstart() {
        transcript_.write(json{{"record", "stage"}, {"stage", 2}, {"spent", ledger_.spent()}});
        int no_improvement = 0;
        int stalled = 0;
        while (ledger_.remaining() > 0) {
            const int spent_before = ledger_.spent();
            bool improved = false;
            try {
                improved = iteration(2);
            } catch (const BudgetExhausted&) {
                transcript_.write(json{{"record", "budget_exhausted"},
                                       {"stage", 2},
                                       {"spent", ledger_.spent()}});
                return;
            }
            no_improvement = improved ? 0 : no_improvement + 1;
            if (config_.stage2_patience_enabled() && no_improvement >= config_.patience) {
                transcript_.write(json{{"record", "patience_stop"},
                                       {"iterations", no_improvement},
                                       {"spent", ledger_.spent()}});
                return;
            }
            stalled = ledger_.spent() == spent_before ? stalled + 1 : 0;
            if (stalled >= kStallLimit) {
                transcript_.write(json{{"record", "stalled"},
                                       {"stage", 2},
                                       {"spent", ledger_.spent()}});
                return;
            }
        }
    }

    // Stage 3: refinement with rich feedback on sampled validation subsets,
    // running until the budget is exhausted (no early stopping).
    void run_refinement() {
        if (ledger_.remaining() <= 0) return; // Stage 3 only runs on leftover budget
        transcript_.write(json{{"record", "stage"}, {"stage", 3}, {"spent", ledger_.spent()}});
        int stalled = 0;
        while (ledger_.remaining() > 0) {
            const int spent_before = ledger_.spent();
            try {
                iteration(3);
            } catch (const BudgetExhausted&) {
                transcript_.write(json{{"record", "budget_exhausted"},
                                       {"stage", 3},
                                       {"spent", ledger_.spent()}});
                return;
            }
            stalled = ledger_.spent() == spent_before ? stalled + 1 : 0;
            if (stalled >= kStallLimit) {
                transcript_.write(json{{"record", "stalled"},
                                       {"stage", 3},
                                       {"spent", ledger_.spent()}});
                return;
            }
        }
    }

    // Final selection on the full validation set. Survivors missing coverage
    // are completed with budget-exempt evaluations, then the aggregate
    // argmax wins; ties go to the earliest-created candidate.
    RunResult finalize() {
        std::vector<CandidatePrompt> members = pool_.members();
        std::sort(members.begin(), members.end(),
                  [](const CandidatePrompt& a, const CandidatePrompt& b) {
                      return a.creation_index < b.creation_index;
                  });
        const CandidatePrompt* best = nullptr;
        double best_value = -1.0;
        for (auto& m : members) {
            if (m.per_instance.size() < splits_.valid.size()) {
                std::vector<Example> missing;
                for (const auto& ex : splits_.valid)
                    if (!m.per_instance.count(ex.id)) missing.push_back(ex);
                auto batch = evaluator_.evaluate_batch(m, missing, nullptr); // budget-exempt
                apply_batch(m, missing, batch);
                pool_.replace(m);
                transcript_.write(json{{"record", "finalize"},
                                       {"candidate", m.candidate_id},
                                       {"privacy", m.aggregate_score->privacy},
                                       {"utility", m.aggregate_score->utility},
                                       {"aggregate", aggregate(*m.aggregate_score)},
                                       {"coverage", m.coverage(splits_.valid.size())}});
            }
            const double value = aggregate(*m.aggregate_score);
            if (value > best_value) {
                best_value = value;
                best = &m;
            }
        }
        // Full-coverage rescoring can leave stale trade-offs dominated; the
        // argmax itself can never be (a dominator would out-aggregate it).
        pool_.prune_dominated();
        RunResult result;
        result.best = *best;
        result.final_score = *best->aggregate_score;
        result.spent = ledger_.spent();
        result.breakdown = ledger_.breakdown();
        transcript_.write(json{{"record", "final"},
                               {"candidate", result.best.candidate_id},
                               {"instruction", result.best.instruction},
                               {"privacy", result.final_score.privacy},
                               {"utility", result.final_score.utility},
                               {"aggregate", aggregate(result.final_score)},
                               {"spent", result.spent},
                               {"breakdown", result.breakdown}});
        return result;
    }

    json pool_checkpoint() const {
        json candidates = json::array();
        for (const auto& m : pool_.members()) {
            json per_instance = json::object();
            for (const auto& [id, s] : m.per_instance)
                per_instance[id] = json{{"privacy", s.privacy}, {"utility", s.utility}};
            json entry{{"candidate_id", m.candidate_id},
                       {"instruction", m.instruction},
                       {"stage", to_string(m.stage_created)},
                       {"per_instance", per_instance},
                       {"eval_count", m.eval_count},
                       {"creation_index", m.creation_index}};
            if (m.parent_id) entry["parent_id"] = *m.parent_id;
            if (m.aggregate_score)
                entry["aggregate"] = json{{"privacy", m.aggregate_score->privacy},
                                          {"utility", m.aggregate_score->utility}};
            candidates.push_back(entry);
        }
        return json{{"candidates", candidates},
                    {"sampler", sampler_.to_json()},
                    {"budget", json{{"limit", ledger_.limit()},
                                    {"spent", ledger_.spent()},
                                    {"breakdown", ledger_.breakdown()}}},
                    {"rng_seed", config_.rng_seed}};
    }

private:
    void seed_pool() {
        CandidatePrompt seed = make_seed_candidate(kSeedInstruction);
        seed_id_ = seed.candidate_id;
        pool_.insert_and_prune(std::move(seed));
    }

    // Copies batch outcomes into the candidate's per-instance map.
    static void apply_batch(CandidatePrompt& candidate, const std::vector<Example>& examples,
                            const Evaluator::BatchResult& batch) {
        for (size_t i = 0; i < examples.size(); ++i)
            if (batch.outcomes[i]) candidate.record_score(examples[i].id, batch.outcomes[i]->score);
    }

    OptimizerConfig config_;
    DatasetSplits splits_;
    Gateway& gateway_;
    TranscriptWriter& transcript_;
    BudgetLedger ledger_;
    SplitMix64 rng_;
    SamplerState sampler_;
    Evaluator evaluator_;
    Pool pool_;
    std::string seed_id_;
    json header_extra_;
    double best_ = 0.0;
    int iteration_count_ = 0;
    int creation_counter_ = 0;
};

} // namespace anonopt
