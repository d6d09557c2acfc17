#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anonopt/errors.hpp"
#include "anonopt/optimizer.hpp"
#include "anonopt/text.hpp"
#include "anonopt/transcript.hpp"

namespace anonopt {

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

// (budget spent, best validation aggregate so far) at every admission event.
struct LearningCurve {
    struct Point {
        int budget_spent = 0;
        double best_valid_aggregate = 0.0;
    };
    std::vector<Point> points;

    std::string to_csv() const {
        std::string out = "budget_spent,best_valid_aggregate\n";
        for (const auto& p : points)
            out += std::to_string(p.budget_spent) + "," +
                   format_double(p.best_valid_aggregate, 6) + "\n";
        return out;
    }
};

inline LearningCurve emit_curve(const std::vector<nlohmann::json>& records) {
    if (records.empty()) throw EmptyTranscript("cannot emit a curve from an empty transcript");
    LearningCurve curve;
    double best = 0.0;
    bool any = false;
    for (const auto& r : records) {
        const std::string kind = r.value("record", "");
        if (kind != "seed_eval" && kind != "admit") continue;
        if (r.value("discarded", false)) continue;
        if (!r.contains("aggregate") || !r.contains("spent")) continue;
        const double agg = r["aggregate"].get<double>();
        if (!any || agg > best) best = agg;
        any = true;
        // Admissions at the same spend level collapse to the running best.
        const int spent = r["spent"].get<int>();
        if (!curve.points.empty() && curve.points.back().budget_spent == spent)
            curve.points.back().best_valid_aggregate = best;
        else
            curve.points.push_back({spent, best});
    }
    if (!any) throw EmptyTranscript("transcript has no admission events");
    return curve;
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

struct AblationRow {
    RunMode mode = RunMode::two_stage;
    uint64_t seed = 0;
    double final_privacy = 0.0;
    double final_utility = 0.0;
    double final_aggregate = 0.0;
    int spent = 0;
    std::string best_candidate;
    bool failed = false;
    std::string error;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    bool ordering_checked = false;
    bool ordering_holds = false;

    double mean_final(RunMode mode) const {
        double sum = 0.0;
        int n = 0;
        for (const auto& r : rows) {
            if (r.mode != mode || r.failed) continue;
            sum += r.final_aggregate;
            ++n;
        }
        return n == 0 ? 0.0 : sum / n;
    }

    std::string to_csv() const {
        std::string out = "mode,seed,final_privacy,final_utility,final_aggregate,spent,status\n";
        for (const auto& r : rows) {
            out += std::string(to_string(r.mode)) + "," + std::to_string(r.seed) + "," +
                   format_double(r.final_privacy, 6) + "," + format_double(r.final_utility, 6) +
                   "," + format_double(r.final_aggregate, 6) + "," + std::to_string(r.spent) +
                   "," + (r.failed ? "error:" + r.error : std::string("ok")) + "\n";
        }
        return out;
    }
};

using AblationRunner = std::function<AblationRow(RunMode, uint64_t seed)>;

// Runs every mode x seed combination and tabulates the final full-validation
// aggregates. With check_ordering set (planted-optimum landscapes), verifies
// that the two-stage mean is at least each single-mode mean.
inline AblationTable run_ablation_suite(const AblationRunner& run_one,
                                        const std::vector<RunMode>& modes,
                                        const std::vector<uint64_t>& seeds,
                                        bool check_ordering = false) {
    AblationTable table;
    for (const RunMode mode : modes) {
        for (const uint64_t seed : seeds) {
            AblationRow row;
            try {
                row = run_one(mode, seed);
                row.mode = mode;
                row.seed = seed;
            } catch (const std::exception& e) {
                row.mode = mode;
                row.seed = seed;
                row.failed = true;
                row.error = e.what();
            }
            table.rows.push_back(std::move(row));
        }
    }
    if (check_ordering) {
        table.ordering_checked = true;
        const bool has_two_stage =
            std::find(modes.begin(), modes.end(), RunMode::two_stage) != modes.end();
        if (has_two_stage) {
            const double full = table.mean_final(RunMode::two_stage);
            table.ordering_holds = true;
            for (const RunMode mode : modes) {
                if (mode == RunMode::two_stage) continue;
                if (full < table.mean_final(mode)) table.ordering_holds = false;
            }
        }
    }
    return table;
}

} // namespace anonopt
