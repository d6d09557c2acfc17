#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anonopt/core.hpp"
#include "anonopt/errors.hpp"
#include "anonopt/optimizer.hpp"
#include "anonopt/transcript.hpp"

namespace anonopt {

// One point on the discovered privacy-utility trade-off menu.
struct FrontierPoint {
    std::string candidate_id;
    std::string instruction;
    double privacy = 0.0;
    double utility = 0.0;
    std::string stage;
    double eval_coverage = 0.0;
    std::string source; // provenance tag for merged frontiers
};

// Maximal non-dominated subset over (privacy, utility) via a privacy-sorted
// sweep (O(n log n) for two objectives). Duplicated points are mutually
// non-dominating and all survive. Input order is preserved.
inline std::vector<FrontierPoint> non_dominated(const std::vector<FrontierPoint>& points) {
    const size_t n = points.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return points[a].privacy > points[b].privacy;
    });

    std::vector<bool> keep(n, false);
    double best_utility = -1.0;
    size_t i = 0;
    while (i < n) {
        // one group of equal privacy
        size_t j = i;
        double group_max = -1.0;
        while (j < n && points[order[j]].privacy == points[order[i]].privacy) {
            group_max = std::max(group_max, points[order[j]].utility);
            ++j;
        }
        if (group_max > best_utility) {
            for (size_t k = i; k < j; ++k)
                if (points[order[k]].utility == group_max) keep[order[k]] = true;
            best_utility = group_max;
        }
        i = j;
    }

    std::vector<FrontierPoint> out;
    for (size_t k = 0; k < n; ++k)
        if (keep[k]) out.push_back(points[k]);
    return out;
}

inline std::vector<FrontierPoint> points_from_pool(const Pool& pool, size_t valid_size,
                                                   const std::string& source = "") {
    std::vector<FrontierPoint> out;
    for (const auto& m : pool.members()) {
        if (!m.aggregate_score) continue;
        FrontierPoint p;
        p.candidate_id = m.candidate_id;
        p.instruction = m.instruction;
        p.privacy = m.aggregate_score->privacy;
        p.utility = m.aggregate_score->utility;
        p.stage = to_string(m.stage_created);
        p.eval_coverage = m.coverage(valid_size);
        p.source = source;
        out.push_back(std::move(p));
    }
    return out;
}

// The full explored set: every candidate the transcript ever scored keeps
// its latest recorded scores, including candidates later pruned from the
// live pool.
inline std::vector<FrontierPoint> points_from_transcript(
    const std::vector<nlohmann::json>& records, const std::string& source = "") {
    std::map<std::string, FrontierPoint> latest;
    std::vector<std::string> order;
    size_t valid_size = 0;
    for (const auto& r : records) {
        const std::string kind = r.value("record", "");
        if (kind == "header") {
            valid_size = r.value("valid_size", size_t{0});
            continue;
        }
        if (kind != "seed_eval" && kind != "admit" && kind != "finalize") continue;
        if (r.value("discarded", false)) continue;
        const std::string id = r.contains("candidate") ? r["candidate"].get<std::string>() : "";
        if (id.empty() || !r.contains("privacy")) continue;
        auto it = latest.find(id);
        if (it == latest.end()) {
            order.push_back(id);
            FrontierPoint p;
            p.candidate_id = id;
            p.stage = kind == "seed_eval" ? "seed" : r.value("stage_created", "");
            p.source = source;
            it = latest.emplace(id, std::move(p)).first;
        }
        FrontierPoint& p = it->second;
        if (r.contains("instruction")) p.instruction = r["instruction"].get<std::string>();
        p.privacy = r["privacy"].get<double>();
        p.utility = r["utility"].get<double>();
        if (r.contains("coverage")) p.eval_coverage = r["coverage"].get<double>();
    }
    (void)valid_size;
    std::vector<FrontierPoint> out;
    for (const auto& id : order) out.push_back(latest.at(id));
    return out;
}

inline std::vector<FrontierPoint> extract_frontier(const std::vector<FrontierPoint>& explored) {
    if (explored.empty()) throw EmptyTranscript("no evaluated candidates to extract from");
    return non_dominated(explored);
}

inline std::vector<FrontierPoint> extract_frontier(const std::vector<nlohmann::json>& records,
                                                   const std::string& source = "") {
    return extract_frontier(points_from_transcript(records, source));
}

// Non-dominated subset of the union, keeping each point's provenance tag.
// Exact duplicates (same candidate, source and scores) collapse so that
// merging a frontier with itself is the identity.
inline std::vector<FrontierPoint> merge_frontiers(
    const std::vector<std::vector<FrontierPoint>>& frontiers) {
    std::vector<FrontierPoint> all;
    std::set<std::string> seen;
    for (const auto& f : frontiers) {
        for (const auto& p : f) {
            const std::string key = p.candidate_id + '\x1f' + p.source + '\x1f' +
                                    format_double(p.privacy, 12) + '\x1f' +
                                    format_double(p.utility, 12);
            if (seen.insert(key).second) all.push_back(p);
        }
    }
    return non_dominated(all);
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline void sort_for_export(std::vector<FrontierPoint>& points) {
    std::stable_sort(points.begin(), points.end(),
                     [](const FrontierPoint& a, const FrontierPoint& b) {
                         if (a.privacy != b.privacy) return a.privacy < b.privacy;
                         return a.candidate_id < b.candidate_id;
                     });
}

// Non-domination makes utility nonincreasing along ascending privacy; the
// exporter refuses to write anything that violates it.
inline void check_export_monotonicity(const std::vector<FrontierPoint>& sorted) {
    for (size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i].utility > sorted[i - 1].utility)
            throw Error("frontier export is not utility-nonincreasing; input was not a "
                        "non-dominated set");
    }
}

inline std::string csv_escape(const std::string& field) {
    bool needs_quotes = field.find_first_of(",\"\n") != std::string::npos;
    if (!needs_quotes) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

inline std::string frontier_to_csv(std::vector<FrontierPoint> points) {
    sort_for_export(points);
    check_export_monotonicity(points);
    std::string out = "candidate_id,privacy,utility,stage,instruction,source\n";
    for (const auto& p : points) {
        out += csv_escape(p.candidate_id) + "," + format_double(p.privacy, 6) + "," +
               format_double(p.utility, 6) + "," + csv_escape(p.stage) + "," +
               csv_escape(p.instruction) + "," + csv_escape(p.source) + "\n";
    }
    return out;
}

inline nlohmann::json frontier_to_json(std::vector<FrontierPoint> points) {
    sort_for_export(points);
    check_export_monotonicity(points);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : points) {
        arr.push_back(nlohmann::json{{"candidate_id", p.candidate_id},
                                     {"privacy", p.privacy},
                                     {"utility", p.utility},
                                     {"stage", p.stage},
                                     {"instruction", p.instruction},
                                     {"source", p.source}});
    }
    return arr;
}

enum class FrontierFormat { csv, json_format };

inline void export_frontier(const std::vector<FrontierPoint>& points, FrontierFormat format,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write frontier file '" + path + "'");
    if (format == FrontierFormat::csv)
        out << frontier_to_csv(points);
    else
        out << frontier_to_json(points).dump(2) << "\n";
}

inline std::vector<FrontierPoint> frontier_from_json(const nlohmann::json& arr) {
    std::vector<FrontierPoint> out;
    for (const auto& e : arr) {
        FrontierPoint p;
        p.candidate_id = e.value("candidate_id", "");
        p.privacy = e.value("privacy", 0.0);
        p.utility = e.value("utility", 0.0);
        p.stage = e.value("stage", "");
        p.instruction = e.value("instruction", "");
        p.source = e.value("source", "");
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace anonopt
