#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "anonopt/core.hpp"
#include "anonopt/gateway.hpp"
#include "anonopt/text.hpp"

namespace anonopt {

// ---------------------------------------------------------------------------
// Metric results and feedback records
// ---------------------------------------------------------------------------

struct MetricResult {
    double value = 0.0;                 // clamped to [0,1]
    std::vector<std::string> findings;  // leaked spans, attacker guesses, judge notes
};

enum class Richness { base, rich };

struct FeedbackRecord {
    double score = 0.0;   // aggregate of (privacy, utility)
    double privacy = 0.0;
    double utility = 0.0;
    std::vector<std::string> findings;
    std::string instruction_hint;
    Richness richness = Richness::base;
    std::string text; // rendered feedback string handed to the proposer
};

// ---------------------------------------------------------------------------
// Judge templates
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> default_judge_templates() {
    return {
        {"attacker_top3",
         "You are a re-identification attacker. Read the anonymized text and propose the "
         "top-3 most likely real names of the person described. Reply with exactly three "
         "names, one per line, nothing else."},
        {"occupation_classifier",
         "Classify the occupation of the person described in the text. Reply with the "
         "occupation only."},
        {"attribute_attacker",
         "Infer the author's {attribute} from the text below. Reply with your single best "
         "inference only."},
        {"attribute_verifier",
         "Two inferences of the author's {attribute} are given. Decide whether they refer "
         "to the same value. Reply YES if they match, NO if they differ."},
        {"pii_counter",
         "Count the personally identifying units (names, phone numbers, email addresses, "
         "postal addresses, account ids) in the ORIGINAL text, then count how many of "
         "those units still appear in the ANONYMIZED text. Reply in exactly this format:\n"
         "UNITS: <count in original>\nLEAKED: <count remaining>\n"
         "ITEMS: <semicolon-separated leaked units, or none>"},
        {"qa_answerer",
         "Answer the multiple-choice question using only the case description. Reply with "
         "the text of the chosen option only."},
        {"response_generator", "You are a helpful assistant. Answer the user's query."},
        {"response_comparator",
         "Rate how well RESPONSE B preserves the quality and usefulness of RESPONSE A for "
         "the same underlying request. Reply with a single number between 0 and 1."},
    };
}

inline std::vector<std::string> required_templates(PrivacyMetric m) {
    switch (m) {
        case PrivacyMetric::reidentify_top3: return {"attacker_top3"};
        case PrivacyMetric::attribute_match: return {"attribute_attacker", "attribute_verifier"};
        case PrivacyMetric::pii_leakage: return {"pii_counter"};
        default: return {};
    }
}

inline std::vector<std::string> required_templates(UtilityMetric m) {
    switch (m) {
        case UtilityMetric::label_accuracy: return {"occupation_classifier"};
        case UtilityMetric::qa_accuracy: return {"qa_answerer"};
        case UtilityMetric::response_quality: return {"response_generator", "response_comparator"};
        default: return {};
    }
}

inline std::vector<std::string> required_label_keys(PrivacyMetric m) {
    switch (m) {
        case PrivacyMetric::reidentify_top3: return {"person_name"};
        case PrivacyMetric::attribute_match: return {"attribute_name"};
        case PrivacyMetric::span_recall: return {"gold_spans"};
        default: return {};
    }
}

inline std::vector<std::string> required_label_keys(UtilityMetric m) {
    switch (m) {
        case UtilityMetric::label_accuracy: return {"occupation"};
        case UtilityMetric::qa_accuracy: return {"options", "answer"};
        default: return {};
    }
}

// Fills in missing templates and checks that every template (and template
// placeholder) the chosen metrics reference is present.
inline void finalize_task(TaskSpec& task) {
    for (const auto& [name, tpl] : default_judge_templates())
        task.judge_templates.emplace(name, tpl);
    auto require = [&](const std::vector<std::string>& names) {
        for (const auto& n : names)
            if (!task.judge_templates.count(n))
                throw ConfigError("task '" + task.task_id + "' is missing judge template '" + n + "'");
    };
    require(required_templates(task.privacy_metric));
    require(required_templates(task.utility_metric));
    if (task.privacy_metric == PrivacyMetric::attribute_match) {
        for (const char* name : {"attribute_attacker", "attribute_verifier"})
            if (!contains(task.judge_templates.at(name), "{attribute}"))
                throw ConfigError(std::string("judge template '") + name +
                                  "' must reference {attribute}");
    }
}

// ---------------------------------------------------------------------------
// Judge output parsing
// ---------------------------------------------------------------------------

// Extracts 1-3 candidate names from a judge completion: a JSON array, a
// numbered/bulleted list, or comma-separated names on one line.
inline std::optional<std::vector<std::string>> parse_name_list(const std::string& text) {
    const std::string body = trim(text);
    if (body.empty()) return std::nullopt;
    if (body.front() == '[') {
        try {
            const json arr = json::parse(body);
            if (arr.is_array()) {
                std::vector<std::string> names;
                for (const auto& e : arr)
                    if (e.is_string() && !trim(e.get<std::string>()).empty())
                        names.push_back(trim(e.get<std::string>()));
                if (!names.empty() && names.size() <= 3) return names;
                if (names.size() > 3) return std::vector<std::string>(names.begin(), names.begin() + 3);
            }
        } catch (const json::exception&) {
            // fall through to line parsing
        }
    }
    std::vector<std::string> lines;
    std::stringstream ss(body);
    std::string line;
    while (std::getline(ss, line)) {
        std::string t = trim(line);
        // strip list markers: "1.", "2)", "-", "*"
        static const std::regex marker(R"(^\s*(?:[0-9]+[.)]|[-*•])\s*)");
        t = std::regex_replace(t, marker, "");
        t = trim(t);
        if (!t.empty()) lines.push_back(t);
    }
    if (lines.size() == 1 && lines[0].find(',') != std::string::npos) {
        std::vector<std::string> parts;
        std::stringstream cs(lines[0]);
        std::string part;
        while (std::getline(cs, part, ','))
            if (!trim(part).empty()) parts.push_back(trim(part));
        if (!parts.empty()) lines = parts;
    }
    if (lines.empty()) return std::nullopt;
    if (lines.size() > 3) lines.resize(3);
    return lines;
}

inline std::optional<bool> parse_yes_no(const std::string& text) {
    const std::string t = to_lower(trim(text));
    if (t.rfind("yes", 0) == 0) return true;
    if (t.rfind("no", 0) == 0) return false;
    if (contains(t, "yes") && !contains(t, "no")) return true;
    if (contains(t, "no") && !contains(t, "yes")) return false;
    return std::nullopt;
}

inline std::optional<double> parse_first_number(const std::string& text) {
    static const std::regex num(R"([-+]?[0-9]*\.?[0-9]+)");
    std::smatch m;
    if (std::regex_search(text, m, num)) return std::stod(m.str());
    return std::nullopt;
}

struct PiiCounts {
    int units = 0;
    int leaked = 0;
    std::vector<std::string> items;
};

inline std::optional<PiiCounts> parse_pii_counts(const std::string& text) {
    static const std::regex units_re(R"(UNITS:\s*([0-9]+))");
    static const std::regex leaked_re(R"(LEAKED:\s*([0-9]+))");
    static const std::regex items_re(R"(ITEMS:\s*(.*))");
    std::smatch m;
    PiiCounts out;
    if (!std::regex_search(text, m, units_re)) return std::nullopt;
    out.units = std::stoi(m[1]);
    if (!std::regex_search(text, m, leaked_re)) return std::nullopt;
    out.leaked = std::stoi(m[1]);
    if (std::regex_search(text, m, items_re)) {
        std::stringstream ss(m[1].str());
        std::string item;
        while (std::getline(ss, item, ';')) {
            const std::string t = trim(item);
            if (!t.empty() && to_lower(t) != "none") out.items.push_back(t);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// MetricEngine
// ---------------------------------------------------------------------------

class MetricEngine {
public:
    MetricEngine(Gateway& gateway, TaskSpec task)
        : gateway_(gateway), task_(std::move(task)) {}

    const TaskSpec& task() const { return task_; }

    // --- judge-free arithmetic metrics -----------------------------------

    // Unigram F1 with case-folding, whitespace tokenization and clipped
    // multiset overlap; 0 when either side has no tokens.
    static double rouge1_f(const std::string& reference, const std::string& candidate) {
        const auto ref = tokenize(reference);
        const auto cand = tokenize(candidate);
        if (ref.empty() || cand.empty()) return 0.0;
        std::map<std::string, int> ref_counts;
        for (const auto& t : ref) ref_counts[t] += 1;
        int overlap = 0;
        for (const auto& t : cand) {
            auto it = ref_counts.find(t);
            if (it != ref_counts.end() && it->second > 0) {
                ++overlap;
                --it->second;
            }
        }
        if (overlap == 0) return 0.0;
        const double p = static_cast<double>(overlap) / static_cast<double>(cand.size());
        const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
        return 2.0 * p * r / (p + r);
    }

    // Fraction of gold spans that no longer occur in the anonymized text
    // (case-insensitive, whitespace-normalized substring matching).
    static double masking_recall(const std::vector<std::string>& gold_spans,
                                 const std::string& anonymized) {
        if (gold_spans.empty())
            throw DataError("masking_recall requires a nonempty gold span list");
        const std::string haystack = normalize_whitespace(anonymized);
        int leaked = 0;
        for (const auto& span : gold_spans) {
            const std::string needle = normalize_whitespace(span);
            if (!needle.empty() && contains(haystack, needle)) ++leaked;
        }
        return 1.0 - static_cast<double>(leaked) / static_cast<double>(gold_spans.size());
    }

    static std::vector<std::string> leaked_spans(const std::vector<std::string>& gold_spans,
                                                 const std::string& anonymized) {
        const std::string haystack = normalize_whitespace(anonymized);
        std::vector<std::string> out;
        for (const auto& span : gold_spans) {
            const std::string needle = normalize_whitespace(span);
            if (!needle.empty() && contains(haystack, needle)) out.push_back(span);
        }
        return out;
    }

    // --- embedding / similarity metrics -----------------------------------

    double style_distance(const std::string& original, const std::string& anonymized) {
        const EmbeddingVector u = gateway_.embed_text(original);
        const EmbeddingVector v = gateway_.embed_text(anonymized);
        return clamp01(1.0 - cosine_similarity(u, v));
    }

    double semantic_similarity(const std::string& original, const std::string& anonymized) {
        return gateway_.similarity(original, anonymized);
    }

    // --- judge-based metrics ----------------------------------------------

    MetricResult reidentify_top3(const std::string& anonymized, const std::string& true_name) {
        MetricResult result;
        const auto reply = ask_judge_parsed<std::vector<std::string>>(
            "attacker_top3", {}, anonymized, parse_name_list);
        if (!reply) {
            result.value = 0.0; // pessimistic: treat unparseable attacker output as a hit
            result.findings.push_back("judge-parse-failure: could not extract candidate names");
            return result;
        }
        const std::string target = normalize_name(true_name);
        bool hit = false;
        for (const auto& guess : *reply) {
            if (normalize_name(guess) == target) hit = true;
            result.findings.push_back("attacker guess: " + guess);
        }
        result.value = hit ? 0.0 : 1.0;
        return result;
    }

    MetricResult attribute_match(const std::string& original, const std::string& anonymized,
                                 const std::string& attribute_name) {
        MetricResult result;
        const std::map<std::string, std::string> vars = {{"attribute", attribute_name}};
        const std::string inferred_original =
            trim(ask_judge("attribute_attacker", vars, original).text);
        const std::string inferred_anonymized =
            trim(ask_judge("attribute_attacker", vars, anonymized).text);
        result.findings.push_back("inference from original: " + inferred_original);
        result.findings.push_back("inference from anonymized: " + inferred_anonymized);
        if (inferred_original == inferred_anonymized) {
            result.value = 0.0; // identical inferences are trivially equivalent
            return result;
        }
        const std::string pair_block = "Inference A: " + inferred_original +
                                       "\nInference B: " + inferred_anonymized;
        const auto same = ask_judge_parsed<bool>("attribute_verifier", vars, pair_block,
                                                 parse_yes_no);
        if (!same) {
            result.value = 0.0;
            result.findings.push_back("judge-parse-failure: verifier gave no YES/NO verdict");
            return result;
        }
        result.value = *same ? 0.0 : 1.0;
        return result;
    }

    MetricResult pii_leakage(const std::string& original, const std::string& anonymized) {
        MetricResult result;
        const std::string block = "ORIGINAL:\n" + original + "\n\nANONYMIZED:\n" + anonymized;
        const auto counts =
            ask_judge_parsed<PiiCounts>("pii_counter", {}, block, parse_pii_counts);
        if (!counts) {
            result.value = 0.0;
            result.findings.push_back("judge-parse-failure: could not extract PII counts");
            return result;
        }
        if (counts->units <= 0) {
            result.value = 1.0; // nothing to leak
            return result;
        }
        result.value = clamp01(1.0 - static_cast<double>(counts->leaked) /
                                         static_cast<double>(counts->units));
        for (const auto& item : counts->items) result.findings.push_back("leaked: " + item);
        return result;
    }

    enum class LabelKind { occupation, qa_answer };

    MetricResult label_accuracy(const std::string& anonymized, const std::string& gold_label,
                                LabelKind kind,
                                const std::vector<std::string>& options = {}) {
        MetricResult result;
        ChatResponse reply;
        if (kind == LabelKind::occupation) {
            reply = ask_judge("occupation_classifier", {}, anonymized);
        } else {
            std::string block = "Case:\n" + anonymized + "\n\nOptions:\n";
            for (const auto& opt : options) block += "- " + opt + "\n";
            reply = ask_judge("qa_answerer", {}, block);
        }
        const std::string answer = trim(reply.text);
        result.findings.push_back("judge answer: " + answer);
        result.value =
            normalize_whitespace(strip_edge_punct(answer)) ==
                    normalize_whitespace(strip_edge_punct(gold_label))
                ? 1.0
                : 0.0;
        return result;
    }

    MetricResult response_quality(const std::string& original_query,
                                  const std::string& anonymized_query) {
        MetricResult result;
        const std::string response_original =
            ask_judge("response_generator", {}, original_query).text;
        const std::string response_anonymized =
            ask_judge("response_generator", {}, anonymized_query).text;
        if (response_original == response_anonymized) {
            result.value = 1.0; // identical responses preserve quality by definition
            return result;
        }
        const std::string block = "RESPONSE A:\n" + response_original +
                                  "\n\nRESPONSE B:\n" + response_anonymized;
        const auto score = ask_judge_parsed<double>("response_comparator", {}, block,
                                                    parse_first_number);
        if (!score) {
            result.value = 0.0;
            result.findings.push_back("judge-parse-failure: comparator gave no number");
            return result;
        }
        result.value = clamp01(*score);
        return result;
    }

    // --- task-level dispatch ----------------------------------------------

    MetricResult privacy(const Example& example, const std::string& anonymized) {
        switch (task_.privacy_metric) {
            case PrivacyMetric::reidentify_top3:
                return reidentify_top3(anonymized, example.label_string("person_name"));
            case PrivacyMetric::attribute_match:
                return attribute_match(example.text, anonymized,
                                       example.label_string("attribute_name"));
            case PrivacyMetric::span_recall: {
                const auto spans = example.label_strings("gold_spans");
                MetricResult r;
                r.value = masking_recall(spans, anonymized);
                r.findings = leaked_spans(spans, anonymized);
                return r;
            }
            case PrivacyMetric::pii_leakage:
                return pii_leakage(example.text, anonymized);
            case PrivacyMetric::style_distance: {
                MetricResult r;
                r.value = style_distance(example.text, anonymized);
                return r;
            }
        }
        throw ConfigError("unhandled privacy metric");
    }

    MetricResult utility(const Example& example, const std::string& anonymized) {
        switch (task_.utility_metric) {
            case UtilityMetric::label_accuracy:
                return label_accuracy(anonymized, example.label_string("occupation"),
                                      LabelKind::occupation);
            case UtilityMetric::rouge1_f: {
                MetricResult r;
                r.value = rouge1_f(example.text, anonymized);
                return r;
            }
            case UtilityMetric::semantic_similarity: {
                MetricResult r;
                r.value = semantic_similarity(example.text, anonymized);
                return r;
            }
            case UtilityMetric::response_quality:
                return response_quality(example.text, anonymized);
            case UtilityMetric::qa_accuracy:
                return label_accuracy(anonymized, example.label_string("answer"),
                                      LabelKind::qa_answer,
                                      example.label_strings("options"));
        }
        throw ConfigError("unhandled utility metric");
    }

private:
    ChatResponse ask_judge(const std::string& template_name,
                           const std::map<std::string, std::string>& vars,
                           const std::string& user_content) {
        auto it = task_.judge_templates.find(template_name);
        if (it == task_.judge_templates.end())
            throw ConfigError("task '" + task_.task_id + "' has no judge template '" +
                              template_name + "'");
        ChatRequest req;
        req.system = render_template(it->second, vars);
        req.user = user_content;
        req.temperature = kJudgeTemperature;
        req.backend_tag = BackendTag::judge;
        try {
            return gateway_.complete_chat(req, nullptr); // judges are never charged
        } catch (const MalformedResponse&) {
            // An empty judge verdict is a parse failure, not a crash; the
            // metric degrades pessimistically.
            return ChatResponse{};
        }
    }

    // One structured reprompt on parse failure, then give up (callers map
    // the failure to a pessimistic score).
    template <typename T, typename Parser>
    std::optional<T> ask_judge_parsed(const std::string& template_name,
                                      const std::map<std::string, std::string>& vars,
                                      const std::string& user_content, Parser parse) {
        const auto first = parse(ask_judge(template_name, vars, user_content).text);
        if (first) return first;
        const std::string reprompt =
            user_content +
            "\n\nYour previous reply could not be parsed. Follow the required format exactly.";
        return parse(ask_judge(template_name, vars, reprompt).text);
    }

    Gateway& gateway_;
    TaskSpec task_;
};

// ---------------------------------------------------------------------------
// Feedback functions
// ---------------------------------------------------------------------------

inline const char* privacy_label(PrivacyMetric m) {
    switch (m) {
        case PrivacyMetric::reidentify_top3: return "re-identification resistance";
        case PrivacyMetric::attribute_match: return "attribute obfuscation";
        case PrivacyMetric::span_recall: return "entity masking rate";
        case PrivacyMetric::pii_leakage: return "PII removal rate";
        case PrivacyMetric::style_distance: return "style distance";
    }
    return "?";
}

inline const char* utility_label(UtilityMetric m) {
    switch (m) {
        case UtilityMetric::label_accuracy: return "occupation accuracy";
        case UtilityMetric::rouge1_f: return "ROUGE-1 overlap";
        case UtilityMetric::semantic_similarity: return "semantic similarity";
        case UtilityMetric::response_quality: return "response quality";
        case UtilityMetric::qa_accuracy: return "QA accuracy";
    }
    return "?";
}

inline const char* findings_header(PrivacyMetric m) {
    switch (m) {
        case PrivacyMetric::reidentify_top3: return "Attacker Top-3 Guesses";
        case PrivacyMetric::attribute_match: return "Attacker Inferences";
        case PrivacyMetric::span_recall:
        case PrivacyMetric::pii_leakage: return "Remaining Sensitive Entities";
        case PrivacyMetric::style_distance: return "Style Analysis";
    }
    return "?";
}

inline const char* actionable_hint(PrivacyMetric m) {
    switch (m) {
        case PrivacyMetric::reidentify_top3:
            return "Try to remove identifying details while preserving the utility of the text.";
        case PrivacyMetric::attribute_match:
            return "Try to obscure the target attribute while preserving the utility of the text.";
        case PrivacyMetric::span_recall:
        case PrivacyMetric::pii_leakage:
            return "Try to mask more entities while preserving the utility of the text.";
        case PrivacyMetric::style_distance:
            return "Try to change the writing style more while preserving the utility of the text.";
    }
    return "?";
}

// Coarse scalar signal: the mean and nothing else.
inline FeedbackRecord base_feedback(double privacy, double utility) {
    const ScoreVector s = ScoreVector::clamped(privacy, utility);
    FeedbackRecord record;
    record.privacy = s.privacy;
    record.utility = s.utility;
    record.score = aggregate(s);
    record.richness = Richness::base;
    record.instruction_hint = "Try to improve both scores.";
    record.text = "The overall score is " + format_double(record.score, 2) +
                  ", which is the arithmetic mean of the utility score (" +
                  format_double(record.utility, 2) + ") and the privacy score (" +
                  format_double(record.privacy, 2) + "). Try to improve both scores.";
    return record;
}

// Decomposed feedback: component scores, itemized findings from both metric
// results and one actionable instruction sentence.
inline FeedbackRecord rich_feedback(const TaskSpec& task, const Example&,
                                    const std::string& /*anonymized*/,
                                    const MetricResult& privacy_result,
                                    const MetricResult& utility_result) {
    const ScoreVector s = ScoreVector::clamped(privacy_result.value, utility_result.value);
    FeedbackRecord record;
    record.privacy = s.privacy;
    record.utility = s.utility;
    record.score = aggregate(s);
    record.richness = Richness::rich;
    record.instruction_hint = actionable_hint(task.privacy_metric);
    record.findings = privacy_result.findings;
    record.findings.insert(record.findings.end(), utility_result.findings.begin(),
                           utility_result.findings.end());

    std::string text = "Overall Score: " + format_double(record.score, 3) +
                       " (out of 1.0). Score Breakdown: Utility (" +
                       utility_label(task.utility_metric) + "): " +
                       format_double(record.utility, 3) + ". Privacy (" +
                       privacy_label(task.privacy_metric) + "): " +
                       format_double(record.privacy, 3) + ".";
    if (!privacy_result.findings.empty()) {
        text += " " + std::string(findings_header(task.privacy_metric)) + " (" +
                std::to_string(privacy_result.findings.size()) + "): " +
                join(privacy_result.findings, ", ") + ".";
    }
    if (!utility_result.findings.empty()) {
        text += " Utility Notes (" + std::to_string(utility_result.findings.size()) +
                "): " + join(utility_result.findings, ", ") + ".";
    }
    text += " " + record.instruction_hint;
    record.text = text;
    return record;
}

struct FeedbackScores {
    double score = 0.0;
    double privacy = 0.0;
    double utility = 0.0;
};

// Parses the scalar components back out of a rendered feedback string
// (either richness).
inline std::optional<FeedbackScores> parse_feedback_scores(const std::string& text) {
    static const std::regex rich_overall(R"(Overall Score: ([0-9.]+))");
    static const std::regex rich_utility(R"(Utility \([^)]*\): ([0-9.]+))");
    static const std::regex rich_privacy(R"(Privacy \([^)]*\): ([0-9.]+))");
    static const std::regex base_overall(R"(overall score is ([0-9.]+))");
    static const std::regex base_utility(R"(utility score \(([0-9.]+)\))");
    static const std::regex base_privacy(R"(privacy score \(([0-9.]+)\))");

    FeedbackScores out;
    std::smatch m;
    if (std::regex_search(text, m, rich_overall)) {
        out.score = std::stod(m[1]);
        if (!std::regex_search(text, m, rich_utility)) return std::nullopt;
        out.utility = std::stod(m[1]);
        if (!std::regex_search(text, m, rich_privacy)) return std::nullopt;
        out.privacy = std::stod(m[1]);
        return out;
    }
    if (std::regex_search(text, m, base_overall)) {
        out.score = std::stod(m[1]);
        if (!std::regex_search(text, m, base_utility)) return std::nullopt;
        out.utility = std::stod(m[1]);
        if (!std::regex_search(text, m, base_privacy)) return std::nullopt;
        out.privacy = std::stod(m[1]);
        return out;
    }
    return std::nullopt;
}

} // namespace anonopt
