#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "anonopt/core.hpp"
#include "anonopt/errors.hpp"
#include "anonopt/text.hpp"

namespace anonopt {

// ---------------------------------------------------------------------------
// Requests / responses
// ---------------------------------------------------------------------------

enum class BackendTag { agent, proposer, judge };

inline const char* to_string(BackendTag t) {
    switch (t) {
        case BackendTag::agent: return "agent";
        case BackendTag::proposer: return "proposer";
        case BackendTag::judge: return "judge";
    }
    return "?";
}

// Agent and proposer calls count against the budget; judge calls do not
// (metrics run on a separate evaluator backbone).
inline bool is_chargeable(BackendTag t) { return t != BackendTag::judge; }

inline std::optional<Charge> charge_category(BackendTag t) {
    switch (t) {
        case BackendTag::agent: return Charge::anonymize;
        case BackendTag::proposer: return Charge::propose;
        case BackendTag::judge: return std::nullopt;
    }
    return std::nullopt;
}

constexpr double kAgentTemperature = 0.7; // exploration for anonymizer/proposer
constexpr double kJudgeTemperature = 0.0; // stability for judges
constexpr int kDefaultMaxTokens = 2048;

struct ChatRequest {
    std::string system; // instruction or judge template
    std::string user;   // rendered input
    double temperature = kAgentTemperature;
    int max_tokens = kDefaultMaxTokens;
    BackendTag backend_tag = BackendTag::agent;
};

struct TokenUsage {
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

struct ChatResponse {
    std::string text; // raw completion, no post-processing
    std::optional<TokenUsage> usage;
    std::string backend_id;
};

struct EmbeddingVector {
    std::vector<double> values;
    bool normalized = false;
};

inline double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    const size_t n = std::min(a.values.size(), b.values.size());
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) na += a.values[i] * a.values[i];
    for (size_t i = 0; i < b.values.size(); ++i) nb += b.values[i] * b.values[i];
    for (size_t i = 0; i < n; ++i) dot += a.values[i] * b.values[i];
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline void l2_normalize(EmbeddingVector& v) {
    double norm = 0.0;
    for (double x : v.values) norm += x * x;
    norm = std::sqrt(norm);
    if (norm <= 0.0) {
        v.normalized = false;
        return;
    }
    for (double& x : v.values) x /= norm;
    v.normalized = true;
}

// ---------------------------------------------------------------------------
// Backend interfaces
// ---------------------------------------------------------------------------

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual ChatResponse complete(const ChatRequest& req) = 0;
    virtual std::string id() const = 0;
};

class EmbedBackend {
public:
    virtual ~EmbedBackend() = default;
    virtual std::vector<double> embed(const std::string& text) = 0;
};

class SimilarityBackend {
public:
    virtual ~SimilarityBackend() = default;
    virtual double score(const std::string& a, const std::string& b) = 0;
};

// ---------------------------------------------------------------------------
// Scripted mock backend
// ---------------------------------------------------------------------------

// A rule fires when every system needle is a substring of the request system
// text and every user needle a substring of the user text. Needles in a
// pattern are separated by '&'. Specificity is the total needle length; the
// most specific matching rule wins; a tie between different responses is an
// AmbiguousScript error. A rule with no needles is the default.
struct MockRule {
    std::vector<std::string> system_needles;
    std::vector<std::string> user_needles;
    std::string response;

    size_t specificity() const {
        size_t s = 0;
        for (const auto& n : system_needles) s += n.size();
        for (const auto& n : user_needles) s += n.size();
        return s;
    }

    bool matches(const std::string& system, const std::string& user) const {
        for (const auto& n : system_needles)
            if (!contains(system, n)) return false;
        for (const auto& n : user_needles)
            if (!contains(user, n)) return false;
        return true;
    }
};

namespace detail {

inline std::vector<std::string> split_needles(const std::string& pattern) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(pattern);
    while (std::getline(ss, cur, '&'))
        if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::string unescape(const std::string& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            ++i;
            switch (s[i]) {
                case 'n': out.push_back('\n'); break;
                case 't': out.push_back('\t'); break;
                case '\\': out.push_back('\\'); break;
                default: out.push_back(s[i]); break;
            }
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}

// Mock response transforms; `{user:redact_caps}` etc. Tokens here are plain
// whitespace chunks so the transforms stay cheap and predictable.
inline std::string apply_mock_transform(const std::string& text, const std::string& name) {
    if (name == "drop_all") return "";
    std::vector<std::string> toks = split_whitespace(text);
    if (name == "caps_only") {
        std::vector<std::string> caps;
        for (const auto& t : toks)
            if (!t.empty() && std::isupper(static_cast<unsigned char>(t[0])))
                caps.push_back(t);
        return caps.empty() ? "none" : join(caps, " ");
    }
    for (auto& t : toks) {
        if (name == "redact_caps") {
            if (!t.empty() && std::isupper(static_cast<unsigned char>(t[0]))) t = "[X]";
        } else if (name == "redact_digits") {
            bool has_digit = false;
            for (char c : t)
                if (std::isdigit(static_cast<unsigned char>(c))) { has_digit = true; break; }
            if (has_digit) t = "[N]";
        } else {
            throw ConfigError("unknown mock transform '" + name + "'");
        }
    }
    return join(toks, " ");
}

inline std::string render_mock_response(const std::string& tpl, const ChatRequest& req) {
    std::string out;
    for (size_t i = 0; i < tpl.size();) {
        if (tpl[i] == '{') {
            const size_t close = tpl.find('}', i);
            if (close != std::string::npos) {
                const std::string body = tpl.substr(i + 1, close - i - 1);
                const size_t colon = body.find(':');
                const std::string key = body.substr(0, colon == std::string::npos ? body.size() : colon);
                if (key == "user" || key == "system") {
                    std::string value = key == "user" ? req.user : req.system;
                    if (colon != std::string::npos) {
                        std::stringstream ss(body.substr(colon + 1));
                        std::string name;
                        while (std::getline(ss, name, ','))
                            value = apply_mock_transform(value, name);
                    }
                    out += value;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(tpl[i]);
        ++i;
    }
    return out;
}

} // namespace detail

class MockScript {
public:
    MockScript() = default;

    // Plain-text format, one rule per block:
    //   rule system="NEEDLE&NEEDLE" user="NEEDLE"
    //   respond <template>        (repeatable; lines join with \n)
    //   rule default
    //   respond {user}
    // '#' starts a comment. Responses may use {user}, {system} and the
    // transforms {user:redact_caps,redact_digits} / {user:drop_all}.
    static MockScript parse(const std::string& text) {
        MockScript script;
        std::istringstream in(text);
        std::string line;
        std::optional<MockRule> current;
        int lineno = 0;
        auto flush = [&] {
            if (current) {
                script.rules_.push_back(*current);
                current.reset();
            }
        };
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            if (t.rfind("rule", 0) == 0) {
                flush();
                current = MockRule{};
                const std::string rest = trim(t.substr(4));
                if (rest != "default" && !rest.empty()) {
                    size_t pos = 0;
                    while (pos < rest.size()) {
                        const size_t eq = rest.find('=', pos);
                        if (eq == std::string::npos) break;
                        const std::string key = trim(rest.substr(pos, eq - pos));
                        const size_t q1 = rest.find('"', eq);
                        const size_t q2 = q1 == std::string::npos ? std::string::npos
                                                                  : rest.find('"', q1 + 1);
                        if (q1 == std::string::npos || q2 == std::string::npos)
                            throw ConfigError("mock script line " + std::to_string(lineno) +
                                              ": expected key=\"pattern\"");
                        const std::string pattern = rest.substr(q1 + 1, q2 - q1 - 1);
                        if (key == "system")
                            current->system_needles = detail::split_needles(pattern);
                        else if (key == "user")
                            current->user_needles = detail::split_needles(pattern);
                        else
                            throw ConfigError("mock script line " + std::to_string(lineno) +
                                              ": unknown rule key '" + key + "'");
                        pos = q2 + 1;
                    }
                }
            } else if (t.rfind("respond", 0) == 0) {
                if (!current)
                    throw ConfigError("mock script line " + std::to_string(lineno) +
                                      ": respond before rule");
                std::string body = detail::unescape(trim(t.substr(7)));
                if (!current->response.empty()) current->response += "\n";
                current->response += body;
            } else {
                throw ConfigError("mock script line " + std::to_string(lineno) +
                                  ": expected 'rule' or 'respond'");
            }
        }
        flush();
        return script;
    }

    static MockScript from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open mock script '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    // Identity script: every request echoes its user text.
    static MockScript passthrough() {
        MockRule def;
        def.response = "{user}";
        MockScript s;
        s.rules_.push_back(def);
        return s;
    }

    void add_rule(MockRule rule) { rules_.push_back(std::move(rule)); }
    const std::vector<MockRule>& rules() const { return rules_; }

    const MockRule* match(const std::string& system, const std::string& user) const {
        const MockRule* best = nullptr;
        bool ambiguous = false;
        for (const auto& rule : rules_) {
            if (!rule.matches(system, user)) continue;
            if (!best || rule.specificity() > best->specificity()) {
                best = &rule;
                ambiguous = false;
            } else if (rule.specificity() == best->specificity() &&
                       rule.response != best->response) {
                ambiguous = true;
            }
        }
        if (ambiguous)
            throw AmbiguousScript("mock script: two rules of equal specificity match with "
                                  "different responses");
        return best;
    }

private:
    std::vector<MockRule> rules_;
};

// Referentially transparent: the response is a pure function of
// (system, user) and the script.
class MockChatBackend : public ChatBackend {
public:
    explicit MockChatBackend(MockScript script) : script_(std::move(script)) {}

    ChatResponse complete(const ChatRequest& req) override {
        const MockRule* rule = script_.match(req.system, req.user);
        if (!rule)
            throw MalformedResponse("mock script has no rule matching the request");
        ChatResponse resp;
        resp.text = detail::render_mock_response(rule->response, req);
        resp.backend_id = id();
        return resp;
    }

    std::string id() const override { return "mock"; }

private:
    MockScript script_;
};

// Deterministic hashed bag-of-words projection; identical texts embed
// identically on every platform.
class MockEmbedBackend : public EmbedBackend {
public:
    explicit MockEmbedBackend(size_t dims = 256) : dims_(dims) {}

    std::vector<double> embed(const std::string& text) override {
        std::vector<double> v(dims_, 0.0);
        for (const auto& tok : tokenize(text))
            v[fnv1a64(tok) % dims_] += 1.0;
        return v;
    }

private:
    size_t dims_;
};

// Token-set Jaccard similarity; the mock stand-in for an external
// cross-encoder similarity scorer.
class MockSimilarityBackend : public SimilarityBackend {
public:
    double score(const std::string& a, const std::string& b) override {
        std::set<std::string> sa, sb;
        for (const auto& t : tokenize(a)) sa.insert(t);
        for (const auto& t : tokenize(b)) sb.insert(t);
        if (sa.empty() && sb.empty()) return 1.0;
        size_t inter = 0;
        for (const auto& t : sa) inter += sb.count(t);
        const size_t uni = sa.size() + sb.size() - inter;
        return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
};

// ---------------------------------------------------------------------------
// Gateway: retry + budget accounting in front of any backend
// ---------------------------------------------------------------------------

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    double multiplier = 2.0;
    bool sleep_between = true; // disabled in tests
};

class Gateway {
public:
    Gateway(std::shared_ptr<ChatBackend> chat,
            std::shared_ptr<EmbedBackend> embed = nullptr,
            std::shared_ptr<SimilarityBackend> similarity = nullptr,
            RetryPolicy retry = {})
        : chat_(std::move(chat)), embed_(std::move(embed)),
          similarity_(std::move(similarity)), retry_(retry) {}

    // Charges exactly one budget unit per successful chargeable call: the
    // reservation spans all retry attempts and is rolled back when the call
    // ultimately fails. A null ledger means the call is budget-exempt.
    ChatResponse complete_chat(const ChatRequest& req, BudgetLedger* ledger) {
        BudgetLedger::Reservation reservation;
        const auto category = charge_category(req.backend_tag);
        if (ledger && category)
            reservation = ledger->reserve(*category, 1); // throws before any network call
        return complete_chat_reserved(req, std::move(reservation));
    }

    // Variant for callers that reserve budget for a whole batch up front
    // (the reservation may be inactive for exempt calls). Commits on
    // success, releases on failure.
    ChatResponse complete_chat_reserved(const ChatRequest& req,
                                        BudgetLedger::Reservation reservation) {
        std::string last_error;
        for (int attempt = 0; attempt < retry_.attempts; ++attempt) {
            if (attempt > 0 && retry_.sleep_between) {
                const auto backoff = std::chrono::milliseconds(static_cast<int64_t>(
                    static_cast<double>(retry_.initial_backoff.count()) *
                    std::pow(retry_.multiplier, attempt - 1)));
                std::this_thread::sleep_for(backoff);
            }
            try {
                ChatResponse resp = chat_->complete(req);
                if (resp.text.empty())
                    throw MalformedResponse("backend returned an empty completion");
                reservation.commit();
                return resp;
            } catch (const BackendUnavailable& e) {
                last_error = e.what(); // transient: retry
            }
        }
        reservation.release();
        throw BackendUnavailable("backend failed after " + std::to_string(retry_.attempts) +
                                 " attempts: " + last_error);
    }

    EmbeddingVector embed_text(const std::string& text) {
        if (text.empty()) throw ConfigError("embed_text requires nonempty text");
        if (!embed_) throw BackendUnavailable("no embedding backend configured");
        EmbeddingVector v;
        v.values = embed_->embed(text);
        l2_normalize(v);
        return v;
    }

    double similarity(const std::string& a, const std::string& b) {
        if (!similarity_) throw BackendUnavailable("no similarity backend configured");
        return clamp01(similarity_->score(a, b));
    }

    bool has_embed() const { return embed_ != nullptr; }
    bool has_similarity() const { return similarity_ != nullptr; }

private:
    std::shared_ptr<ChatBackend> chat_;
    std::shared_ptr<EmbedBackend> embed_;
    std::shared_ptr<SimilarityBackend> similarity_;
    RetryPolicy retry_;
};

} // namespace anonopt
