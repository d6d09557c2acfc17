#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "anonopt/errors.hpp"
#include "anonopt/gateway.hpp"

namespace anonopt {

// Open chat-completion wire schema: POST {base}/v1/chat/completions with
// {model, messages, temperature, max_tokens}; any local serving stack that
// speaks it plugs in. API keys come only from the environment, never flags.

namespace detail {

inline std::string env_or_empty(const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
}

inline json http_post_json(const std::string& base_url, const std::string& path,
                           const json& body, const std::string& api_key) {
    httplib::Client client(base_url);
    client.set_connection_timeout(10, 0);
    client.set_read_timeout(120, 0);
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res)
        throw BackendUnavailable("POST " + base_url + path + ": " +
                                 httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300) {
        // 5xx and 429 are treated as transient; everything else is final.
        if (res->status >= 500 || res->status == 429)
            throw BackendUnavailable("POST " + base_url + path + ": HTTP " +
                                     std::to_string(res->status));
        throw MalformedResponse("POST " + base_url + path + ": HTTP " +
                                std::to_string(res->status) + " " + res->body);
    }
    try {
        return json::parse(res->body);
    } catch (const json::exception& e) {
        throw MalformedResponse("invalid JSON from " + base_url + path + ": " + e.what());
    }
}

} // namespace detail

class HttpChatBackend : public ChatBackend {
public:
    HttpChatBackend(std::string base_url, std::string model)
        : base_url_(std::move(base_url)), model_(std::move(model)),
          api_key_(detail::env_or_empty("CHAT_API_KEY")) {}

    ChatResponse complete(const ChatRequest& req) override {
        json body = {
            {"model", model_},
            {"messages",
             json::array({json{{"role", "system"}, {"content", req.system}},
                          json{{"role", "user"}, {"content", req.user}}})},
            {"temperature", req.temperature},
            {"max_tokens", req.max_tokens},
        };
        const json reply =
            detail::http_post_json(base_url_, "/v1/chat/completions", body, api_key_);
        ChatResponse resp;
        try {
            resp.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw MalformedResponse(std::string("chat completion missing content: ") + e.what());
        }
        if (reply.contains("usage")) {
            TokenUsage usage;
            usage.prompt_tokens = reply["usage"].value("prompt_tokens", 0);
            usage.completion_tokens = reply["usage"].value("completion_tokens", 0);
            resp.usage = usage;
        }
        resp.backend_id = base_url_ + "#" + model_;
        return resp;
    }

    std::string id() const override { return base_url_ + "#" + model_; }

private:
    std::string base_url_;
    std::string model_;
    std::string api_key_;
};

class HttpEmbedBackend : public EmbedBackend {
public:
    HttpEmbedBackend(std::string base_url, std::string model)
        : base_url_(std::move(base_url)), model_(std::move(model)),
          api_key_(detail::env_or_empty("EMBED_API_KEY")) {}

    std::vector<double> embed(const std::string& text) override {
        json body = {{"model", model_}, {"input", json::array({text})}};
        const json reply = detail::http_post_json(base_url_, "/v1/embeddings", body, api_key_);
        try {
            return reply.at("data").at(0).at("embedding").get<std::vector<double>>();
        } catch (const json::exception& e) {
            throw MalformedResponse(std::string("embedding response missing vector: ") + e.what());
        }
    }

private:
    std::string base_url_;
    std::string model_;
    std::string api_key_;
};

// External similarity scorer (e.g. a cross-encoder behind a tiny server):
// POST {base}/v1/similarity {"text_a","text_b"} -> {"score": <0..1>}.
class HttpSimilarityBackend : public SimilarityBackend {
public:
    explicit HttpSimilarityBackend(std::string base_url)
        : base_url_(std::move(base_url)), api_key_(detail::env_or_empty("EMBED_API_KEY")) {}

    double score(const std::string& a, const std::string& b) override {
        json body = {{"text_a", a}, {"text_b", b}};
        const json reply = detail::http_post_json(base_url_, "/v1/similarity", body, api_key_);
        if (!reply.contains("score") || !reply["score"].is_number())
            throw MalformedResponse("similarity response missing numeric 'score'");
        return reply["score"].get<double>();
    }

private:
    std::string base_url_;
    std::string api_key_;
};

// Backend factories shared by the CLI and the harness. A URL of the form
// "mock:<script-path>" (or bare "mock:") selects the deterministic mocks.
inline std::shared_ptr<ChatBackend> make_chat_backend(const std::string& url,
                                                      const std::string& model) {
    if (url.rfind("mock:", 0) == 0) {
        const std::string path = url.substr(5);
        MockScript script = path.empty() ? MockScript::passthrough()
                                         : MockScript::from_file(path);
        return std::make_shared<MockChatBackend>(std::move(script));
    }
    return std::make_shared<HttpChatBackend>(url, model);
}

inline std::shared_ptr<EmbedBackend> make_embed_backend(const std::string& url,
                                                        const std::string& model) {
    if (url.empty()) return nullptr;
    if (url.rfind("mock:", 0) == 0) return std::make_shared<MockEmbedBackend>();
    return std::make_shared<HttpEmbedBackend>(url, model);
}

inline std::shared_ptr<SimilarityBackend> make_similarity_backend(const std::string& url) {
    if (url.empty()) return nullptr;
    if (url.rfind("mock:", 0) == 0) return std::make_shared<MockSimilarityBackend>();
    return std::make_shared<HttpSimilarityBackend>(url);
}

} // namespace anonopt
