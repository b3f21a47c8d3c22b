#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge/util.hpp"

namespace forge {

// Pluggable chat-completion abstraction: one live HTTP provider speaking a
// generic chat-completions contract and one deterministic scripted provider
// for tests. Nothing above this layer knows which one it is talking to.

enum class MessageRole { system, user, assistant, tool_result };

const char* to_string(MessageRole role);

struct ChatMessage {
    MessageRole role = MessageRole::user;
    std::string content;
    std::string tool_call_id; // required iff role == tool_result

    static ChatMessage system(std::string content);
    static ChatMessage user(std::string content);
    static ChatMessage assistant(std::string content);
    static ChatMessage tool(std::string call_id, std::string content);
};

struct ToolParam {
    std::string name;
    std::string type = "string"; // string | integer | number | boolean | object | array
    bool required = true;
    std::string description;
};

struct ToolSchema {
    std::string name;
    std::string description;
    std::vector<ToolParam> parameters;
};

struct CompletionRequest {
    std::string model;
    double temperature = 1.0;
    std::vector<ChatMessage> messages;
    std::vector<ToolSchema> tools;
    int max_output = 0; // 0 = provider default
};

struct ToolCall {
    std::string id;
    std::string name;
    json args = json::object();
};

struct Usage {
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 0;
};

// Exactly one of final text / tool calls, enforced by the variant.
struct CompletionResponse {
    std::variant<std::string, std::vector<ToolCall>> outcome;
    Usage usage;

    bool is_final() const { return std::holds_alternative<std::string>(outcome); }
    const std::string& final_text() const { return std::get<std::string>(outcome); }
    const std::vector<ToolCall>& tool_calls() const { return std::get<std::vector<ToolCall>>(outcome); }
};

class UsageLedger {
public:
    void add(const Usage& usage);
    Usage total() const;
    std::int64_t calls() const;

private:
    mutable std::mutex mutex_;
    Usage total_;
    std::int64_t calls_ = 0;
};

class Backend {
public:
    virtual ~Backend() = default;

    // Validates the request, dispatches to the provider, accounts usage.
    CompletionResponse complete(const CompletionRequest& request);

    UsageLedger& ledger() { return ledger_; }

protected:
    virtual CompletionResponse complete_impl(const CompletionRequest& request) = 0;

private:
    UsageLedger ledger_;
};

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds base_delay{1000};
    double multiplier = 2.0;
};

// Retries only errors flagged retryable, with exponential backoff.
// `attempts_out`, when given, receives the number of attempts made.
CompletionResponse complete_with_retries(Backend& backend, const CompletionRequest& request,
                                         const RetryPolicy& policy = {},
                                         int* attempts_out = nullptr);

// ── scripted provider ───────────────────────────────────────────────────
//
// Script file: JSON Lines, one entry per line:
//   {"match": {"substring": "...", "role": "user"?},
//    "response": {"text": "..."} | {"tool_calls": [{"name": "...", "args": {...}}]}}
// Each request consumes the first unconsumed entry whose matcher hits the
// last message; an entry is consumed at most once.

std::unique_ptr<Backend> load_scripted_backend(const fs::path& script_path);
std::unique_ptr<Backend> make_scripted_backend(const std::string& script_jsonl,
                                               const std::string& origin = "<inline>");

// ── live provider ───────────────────────────────────────────────────────

struct HttpBackendConfig {
    std::string base_url; // e.g. "http://127.0.0.1:8080/v1"
    std::string model;
    double temperature = 1.0;
    int max_output = 4096;
    std::string api_key_env; // name of env var holding the key; empty = no auth header
    int timeout_seconds = 120;
};

std::unique_ptr<Backend> make_http_backend(HttpBackendConfig config);

// ── token estimation ────────────────────────────────────────────────────

// ceil(characters / 4): a provider-agnostic approximation, monotone in length.
std::int64_t estimate_tokens(const std::string& text);
std::int64_t estimate_request_tokens(const CompletionRequest& request);

} // namespace forge
