#include "forge/llm.hpp"
#include "forge/errors.hpp"

#include <atomic>
#include <optional>
#include <set>
#include <thread>

namespace forge {

const char* to_string(MessageRole role) {
    switch (role) {
        case MessageRole::system: return "system";
        case MessageRole::user: return "user";
        case MessageRole::assistant: return "assistant";
        case MessageRole::tool_result: return "tool_result";
    }
    return "user";
}

ChatMessage ChatMessage::system(std::string content) {
    return {MessageRole::system, std::move(content), {}};
}
ChatMessage ChatMessage::user(std::string content) {
    return {MessageRole::user, std::move(content), {}};
}
ChatMessage ChatMessage::assistant(std::string content) {
    return {MessageRole::assistant, std::move(content), {}};
}
ChatMessage ChatMessage::tool(std::string call_id, std::string content) {
    return {MessageRole::tool_result, std::move(content), std::move(call_id)};
}

void UsageLedger::add(const Usage& usage) {
    std::lock_guard lock(mutex_);
    total_.input_tokens += usage.input_tokens;
    total_.output_tokens += usage.output_tokens;
    ++calls_;
}

Usage UsageLedger::total() const {
    std::lock_guard lock(mutex_);
    return total_;
}

std::int64_t UsageLedger::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

static void validate_request(const CompletionRequest& request) {
    if (request.messages.empty())
        raise(ErrorKind::precondition, "completion request has no messages");
    if (request.messages.front().role != MessageRole::system)
        raise(ErrorKind::precondition, "first message must have role=system");
    for (const auto& message : request.messages) {
        if (message.role == MessageRole::tool_result && message.tool_call_id.empty())
            raise(ErrorKind::precondition, "tool_result message without tool_call_id");
    }
    std::set<std::string> tool_names;
    for (const auto& tool : request.tools) {
        if (!tool_names.insert(tool.name).second)
            raise(ErrorKind::precondition, "duplicate tool name '" + tool.name + "' in request");
        std::set<std::string> param_names;
        for (const auto& param : tool.parameters)
            if (!param_names.insert(param.name).second)
                raise(ErrorKind::precondition,
                      "duplicate parameter '" + param.name + "' in tool '" + tool.name + "'");
    }
}

CompletionResponse Backend::complete(const CompletionRequest& request) {
    validate_request(request);
    CompletionResponse response = complete_impl(request);
    ledger_.add(response.usage);
    return response;
}

CompletionResponse complete_with_retries(Backend& backend, const CompletionRequest& request,
                                         const RetryPolicy& policy, int* attempts_out) {
    if (policy.max_attempts < 1)
        raise(ErrorKind::precondition, "max_attempts must be >= 1");
    auto delay = policy.base_delay;
    std::string last_error;
    for (int attempt = 1; attempt <= policy.max_attempts; ++attempt) {
        if (attempts_out) *attempts_out = attempt;
        try {
            return backend.complete(request);
        } catch (const Error& e) {
            if (!e.retryable()) throw;
            last_error = e.what();
            if (attempt == policy.max_attempts) break;
            std::this_thread::sleep_for(delay);
            delay = std::chrono::milliseconds(
                static_cast<std::int64_t>(static_cast<double>(delay.count()) * policy.multiplier));
        }
    }
    raise(ErrorKind::exhausted, "completion failed after " + std::to_string(policy.max_attempts) +
                                    " attempts; last error: " + last_error);
}

std::int64_t estimate_tokens(const std::string& text) {
    return static_cast<std::int64_t>((text.size() + 3) / 4);
}

std::int64_t estimate_request_tokens(const CompletionRequest& request) {
    std::int64_t total = 0;
    for (const auto& message : request.messages) total += estimate_tokens(message.content);
    for (const auto& tool : request.tools) {
        total += estimate_tokens(tool.name) + estimate_tokens(tool.description);
        for (const auto& param : tool.parameters)
            total += estimate_tokens(param.name) + estimate_tokens(param.description);
    }
    return total;
}

// ── scripted provider ───────────────────────────────────────────────────

namespace {

struct ScriptEntry {
    std::string substring;
    std::optional<MessageRole> role;
    CompletionResponse response;
    bool consumed = false;
    int line = 0;
};

MessageRole role_from_string(const std::string& s, int line) {
    if (s == "system") return MessageRole::system;
    if (s == "user") return MessageRole::user;
    if (s == "assistant") return MessageRole::assistant;
    if (s == "tool_result") return MessageRole::tool_result;
    raise(ErrorKind::format, "script line " + std::to_string(line) + ": unknown role '" + s + "'");
}

class ScriptedBackend : public Backend {
public:
    ScriptedBackend(std::vector<ScriptEntry> entries) : entries_(std::move(entries)) {}

protected:
    CompletionResponse complete_impl(const CompletionRequest& request) override {
        std::lock_guard lock(mutex_);
        const ChatMessage& last = request.messages.back();
        for (auto& entry : entries_) {
            if (entry.consumed) continue;
            if (entry.role && *entry.role != last.role) continue;
            if (!contains(last.content, entry.substring)) continue;
            entry.consumed = true;
            CompletionResponse response = entry.response;
            if (!response.is_final()) {
                auto calls = response.tool_calls();
                for (auto& call : calls)
                    call.id = "call-" + std::to_string(next_call_id_.fetch_add(1));
                response.outcome = std::move(calls);
            }
            response.usage.input_tokens = estimate_request_tokens(request);
            response.usage.output_tokens =
                response.is_final() ? estimate_tokens(response.final_text())
                                    : static_cast<std::int64_t>(response.tool_calls().size() * 16);
            return response;
        }
        std::string tail = last.content.size() > 400
                               ? last.content.substr(last.content.size() - 400)
                               : last.content;
        raise(ErrorKind::exhausted,
              "scripted backend has no unconsumed entry matching last message (role=" +
                  std::string(to_string(last.role)) + ", tail=\"" + tail + "\")");
    }

private:
    std::mutex mutex_;
    std::vector<ScriptEntry> entries_;
    std::atomic<int> next_call_id_{1};
};

std::vector<ScriptEntry> parse_script(const std::string& text, const std::string& origin) {
    std::vector<ScriptEntry> entries;
    int line_no = 0;
    for (const auto& line : split_lines(text)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json entry = json::parse(line, nullptr, false);
        if (entry.is_discarded() || !entry.is_object())
            raise(ErrorKind::format, origin + ": script line " + std::to_string(line_no) +
                                         " is not a JSON object");
        ScriptEntry parsed;
        parsed.line = line_no;
        try {
            const json& match = entry.at("match");
            parsed.substring = match.at("substring").get<std::string>();
            if (match.contains("role"))
                parsed.role = role_from_string(match["role"].get<std::string>(), line_no);

            const json& response = entry.at("response");
            if (response.contains("text")) {
                parsed.response.outcome = response["text"].get<std::string>();
            } else if (response.contains("tool_calls")) {
                std::vector<ToolCall> calls;
                for (const auto& item : response["tool_calls"]) {
                    ToolCall call;
                    call.name = item.at("name").get<std::string>();
                    call.args = item.value("args", json::object());
                    calls.push_back(std::move(call));
                }
                parsed.response.outcome = std::move(calls);
            } else {
                raise(ErrorKind::format, origin + ": script line " + std::to_string(line_no) +
                                             " response needs text or tool_calls");
            }
        } catch (const json::exception& e) {
            raise(ErrorKind::format, origin + ": script line " + std::to_string(line_no) + ": " +
                                         e.what());
        }
        entries.push_back(std::move(parsed));
    }
    return entries;
}

} // namespace

std::unique_ptr<Backend> make_scripted_backend(const std::string& script_jsonl,
                                               const std::string& origin) {
    return std::make_unique<ScriptedBackend>(parse_script(script_jsonl, origin));
}

std::unique_ptr<Backend> load_scripted_backend(const fs::path& script_path) {
    return make_scripted_backend(read_file(script_path), script_path.string());
}

} // namespace forge
