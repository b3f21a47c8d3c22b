#include "forge/llm.hpp"
#include "forge/errors.hpp"

#include <cstdlib>
#include <set>

#include <httplib.h>

namespace forge {

namespace {

// Generic chat-completions wire format: {model, temperature, messages,
// tools, max_tokens} in; {choices:[{message:{content | tool_calls}}],
// usage:{prompt_tokens, completion_tokens}} out.

json render_request_body(const HttpBackendConfig& config, const CompletionRequest& request) {
    json messages = json::array();
    for (const auto& message : request.messages) {
        json m = {{"role", message.role == MessageRole::tool_result
                               ? "tool"
                               : to_string(message.role)},
                  {"content", message.content}};
        if (message.role == MessageRole::tool_result) m["tool_call_id"] = message.tool_call_id;
        messages.push_back(std::move(m));
    }

    json body = {{"model", request.model.empty() ? config.model : request.model},
                 {"temperature", request.temperature},
                 {"messages", std::move(messages)}};
    if (request.max_output > 0)
        body["max_tokens"] = request.max_output;
    else if (config.max_output > 0)
        body["max_tokens"] = config.max_output;

    if (!request.tools.empty()) {
        json tools = json::array();
        for (const auto& tool : request.tools) {
            json properties = json::object();
            json required = json::array();
            for (const auto& param : tool.parameters) {
                properties[param.name] = {{"type", param.type}, {"description", param.description}};
                if (param.required) required.push_back(param.name);
            }
            tools.push_back({{"type", "function"},
                             {"function",
                              {{"name", tool.name},
                               {"description", tool.description},
                               {"parameters",
                                {{"type", "object"},
                                 {"properties", std::move(properties)},
                                 {"required", std::move(required)}}}}}});
        }
        body["tools"] = std::move(tools);
    }
    return body;
}

CompletionResponse parse_response_body(const std::string& body, const CompletionRequest& request) {
    json payload = json::parse(body, nullptr, false);
    if (payload.is_discarded())
        raise(ErrorKind::protocol, "provider returned non-JSON body");
    if (!payload.contains("choices") || !payload["choices"].is_array() ||
        payload["choices"].empty())
        raise(ErrorKind::protocol, "provider response lacks choices");

    const json& message = payload["choices"][0].value("message", json::object());
    CompletionResponse response;

    if (message.contains("tool_calls") && message["tool_calls"].is_array() &&
        !message["tool_calls"].empty()) {
        std::set<std::string> known;
        for (const auto& tool : request.tools) known.insert(tool.name);
        std::vector<ToolCall> calls;
        for (const auto& item : message["tool_calls"]) {
            ToolCall call;
            call.id = item.value("id", "call-" + std::to_string(calls.size() + 1));
            if (!item.contains("function"))
                raise(ErrorKind::protocol, "tool_call without function field");
            call.name = item["function"].value("name", "");
            if (!known.count(call.name))
                raise(ErrorKind::protocol, "provider called unknown tool '" + call.name + "'");
            const std::string raw_args = item["function"].value("arguments", "{}");
            call.args = json::parse(raw_args, nullptr, false);
            if (call.args.is_discarded())
                raise(ErrorKind::protocol, "tool_call arguments are not valid JSON");
            calls.push_back(std::move(call));
        }
        response.outcome = std::move(calls);
    } else if (message.contains("content") && message["content"].is_string()) {
        response.outcome = message["content"].get<std::string>();
    } else {
        raise(ErrorKind::protocol, "provider response has neither content nor tool_calls");
    }

    const json usage = payload.value("usage", json::object());
    response.usage.input_tokens = usage.value("prompt_tokens", std::int64_t{0});
    response.usage.output_tokens = usage.value("completion_tokens", std::int64_t{0});
    return response;
}

class HttpBackend : public Backend {
public:
    explicit HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
        const std::string& url = config_.base_url;
        if (url.rfind("http://", 0) != 0)
            raise(ErrorKind::invalid_input,
                  "backend base_url must be http:// (TLS terminates outside this client): " + url);
        const std::size_t host_start = 7;
        const std::size_t path_start = url.find('/', host_start);
        host_ = "http://" + (path_start == std::string::npos
                                 ? url.substr(host_start)
                                 : url.substr(host_start, path_start - host_start));
        path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
        if (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    }

protected:
    CompletionResponse complete_impl(const CompletionRequest& request) override {
        httplib::Client client(host_);
        client.set_connection_timeout(config_.timeout_seconds, 0);
        client.set_read_timeout(config_.timeout_seconds, 0);

        httplib::Headers headers;
        if (!config_.api_key_env.empty()) {
            const char* key = std::getenv(config_.api_key_env.c_str());
            if (!key || !*key)
                raise(ErrorKind::invalid_input,
                      "environment variable " + config_.api_key_env + " is not set");
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }

        const json body = render_request_body(config_, request);
        auto result = client.Post(path_prefix_ + "/chat/completions", headers, body.dump(),
                                  "application/json");
        if (!result)
            raise(ErrorKind::transport,
                  "request to " + host_ + " failed: " + httplib::to_string(result.error()),
                  /*retryable=*/true);
        if (result->status == 429 || result->status >= 500)
            raise(ErrorKind::transport,
                  "provider returned status " + std::to_string(result->status), /*retryable=*/true);
        if (result->status != 200)
            raise(ErrorKind::protocol, "provider returned status " + std::to_string(result->status) +
                                           ": " + result->body.substr(0, 400));
        return parse_response_body(result->body, request);
    }

private:
    HttpBackendConfig config_;
    std::string host_;
    std::string path_prefix_;
};

} // namespace

std::unique_ptr<Backend> make_http_backend(HttpBackendConfig config) {
    return std::make_unique<HttpBackend>(std::move(config));
}

} // namespace forge
