#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>
#include <thread>

#include "forge/errors.hpp"
#include "forge/llm.hpp"
#include "support.hpp"

using namespace forge;

namespace {

CompletionRequest simple_request(const std::string& user_text) {
    CompletionRequest request;
    request.messages = {ChatMessage::system("sys"), ChatMessage::user(user_text)};
    return request;
}

// Backend test double with a programmable failure sequence.
class FlakyBackend : public Backend {
public:
    explicit FlakyBackend(int failures_before_success, bool retryable = true)
        : failures_left_(failures_before_success), retryable_(retryable) {}

    int attempts_seen = 0;

protected:
    CompletionResponse complete_impl(const CompletionRequest&) override {
        ++attempts_seen;
        if (failures_left_-- > 0)
            raise(retryable_ ? ErrorKind::transport : ErrorKind::protocol, "synthetic failure",
                  retryable_);
        CompletionResponse response;
        response.outcome = std::string("ok");
        response.usage = {10, 2};
        return response;
    }

private:
    int failures_left_;
    bool retryable_;
};

} // namespace

TEST_CASE("estimate_tokens") {
    CHECK(estimate_tokens("") == 0);
    CHECK(estimate_tokens("12345678") == 2);
    CHECK(estimate_tokens("123456789") == 3);

    SUBCASE("ceiling subadditivity") {
        const std::vector<std::string> samples = {"", "a", "hello", "hello world",
                                                  std::string(1000, 'x')};
        for (const auto& a : samples)
            for (const auto& b : samples)
                CHECK(estimate_tokens(a + b) <= estimate_tokens(a) + estimate_tokens(b) + 1);
    }

    SUBCASE("monotone in length") {
        std::string text;
        std::int64_t last = 0;
        for (int i = 0; i < 64; ++i) {
            text += 'x';
            CHECK(estimate_tokens(text) >= last);
            last = estimate_tokens(text);
        }
    }
}

TEST_CASE("request validation") {
    FlakyBackend backend(0);
    SUBCASE("empty messages") {
        CompletionRequest request;
        CHECK_THROWS_AS(backend.complete(request), Error);
    }
    SUBCASE("first message must be system") {
        CompletionRequest request;
        request.messages = {ChatMessage::user("hi")};
        CHECK_THROWS_AS(backend.complete(request), Error);
    }
    SUBCASE("tool_result needs a call id") {
        CompletionRequest request;
        request.messages = {ChatMessage::system("s"), ChatMessage::tool("", "result")};
        CHECK_THROWS_AS(backend.complete(request), Error);
    }
    SUBCASE("duplicate tool names") {
        CompletionRequest request = simple_request("hi");
        request.tools = {{"t", "d", {}}, {"t", "d2", {}}};
        CHECK_THROWS_AS(backend.complete(request), Error);
    }
}

TEST_CASE("scripted backend") {
    const std::string script = test::join_script({
        test::text_entry("first", "answer one"),
        test::tool_entry("second", {{"do_thing", json{{"x", 1}}}}),
        test::text_entry("first", "answer two"),
    });
    auto backend = make_scripted_backend(script);

    SUBCASE("entries consumed in order by matching requests") {
        CHECK(backend->complete(simple_request("the first question")).final_text() ==
              "answer one");
        // same matcher again: first entry consumed, third entry answers
        CHECK(backend->complete(simple_request("the first question")).final_text() ==
              "answer two");
    }

    SUBCASE("tool_calls outcome carries the scripted calls") {
        const CompletionResponse response = backend->complete(simple_request("the second"));
        REQUIRE_FALSE(response.is_final());
        REQUIRE(response.tool_calls().size() == 1);
        CHECK(response.tool_calls()[0].name == "do_thing");
        CHECK(response.tool_calls()[0].args == json{{"x", 1}});
        CHECK_FALSE(response.tool_calls()[0].id.empty());
    }

    SUBCASE("exhaustion names the unmatched tail") {
        backend->complete(simple_request("first"));
        backend->complete(simple_request("first"));
        try {
            backend->complete(simple_request("first question, third time"));
            FAIL("expected exhaustion");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::exhausted);
            CHECK(contains(e.what(), "third time"));
        }
    }

    SUBCASE("role filter applies to the last message") {
        auto filtered = make_scripted_backend(
            test::join_script({test::text_entry("ping", "from-user", "user"),
                               test::text_entry("ping", "from-tool", "tool_result")}));
        CompletionRequest request = simple_request("x");
        request.messages.push_back(ChatMessage::assistant("calling"));
        request.messages.push_back(ChatMessage::tool("call-1", "ping"));
        CHECK(filtered->complete(request).final_text() == "from-tool");
    }

    SUBCASE("malformed script lines carry the line number") {
        try {
            make_scripted_backend("{\"match\": {\"substring\": \"a\"}, \"response\": {\"text\": \"b\"}}\nnot json\n");
            FAIL("expected format error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::format);
            CHECK(contains(e.what(), "line 2"));
        }
    }

    SUBCASE("deterministic: identical request sequences, identical responses") {
        auto a = make_scripted_backend(script);
        auto b = make_scripted_backend(script);
        for (const char* text : {"first", "second", "first"}) {
            const auto ra = a->complete(simple_request(text));
            const auto rb = b->complete(simple_request(text));
            CHECK(ra.is_final() == rb.is_final());
            if (ra.is_final()) CHECK(ra.final_text() == rb.final_text());
        }
    }
}

TEST_CASE("usage ledger conservation") {
    auto backend = make_scripted_backend(test::join_script({
        test::text_entry("a", "r1"),
        test::text_entry("b", "r2"),
        test::text_entry("c", "r3"),
    }));
    Usage manual_total;
    for (const char* text : {"a", "b", "c"}) {
        const CompletionResponse response = backend->complete(simple_request(text));
        manual_total.input_tokens += response.usage.input_tokens;
        manual_total.output_tokens += response.usage.output_tokens;
    }
    CHECK(backend->ledger().calls() == 3);
    CHECK(backend->ledger().total().input_tokens == manual_total.input_tokens);
    CHECK(backend->ledger().total().output_tokens == manual_total.output_tokens);
}

TEST_CASE("complete_with_retries") {
    RetryPolicy fast{3, std::chrono::milliseconds(1), 2.0};

    SUBCASE("two retryable failures then success: 3 attempts") {
        FlakyBackend backend(2);
        int attempts = 0;
        const CompletionResponse response =
            complete_with_retries(backend, simple_request("x"), fast, &attempts);
        CHECK(response.final_text() == "ok");
        CHECK(attempts == 3);
    }

    SUBCASE("non-retryable error propagates immediately") {
        FlakyBackend backend(5, /*retryable=*/false);
        int attempts = 0;
        CHECK_THROWS_AS(complete_with_retries(backend, simple_request("x"), fast, &attempts),
                        Error);
        CHECK(attempts == 1);
        CHECK(backend.attempts_seen == 1);
    }

    SUBCASE("exhaustion after max_attempts") {
        FlakyBackend backend(99);
        RetryPolicy two{2, std::chrono::milliseconds(1), 2.0};
        try {
            complete_with_retries(backend, simple_request("x"), two);
            FAIL("expected exhaustion");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::exhausted);
            CHECK(contains(e.what(), "2 attempts"));
        }
        CHECK(backend.attempts_seen == 2);
    }
}

TEST_CASE("http backend against a local test double") {
    httplib::Server server;
    std::string captured_body;
    std::string captured_auth;
    json reply = {{"choices", {{{"message", {{"content", "live answer"}}}}}},
                  {"usage", {{"prompt_tokens", 11}, {"completion_tokens", 3}}}};
    int status = 200;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        captured_body = req.body;
        captured_auth = req.get_header_value("Authorization");
        res.status = status;
        res.set_content(reply.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread server_thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpBackendConfig config;
    config.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    config.model = "test-model";
    config.api_key_env = "FORGE_TEST_KEY";
    setenv("FORGE_TEST_KEY", "sekrit", 1);
    auto backend = make_http_backend(config);

    CompletionRequest request = simple_request("hello");
    request.tools = {{"lookup", "find things", {{"q", "string", true, "query"}}}};

    SUBCASE("round trip: body rendered, response parsed, usage carried") {
        const CompletionResponse response = backend->complete(request);
        CHECK(response.final_text() == "live answer");
        CHECK(response.usage.input_tokens == 11);
        CHECK(response.usage.output_tokens == 3);
        CHECK(captured_auth == "Bearer sekrit");
        const json body = json::parse(captured_body);
        CHECK(body["model"] == "test-model");
        CHECK(body["temperature"] == 1.0);
        CHECK(body["messages"].size() == 2);
        CHECK(body["tools"][0]["function"]["name"] == "lookup");
    }

    SUBCASE("tool call response") {
        reply = {{"choices",
                  {{{"message",
                     {{"tool_calls",
                       {{{"id", "c9"},
                         {"function",
                          {{"name", "lookup"}, {"arguments", "{\"q\": \"x\"}"}}}}}}}}}}}};
        const CompletionResponse response = backend->complete(request);
        REQUIRE_FALSE(response.is_final());
        CHECK(response.tool_calls()[0].name == "lookup");
        CHECK(response.tool_calls()[0].args == json{{"q", "x"}});
    }

    SUBCASE("unknown tool in provider payload is a protocol error") {
        reply = {{"choices",
                  {{{"message",
                     {{"tool_calls",
                       {{{"id", "c1"},
                         {"function", {{"name", "nope"}, {"arguments", "{}"}}}}}}}}}}}};
        try {
            backend->complete(request);
            FAIL("expected protocol error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::protocol);
            CHECK_FALSE(e.retryable());
        }
    }

    SUBCASE("malformed body is a protocol error, not retryable") {
        server.Post("/v1/broken", [](const httplib::Request&, httplib::Response&) {});
        reply = json::object(); // no choices
        try {
            backend->complete(request);
            FAIL("expected protocol error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::protocol);
            CHECK_FALSE(e.retryable());
        }
    }

    SUBCASE("5xx is retryable transport") {
        status = 503;
        try {
            backend->complete(request);
            FAIL("expected transport error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::transport);
            CHECK(e.retryable());
        }
    }

    server.stop();
    server_thread.join();
}
