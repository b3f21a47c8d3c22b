#include "forge/agents.hpp"
#include "forge/errors.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <sstream>
#include <thread>

namespace forge {

const char* to_string(RoleName role) {
    switch (role) {
        case RoleName::setup: return "setup";
        case RoleName::manager: return "manager";
        case RoleName::designer: return "designer";
        case RoleName::coder: return "coder";
        case RoleName::tuner: return "tuner";
        case RoleName::aggregator: return "aggregator";
    }
    return "designer";
}

const char* to_string(AgentOutcome outcome) {
    switch (outcome) {
        case AgentOutcome::completed: return "completed";
        case AgentOutcome::step_limit: return "step_limit";
        case AgentOutcome::budget_exhausted: return "budget_exhausted";
        case AgentOutcome::failed: return "failed";
    }
    return "failed";
}

int default_max_steps(RoleName role) {
    switch (role) {
        case RoleName::setup: return 10;
        case RoleName::manager: return 120;
        case RoleName::designer: return 12;
        case RoleName::coder: return 40;
        case RoleName::tuner: return 30;
        case RoleName::aggregator: return 20;
    }
    return 12;
}

namespace {

double unix_now() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

class UnlimitedBudget : public BudgetView {
public:
    explicit UnlimitedBudget(double execute_timeout) : execute_timeout_(execute_timeout) {}
    bool exhausted() const override { return false; }
    double remaining_seconds() const override { return 1e12; }
    double execute_timeout_seconds() const override { return execute_timeout_; }

private:
    double execute_timeout_;
};

} // namespace

std::shared_ptr<BudgetView> unlimited_budget(double execute_timeout) {
    return std::make_shared<UnlimitedBudget>(execute_timeout);
}

// ── knowledge rendering and the query tool ──────────────────────────────

std::string render_l1_index(const KnowledgeBase& kb) {
    std::ostringstream out;
    out << "Knowledge index (query a category key for its full guidance):\n";
    for (const auto& entry : kb.l1_index) {
        std::string description = entry.description;
        std::replace(description.begin(), description.end(), '\n', ' ');
        out << "- " << entry.key << " [" << to_string(entry.kind) << "] " << description << "\n";
    }
    return out.str();
}

std::string render_l1_value(const L1Value& value) {
    std::ostringstream out;
    out << "category: " << value.key << "\n\n" << value.instruction;
    std::string rendered = out.str();
    if (rendered.back() != '\n') rendered += '\n';
    rendered += "\navailable documents (query {key, doc_id} to load one):\n";
    if (value.l2_index.empty()) rendered += "(none)\n";
    for (const auto& ptr : value.l2_index) {
        std::string description = ptr.description;
        std::replace(description.begin(), description.end(), '\n', ' ');
        rendered += "- " + ptr.doc_id + " :: " + description + "\n";
    }
    return rendered;
}

std::string query_tool(const KnowledgeBase& kb, LoadedKnowledge& loaded, const json& args) {
    if (!args.is_object() || !args.contains("key"))
        raise(ErrorKind::protocol, "query needs {key} or {key, doc_id}");
    const CategoryKey key = args["key"].get<std::string>();

    if (!args.contains("doc_id") || args["doc_id"].is_null()) {
        const L1Value& value = query_category(kb, key);
        loaded.categories.insert(key);
        return render_l1_value(value);
    }

    const std::string doc_id = args["doc_id"].get<std::string>();
    if (!loaded.categories.count(key))
        raise(ErrorKind::protocol, "document query for '" + key + "/" + doc_id +
                                       "' before the category was loaded; call query {key: \"" +
                                       key + "\"} first");
    const L2Document& doc = query_document(kb, key, doc_id);
    loaded.documents.insert({key, doc_id});
    return doc.body;
}

// ── tool registry ───────────────────────────────────────────────────────

void ToolRegistry::add(ToolSchema schema, Handler handler, bool asynchronous) {
    const std::string name = schema.name;
    entries_[name] = {std::move(schema), std::move(handler), asynchronous};
}

bool ToolRegistry::has(const std::string& name) const { return entries_.count(name) > 0; }

bool ToolRegistry::is_async(const std::string& name) const {
    const auto it = entries_.find(name);
    return it != entries_.end() && it->second.asynchronous;
}

const ToolRegistry::Handler& ToolRegistry::handler(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) raise(ErrorKind::not_found, "no tool named '" + name + "'");
    return it->second.handler;
}

std::vector<ToolSchema> ToolRegistry::schemas(const std::set<std::string>& allowed) const {
    std::vector<ToolSchema> out;
    for (const auto& [name, entry] : entries_)
        if (allowed.count(name)) out.push_back(entry.schema);
    return out;
}

// ── transcripts ─────────────────────────────────────────────────────────

static json response_to_json(const CompletionResponse& response) {
    json out;
    if (response.is_final()) {
        out["text"] = response.final_text();
    } else {
        json calls = json::array();
        for (const auto& call : response.tool_calls())
            calls.push_back({{"id", call.id}, {"name", call.name}, {"args", call.args}});
        out["tool_calls"] = std::move(calls);
    }
    out["usage"] = {{"input_tokens", response.usage.input_tokens},
                    {"output_tokens", response.usage.output_tokens}};
    return out;
}

json AgentTranscript::to_json() const {
    json steps_json = json::array();
    for (const auto& step : steps) {
        json tools = json::array();
        for (const auto& tool : step.tools) {
            tools.push_back({{"call_id", tool.call_id},
                             {"name", tool.name},
                             {"args", tool.args},
                             {"result", tool.result},
                             {"is_error", tool.is_error},
                             {"elapsed_seconds", tool.elapsed_seconds}});
        }
        steps_json.push_back(
            {{"seq", step.seq}, {"response", response_to_json(step.response)}, {"tools", tools}});
    }
    json out = {{"role", to_string(role)},
                {"steps", steps_json},
                {"outcome", to_string(outcome)},
                {"final_text", final_text},
                {"usage",
                 {{"input_tokens", usage.input_tokens}, {"output_tokens", usage.output_tokens}}},
                {"started_unix", started_unix},
                {"finished_unix", finished_unix}};
    if (repo_id) out["repo_id"] = *repo_id;
    if (!error.empty()) out["error"] = error;
    return out;
}

TranscriptWriter::TranscriptWriter(fs::path run_dir) : dir_(std::move(run_dir)) {
    fs::create_directories(dir_ / "transcripts");
}

void TranscriptWriter::write(const AgentTranscript& transcript) {
    std::lock_guard lock(mutex_);
    std::string stem = to_string(transcript.role);
    if (transcript.repo_id) stem += "-repo" + std::to_string(*transcript.repo_id);
    const int seq = ++sequence_[stem];
    const fs::path path = dir_ / "transcripts" / (stem + "-" + std::to_string(seq) + ".jsonl");

    std::ostringstream out;
    const json full = transcript.to_json();
    for (const auto& step : full["steps"]) out << step.dump() << "\n";
    json footer = full;
    footer.erase("steps");
    footer["record"] = "outcome";
    out << footer.dump() << "\n";
    write_file(path, out.str());
}

std::vector<fs::path> TranscriptWriter::written() const {
    std::lock_guard lock(mutex_);
    std::vector<fs::path> paths;
    for (const auto& file : fs::directory_iterator(dir_ / "transcripts"))
        if (file.path().extension() == ".jsonl") paths.push_back(file.path());
    std::sort(paths.begin(), paths.end());
    return paths;
}

// ── context assembly ────────────────────────────────────────────────────

namespace {

std::string render_repo_summary(const RepoSummary& summary, std::size_t cap) {
    std::ostringstream out;
    out << "## repository " << summary.repo_id << "\n";
    out << "### plan\n" << truncate_middle(summary.plan, cap, cap / 4) << "\n";
    out << "### config\n" << truncate_middle(summary.config, cap / 2, cap / 8) << "\n";
    if (!summary.last_result.empty())
        out << "### last result\n" << truncate_middle(summary.last_result, cap, cap / 4) << "\n";
    return out.str();
}

std::vector<ChatMessage> history_messages(const std::vector<HistoryEntry>& history,
                                          std::size_t skip) {
    std::vector<ChatMessage> out;
    if (skip > 0)
        out.push_back(
            ChatMessage::user("[context: " + std::to_string(skip) + " earlier steps elided]"));
    for (std::size_t i = skip; i < history.size(); ++i) {
        const HistoryEntry& entry = history[i];
        if (entry.response.is_final()) {
            out.push_back(ChatMessage::assistant(entry.response.final_text()));
        } else {
            std::ostringstream calls;
            for (const auto& call : entry.response.tool_calls())
                calls << "[tool_call " << call.id << " " << call.name << " " << call.args.dump()
                      << "]\n";
            out.push_back(ChatMessage::assistant(calls.str()));
        }
        for (const auto& tool : entry.tools) {
            const std::string prefix = tool.is_error ? "ERROR: " : "";
            out.push_back(ChatMessage::tool(tool.call_id, prefix + tool.result));
        }
    }
    return out;
}

std::int64_t messages_tokens(const std::vector<ChatMessage>& messages) {
    std::int64_t total = 0;
    for (const auto& message : messages) total += estimate_tokens(message.content);
    return total;
}

} // namespace

std::vector<ChatMessage> assemble_context(const AgentRole& role, const std::string& task_text,
                                          const std::optional<RepoSummary>& repo_state,
                                          const KnowledgeBase& kb,
                                          const std::vector<HistoryEntry>& history,
                                          const ContextBudget& budget) {
    const std::int64_t usable = static_cast<std::int64_t>(
        static_cast<double>(budget.max_input_tokens) * (1.0 - budget.safety_margin));

    auto build = [&](std::size_t skip_history, std::size_t repo_cap) {
        std::vector<ChatMessage> messages;
        messages.push_back(ChatMessage::system(role.system_prompt));
        std::string body = render_l1_index(kb);
        body += "\n## task\n" + task_text + "\n";
        if (repo_state) body += "\n" + render_repo_summary(*repo_state, repo_cap);
        messages.push_back(ChatMessage::user(body));
        for (auto& message : history_messages(history, skip_history))
            messages.push_back(std::move(message));
        return messages;
    };

    std::size_t repo_cap = 8192;
    std::vector<ChatMessage> messages = build(0, repo_cap);
    if (messages_tokens(messages) <= usable) return messages;

    // Oldest history goes first, then the repo excerpts shrink. The system
    // prompt and the L1 index are never dropped.
    for (std::size_t skip = 1; skip <= history.size(); ++skip) {
        messages = build(skip, repo_cap);
        if (messages_tokens(messages) <= usable) return messages;
    }
    while (repo_cap > 128) {
        repo_cap /= 2;
        messages = build(history.size(), repo_cap);
        if (messages_tokens(messages) <= usable) return messages;
    }
    raise(ErrorKind::context, "fixed context parts alone exceed the input budget of " +
                                  std::to_string(usable) + " estimated tokens");
}

// ── the agent loop ──────────────────────────────────────────────────────

AgentTranscript run_agent(const AgentRole& role, const std::string& task_text,
                          const std::optional<RepoSummary>& repo_state, const KnowledgeBase& kb,
                          const ToolRegistry& registry, Backend& backend, BudgetView& budget,
                          const AgentLoopConfig& config) {
    AgentTranscript transcript;
    transcript.role = role.name;
    transcript.started_unix = unix_now();
    if (repo_state) transcript.repo_id = repo_state->repo_id;

    std::vector<HistoryEntry> history;
    const std::vector<ToolSchema> schemas = registry.schemas(role.allowed_tools);

    auto finish = [&](AgentOutcome outcome) {
        transcript.outcome = outcome;
        transcript.finished_unix = unix_now();
        return transcript;
    };

    for (int step = 1; step <= role.max_steps; ++step) {
        if (budget.exhausted()) return finish(AgentOutcome::budget_exhausted);
        if (config.early_stop) {
            if (auto reason = config.early_stop()) {
                transcript.final_text = *reason;
                return finish(AgentOutcome::completed);
            }
        }

        CompletionRequest request;
        request.model = config.model;
        request.temperature = config.temperature;
        request.tools = schemas;
        try {
            request.messages =
                assemble_context(role, task_text, repo_state, kb, history, config.context);
        } catch (const Error& e) {
            transcript.error = e.what();
            return finish(AgentOutcome::failed);
        }

        CompletionResponse response;
        try {
            response = complete_with_retries(backend, request, config.retries);
        } catch (const Error& e) {
            transcript.error = e.what();
            return finish(AgentOutcome::failed);
        }
        transcript.usage.input_tokens += response.usage.input_tokens;
        transcript.usage.output_tokens += response.usage.output_tokens;

        TranscriptStep record;
        record.seq = step;
        record.response = response;

        if (response.is_final()) {
            transcript.steps.push_back(std::move(record));
            transcript.final_text = response.final_text();
            return finish(AgentOutcome::completed);
        }

        // Synchronous tools run in call order; asynchronous ones (the
        // manager's sub-agent invocations) run concurrently and land after
        // them in completion order. Tool failures become error results and
        // never abort the loop.
        auto run_one = [&](const ToolCall& call) {
            ToolExecution execution;
            execution.call_id = call.id;
            execution.name = call.name;
            execution.args = call.args;
            const auto started = std::chrono::steady_clock::now();
            try {
                if (!role.allowed_tools.count(call.name))
                    raise(ErrorKind::protocol, "tool '" + call.name +
                                                   "' is not available to the " +
                                                   std::string(to_string(role.name)) + " role");
                if (!registry.has(call.name))
                    raise(ErrorKind::not_found, "no tool named '" + call.name + "'");
                execution.result = registry.handler(call.name)(call.args);
            } catch (const std::exception& e) {
                execution.is_error = true;
                execution.result = e.what();
            }
            execution.elapsed_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            return execution;
        };

        std::vector<ToolExecution> executions;
        std::vector<const ToolCall*> async_calls;
        for (const ToolCall& call : response.tool_calls()) {
            if (registry.has(call.name) && registry.is_async(call.name) &&
                role.allowed_tools.count(call.name)) {
                async_calls.push_back(&call);
            } else {
                executions.push_back(run_one(call));
            }
        }
        if (!async_calls.empty()) {
            std::mutex done_mutex;
            std::vector<ToolExecution> done;
            std::vector<std::thread> threads;
            threads.reserve(async_calls.size());
            for (const ToolCall* call : async_calls) {
                threads.emplace_back([&, call] {
                    ToolExecution execution = run_one(*call);
                    std::lock_guard lock(done_mutex);
                    done.push_back(std::move(execution));
                });
            }
            for (auto& thread : threads) thread.join();
            for (auto& execution : done) executions.push_back(std::move(execution));
        }

        record.tools = executions;
        transcript.steps.push_back(record);
        history.push_back({std::move(response), std::move(executions)});
    }
    return finish(AgentOutcome::step_limit);
}

// ── leases ──────────────────────────────────────────────────────────────

bool LeaseTable::try_acquire(int repo_id) {
    std::lock_guard lock(mutex_);
    return held_.insert(repo_id).second;
}

void LeaseTable::release(int repo_id) {
    std::lock_guard lock(mutex_);
    held_.erase(repo_id);
}

// ── roles ───────────────────────────────────────────────────────────────

AgentRole make_role(RoleName name, const PromptLibrary& prompts,
                    const std::map<std::string, std::string>& vars, int repo_count,
                    int own_repo) {
    AgentRole role;
    role.name = name;
    role.system_prompt = prompts.render(to_string(name), vars);
    role.prompt_version = prompts.version(to_string(name));
    role.max_steps = default_max_steps(name);

    auto suffixed = [](const char* base, int i) { return std::string(base) + "_" + std::to_string(i); };
    switch (name) {
        case RoleName::setup:
            role.allowed_tools = {"execute_env", "query"};
            break;
        case RoleName::manager:
            role.allowed_tools = {"query"};
            for (int i = 1; i <= repo_count; ++i) {
                role.allowed_tools.insert(suffixed("invoke_designer", i));
                role.allowed_tools.insert(suffixed("invoke_coder", i));
                role.allowed_tools.insert(suffixed("invoke_tuner", i));
                role.allowed_tools.insert(suffixed("read", i));
                role.allowed_tools.insert(suffixed("halt", i));
            }
            break;
        case RoleName::designer:
        case RoleName::coder:
        case RoleName::tuner:
            role.allowed_tools = {"query", suffixed("read", own_repo),
                                  suffixed("write", own_repo), suffixed("execute", own_repo)};
            break;
        case RoleName::aggregator:
            role.allowed_tools = {"query", "write_final", "execute_final", "hill_climb_blend"};
            for (int i = 1; i <= repo_count; ++i) role.allowed_tools.insert(suffixed("read", i));
            break;
    }
    return role;
}

RepoSummary summarize_repo(Repository& repo) {
    RepoSummary summary;
    summary.repo_id = repo.id();
    try {
        summary.plan = repo.read_artifact("plan.md").content;
    } catch (const Error&) {
    }
    try {
        summary.config = repo.read_artifact("config.yaml").content;
    } catch (const Error&) {
    }
    const auto results = repo.results();
    if (!results.empty()) {
        const ExecutionResult& last = results.back();
        std::ostringstream out;
        out << "run " << last.run_id << ": exit " << last.exit_code << ", "
            << last.duration_seconds << "s" << (last.timed_out ? " (timed out)" : "");
        if (last.parsed_metrics)
            out << ", " << last.parsed_metrics->metric_name << "=" << last.parsed_metrics->value;
        summary.last_result = out.str();
    }
    return summary;
}

// ── shared tool builders ────────────────────────────────────────────────

namespace {

std::string render_execution(const ExecutionResult& result, Repository& repo) {
    std::ostringstream out;
    out << "repo: " << repo.id() << "\nrun_id: " << result.run_id
        << "\nexit_code: " << result.exit_code
        << "\nduration_seconds: " << result.duration_seconds
        << "\ntimed_out: " << (result.timed_out ? "true" : "false") << "\n";
    if (result.parsed_metrics)
        out << "metrics: " << result.parsed_metrics->metric_name << "="
            << result.parsed_metrics->value << " ("
            << (result.parsed_metrics->split == MetricSplit::validation ? "validation" : "test")
            << ", " << (result.parsed_metrics->higher_is_better ? "higher" : "lower")
            << " is better)\n";
    auto tail = [&](const std::string& rel) {
        try {
            return truncate_middle(repo.read_artifact(rel, 4096).content, 1024, 3072);
        } catch (const Error&) {
            return std::string("(missing)");
        }
    };
    out << "stdout:\n" << tail(result.stdout_path) << "\nstderr:\n" << tail(result.stderr_path);
    return out.str();
}

std::string render_best_metric(Repository& repo) {
    const auto best = repo.best_metric();
    if (!best) return "none";
    std::ostringstream out;
    out << best->metric_name << "=" << best->value << " ("
        << (best->higher_is_better ? "higher" : "lower") << " is better)";
    return out.str();
}

void add_query_tool(ToolRegistry& registry, const KnowledgeBase& kb,
                    std::shared_ptr<LoadedKnowledge> loaded) {
    ToolSchema schema;
    schema.name = "query";
    schema.description =
        "Load knowledge: {key} returns a category's guidance and its document index; "
        "{key, doc_id} returns one document body (load the category first).";
    schema.parameters = {{"key", "string", true, "category key from the knowledge index"},
                         {"doc_id", "string", false, "document id from the category's index"}};
    registry.add(schema,
                 [&kb, loaded](const json& args) { return query_tool(kb, *loaded, args); });
}

void add_repo_tools(ToolRegistry& registry, const std::shared_ptr<Repository>& repo,
                    BudgetView& budget, const std::map<std::string, std::string>& env_overrides,
                    bool writable) {
    const std::string suffix = "_" + std::to_string(repo->id());

    ToolSchema read_schema;
    read_schema.name = "read" + suffix;
    read_schema.description = "Read a file inside repository " + std::to_string(repo->id()) +
                              "; long files are head/tail truncated.";
    read_schema.parameters = {{"path", "string", true, "path relative to the repository root"}};
    registry.add(read_schema, [repo](const json& args) {
        const auto artifact = repo->read_artifact(args.at("path").get<std::string>());
        return artifact.truncated ? artifact.content + "\n[truncated]" : artifact.content;
    });

    if (!writable) return;

    ToolSchema write_schema;
    write_schema.name = "write" + suffix;
    write_schema.description = "Write a file inside repository " + std::to_string(repo->id()) +
                               ", creating parent directories.";
    write_schema.parameters = {{"path", "string", true, "path relative to the repository root"},
                               {"content", "string", true, "full file content"}};
    registry.add(write_schema, [repo](const json& args) {
        repo->write_artifact(args.at("path").get<std::string>(),
                             args.at("content").get<std::string>());
        return "repo " + std::to_string(repo->id()) + ": written " +
               args.at("path").get<std::string>() + " (status: " + to_string(repo->status()) +
               ")";
    });

    ToolSchema exec_schema;
    exec_schema.name = "execute" + suffix;
    exec_schema.description =
        "Run a shell command with the repository root as working directory; stdout/stderr "
        "are captured and metrics.json is parsed when present.";
    exec_schema.parameters = {
        {"command", "string", true, "shell command"},
        {"timeout_seconds", "number", false, "override of the default execute timeout"}};
    registry.add(exec_schema, [repo, &budget, env_overrides](const json& args) {
        double timeout = budget.execute_timeout_seconds();
        if (args.contains("timeout_seconds"))
            timeout = std::min(args["timeout_seconds"].get<double>(), budget.remaining_seconds());
        const ExecutionResult result =
            repo->execute(args.at("command").get<std::string>(), timeout, env_overrides);
        return render_execution(result, *repo);
    });
}

AgentTranscript run_worker(RoleName role_name, const AgentEnv& env,
                           const std::shared_ptr<Repository>& repo, Backend& backend,
                           BudgetView& budget, const std::string& extra_instructions) {
    const std::map<std::string, std::string> vars = {{"repo_id", std::to_string(repo->id())}};
    const AgentRole role = make_role(role_name, *env.prompts, vars, 0, repo->id());

    ToolRegistry registry;
    auto loaded = std::make_shared<LoadedKnowledge>();
    add_query_tool(registry, env.kb, loaded);
    add_repo_tools(registry, repo, budget, env.env_overrides, /*writable=*/true);

    std::string task = env.task_text;
    if (!extra_instructions.empty()) task += "\n\n## manager instructions\n" + extra_instructions;

    AgentTranscript transcript =
        run_agent(role, task, summarize_repo(*repo), env.kb, registry, backend, budget, env.loop);

    // Role-specific success checks on top of the generic loop outcome.
    if (transcript.outcome == AgentOutcome::completed) {
        const std::string suffix = "_" + std::to_string(repo->id());
        bool wrote_plan = false;
        bool any_execute = false;
        bool last_execute_ok = false;
        for (const auto& step : transcript.steps) {
            for (const auto& tool : step.tools) {
                if (tool.is_error) continue;
                if (tool.name == "write" + suffix && tool.args.value("path", "") == "plan.md")
                    wrote_plan = true;
                if (tool.name == "execute" + suffix) {
                    any_execute = true;
                    last_execute_ok = contains(tool.result, "exit_code: 0");
                }
            }
        }
        if (role_name == RoleName::designer && !wrote_plan) {
            transcript.outcome = AgentOutcome::failed;
            transcript.error = "designer finished without writing plan.md";
        }
        if (role_name == RoleName::coder && (!any_execute || !last_execute_ok)) {
            transcript.outcome = AgentOutcome::failed;
            transcript.error = "coder finished without a passing verification run";
        }
        if (role_name == RoleName::tuner && !any_execute) {
            transcript.outcome = AgentOutcome::failed;
            transcript.error = "tuner finished without executing the training entry point";
        }
    }

    if (env.transcripts) env.transcripts->write(transcript);
    return transcript;
}

} // namespace

// ── role runners ────────────────────────────────────────────────────────

AgentTranscript run_designer(const AgentEnv& env, const std::shared_ptr<Repository>& repo,
                             Backend& backend, BudgetView& budget,
                             const std::string& extra_instructions) {
    return run_worker(RoleName::designer, env, repo, backend, budget, extra_instructions);
}

AgentTranscript run_coder(const AgentEnv& env, const std::shared_ptr<Repository>& repo,
                          Backend& backend, BudgetView& budget,
                          const std::string& extra_instructions) {
    if (repo->status() == RepoStatus::empty)
        raise(ErrorKind::precondition,
              "coder needs a plan: repository " + std::to_string(repo->id()) + " is empty");
    return run_worker(RoleName::coder, env, repo, backend, budget, extra_instructions);
}

AgentTranscript run_tuner(const AgentEnv& env, const std::shared_ptr<Repository>& repo,
                          Backend& backend, BudgetView& budget,
                          const std::string& extra_instructions) {
    const RepoStatus status = repo->status();
    if (status == RepoStatus::empty || status == RepoStatus::planned)
        raise(ErrorKind::precondition, "tuner needs code: repository " +
                                           std::to_string(repo->id()) + " is " +
                                           to_string(status));
    return run_worker(RoleName::tuner, env, repo, backend, budget, extra_instructions);
}

SetupResult run_setup(const AgentEnv& env, const fs::path& env_root, Backend& backend,
                      BudgetView& budget) {
    fs::create_directories(env_root);
    const AgentRole role = make_role(RoleName::setup, *env.prompts, {}, 0, 0);

    ToolRegistry registry;
    auto loaded = std::make_shared<LoadedKnowledge>();
    add_query_tool(registry, env.kb, loaded);

    ToolSchema exec_schema;
    exec_schema.name = "execute_env";
    exec_schema.description = "Run a shell command in the shared environment workspace.";
    exec_schema.parameters = {{"command", "string", true, "shell command"},
                              {"timeout_seconds", "number", false, "timeout override"}};
    registry.add(exec_schema, [&env_root, &budget](const json& args) {
        double timeout = budget.execute_timeout_seconds();
        if (args.contains("timeout_seconds"))
            timeout = std::min(args["timeout_seconds"].get<double>(), budget.remaining_seconds());
        const CommandResult result =
            run_command(env_root, args.at("command").get<std::string>(), timeout);
        std::ostringstream out;
        out << "exit_code: " << result.exit_code
            << "\nduration_seconds: " << result.duration_seconds
            << "\ntimed_out: " << (result.timed_out ? "true" : "false") << "\nstdout:\n"
            << truncate_middle(result.stdout_text, 1024, 3072) << "\nstderr:\n"
            << truncate_middle(result.stderr_text, 1024, 3072);
        return out.str();
    });

    SetupResult setup;
    try {
        setup.transcript = run_agent(role, env.task_text, std::nullopt, env.kb, registry, backend,
                                     budget, env.loop);
    } catch (const Error& e) {
        setup.transcript.role = RoleName::setup;
        setup.transcript.outcome = AgentOutcome::failed;
        setup.transcript.error = e.what();
    }

    // Overrides come back as "ENV NAME=VALUE" lines in the final text;
    // anything else in the text is ignored.
    if (setup.transcript.outcome == AgentOutcome::completed) {
        for (const auto& line : split_lines(setup.transcript.final_text)) {
            const std::string t = trim(line);
            if (t.rfind("ENV ", 0) != 0) continue;
            const std::string assignment = t.substr(4);
            const std::size_t eq = assignment.find('=');
            if (eq == std::string::npos || eq == 0) continue;
            setup.env_overrides[trim(assignment.substr(0, eq))] = assignment.substr(eq + 1);
        }
    } else {
        log_warning("setup agent did not complete (" +
                    std::string(to_string(setup.transcript.outcome)) +
                    "); continuing with no environment overrides");
    }

    if (env.transcripts) env.transcripts->write(setup.transcript);
    return setup;
}

ManagerResult run_manager(const AgentEnv& env,
                          const std::vector<std::shared_ptr<Repository>>& repos,
                          Backend& backend, BudgetView& budget) {
    const std::map<std::string, std::string> vars = {
        {"repo_count", std::to_string(repos.size())}};
    const AgentRole role =
        make_role(RoleName::manager, *env.prompts, vars, static_cast<int>(repos.size()), 0);

    ManagerResult manager;
    auto leases = std::make_shared<LeaseTable>();
    auto sub_mutex = std::make_shared<std::mutex>();

    ToolRegistry registry;
    auto loaded = std::make_shared<LoadedKnowledge>();
    add_query_tool(registry, env.kb, loaded);

    for (const auto& repo : repos) {
        add_repo_tools(registry, repo, budget, env.env_overrides, /*writable=*/false);
        const std::string suffix = "_" + std::to_string(repo->id());

        ToolSchema halt_schema;
        halt_schema.name = "halt" + suffix;
        halt_schema.description = "Halt repository " + std::to_string(repo->id()) +
                                  " permanently, killing any running process.";
        halt_schema.parameters = {{"reason", "string", true, "why this line of work stops"}};
        registry.add(halt_schema, [repo](const json& args) {
            repo->halt(args.at("reason").get<std::string>());
            return "repository " + std::to_string(repo->id()) + " halted";
        });

        struct SubAgentTool {
            const char* prefix;
            RoleName role;
        };
        for (const SubAgentTool sub : {SubAgentTool{"invoke_designer", RoleName::designer},
                                       SubAgentTool{"invoke_coder", RoleName::coder},
                                       SubAgentTool{"invoke_tuner", RoleName::tuner}}) {
            ToolSchema schema;
            schema.name = std::string(sub.prefix) + suffix;
            schema.description = "Run the " + std::string(to_string(sub.role)) +
                                 " sub-agent on repository " + std::to_string(repo->id()) +
                                 "; returns its outcome and the repository's best metric.";
            schema.parameters = {
                {"instructions", "string", false, "focus or feedback passed to the sub-agent"}};
            const RoleName sub_role = sub.role;
            registry.add(
                schema,
                [&env, &backend, &budget, repo, sub_role, leases, sub_mutex,
                 &manager](const json& args) {
                    if (!leases->try_acquire(repo->id()))
                        raise(ErrorKind::state,
                              "repository " + std::to_string(repo->id()) +
                                  " is busy: another sub-agent invocation holds its lease");
                    const auto started = std::chrono::steady_clock::now();
                    AgentTranscript transcript;
                    try {
                        const std::string instructions = args.value("instructions", "");
                        switch (sub_role) {
                            case RoleName::designer:
                                transcript =
                                    run_designer(env, repo, backend, budget, instructions);
                                break;
                            case RoleName::coder:
                                transcript = run_coder(env, repo, backend, budget, instructions);
                                break;
                            default:
                                transcript = run_tuner(env, repo, backend, budget, instructions);
                                break;
                        }
                    } catch (...) {
                        leases->release(repo->id());
                        throw;
                    }
                    leases->release(repo->id());
                    {
                        std::lock_guard lock(*sub_mutex);
                        manager.sub_transcripts[repo->id()].push_back(transcript);
                    }
                    const double wall =
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - started)
                            .count();
                    std::ostringstream out;
                    out << "repo: " << repo->id() << "\nrole: " << to_string(sub_role)
                        << "\noutcome: " << to_string(transcript.outcome)
                        << "\nwall_seconds: " << wall
                        << "\nbest_metric: " << render_best_metric(*repo) << "\nsummary: "
                        << truncate_middle(transcript.error.empty() ? transcript.final_text
                                                                    : transcript.error,
                                           600, 200);
                    return out.str();
                },
                /*asynchronous=*/true);
        }
    }

    AgentLoopConfig loop = env.loop;
    loop.early_stop = [&repos]() -> std::optional<std::string> {
        for (const auto& repo : repos)
            if (repo->status() != RepoStatus::halted) return std::nullopt;
        return "no candidates remain: all repositories are halted";
    };

    // The manager's context summarizes every repository instead of carrying
    // one live repo state.
    std::ostringstream overview;
    overview << env.task_text << "\n\n## repositories\n";
    for (const auto& repo : repos) {
        const RepoSummary summary = summarize_repo(*repo);
        overview << "- repo " << repo->id() << " [" << to_string(repo->status()) << "]";
        if (!summary.last_result.empty()) overview << " last: " << summary.last_result;
        overview << "\n";
    }

    manager.transcript =
        run_agent(role, overview.str(), std::nullopt, env.kb, registry, backend, budget, loop);
    if (env.transcripts) env.transcripts->write(manager.transcript);
    return manager;
}

AggregatorResult run_aggregator(const AgentEnv& env,
                                const std::vector<std::shared_ptr<Repository>>& repos,
                                const fs::path& final_dir, Backend& backend, BudgetView& budget) {
    fs::create_directories(final_dir / "artifacts");
    AggregatorResult aggregate;
    aggregate.final_dir = final_dir;

    std::vector<std::shared_ptr<Repository>> candidates;
    for (const auto& repo : repos)
        if (repo->status() != RepoStatus::halted && repo->best_metric())
            candidates.push_back(repo);

    if (candidates.empty()) {
        // Nothing to aggregate: emit the failure report without consulting
        // the backend.
        write_file(final_dir / "report.md",
                   "# final report\n\nFAILURE: no scored repositories to aggregate.\n");
        aggregate.transcript.role = RoleName::aggregator;
        aggregate.transcript.outcome = AgentOutcome::completed;
        aggregate.transcript.final_text = "no scored repositories to aggregate";
        aggregate.transcript.started_unix = aggregate.transcript.finished_unix = unix_now();
        aggregate.chosen = "none";
        if (env.transcripts) env.transcripts->write(aggregate.transcript);
        return aggregate;
    }

    std::ostringstream candidate_lines;
    for (const auto& repo : candidates)
        candidate_lines << "- repo " << repo->id() << ": best " << render_best_metric(*repo)
                        << "\n";
    const std::map<std::string, std::string> vars = {{"candidates", candidate_lines.str()}};
    const AgentRole role =
        make_role(RoleName::aggregator, *env.prompts, vars, static_cast<int>(repos.size()), 0);

    ToolRegistry registry;
    auto loaded = std::make_shared<LoadedKnowledge>();
    add_query_tool(registry, env.kb, loaded);
    for (const auto& repo : repos)
        add_repo_tools(registry, repo, budget, env.env_overrides, /*writable=*/false);

    std::map<int, std::shared_ptr<Repository>> by_id;
    for (const auto& repo : repos) by_id[repo->id()] = repo;

    ToolSchema write_schema;
    write_schema.name = "write_final";
    write_schema.description =
        "Write a file into the final output directory, either with inline content or by "
        "copying an artifact out of a repository.";
    write_schema.parameters = {
        {"path", "string", true, "path relative to the final directory"},
        {"content", "string", false, "inline file content"},
        {"from_repo", "integer", false, "repository id to copy from"},
        {"from_path", "string", false, "repository-relative path to copy"}};
    registry.add(write_schema, [by_id, final_dir](const json& args) -> std::string {
        const std::string rel = args.at("path").get<std::string>();
        const fs::path target = confine_path(final_dir, rel);
        if (args.contains("content")) {
            atomic_write_file(target, args["content"].get<std::string>());
            return "written: " + rel;
        }
        if (args.contains("from_repo") && args.contains("from_path")) {
            const int repo_id = args["from_repo"].get<int>();
            const auto it = by_id.find(repo_id);
            if (it == by_id.end())
                raise(ErrorKind::not_found, "no repository " + std::to_string(repo_id));
            const fs::path source = it->second->confine(args["from_path"].get<std::string>());
            if (!fs::is_regular_file(source))
                raise(ErrorKind::not_found,
                      "no artifact at " + args["from_path"].get<std::string>());
            fs::create_directories(target.parent_path());
            fs::copy_file(source, target, fs::copy_options::overwrite_existing);
            return "copied repo " + std::to_string(repo_id) + ":" +
                   args["from_path"].get<std::string>() + " -> " + rel;
        }
        raise(ErrorKind::precondition, "write_final needs content or from_repo+from_path");
    });

    ToolSchema exec_schema;
    exec_schema.name = "execute_final";
    exec_schema.description = "Run a shell command inside the final output directory.";
    exec_schema.parameters = {{"command", "string", true, "shell command"},
                              {"timeout_seconds", "number", false, "timeout override"}};
    registry.add(exec_schema, [&env, &budget, final_dir](const json& args) {
        double timeout = budget.execute_timeout_seconds();
        if (args.contains("timeout_seconds"))
            timeout = std::min(args["timeout_seconds"].get<double>(), budget.remaining_seconds());
        const CommandResult result = run_command(final_dir, args.at("command").get<std::string>(),
                                                 timeout, env.env_overrides);
        std::ostringstream out;
        out << "exit_code: " << result.exit_code
            << "\ntimed_out: " << (result.timed_out ? "true" : "false") << "\nstdout:\n"
            << truncate_middle(result.stdout_text, 1024, 3072) << "\nstderr:\n"
            << truncate_middle(result.stderr_text, 1024, 3072);
        return out.str();
    });

    ToolSchema blend_schema;
    blend_schema.name = "hill_climb_blend";
    blend_schema.description =
        "Fit convex blend weights over rank-transformed out-of-fold predictions by "
        "hill-climbing ensemble selection. models: [{model_id, repo, path}]; labels: "
        "{repo, path}; metric: rank_correlation | mae; rounds optional (default 14).";
    blend_schema.parameters = {{"models", "array", true, "per-model OOF prediction files"},
                               {"labels", "object", true, "labels file location"},
                               {"metric", "string", true, "metric name"},
                               {"rounds", "integer", false, "selection rounds"}};
    registry.add(blend_schema, [by_id](const json& args) {
        std::vector<std::pair<std::string, fs::path>> model_files;
        for (const auto& item : args.at("models")) {
            const int repo_id = item.at("repo").get<int>();
            const auto it = by_id.find(repo_id);
            if (it == by_id.end())
                raise(ErrorKind::not_found, "no repository " + std::to_string(repo_id));
            model_files.emplace_back(item.at("model_id").get<std::string>(),
                                     it->second->confine(item.at("path").get<std::string>()));
        }
        const json& labels = args.at("labels");
        const auto it = by_id.find(labels.at("repo").get<int>());
        if (it == by_id.end()) raise(ErrorKind::not_found, "no repository for labels file");
        const fs::path labels_path = it->second->confine(labels.at("path").get<std::string>());

        const PredictionMatrix matrix = load_prediction_matrix(model_files, labels_path);
        const EvalMetric metric = metric_by_name(args.at("metric").get<std::string>());
        const int rounds = args.value("rounds", 14);
        const BlendFit fit = hill_climb_blend(matrix, metric, rounds);

        json weights = json::object();
        for (const auto& [id, w] : fit.weights.weights) weights[id] = w;
        return json{{"weights", weights},
                    {"fitted_score", fit.fitted_score},
                    {"metric", metric.name},
                    {"rounds", rounds}}
            .dump(2);
    });

    aggregate.transcript =
        run_agent(role, env.task_text, std::nullopt, env.kb, registry, backend, budget, env.loop);
    aggregate.inference_written = fs::exists(final_dir / "inference");
    aggregate.chosen = aggregate.transcript.final_text;
    if (env.transcripts) env.transcripts->write(aggregate.transcript);
    return aggregate;
}

} // namespace forge
