#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "forge/ensembling.hpp"
#include "forge/knowledge_store.hpp"
#include "forge/llm.hpp"
#include "forge/prompts.hpp"
#include "forge/util.hpp"
#include "forge/workspace.hpp"

namespace forge {

// The iterative tool-calling agent loop, dynamic knowledge loading, and the
// six roles with their prompt contracts and tool sets.

enum class RoleName { setup, manager, designer, coder, tuner, aggregator };

const char* to_string(RoleName role);

struct AgentRole {
    RoleName name = RoleName::designer;
    std::string system_prompt;
    std::set<std::string> allowed_tools;
    int max_steps = 12;
    int prompt_version = 1;
};

// Default step caps per role.
int default_max_steps(RoleName role);

// ── budget view ─────────────────────────────────────────────────────────

// Monotone view over the run budget shared by every loop; implementations
// are thread safe (see orchestrator for the real one).
class BudgetView {
public:
    virtual ~BudgetView() = default;
    virtual bool exhausted() const = 0;
    virtual double remaining_seconds() const = 0;
    // Timeout granted to one execute: a slice of what is left.
    virtual double execute_timeout_seconds() const = 0;
};

// Never exhausted; executes get `execute_timeout` each. For tests and
// sub-phases without their own deadline.
std::shared_ptr<BudgetView> unlimited_budget(double execute_timeout = 60.0);

// ── dynamic knowledge loading ───────────────────────────────────────────

struct LoadedKnowledge {
    std::set<CategoryKey> categories;
    std::set<std::pair<CategoryKey, std::string>> documents;
};

std::string render_l1_index(const KnowledgeBase& kb);
std::string render_l1_value(const L1Value& value);

// The query tool's two call signatures: {key} loads a category (instruction
// + pointer index), {key, doc_id} loads one document body and requires the
// category to have been loaded first in this invocation.
std::string query_tool(const KnowledgeBase& kb, LoadedKnowledge& loaded, const json& args);

// ── tools ───────────────────────────────────────────────────────────────

struct ToolExecution {
    std::string call_id;
    std::string name;
    json args;
    std::string result;
    bool is_error = false;
    double elapsed_seconds = 0.0;
};

class ToolRegistry {
public:
    using Handler = std::function<std::string(const json& args)>;

    void add(ToolSchema schema, Handler handler, bool asynchronous = false);
    bool has(const std::string& name) const;
    bool is_async(const std::string& name) const;
    const Handler& handler(const std::string& name) const;
    std::vector<ToolSchema> schemas(const std::set<std::string>& allowed) const;

private:
    struct Entry {
        ToolSchema schema;
        Handler handler;
        bool asynchronous = false;
    };
    std::map<std::string, Entry> entries_;
};

// ── transcripts ─────────────────────────────────────────────────────────

enum class AgentOutcome { completed, step_limit, budget_exhausted, failed };

const char* to_string(AgentOutcome outcome);

struct TranscriptStep {
    int seq = 0;
    CompletionResponse response;
    std::vector<ToolExecution> tools;
};

struct AgentTranscript {
    RoleName role = RoleName::designer;
    std::optional<int> repo_id;
    std::vector<TranscriptStep> steps;
    AgentOutcome outcome = AgentOutcome::failed;
    std::string final_text;
    std::string error;
    Usage usage;
    double started_unix = 0.0; // wall clock, seconds
    double finished_unix = 0.0;

    json to_json() const;
};

// Writes one JSON line per step plus a trailing outcome line to
// transcripts/<role>-<repo?>-<seq>.jsonl under the run directory.
class TranscriptWriter {
public:
    explicit TranscriptWriter(fs::path run_dir);
    void write(const AgentTranscript& transcript);
    std::vector<fs::path> written() const;

private:
    fs::path dir_;
    std::map<std::string, int> sequence_;
    mutable std::mutex mutex_;
};

// ── context assembly ────────────────────────────────────────────────────

struct HistoryEntry {
    CompletionResponse response;
    std::vector<ToolExecution> tools;
};

struct RepoSummary {
    int repo_id = 0;
    std::string plan;
    std::string config;
    std::string last_result; // rendered excerpt of the newest execution
};

struct ContextBudget {
    std::int64_t max_input_tokens = 160'000;
    double safety_margin = 0.20; // budget checks use estimate * (1 - margin)
};

// Message 1: role system prompt. Message 2: rendered L1 index (keys +
// descriptions only), task, repo summary. Then the loop history. Oldest
// history is elided first when over budget, then repo excerpts shrink; the
// system prompt and L1 index are never dropped.
std::vector<ChatMessage> assemble_context(const AgentRole& role, const std::string& task_text,
                                          const std::optional<RepoSummary>& repo_state,
                                          const KnowledgeBase& kb,
                                          const std::vector<HistoryEntry>& history,
                                          const ContextBudget& budget = {});

// ── the loop ────────────────────────────────────────────────────────────

struct AgentLoopConfig {
    std::string model;
    double temperature = 1.0;
    RetryPolicy retries;
    ContextBudget context;
    // Checked before each completion; returning a reason ends the loop with
    // outcome=completed and that reason as the final text.
    std::function<std::optional<std::string>()> early_stop;
};

// One completion per step: final text ends the loop, tool calls are
// executed (sequentially except for tools registered asynchronous, which
// run concurrently and report in completion order) and their results are
// appended. Unknown or forbidden tools become error results; tool
// exceptions never crash the loop.
AgentTranscript run_agent(const AgentRole& role, const std::string& task_text,
                          const std::optional<RepoSummary>& repo_state, const KnowledgeBase& kb,
                          const ToolRegistry& registry, Backend& backend, BudgetView& budget,
                          const AgentLoopConfig& config = {});

// ── repo leases ─────────────────────────────────────────────────────────

// Exclusive right of one sub-agent invocation to mutate one repository.
class LeaseTable {
public:
    bool try_acquire(int repo_id);
    void release(int repo_id);

private:
    std::mutex mutex_;
    std::set<int> held_;
};

// ── role runners ────────────────────────────────────────────────────────

struct AgentEnv {
    const PromptLibrary* prompts = nullptr;
    TranscriptWriter* transcripts = nullptr;
    KnowledgeBase kb;
    std::string task_text;
    std::map<std::string, std::string> env_overrides; // from the setup agent
    AgentLoopConfig loop;
};

// own_repo is the worker's repository id; repo_count drives the manager's
// and aggregator's per-repo tool sets.
AgentRole make_role(RoleName name, const PromptLibrary& prompts,
                    const std::map<std::string, std::string>& vars, int repo_count,
                    int own_repo);

RepoSummary summarize_repo(Repository& repo);

AgentTranscript run_designer(const AgentEnv& env, const std::shared_ptr<Repository>& repo,
                             Backend& backend, BudgetView& budget,
                             const std::string& extra_instructions = "");
AgentTranscript run_coder(const AgentEnv& env, const std::shared_ptr<Repository>& repo,
                          Backend& backend, BudgetView& budget,
                          const std::string& extra_instructions = "");
AgentTranscript run_tuner(const AgentEnv& env, const std::shared_ptr<Repository>& repo,
                          Backend& backend, BudgetView& budget,
                          const std::string& extra_instructions = "");

struct SetupResult {
    AgentTranscript transcript;
    std::map<std::string, std::string> env_overrides;
};

// Prepares the shared software environment under env_root; failure is
// non-fatal and yields empty overrides.
SetupResult run_setup(const AgentEnv& env, const fs::path& env_root, Backend& backend,
                      BudgetView& budget);

struct ManagerResult {
    AgentTranscript transcript;
    std::map<int, std::vector<AgentTranscript>> sub_transcripts; // per repo, in start order
};

ManagerResult run_manager(const AgentEnv& env,
                          const std::vector<std::shared_ptr<Repository>>& repos,
                          Backend& backend, BudgetView& budget);

struct AggregatorResult {
    AgentTranscript transcript;
    fs::path final_dir;
    bool inference_written = false;
    std::string chosen; // summary of the chosen strategy for the run report
};

AggregatorResult run_aggregator(const AgentEnv& env,
                                const std::vector<std::shared_ptr<Repository>>& repos,
                                const fs::path& final_dir, Backend& backend, BudgetView& budget);

} // namespace forge
