#pragma once

#include <memory>

#include "forge/agents.hpp"
#include "forge/builders.hpp"
#include "forge/knowledge_store.hpp"
#include "forge/llm.hpp"

namespace forge {

// End-to-end run lifecycle: task intake, budget enforcement, agent
// sequencing (setup -> manager -> aggregator), final output, and the two
// post-run knowledge evolution streams.

struct TaskSpec {
    std::string task_id;
    std::string description; // task + evaluation protocol
    fs::path data_dir;       // contains train/ and test/
    std::string metric_name;
    bool higher_is_better = true;
};

TaskSpec load_task_spec(const fs::path& task_file);
std::string render_task_text(const TaskSpec& task);

struct RunBudget {
    double wall_clock_seconds = 24 * 3600;
    double aggregator_reserve_seconds = 0; // 0 = default: max(5%, 60s), clamped below wall/2
    double execute_timeout_fraction = 1.0 / 8; // of the remaining phase budget

    double effective_reserve() const;
    void validate() const; // explicit reserve must stay below the wall clock
};

// Monotone clock arithmetic over the run budget. The manager phase ends
// `reserve` seconds before the wall clock; the aggregator gets the rest.
class BudgetTimeline {
public:
    BudgetTimeline(RunBudget budget, SteadyClock clock = real_steady_clock());

    double elapsed_seconds() const;
    double remaining_run_seconds() const;     // until wall clock
    double remaining_manager_seconds() const; // until wall clock - reserve

    // Phase views handed to the agent loops.
    std::shared_ptr<BudgetView> manager_view() const;
    std::shared_ptr<BudgetView> aggregator_view() const;

private:
    RunBudget budget_;
    SteadyClock clock_;
    std::chrono::steady_clock::time_point start_;
};

enum class RunStatus { success, partial, failed };

const char* to_string(RunStatus status);

struct RunOutput {
    fs::path run_dir;
    fs::path final_dir;
    RunStatus status = RunStatus::failed;
    std::string failure_phase; // set when a phase crashed
    Usage ledger;
    std::int64_t backend_calls = 0;
    double wall_seconds = 0.0;
};

struct RunParams {
    int n_repos = 7;
    RunBudget budget;
    AgentLoopConfig loop;
    SteadyClock clock = real_steady_clock();
};

RunOutput run_task(const TaskSpec& task, const fs::path& kb_path, Backend& backend,
                   const PromptLibrary& prompts, const fs::path& run_dir,
                   const RunParams& params);

// ── knowledge evolution ─────────────────────────────────────────────────

struct EvolutionRecord {
    CategoryKey category;
    std::string doc_id;
    std::uint64_t revision_before = 0; // 0 = category was unbuilt
    std::uint64_t revision_after = 0;
};

struct EvolutionReport {
    std::vector<EvolutionRecord> records;
    std::vector<std::string> failures;
    bool refused_already_evolved = false;

    json to_json() const;
};

// Distills one completed run into a takeaway document and updates the
// target category's L1 value. Transactional: a builder failure leaves the
// store byte-identical. A run id found in existing provenance refuses the
// second evolution.
EvolutionReport post_run_evolve(const fs::path& run_dir, KnowledgeStore& store, Backend& backend,
                                const PromptLibrary& prompts, const BuilderConfig& config = {});

// Folds freshly ingested web groups into the store, one transaction per
// group; failures are isolated and listed.
EvolutionReport evolve_from_web(const fs::path& groups_file, const fs::path& corpus_manifest,
                                KnowledgeStore& store, Backend& backend,
                                const PromptLibrary& prompts, const BuilderConfig& config = {});

} // namespace forge
