#include "forge/orchestrator.hpp"
#include "forge/errors.hpp"

#include <algorithm>
#include <sstream>

namespace forge {

TaskSpec load_task_spec(const fs::path& task_file) {
    const json data = load_json_file(task_file);
    TaskSpec task;
    task.task_id = data.at("task_id").get<std::string>();
    task.description = data.at("description").get<std::string>();
    task.data_dir = fs::path(data.at("data_dir").get<std::string>());
    if (task.data_dir.is_relative())
        task.data_dir = task_file.parent_path() / task.data_dir;
    task.metric_name = data.at("metric_name").get<std::string>();
    task.higher_is_better = data.at("higher_is_better").get<bool>();

    if (trim(task.description).empty())
        raise(ErrorKind::invalid_input, "task description is empty");
    if (!fs::is_directory(task.data_dir))
        raise(ErrorKind::invalid_input,
              "task data_dir does not exist: " + task.data_dir.string());
    return task;
}

std::string render_task_text(const TaskSpec& task) {
    std::ostringstream out;
    out << "task_id: " << task.task_id << "\n"
        << "data_dir: " << fs::absolute(task.data_dir).string()
        << " (train/ and test/ inside)\n"
        << "metric: " << task.metric_name << " ("
        << (task.higher_is_better ? "higher" : "lower") << " is better)\n\n"
        << task.description << "\n";
    return out.str();
}

// ── budget ──────────────────────────────────────────────────────────────

double RunBudget::effective_reserve() const {
    if (aggregator_reserve_seconds > 0) return aggregator_reserve_seconds;
    return std::min(std::max(0.05 * wall_clock_seconds, 60.0), wall_clock_seconds / 2.0);
}

void RunBudget::validate() const {
    if (wall_clock_seconds <= 0)
        raise(ErrorKind::invalid_input, "wall_clock_seconds must be positive");
    if (aggregator_reserve_seconds < 0)
        raise(ErrorKind::invalid_input, "aggregator_reserve_seconds must be non-negative");
    if (aggregator_reserve_seconds >= wall_clock_seconds)
        raise(ErrorKind::invalid_input,
              "aggregator reserve must be smaller than the wall clock budget");
    if (execute_timeout_fraction <= 0 || execute_timeout_fraction > 1)
        raise(ErrorKind::invalid_input, "execute_timeout_fraction must be in (0, 1]");
}

namespace {

class PhaseBudgetView : public BudgetView {
public:
    PhaseBudgetView(SteadyClock clock, std::chrono::steady_clock::time_point start,
                    double phase_seconds, double timeout_fraction)
        : clock_(std::move(clock)),
          start_(start),
          phase_seconds_(phase_seconds),
          timeout_fraction_(timeout_fraction) {}

    bool exhausted() const override { return remaining_seconds() <= 0.0; }

    double remaining_seconds() const override {
        const double elapsed = std::chrono::duration<double>(clock_() - start_).count();
        return phase_seconds_ - elapsed;
    }

    double execute_timeout_seconds() const override {
        return std::max(1.0, remaining_seconds() * timeout_fraction_);
    }

private:
    SteadyClock clock_;
    std::chrono::steady_clock::time_point start_;
    double phase_seconds_;
    double timeout_fraction_;
};

} // namespace

BudgetTimeline::BudgetTimeline(RunBudget budget, SteadyClock clock)
    : budget_(budget), clock_(std::move(clock)), start_(clock_()) {
    budget_.validate();
}

double BudgetTimeline::elapsed_seconds() const {
    return std::chrono::duration<double>(clock_() - start_).count();
}

double BudgetTimeline::remaining_run_seconds() const {
    return budget_.wall_clock_seconds - elapsed_seconds();
}

double BudgetTimeline::remaining_manager_seconds() const {
    return budget_.wall_clock_seconds - budget_.effective_reserve() - elapsed_seconds();
}

std::shared_ptr<BudgetView> BudgetTimeline::manager_view() const {
    return std::make_shared<PhaseBudgetView>(
        clock_, start_, budget_.wall_clock_seconds - budget_.effective_reserve(),
        budget_.execute_timeout_fraction);
}

std::shared_ptr<BudgetView> BudgetTimeline::aggregator_view() const {
    return std::make_shared<PhaseBudgetView>(clock_, start_, budget_.wall_clock_seconds,
                                             budget_.execute_timeout_fraction);
}

// ── run lifecycle ───────────────────────────────────────────────────────

const char* to_string(RunStatus status) {
    switch (status) {
        case RunStatus::success: return "success";
        case RunStatus::partial: return "partial";
        case RunStatus::failed: return "failed";
    }
    return "failed";
}

namespace {

std::string render_repo_line(Repository& repo) {
    std::ostringstream out;
    out << "- repo " << repo.id() << " [" << to_string(repo.status()) << "]";
    const auto best = repo.best_metric();
    if (best) out << " best " << best->metric_name << "=" << best->value;
    if (repo.status() == RepoStatus::halted) out << " (halted: " << repo.halt_reason() << ")";
    return out.str();
}

} // namespace

RunOutput run_task(const TaskSpec& task, const fs::path& kb_path, Backend& backend,
                   const PromptLibrary& prompts, const fs::path& run_dir,
                   const RunParams& params) {
    RunOutput output;
    output.run_dir = run_dir;
    output.final_dir = run_dir / "final";

    if (params.n_repos < 1) raise(ErrorKind::invalid_input, "need at least one repository");
    params.budget.validate();

    // The store must be strict-valid before any backend call is spent.
    const KnowledgeBase kb = load_knowledge_base(kb_path);
    const IntegrityReport integrity = validate_integrity(kb, IntegrityMode::strict);
    if (!integrity.ok())
        raise(ErrorKind::integrity,
              "knowledge base fails strict validation:\n" + integrity.to_string());

    if (fs::exists(run_dir) && !fs::is_empty(run_dir))
        raise(ErrorKind::invalid_input, "run directory is not empty: " + run_dir.string());
    fs::create_directories(run_dir);

    const std::string run_id = task.task_id + "-" + run_dir.filename().string();
    save_json_file(run_dir / "run.json", {{"run_id", run_id},
                                          {"task_id", task.task_id},
                                          {"description", task.description},
                                          {"metric_name", task.metric_name},
                                          {"higher_is_better", task.higher_is_better},
                                          {"data_dir", fs::absolute(task.data_dir).string()},
                                          {"n_repos", params.n_repos},
                                          {"started_at", now_iso_utc()}});

    const BudgetTimeline timeline(params.budget, params.clock);
    TranscriptWriter transcripts(run_dir);

    AgentEnv env;
    env.prompts = &prompts;
    env.transcripts = &transcripts;
    env.kb = kb;
    env.task_text = render_task_text(task);
    env.loop = params.loop;

    std::vector<std::shared_ptr<Repository>> repos;
    std::string phase = "create-repositories";
    ManagerResult manager;
    AggregatorResult aggregate;
    try {
        for (int i = 1; i <= params.n_repos; ++i) repos.push_back(Repository::create(run_dir, i));

        phase = "setup";
        auto manager_budget = timeline.manager_view();
        const SetupResult setup = run_setup(env, run_dir / "env", backend, *manager_budget);
        env.env_overrides = setup.env_overrides;

        phase = "manager";
        manager = run_manager(env, repos, backend, *manager_budget);

        phase = "aggregator";
        auto aggregator_budget = timeline.aggregator_view();
        aggregate = run_aggregator(env, repos, output.final_dir, backend, *aggregator_budget);
    } catch (const Error& e) {
        output.status = RunStatus::failed;
        output.failure_phase = phase;
        output.ledger = backend.ledger().total();
        output.backend_calls = backend.ledger().calls();
        output.wall_seconds = timeline.elapsed_seconds();
        log_warning("run failed in phase " + phase + ": " + e.what());
        return output;
    }

    output.ledger = backend.ledger().total();
    output.backend_calls = backend.ledger().calls();
    output.wall_seconds = timeline.elapsed_seconds();

    // Final report: the aggregator's own report plus the run summary. This
    // file is also the completed-run marker the L2 builder keys on.
    std::ostringstream report;
    const fs::path report_path = output.final_dir / "report.md";
    if (fs::exists(report_path)) report << read_file(report_path) << "\n";
    report << "## run summary\n"
           << "run_id: " << run_id << "\n"
           << "task: " << task.task_id << " (metric " << task.metric_name << ", "
           << (task.higher_is_better ? "higher" : "lower") << " is better)\n"
           << "manager outcome: " << to_string(manager.transcript.outcome) << "\n"
           << "chosen output: " << (aggregate.chosen.empty() ? "none" : aggregate.chosen) << "\n"
           << "### repositories\n";
    for (const auto& repo : repos) report << render_repo_line(*repo) << "\n";
    report << "### ledger\n"
           << "backend calls: " << output.backend_calls << "\n"
           << "input tokens: " << output.ledger.input_tokens << "\n"
           << "output tokens: " << output.ledger.output_tokens << "\n"
           << "wall seconds: " << output.wall_seconds << "\n"
           << "### next steps\n"
           << "Distill this run into the knowledge base with: forge evolve-run --run-dir "
           << run_dir.string() << " --kb <kb>\n";
    write_file(report_path, report.str());

    if (!aggregate.inference_written) {
        output.status = RunStatus::failed;
        output.failure_phase = "aggregator";
        return output;
    }
    output.status = manager.transcript.outcome == AgentOutcome::completed ? RunStatus::success
                                                                          : RunStatus::partial;
    return output;
}

// ── knowledge evolution ─────────────────────────────────────────────────

json EvolutionReport::to_json() const {
    json records_json = json::array();
    for (const auto& record : records) {
        records_json.push_back({{"category", record.category},
                                {"doc_id", record.doc_id},
                                {"revision_before", record.revision_before},
                                {"revision_after", record.revision_after}});
    }
    return {{"records", records_json},
            {"failures", failures},
            {"refused_already_evolved", refused_already_evolved}};
}

namespace {

// Inserts `doc` and closes the pending-evolution gap with the L1 builder:
// evolve when an L1 value exists, bootstrap when the category is unbuilt
// (the zero-or-one input dispatch).
EvolutionRecord integrate_document(KnowledgeBase& kb, const CategoryKey& key, L2Document doc,
                                   Backend& backend, const PromptLibrary& prompts,
                                   const BuilderConfig& config) {
    EvolutionRecord record;
    record.category = key;
    const auto current = kb.l1_values.find(key);
    record.revision_before = current == kb.l1_values.end() ? 0 : current->second.revision;

    record.doc_id = insert_document(kb, key, std::move(doc));

    L1Value value;
    if (record.revision_before == 0) {
        auto built = bootstrap_l1(kb, key, backend, prompts, config);
        if (!built)
            raise(ErrorKind::integrity, "L1 bootstrap for '" + key + "' produced no value");
        value = *built;
    } else {
        value = evolve_l1(kb, key, record.doc_id, backend, prompts, config);
    }
    replace_l1_value(kb, key, std::move(value));
    record.revision_after = kb.l1_values.at(key).revision;
    return record;
}

bool run_already_distilled(const KnowledgeBase& kb, const std::string& run_id) {
    for (const auto& [key, docs] : kb.l2)
        for (const auto& [doc_id, doc] : docs)
            if (doc.provenance == Provenance::run_takeaway)
                for (const auto& source : doc.sources)
                    if (source == run_id) return true;
    return false;
}

} // namespace

EvolutionReport post_run_evolve(const fs::path& run_dir, KnowledgeStore& store, Backend& backend,
                                const PromptLibrary& prompts, const BuilderConfig& config) {
    EvolutionReport report;
    if (!fs::exists(run_dir / "final" / "report.md"))
        raise(ErrorKind::precondition,
              "run directory has no final report; only completed runs are distilled");

    std::string run_id = run_dir.filename().string();
    if (fs::exists(run_dir / "run.json"))
        run_id = load_json_file(run_dir / "run.json").value("run_id", run_id);

    // The run id in takeaway provenance doubles as the double-evolution
    // guard.
    if (run_already_distilled(store.snapshot(), run_id)) {
        report.refused_already_evolved = true;
        return report;
    }

    const KnowledgeBase snapshot = store.snapshot();
    auto [key, doc] =
        build_l2_from_rundir(run_dir, snapshot.l1_index, backend, prompts, config);

    store.update([&](KnowledgeBase& kb) {
        report.records.push_back(
            integrate_document(kb, key, std::move(doc), backend, prompts, config));
    });
    return report;
}

EvolutionReport evolve_from_web(const fs::path& groups_file, const fs::path& corpus_manifest,
                                KnowledgeStore& store, Backend& backend,
                                const PromptLibrary& prompts, const BuilderConfig& config) {
    EvolutionReport report;
    const std::vector<SourceGroup> groups = load_groups(groups_file);
    if (groups.empty()) return report;

    const std::vector<SourceDocument> corpus = load_corpus(corpus_manifest);
    std::map<std::string, const SourceDocument*> by_id;
    for (const auto& doc : corpus) by_id[doc.source_id] = &doc;

    for (const auto& group : groups) {
        try {
            std::vector<SourceDocument> members;
            for (const auto& id : group.members) {
                const auto it = by_id.find(id);
                if (it == by_id.end())
                    raise(ErrorKind::not_found,
                          "group member '" + id + "' not in corpus manifest");
                members.push_back(*it->second);
            }
            const KnowledgeBase snapshot = store.snapshot();
            auto [key, doc] = build_l2_from_sources(group, members, snapshot.l1_index, backend,
                                                    prompts, config);
            store.update([&](KnowledgeBase& kb) {
                report.records.push_back(
                    integrate_document(kb, key, std::move(doc), backend, prompts, config));
            });
        } catch (const std::exception& e) {
            report.failures.push_back("group " + group.group_id + ": " + e.what());
        }
    }
    return report;
}

} // namespace forge
