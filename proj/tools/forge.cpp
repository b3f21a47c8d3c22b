// forge: autonomous model-building harness CLI.
//
// Subcommands: run (full task lifecycle), bootstrap (build the knowledge
// base from a corpus), evolve-run / evolve-web (knowledge evolution),
// kb-validate (integrity check).
//
// Exit codes: 0 success, 1 failure, 2 partial, 3 invalid input.

#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "forge/builders.hpp"
#include "forge/errors.hpp"
#include "forge/ingestion.hpp"
#include "forge/orchestrator.hpp"

namespace {

using namespace forge;

constexpr int kExitSuccess = 0;
constexpr int kExitFailure = 1;
constexpr int kExitPartial = 2;
constexpr int kExitInvalid = 3;

struct HarnessConfig {
    HttpBackendConfig backend;
    RetryPolicy retries;
    ContextBudget context;
    RunBudget budget;
    IngestionConfig ingestion;
    BuilderConfig builder;
    std::size_t embedding_dimension = 256;
};

HarnessConfig load_harness_config(const fs::path& path) {
    HarnessConfig config;
    if (path.empty()) return config;
    const json data = load_json_file(path);

    if (data.contains("backend")) {
        const json& b = data["backend"];
        config.backend.base_url = b.value("base_url", "");
        config.backend.model = b.value("model", "");
        config.backend.temperature = b.value("temperature", 1.0);
        config.backend.max_output = b.value("max_output", 4096);
        config.backend.api_key_env = b.value("api_key_env", "");
        config.backend.timeout_seconds = b.value("timeout_seconds", 120);
    }
    if (data.contains("retries")) {
        const json& r = data["retries"];
        config.retries.max_attempts = r.value("max_attempts", 3);
        config.retries.base_delay =
            std::chrono::milliseconds(r.value("base_delay_ms", std::int64_t{1000}));
        config.retries.multiplier = r.value("multiplier", 2.0);
    }
    if (data.contains("context")) {
        config.context.max_input_tokens =
            data["context"].value("max_input_tokens", std::int64_t{160'000});
        config.context.safety_margin = data["context"].value("safety_margin", 0.20);
    }
    if (data.contains("budget")) {
        const json& b = data["budget"];
        config.budget.wall_clock_seconds = b.value("wall_clock_seconds", 24.0 * 3600);
        config.budget.aggregator_reserve_seconds = b.value("aggregator_reserve_seconds", 0.0);
        config.budget.execute_timeout_fraction = b.value("execute_timeout_fraction", 1.0 / 8);
    }
    if (data.contains("ingestion")) {
        const json& g = data["ingestion"];
        config.ingestion.shingle_k = g.value("shingle_k", std::size_t{5});
        config.ingestion.num_hashes = g.value("num_hashes", std::size_t{128});
        config.ingestion.seed = g.value("seed", std::uint64_t{1});
        config.ingestion.dedup_threshold = g.value("dedup_threshold", 0.85);
        config.ingestion.cosine_threshold = g.value("cosine_threshold", 0.7);
        config.ingestion.max_parallel = g.value("max_parallel", 4);
    }
    if (data.contains("builder")) {
        const json& b = data["builder"];
        config.builder.digest_cap_chars = b.value("digest_cap_chars", std::size_t{32 * 1024});
        config.builder.instruction_max_lines = b.value("instruction_max_lines", std::size_t{400});
        config.builder.max_parallel_builds = b.value("max_parallel_builds", 2);
    }
    if (data.contains("embedding"))
        config.embedding_dimension = data["embedding"].value("dimension", std::size_t{256});
    return config;
}

std::unique_ptr<Backend> make_backend(const HarnessConfig& config, const std::string& scripted) {
    if (!scripted.empty()) return load_scripted_backend(scripted);
    if (config.backend.base_url.empty())
        raise(ErrorKind::invalid_input,
              "no backend: pass --scripted FILE or a config with backend.base_url");
    return make_http_backend(config.backend);
}

AgentLoopConfig loop_config(const HarnessConfig& config) {
    AgentLoopConfig loop;
    loop.model = config.backend.model;
    loop.temperature = config.backend.temperature;
    loop.retries = config.retries;
    loop.context = config.context;
    return loop;
}

int cmd_run(const fs::path& task_file, const fs::path& data_dir, const fs::path& kb_path,
            const fs::path& config_path, const std::string& scripted, int repos, double budget,
            fs::path run_dir) {
    HarnessConfig config = load_harness_config(config_path);
    if (budget > 0) config.budget.wall_clock_seconds = budget;

    TaskSpec task = load_task_spec(task_file);
    if (!data_dir.empty()) task.data_dir = data_dir;

    if (run_dir.empty()) {
        const auto stamp = std::chrono::duration_cast<std::chrono::seconds>(
                               std::chrono::system_clock::now().time_since_epoch())
                               .count();
        run_dir = fs::path("runs") / (task.task_id + "-" + std::to_string(stamp));
    }

    const auto backend = make_backend(config, scripted);
    const PromptLibrary prompts = PromptLibrary::load(default_prompt_dir());

    RunParams params;
    params.n_repos = repos;
    params.budget = config.budget;
    params.loop = loop_config(config);

    const RunOutput output = run_task(task, kb_path, *backend, prompts, run_dir, params);
    std::printf("run %s: %s (final: %s)\n", output.run_dir.c_str(), to_string(output.status),
                output.final_dir.c_str());
    if (!output.failure_phase.empty())
        std::printf("failed in phase: %s\n", output.failure_phase.c_str());
    std::printf("backend calls: %lld, input tokens: %lld, output tokens: %lld\n",
                static_cast<long long>(output.backend_calls),
                static_cast<long long>(output.ledger.input_tokens),
                static_cast<long long>(output.ledger.output_tokens));
    switch (output.status) {
        case RunStatus::success: return kExitSuccess;
        case RunStatus::partial: return kExitPartial;
        case RunStatus::failed: return kExitFailure;
    }
    return kExitFailure;
}

int cmd_bootstrap(const fs::path& corpus, const fs::path& l1_index_path, const fs::path& out_kb,
                  const fs::path& config_path, const std::string& scripted,
                  const fs::path& groups_out) {
    const HarnessConfig config = load_harness_config(config_path);
    const auto backend = make_backend(config, scripted);
    const PromptLibrary prompts = PromptLibrary::load(default_prompt_dir());
    const auto provider = make_test_embedding_provider(config.embedding_dimension);

    const fs::path manifest =
        fs::is_directory(corpus) ? corpus / "corpus.json" : corpus;
    const std::vector<SourceDocument> docs = load_corpus(manifest);
    const std::vector<L1IndexEntry> l1_index = load_l1_index_file(l1_index_path);

    const BootstrapOutcome outcome = bootstrap_knowledge_base(
        docs, l1_index, *backend, *provider, prompts, config.ingestion, config.builder);
    save_knowledge_base(outcome.kb, out_kb);
    save_json_file(out_kb / "bootstrap_report.json", outcome.report.to_json());
    if (!groups_out.empty()) {
        // Re-derive the groups file for later evolve-web use.
        const DedupResult deduped =
            dedup_corpus(docs, config.ingestion.dedup_threshold, config.ingestion);
        auto provider2 = make_test_embedding_provider(config.embedding_dimension);
        save_groups(groups_out, cluster_sources(deduped.kept, *provider2,
                                                config.ingestion.cosine_threshold));
    }
    std::printf("bootstrap: %zu sources -> %zu documents in %zu categories (report: %s)\n",
                outcome.report.ingested, outcome.report.docs_built,
                outcome.report.categories_built,
                (out_kb / "bootstrap_report.json").c_str());
    return kExitSuccess;
}

int cmd_evolve_run(const fs::path& run_dir, const fs::path& kb_path, const fs::path& config_path,
                   const std::string& scripted) {
    const HarnessConfig config = load_harness_config(config_path);
    const auto backend = make_backend(config, scripted);
    const PromptLibrary prompts = PromptLibrary::load(default_prompt_dir());

    KnowledgeStore store(kb_path);
    const EvolutionReport report =
        post_run_evolve(run_dir, store, *backend, prompts, config.builder);
    std::printf("%s\n", report.to_json().dump(2).c_str());
    if (report.refused_already_evolved) {
        std::printf("run already distilled into this knowledge base; nothing to do\n");
        return kExitSuccess;
    }
    return report.failures.empty() ? kExitSuccess : kExitFailure;
}

int cmd_evolve_web(const fs::path& groups, const fs::path& corpus, const fs::path& kb_path,
                   const fs::path& config_path, const std::string& scripted) {
    const HarnessConfig config = load_harness_config(config_path);
    const auto backend = make_backend(config, scripted);
    const PromptLibrary prompts = PromptLibrary::load(default_prompt_dir());

    const fs::path manifest = fs::is_directory(corpus) ? corpus / "corpus.json" : corpus;
    KnowledgeStore store(kb_path);
    const EvolutionReport report =
        evolve_from_web(groups, manifest, store, *backend, prompts, config.builder);
    std::printf("%s\n", report.to_json().dump(2).c_str());
    return report.failures.empty() ? kExitSuccess : kExitPartial;
}

int cmd_kb_validate(const fs::path& kb_path, const std::string& mode) {
    const KnowledgeBase kb = load_knowledge_base(kb_path);
    const IntegrityMode integrity_mode =
        mode == "pending" ? IntegrityMode::pending_evolution : IntegrityMode::strict;
    const IntegrityReport report = validate_integrity(kb, integrity_mode);
    if (report.ok()) {
        std::printf("ok: %zu categories, %zu built, %zu documents\n", kb.l1_index.size(),
                    kb.l1_values.size(), kb.total_documents());
        return kExitSuccess;
    }
    std::printf("%s", report.to_string().c_str());
    return kExitFailure;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"forge: autonomous model-building harness"};
    app.require_subcommand(1);

    // run
    auto* run = app.add_subcommand("run", "run one task end to end");
    fs::path task_file, data_dir, kb_path, config_path, run_dir;
    std::string scripted;
    int repos = 7;
    double budget = 0;
    run->add_option("--task-file", task_file, "task spec JSON")->required();
    run->add_option("--data-dir", data_dir, "override the task's data directory");
    run->add_option("--kb", kb_path, "knowledge base directory")->required();
    run->add_option("--backend-config", config_path, "harness config JSON");
    run->add_option("--repos", repos, "number of parallel solution repositories");
    run->add_option("--budget", budget, "wall clock budget in seconds");
    run->add_option("--scripted", scripted, "scripted backend JSONL (tests)");
    run->add_option("--run-dir", run_dir, "run directory (must be empty)");

    // bootstrap
    auto* bootstrap = app.add_subcommand("bootstrap", "build a knowledge base from a corpus");
    fs::path corpus, l1_index_path, out_kb, groups_out;
    bootstrap->add_option("--corpus", corpus, "corpus directory or manifest")->required();
    bootstrap->add_option("--l1-index", l1_index_path, "L1 taxonomy JSON")->required();
    bootstrap->add_option("--out-kb", out_kb, "output knowledge base directory")->required();
    bootstrap->add_option("--backend-config", config_path, "harness config JSON");
    bootstrap->add_option("--scripted", scripted, "scripted backend JSONL (tests)");
    bootstrap->add_option("--groups-out", groups_out, "also write the groups file here");

    // evolve-run
    auto* evolve_run = app.add_subcommand("evolve-run", "distill a completed run into the KB");
    evolve_run->add_option("--run-dir", run_dir, "completed run directory")->required();
    evolve_run->add_option("--kb", kb_path, "knowledge base directory")->required();
    evolve_run->add_option("--backend-config", config_path, "harness config JSON");
    evolve_run->add_option("--scripted", scripted, "scripted backend JSONL (tests)");

    // evolve-web
    auto* evolve_web = app.add_subcommand("evolve-web", "fold new web groups into the KB");
    fs::path groups;
    evolve_web->add_option("--groups", groups, "groups file from ingestion")->required();
    evolve_web->add_option("--corpus", corpus, "corpus directory or manifest")->required();
    evolve_web->add_option("--kb", kb_path, "knowledge base directory")->required();
    evolve_web->add_option("--backend-config", config_path, "harness config JSON");
    evolve_web->add_option("--scripted", scripted, "scripted backend JSONL (tests)");

    // kb-validate
    auto* kb_validate = app.add_subcommand("kb-validate", "check knowledge base integrity");
    std::string mode = "strict";
    kb_validate->add_option("--kb", kb_path, "knowledge base directory")->required();
    kb_validate->add_option("--mode", mode, "strict | pending")
        ->check(CLI::IsMember({"strict", "pending"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run)
            return cmd_run(task_file, data_dir, kb_path, config_path, scripted, repos, budget,
                           run_dir);
        if (*bootstrap)
            return cmd_bootstrap(corpus, l1_index_path, out_kb, config_path, scripted,
                                 groups_out);
        if (*evolve_run) return cmd_evolve_run(run_dir, kb_path, config_path, scripted);
        if (*evolve_web)
            return cmd_evolve_web(groups, corpus, kb_path, config_path, scripted);
        if (*kb_validate) return cmd_kb_validate(kb_path, mode);
    } catch (const forge::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        switch (e.kind()) {
            case forge::ErrorKind::invalid_input:
            case forge::ErrorKind::format:
            case forge::ErrorKind::precondition:
                return kExitInvalid;
            default:
                return kExitFailure;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFailure;
    }
    return kExitInvalid;
}
