#pragma once

// Shared fixtures and oracles for the test suites.

#include <atomic>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "forge/builders.hpp"
#include "forge/knowledge_store.hpp"
#include "forge/llm.hpp"
#include "forge/orchestrator.hpp"
#include "forge/util.hpp"

namespace forge::test {

inline fs::path fresh_temp_dir(const std::string& prefix) {
    static std::atomic<unsigned> counter{0};
    const fs::path dir = fs::temp_directory_path() /
                         ("forge-" + prefix + "-" + std::to_string(::getpid()) + "-" +
                          std::to_string(counter.fetch_add(1)));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& prefix) : path(fresh_temp_dir(prefix)) {}
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline PromptLibrary load_test_prompts() { return PromptLibrary::load(default_prompt_dir()); }

// ── fixture knowledge base ──────────────────────────────────────────────
// Two categories, three documents, sentinel strings planted in every L1
// instruction and L2 body so transcript scans can detect leaked knowledge.

inline constexpr const char* kSentinelL1Tabular = "SENTINEL-L1-TABULAR-9f3a";
inline constexpr const char* kSentinelL1Ensembling = "SENTINEL-L1-ENSEMBLING-4c1d";
inline constexpr const char* kSentinelDoc1 = "SENTINEL-L2-TABULAR-0001-77aa";
inline constexpr const char* kSentinelDoc2 = "SENTINEL-L2-TABULAR-0002-88bb";
inline constexpr const char* kSentinelDoc3 = "SENTINEL-L2-ENSEMBLING-0001-99cc";

inline KnowledgeBase fixture_kb() {
    KnowledgeBase kb;
    kb.l1_index = {
        {"tabular", "Tabular prediction tasks: feature handling,\nvalidation, model families.",
         CategoryKind::modality_task},
        {"ensembling", "Combining models: averaging, blending, stacking.",
         CategoryKind::modeling_strategy},
    };

    auto doc = [](const std::string& key, const std::string& doc_id, const std::string& body,
                  const std::string& description) {
        L2Document d;
        d.key = key;
        d.doc_id = doc_id;
        d.body = body;
        d.description = description;
        d.provenance = Provenance::web_sources;
        d.sources = {"https://example.org/" + doc_id};
        d.created_at = "2026-01-01T00:00:00Z";
        return d;
    };
    kb.l2["tabular"]["tabular-0001"] =
        doc("tabular", "tabular-0001",
            std::string("Gradient boosted trees first. ") + kSentinelDoc1 + "\n",
            "Baseline recipe for tabular tasks");
    kb.l2["tabular"]["tabular-0002"] =
        doc("tabular", "tabular-0002",
            std::string("Target encoding pitfalls. ") + kSentinelDoc2 + "\n",
            "Encoding guidance");
    kb.l2["ensembling"]["ensembling-0001"] =
        doc("ensembling", "ensembling-0001",
            std::string("Rank-average blending notes. ") + kSentinelDoc3 + "\n",
            "Blending guidance");

    L1Value tabular;
    tabular.key = "tabular";
    tabular.instruction =
        std::string("Start simple, validate honestly. ") + kSentinelL1Tabular + "\n";
    tabular.l2_index = {{"tabular-0001", "Baseline recipe for tabular tasks"},
                        {"tabular-0002", "Encoding guidance"}};
    tabular.revision = 1;
    kb.l1_values["tabular"] = tabular;

    L1Value ensembling;
    ensembling.key = "ensembling";
    ensembling.instruction =
        std::string("Blend only validated models. ") + kSentinelL1Ensembling + "\n";
    ensembling.l2_index = {{"ensembling-0001", "Blending guidance"}};
    ensembling.revision = 1;
    kb.l1_values["ensembling"] = ensembling;
    return kb;
}

// ── scripted backend helpers ────────────────────────────────────────────

inline std::string text_entry(const std::string& substring, const std::string& text,
                              const std::string& role = "") {
    json match = {{"substring", substring}};
    if (!role.empty()) match["role"] = role;
    return json{{"match", match}, {"response", {{"text", text}}}}.dump();
}

inline std::string tool_entry(const std::string& substring,
                              const std::vector<std::pair<std::string, json>>& calls,
                              const std::string& role = "") {
    json match = {{"substring", substring}};
    if (!role.empty()) match["role"] = role;
    json tool_calls = json::array();
    for (const auto& [name, args] : calls) tool_calls.push_back({{"name", name}, {"args", args}});
    return json{{"match", match}, {"response", {{"tool_calls", tool_calls}}}}.dump();
}

inline std::string join_script(const std::vector<std::string>& entries) {
    std::string out;
    for (const auto& entry : entries) out += entry + "\n";
    return out;
}

// ── set/Jaccard oracles ─────────────────────────────────────────────────

inline double exact_jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& x : a) inter += b.count(x);
    return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

// Builds |shared| common elements plus per-set uniques, giving an exact
// Jaccard of shared / (shared + 2 * unique) by construction.
inline std::pair<std::set<std::string>, std::set<std::string>> sets_with_jaccard(
    std::size_t shared, std::size_t unique_each, int tag) {
    std::set<std::string> a, b;
    for (std::size_t i = 0; i < shared; ++i) {
        const std::string x = "shared-" + std::to_string(tag) + "-" + std::to_string(i);
        a.insert(x);
        b.insert(x);
    }
    for (std::size_t i = 0; i < unique_each; ++i) {
        a.insert("only-a-" + std::to_string(tag) + "-" + std::to_string(i));
        b.insert("only-b-" + std::to_string(tag) + "-" + std::to_string(i));
    }
    return {a, b};
}

// ── golden end-to-end fixture ───────────────────────────────────────────
// A toy tabular task (200-row synthetic train CSV, 50-row test CSV) plus a
// fully scripted run over two repositories: designers write plans, coders
// write and verify a mean-predictor pipeline, the manager coordinates, the
// aggregator ships repo 2 and verifies the inference script.

struct GoldenFixture {
    fs::path root;
    fs::path data_dir;
    fs::path kb_dir;
    fs::path task_file;
    fs::path script_file;
    TaskSpec task;
    std::string expected_mean; // "%.6f" of the train-label mean (the oracle)
    std::vector<std::string> test_ids;

    std::string expected_predictions() const {
        std::string out;
        for (const auto& id : test_ids) out += id + "," + expected_mean + "\n";
        return out;
    }
};

inline GoldenFixture make_golden_fixture(const fs::path& root) {
    GoldenFixture fixture;
    fixture.root = root;
    fixture.data_dir = root / "data";
    fixture.kb_dir = root / "kb";
    fixture.task_file = root / "task.json";
    fixture.script_file = root / "script.jsonl";
    fs::create_directories(fixture.data_dir / "train");
    fs::create_directories(fixture.data_dir / "test");

    // Deterministic synthetic data; the label mean is computed here, in row
    // order, exactly as the scripted solution will.
    std::ostringstream train;
    train << "id,x1,x2,y\n";
    double sum = 0.0;
    const int train_rows = 200;
    for (int i = 0; i < train_rows; ++i) {
        const double x1 = (i % 17) / 17.0;
        const double x2 = (i % 5) / 5.0;
        const double y = (i % 3 == 0) ? 1.0 : 0.0;
        sum += y;
        train << "r" << i << "," << x1 << "," << x2 << "," << y << "\n";
    }
    write_file(fixture.data_dir / "train" / "train.csv", train.str());
    const double mean = sum / train_rows;
    char mean_buf[32];
    std::snprintf(mean_buf, sizeof(mean_buf), "%.6f", mean);
    fixture.expected_mean = mean_buf;

    std::ostringstream test_csv;
    test_csv << "id,x1,x2\n";
    for (int i = 0; i < 50; ++i) {
        fixture.test_ids.push_back("t" + std::to_string(i));
        test_csv << "t" << i << "," << (i % 7) / 7.0 << "," << (i % 4) / 4.0 << "\n";
    }
    write_file(fixture.data_dir / "test" / "test.csv", test_csv.str());

    save_knowledge_base(fixture_kb(), fixture.kb_dir);

    fixture.task.task_id = "toy-tabular";
    fixture.task.description =
        "Predict the binary label y from features x1, x2. Train data in train/train.csv, "
        "test rows in test/test.csv. Submit one 'id,score' line per test row.";
    fixture.task.data_dir = fixture.data_dir;
    fixture.task.metric_name = "auc";
    fixture.task.higher_is_better = true;
    save_json_file(fixture.task_file, {{"task_id", fixture.task.task_id},
                                       {"description", fixture.task.description},
                                       {"data_dir", fs::absolute(fixture.data_dir).string()},
                                       {"metric_name", "auc"},
                                       {"higher_is_better", true}});

    const std::string data = fs::absolute(fixture.data_dir).string();
    auto train_py = [&](const std::string& metric_value) {
        return "import csv, json\n"
               "rows = list(csv.DictReader(open('" + data + "/train/train.csv')))\n"
               "mean = sum(float(r['y']) for r in rows) / len(rows)\n"
               "open('model.txt', 'w').write(f'{mean:.6f}\\n')\n"
               "json.dump({'metric_name': 'auc', 'value': " + metric_value + ", "
               "'higher_is_better': True, 'split': 'validation'}, open('metrics.json', 'w'))\n"
               "print('trained ok')\n";
    };
    const std::string predict_py =
        "import csv, sys\n"
        "model, test_dir, out = sys.argv[1], sys.argv[2], sys.argv[3]\n"
        "w = open(model).read().strip()\n"
        "rows = list(csv.DictReader(open(test_dir + '/test.csv')))\n"
        "open(out, 'w').write(''.join(f\"{r['id']},{w}\\n\" for r in rows))\n"
        "print('predicted ok')\n";

    // The conversation, in chronological consumption order. Sub-agent
    // scripts key on the manager's instructions string, which lands in the
    // worker's context message.
    std::vector<std::string> entries;

    // setup: one probe, then done.
    entries.push_back(tool_entry("task_id: toy-tabular",
                                 {{"execute_env", {{"command", "echo env-probe-ok"}}}}));
    entries.push_back(text_entry("env-probe-ok", "environment ready, nothing to install"));

    // manager step 1: both designers in one turn.
    entries.push_back(
        tool_entry("## repositories",
                   {{"invoke_designer_1", {{"instructions", "design-repo-1"}}},
                    {"invoke_designer_2", {{"instructions", "design-repo-2"}}}}));

    // designers.
    entries.push_back(tool_entry(
        "design-repo-1",
        {{"write_1",
          {{"path", "plan.md"},
           {"content", "Plan A: constant mean predictor, quick baseline.\n"}}}}));
    entries.push_back(text_entry("repo 1: written plan.md", "plan ready"));
    entries.push_back(tool_entry(
        "design-repo-2",
        {{"write_2",
          {{"path", "plan.md"},
           {"content", "Plan B: tuned mean predictor with validation.\n"}}}}));
    entries.push_back(text_entry("repo 2: written plan.md", "plan ready"));

    // manager step 2: both coders.
    entries.push_back(tool_entry("outcome: completed",
                                 {{"invoke_coder_1", {{"instructions", "code-repo-1"}}},
                                  {"invoke_coder_2", {{"instructions", "code-repo-2"}}}}));

    // coder on repo 1 (weaker metric).
    entries.push_back(tool_entry(
        "code-repo-1",
        {{"write_1", {{"path", "code/train.py"}, {"content", train_py("0.82")}}}}));
    entries.push_back(tool_entry(
        "repo 1: written code/train.py",
        {{"write_1", {{"path", "code/predict.py"}, {"content", predict_py}}}}));
    entries.push_back(tool_entry("repo 1: written code/predict.py",
                                 {{"execute_1", {{"command", "python3 code/train.py"}}}}));
    entries.push_back(text_entry("metrics: auc=0.82", "pipeline verified at auc 0.82"));

    // coder on repo 2 (winner).
    entries.push_back(tool_entry(
        "code-repo-2",
        {{"write_2", {{"path", "code/train.py"}, {"content", train_py("0.9")}}}}));
    entries.push_back(tool_entry(
        "repo 2: written code/train.py",
        {{"write_2", {{"path", "code/predict.py"}, {"content", predict_py}}}}));
    entries.push_back(tool_entry("repo 2: written code/predict.py",
                                 {{"execute_2", {{"command", "python3 code/train.py"}}}}));
    entries.push_back(text_entry("metrics: auc=0.9", "pipeline verified at auc 0.9"));

    // manager step 3: wrap up.
    entries.push_back(text_entry("outcome: completed",
                                 "both repositories verified; repo 2 leads at auc 0.9"));

    // aggregator: inspect, assemble final output, verify, report.
    entries.push_back(tool_entry("task_id: toy-tabular", {{"read_2", {{"path", "plan.md"}}}}));
    entries.push_back(tool_entry(
        "Plan B",
        {{"write_final",
          {{"path", "artifacts/model.txt"}, {"from_repo", 2}, {"from_path", "model.txt"}}},
         {"write_final",
          {{"path", "artifacts/predict.py"}, {"from_repo", 2}, {"from_path", "code/predict.py"}}},
         {"write_final",
          {{"path", "report.md"},
           {"content",
            "# final report\n\nchosen: repo 2, single best (validation auc 0.9).\n"}}},
         {"write_final",
          {{"path", "inference"},
           {"content",
            "#!/bin/sh\npython3 artifacts/predict.py artifacts/model.txt \"$1\" \"$2\"\n"}}}}));
    entries.push_back(tool_entry(
        "written: inference",
        {{"execute_final",
          {{"command", "sh inference " + data + "/test out.csv && echo verified-inference"}}}}));
    entries.push_back(
        text_entry("verified-inference", "chosen repository 2 (single best, auc 0.9)"));

    write_file(fixture.script_file, join_script(entries));
    return fixture;
}

inline RunParams golden_params(double budget_seconds = 600.0) {
    RunParams params;
    params.n_repos = 2;
    params.budget.wall_clock_seconds = budget_seconds;
    params.budget.aggregator_reserve_seconds = budget_seconds / 4.0;
    params.loop.retries.base_delay = std::chrono::milliseconds(10);
    return params;
}

} // namespace forge::test
