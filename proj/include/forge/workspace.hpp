#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "forge/util.hpp"

namespace forge {

// Sandboxed solution repositories under the (plan, code, config, result)
// schema. Sandboxing here is path confinement, per-repo working directories,
// and process-tree kill; the host environment is trusted.

enum class RepoStatus { empty, planned, coded, running, scored, halted };

const char* to_string(RepoStatus status);
RepoStatus repo_status_from_string(const std::string& s);

enum class MetricSplit { validation, test };

struct MetricRecord {
    std::string metric_name;
    double value = 0.0;
    bool higher_is_better = true;
    MetricSplit split = MetricSplit::validation;
};

struct ExecutionResult {
    std::string run_id;
    std::string command;
    int exit_code = 0;
    double duration_seconds = 0.0;
    std::string stdout_path; // relative to repo root
    std::string stderr_path;
    bool timed_out = false;
    std::optional<MetricRecord> parsed_metrics;
};

json to_json(const ExecutionResult& result);
ExecutionResult execution_result_from_json(const json& value);

struct ReadArtifact {
    std::string content;
    bool truncated = false;
};

// Default read cap: 64k characters kept as 48k head + 16k tail.
inline constexpr std::size_t kReadCapChars = 64 * 1024;
inline constexpr std::size_t kReadHeadChars = 48 * 1024;

class Repository {
public:
    // Creates repo-<id> under run_root with the schema skeleton. Handles are
    // shared: the manager and one sub-agent invocation may hold the same
    // repository while executes and halts race.
    static std::shared_ptr<Repository> create(const fs::path& run_root, int repo_id);
    // Reopens an existing repository, reloading status and results.
    static std::shared_ptr<Repository> open(const fs::path& run_root, int repo_id);

    int id() const { return repo_id_; }
    const fs::path& root() const { return root_; }
    RepoStatus status() const;
    std::string halt_reason() const;

    ReadArtifact read_artifact(const std::string& relative_path,
                               std::size_t cap_chars = kReadCapChars) const;
    void write_artifact(const std::string& relative_path, const std::string& content);

    // Runs `command` through /bin/sh with cwd = repo root; stdout/stderr are
    // captured under results/; the whole process group is killed on timeout
    // or halt. If metrics.json exists at repo root afterwards it is parsed.
    ExecutionResult execute(const std::string& command, double timeout_seconds,
                            const std::map<std::string, std::string>& env_overrides = {});

    std::optional<MetricRecord> best_metric() const;

    void halt(const std::string& reason);

    std::vector<ExecutionResult> results() const;

    // Every status change this handle performed, in order, for replay
    // against the allowed transition relation.
    std::vector<std::pair<RepoStatus, RepoStatus>> transitions() const;

    // Resolves a repo-relative path, rejecting absolute paths, traversal and
    // symlink escapes.
    fs::path confine(const std::string& relative_path) const;

private:
    Repository(fs::path root, int repo_id);

    void set_status(RepoStatus next);
    void persist_state() const;
    void persist_results() const;
    std::optional<MetricRecord> parse_metrics_file() const;
    std::optional<MetricRecord> best_metric_unlocked() const;

    fs::path root_;
    int repo_id_ = 0;
    RepoStatus status_ = RepoStatus::empty;
    std::string halt_reason_;
    std::vector<std::pair<RepoStatus, RepoStatus>> transitions_;
    std::vector<ExecutionResult> results_;
    int running_pgid_ = 0; // process group of the in-flight execute, 0 if none
    mutable std::mutex mutex_;
};

std::optional<MetricRecord> parse_metric_record(const json& value, std::string* error = nullptr);

// Resolves `relative_path` against root, rejecting absolute paths, ".."
// escapes, and symlink escapes.
fs::path confine_path(const fs::path& root, const std::string& relative_path);

// One-off command execution outside a repository (setup agent, final-dir
// verification). Same process-group + kill-on-timeout semantics as
// Repository::execute, with output captured in memory.
struct CommandResult {
    int exit_code = 0;
    double duration_seconds = 0.0;
    std::string stdout_text;
    std::string stderr_text;
    bool timed_out = false;
};

CommandResult run_command(const fs::path& cwd, const std::string& command,
                          double timeout_seconds,
                          const std::map<std::string, std::string>& env_overrides = {});

} // namespace forge
