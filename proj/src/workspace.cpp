#include "forge/workspace.hpp"
#include "forge/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <thread>

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

extern char** environ;

namespace forge {

const char* to_string(RepoStatus status) {
    switch (status) {
        case RepoStatus::empty: return "empty";
        case RepoStatus::planned: return "planned";
        case RepoStatus::coded: return "coded";
        case RepoStatus::running: return "running";
        case RepoStatus::scored: return "scored";
        case RepoStatus::halted: return "halted";
    }
    return "empty";
}

RepoStatus repo_status_from_string(const std::string& s) {
    for (RepoStatus status : {RepoStatus::empty, RepoStatus::planned, RepoStatus::coded,
                              RepoStatus::running, RepoStatus::scored, RepoStatus::halted})
        if (s == to_string(status)) return status;
    raise(ErrorKind::format, "unknown repository status '" + s + "'");
}

json to_json(const ExecutionResult& result) {
    json out = {{"run_id", result.run_id},
                {"command", result.command},
                {"exit_code", result.exit_code},
                {"duration_seconds", result.duration_seconds},
                {"stdout_path", result.stdout_path},
                {"stderr_path", result.stderr_path},
                {"timed_out", result.timed_out}};
    if (result.parsed_metrics) {
        out["parsed_metrics"] = {
            {"metric_name", result.parsed_metrics->metric_name},
            {"value", result.parsed_metrics->value},
            {"higher_is_better", result.parsed_metrics->higher_is_better},
            {"split", result.parsed_metrics->split == MetricSplit::validation ? "validation"
                                                                              : "test"}};
    }
    return out;
}

ExecutionResult execution_result_from_json(const json& value) {
    ExecutionResult result;
    result.run_id = value.at("run_id").get<std::string>();
    result.command = value.at("command").get<std::string>();
    result.exit_code = value.at("exit_code").get<int>();
    result.duration_seconds = value.at("duration_seconds").get<double>();
    result.stdout_path = value.at("stdout_path").get<std::string>();
    result.stderr_path = value.at("stderr_path").get<std::string>();
    result.timed_out = value.at("timed_out").get<bool>();
    if (value.contains("parsed_metrics")) {
        std::string error;
        result.parsed_metrics = parse_metric_record(value["parsed_metrics"], &error);
    }
    return result;
}

std::optional<MetricRecord> parse_metric_record(const json& value, std::string* error) {
    auto fail = [&](const std::string& message) -> std::optional<MetricRecord> {
        if (error) *error = message;
        return std::nullopt;
    };
    if (!value.is_object()) return fail("metrics payload is not an object");
    if (!value.contains("metric_name") || !value.contains("value"))
        return fail("metrics payload lacks metric_name/value");
    if (!value["value"].is_number()) return fail("metric value is not numeric");
    MetricRecord record;
    record.metric_name = value["metric_name"].get<std::string>();
    record.value = value["value"].get<double>();
    if (!std::isfinite(record.value)) return fail("metric value is not finite");
    record.higher_is_better = value.value("higher_is_better", true);
    const std::string split = value.value("split", "validation");
    if (split == "validation") {
        record.split = MetricSplit::validation;
    } else if (split == "test") {
        record.split = MetricSplit::test;
    } else {
        return fail("unknown metric split '" + split + "'");
    }
    return record;
}

fs::path confine_path(const fs::path& root, const std::string& relative_path) {
    const fs::path rel(relative_path);
    if (rel.empty()) raise(ErrorKind::security, "empty artifact path");
    if (rel.is_absolute())
        raise(ErrorKind::security, "absolute paths are not allowed: " + relative_path);

    // Lexical check first: no prefix of the path may climb above the root.
    int depth = 0;
    for (const auto& part : rel) {
        if (part == "..") {
            if (--depth < 0)
                raise(ErrorKind::security, "path escapes sandbox root: " + relative_path);
        } else if (part != "." && !part.empty()) {
            ++depth;
        }
    }

    // Then resolve symlinks over the existing prefix and re-check.
    const fs::path combined = root / rel;
    std::error_code ec;
    const fs::path resolved = fs::weakly_canonical(combined, ec);
    const fs::path canonical_root = fs::weakly_canonical(root, ec);
    const std::string resolved_str = resolved.string();
    const std::string root_str = canonical_root.string();
    if (resolved_str != root_str &&
        resolved_str.compare(0, root_str.size() + 1, root_str + "/") != 0)
        raise(ErrorKind::security, "path escapes sandbox root: " + relative_path);
    return combined;
}

// ── process spawning ────────────────────────────────────────────────────

namespace {

struct SpawnOutcome {
    int exit_code = -1;
    double duration_seconds = 0.0;
    bool timed_out = false;
    bool aborted = false; // killed by should_abort, not by the deadline
};

// Runs /bin/sh -c command in its own process group with stdout/stderr
// redirected to files; kills the whole group on timeout or abort.
SpawnOutcome spawn_capture(const fs::path& cwd, const std::string& command,
                           double timeout_seconds,
                           const std::map<std::string, std::string>& env_overrides,
                           const fs::path& out_path, const fs::path& err_path,
                           const std::function<bool()>& should_abort,
                           const std::function<void(int)>& on_spawn) {
    // Environment assembled before fork; only async-signal-safe calls happen
    // in the child.
    std::vector<std::string> env_strings;
    for (char** e = environ; *e; ++e) {
        const std::string entry(*e);
        const std::string name = entry.substr(0, entry.find('='));
        if (!env_overrides.count(name)) env_strings.push_back(entry);
    }
    for (const auto& [name, value] : env_overrides) env_strings.push_back(name + "=" + value);
    std::vector<char*> envp;
    envp.reserve(env_strings.size() + 1);
    for (auto& entry : env_strings) envp.push_back(entry.data());
    envp.push_back(nullptr);

    const int out_fd = ::open(out_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    const int err_fd = ::open(err_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (out_fd < 0 || err_fd < 0) {
        if (out_fd >= 0) ::close(out_fd);
        if (err_fd >= 0) ::close(err_fd);
        raise(ErrorKind::io, "cannot open log files for command output");
    }

    const auto started = std::chrono::steady_clock::now();
    const pid_t pid = ::fork();
    if (pid < 0) {
        ::close(out_fd);
        ::close(err_fd);
        raise(ErrorKind::execution, std::string("fork failed: ") + std::strerror(errno));
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        if (::chdir(cwd.c_str()) != 0) _exit(126);
        ::dup2(out_fd, STDOUT_FILENO);
        ::dup2(err_fd, STDERR_FILENO);
        ::close(out_fd);
        ::close(err_fd);
        const char* argv[] = {"/bin/sh", "-c", command.c_str(), nullptr};
        ::execve("/bin/sh", const_cast<char* const*>(argv), envp.data());
        _exit(127);
    }

    ::close(out_fd);
    ::close(err_fd);
    ::setpgid(pid, pid); // from the parent too, to close the race
    if (on_spawn) on_spawn(pid);

    const auto deadline =
        started + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                      std::chrono::duration<double>(timeout_seconds));

    SpawnOutcome outcome;
    int wait_status = 0;
    for (;;) {
        const pid_t waited = ::waitpid(pid, &wait_status, WNOHANG);
        if (waited == pid) break;
        if (waited < 0 && errno != EINTR) break;

        const bool aborted = should_abort && should_abort();
        if (aborted || std::chrono::steady_clock::now() >= deadline) {
            ::kill(-pid, SIGKILL);
            outcome.timed_out = !aborted;
            outcome.aborted = aborted;
            ::waitpid(pid, &wait_status, 0);
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }

    outcome.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (WIFEXITED(wait_status))
        outcome.exit_code = WEXITSTATUS(wait_status);
    else if (WIFSIGNALED(wait_status))
        outcome.exit_code = 128 + WTERMSIG(wait_status); // shell convention for killed
    return outcome;
}

} // namespace

CommandResult run_command(const fs::path& cwd, const std::string& command,
                          double timeout_seconds,
                          const std::map<std::string, std::string>& env_overrides) {
    if (trim(command).empty()) raise(ErrorKind::precondition, "empty command");
    static std::atomic<unsigned> counter{0};
    const unsigned n = counter.fetch_add(1);
    const fs::path out_path = cwd / (".cmd-" + std::to_string(n) + ".out");
    const fs::path err_path = cwd / (".cmd-" + std::to_string(n) + ".err");
    fs::create_directories(cwd);

    const SpawnOutcome outcome = spawn_capture(cwd, command, timeout_seconds, env_overrides,
                                               out_path, err_path, nullptr, nullptr);
    CommandResult result;
    result.exit_code = outcome.exit_code;
    result.duration_seconds = outcome.duration_seconds;
    result.timed_out = outcome.timed_out;
    result.stdout_text = fs::exists(out_path) ? read_file(out_path) : "";
    result.stderr_text = fs::exists(err_path) ? read_file(err_path) : "";
    std::error_code ec;
    fs::remove(out_path, ec);
    fs::remove(err_path, ec);
    return result;
}

// ── repository ──────────────────────────────────────────────────────────

Repository::Repository(fs::path root, int repo_id)
    : root_(std::move(root)), repo_id_(repo_id) {}

std::shared_ptr<Repository> Repository::create(const fs::path& run_root, int repo_id) {
    const fs::path root = run_root / ("repo-" + std::to_string(repo_id));
    if (fs::exists(root))
        raise(ErrorKind::state, "repository " + root.string() + " already exists");
    fs::create_directories(root / "code");
    fs::create_directories(root / "results");
    write_file(root / "plan.md", "");
    write_file(root / "config.yaml", "");

    auto repo = std::shared_ptr<Repository>(new Repository(root, repo_id));
    repo->persist_state();
    repo->persist_results();
    return repo;
}

std::shared_ptr<Repository> Repository::open(const fs::path& run_root, int repo_id) {
    const fs::path root = run_root / ("repo-" + std::to_string(repo_id));
    if (!fs::is_directory(root))
        raise(ErrorKind::not_found, "no repository at " + root.string());
    auto repo = std::shared_ptr<Repository>(new Repository(root, repo_id));

    const fs::path state_path = root / "state.json";
    if (fs::exists(state_path)) {
        const json state = load_json_file(state_path);
        repo->status_ = repo_status_from_string(state.value("status", "empty"));
        repo->halt_reason_ = state.value("halt_reason", "");
        // A crash mid-execute can leave status=running behind; nothing is
        // actually running in a fresh process.
        if (repo->status_ == RepoStatus::running) repo->status_ = RepoStatus::coded;
    }
    const fs::path index_path = root / "results" / "index.json";
    if (fs::exists(index_path)) {
        for (const auto& item : load_json_file(index_path))
            repo->results_.push_back(execution_result_from_json(item));
    }
    return repo;
}

RepoStatus Repository::status() const {
    std::lock_guard lock(mutex_);
    return status_;
}

std::string Repository::halt_reason() const {
    std::lock_guard lock(mutex_);
    return halt_reason_;
}

std::vector<ExecutionResult> Repository::results() const {
    std::lock_guard lock(mutex_);
    return results_;
}

void Repository::set_status(RepoStatus next) {
    if (status_ != next) transitions_.emplace_back(status_, next);
    status_ = next;
    persist_state();
}

std::vector<std::pair<RepoStatus, RepoStatus>> Repository::transitions() const {
    std::lock_guard lock(mutex_);
    return transitions_;
}

void Repository::persist_state() const {
    save_json_file(root_ / "state.json", {{"repo_id", repo_id_},
                                          {"status", to_string(status_)},
                                          {"halt_reason", halt_reason_}});
}

void Repository::persist_results() const {
    json index = json::array();
    for (const auto& result : results_) index.push_back(to_json(result));
    save_json_file(root_ / "results" / "index.json", index);
}

fs::path Repository::confine(const std::string& relative_path) const {
    return confine_path(root_, relative_path);
}

ReadArtifact Repository::read_artifact(const std::string& relative_path,
                                       std::size_t cap_chars) const {
    const fs::path path = confine(relative_path);
    if (!fs::is_regular_file(path))
        raise(ErrorKind::not_found, "no artifact at " + relative_path);
    std::string content = read_file(path);
    ReadArtifact artifact;
    if (content.size() > cap_chars) {
        const std::size_t head = std::min(kReadHeadChars, cap_chars * 3 / 4);
        artifact.content = truncate_middle(content, head, cap_chars - head);
        artifact.truncated = true;
    } else {
        artifact.content = std::move(content);
    }
    return artifact;
}

void Repository::write_artifact(const std::string& relative_path, const std::string& content) {
    const fs::path path = confine(relative_path);
    {
        std::lock_guard lock(mutex_);
        if (status_ == RepoStatus::halted)
            raise(ErrorKind::state, "repository " + std::to_string(repo_id_) + " is halted");
    }
    atomic_write_file(path, content);

    std::lock_guard lock(mutex_);
    const fs::path rel(relative_path);
    if (status_ == RepoStatus::empty && rel.filename() == "plan.md")
        set_status(RepoStatus::planned);
    else if (status_ == RepoStatus::planned && !rel.empty() && *rel.begin() == "code")
        set_status(RepoStatus::coded);
}

std::optional<MetricRecord> Repository::parse_metrics_file() const {
    const fs::path path = root_ / "metrics.json";
    if (!fs::exists(path)) return std::nullopt;
    json value = json::parse(read_file(path), nullptr, false);
    std::string error;
    if (value.is_discarded()) {
        log_warning("repo-" + std::to_string(repo_id_) + ": metrics.json is not valid JSON");
        return std::nullopt;
    }
    auto record = parse_metric_record(value, &error);
    if (!record)
        log_warning("repo-" + std::to_string(repo_id_) + ": metrics.json rejected: " + error);
    return record;
}

ExecutionResult Repository::execute(const std::string& command, double timeout_seconds,
                                    const std::map<std::string, std::string>& env_overrides) {
    if (trim(command).empty()) raise(ErrorKind::precondition, "empty command");

    std::string run_id;
    {
        std::lock_guard lock(mutex_);
        if (status_ == RepoStatus::halted)
            raise(ErrorKind::state, "repository " + std::to_string(repo_id_) + " is halted");
        if (status_ == RepoStatus::empty || status_ == RepoStatus::planned)
            raise(ErrorKind::precondition,
                  "repository " + std::to_string(repo_id_) + " has no code to execute");
        if (running_pgid_ != 0)
            raise(ErrorKind::state, "repository " + std::to_string(repo_id_) +
                                        " already has a running execute");
        char buf[32];
        std::snprintf(buf, sizeof(buf), "run-%03zu", results_.size() + 1);
        run_id = buf;
        set_status(RepoStatus::running);
    }

    ExecutionResult result;
    result.run_id = run_id;
    result.command = command;
    result.stdout_path = "results/" + run_id + ".out";
    result.stderr_path = "results/" + run_id + ".err";

    SpawnOutcome outcome;
    try {
        outcome = spawn_capture(
            root_, command, timeout_seconds, env_overrides, root_ / result.stdout_path,
            root_ / result.stderr_path,
            [this] {
                std::lock_guard lock(mutex_);
                return status_ == RepoStatus::halted;
            },
            [this](int pgid) {
                std::lock_guard lock(mutex_);
                running_pgid_ = pgid;
            });
    } catch (...) {
        std::lock_guard lock(mutex_);
        running_pgid_ = 0;
        if (status_ != RepoStatus::halted)
            set_status(best_metric_unlocked() ? RepoStatus::scored : RepoStatus::coded);
        throw;
    }

    result.exit_code = outcome.exit_code;
    result.duration_seconds = outcome.duration_seconds;
    result.timed_out = outcome.timed_out;
    if (result.exit_code == 0 && !result.timed_out && !outcome.aborted)
        result.parsed_metrics = parse_metrics_file();

    std::lock_guard lock(mutex_);
    running_pgid_ = 0;
    results_.push_back(result);
    persist_results();
    if (status_ != RepoStatus::halted)
        set_status(result.parsed_metrics || best_metric_unlocked() ? RepoStatus::scored
                                                                   : RepoStatus::coded);
    return result;
}

std::optional<MetricRecord> Repository::best_metric() const {
    std::lock_guard lock(mutex_);
    return best_metric_unlocked();
}

std::optional<MetricRecord> Repository::best_metric_unlocked() const {
    std::optional<MetricRecord> best;
    for (const auto& result : results_) {
        if (!result.parsed_metrics) continue;
        if (result.parsed_metrics->split != MetricSplit::validation) continue;
        if (!best) {
            best = result.parsed_metrics;
            continue;
        }
        const bool higher = result.parsed_metrics->higher_is_better;
        if ((higher && result.parsed_metrics->value > best->value) ||
            (!higher && result.parsed_metrics->value < best->value))
            best = result.parsed_metrics;
    }
    return best;
}

void Repository::halt(const std::string& reason) {
    int pgid_to_kill = 0;
    {
        std::lock_guard lock(mutex_);
        if (status_ == RepoStatus::halted)
            raise(ErrorKind::state,
                  "repository " + std::to_string(repo_id_) + " is already halted");
        halt_reason_ = reason;
        pgid_to_kill = running_pgid_;
        set_status(RepoStatus::halted);
    }
    if (pgid_to_kill != 0) ::kill(-pgid_to_kill, SIGKILL);
}

} // namespace forge
