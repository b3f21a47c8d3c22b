#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <thread>

#include "forge/errors.hpp"
#include "forge/workspace.hpp"
#include "support.hpp"

using namespace forge;
using test::TempDir;

TEST_CASE("create_repository") {
    TempDir dir("ws-create");

    SUBCASE("seven repositories with the schema skeleton, all empty") {
        std::vector<std::shared_ptr<Repository>> repos;
        for (int i = 1; i <= 7; ++i) repos.push_back(Repository::create(dir.path, i));
        for (int i = 1; i <= 7; ++i) {
            const fs::path root = dir.path / ("repo-" + std::to_string(i));
            CHECK(fs::exists(root / "plan.md"));
            CHECK(fs::exists(root / "config.yaml"));
            CHECK(fs::is_directory(root / "code"));
            CHECK(fs::is_directory(root / "results"));
            CHECK(repos[static_cast<std::size_t>(i - 1)]->status() == RepoStatus::empty);
        }
    }

    SUBCASE("duplicate repo id is an error") {
        Repository::create(dir.path, 1);
        CHECK_THROWS_AS(Repository::create(dir.path, 1), Error);
    }

    SUBCASE("skeleton paths pass confinement") {
        auto repo = Repository::create(dir.path, 1);
        CHECK_NOTHROW(repo->confine("plan.md"));
        CHECK_NOTHROW(repo->confine("code/train.py"));
        CHECK_NOTHROW(repo->confine("results/index.json"));
    }
}

TEST_CASE("path confinement") {
    TempDir dir("ws-confine");
    auto repo = Repository::create(dir.path, 1);
    Repository::create(dir.path, 2)->write_artifact("plan.md", "other repo plan");

    SUBCASE("traversal probes") {
        for (const char* probe : {"../repo-2/plan.md", "..", "a/../../repo-2/plan.md",
                                  "code/../../repo-2/plan.md"}) {
            try {
                repo->read_artifact(probe);
                FAIL("expected security error for ", probe);
            } catch (const Error& e) {
                CHECK(e.kind() == ErrorKind::security);
            }
        }
    }

    SUBCASE("absolute path probes") {
        for (const char* probe : {"/etc/hostname", "/tmp/x"}) {
            try {
                repo->write_artifact(probe, "x");
                FAIL("expected security error for ", probe);
            } catch (const Error& e) {
                CHECK(e.kind() == ErrorKind::security);
            }
        }
    }

    SUBCASE("symlink escape is caught") {
        fs::create_symlink(dir.path / "repo-2", dir.path / "repo-1" / "sneaky");
        try {
            repo->read_artifact("sneaky/plan.md");
            FAIL("expected security error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::security);
        }
    }

    SUBCASE("inner dot-dot that stays inside is fine") {
        repo->write_artifact("code/sub/../train.py", "print(1)");
        CHECK(repo->read_artifact("code/train.py").content == "print(1)");
    }
}

TEST_CASE("write_artifact status transitions") {
    TempDir dir("ws-status");
    auto repo = Repository::create(dir.path, 1);
    CHECK(repo->status() == RepoStatus::empty);

    repo->write_artifact("plan.md", "the plan");
    CHECK(repo->status() == RepoStatus::planned);

    repo->write_artifact("code/train.py", "print('x')");
    CHECK(repo->status() == RepoStatus::coded);

    SUBCASE("read-your-write") {
        CHECK(repo->read_artifact("plan.md").content == "the plan");
    }

    SUBCASE("write to a halted repo is a state error") {
        repo->halt("done here");
        CHECK_THROWS_AS(repo->write_artifact("plan.md", "new"), Error);
    }
}

TEST_CASE("read cap truncates with a marker") {
    TempDir dir("ws-readcap");
    auto repo = Repository::create(dir.path, 1);
    const std::string big(1024 * 1024, 'z');
    repo->write_artifact("big.log", big);

    const ReadArtifact artifact = repo->read_artifact("big.log", 64 * 1024);
    CHECK(artifact.truncated);
    CHECK(artifact.content.size() < big.size());
    CHECK(contains(artifact.content, "characters elided"));

    const ReadArtifact small = repo->read_artifact("big.log", 2 * 1024 * 1024);
    CHECK_FALSE(small.truncated);
    CHECK(small.content == big);
}

TEST_CASE("execute") {
    TempDir dir("ws-exec");
    auto repo = Repository::create(dir.path, 1);

    SUBCASE("needs code first") {
        CHECK_THROWS_AS(repo->execute("echo hi", 5), Error);
    }

    repo->write_artifact("plan.md", "plan");
    repo->write_artifact("code/run.sh", "echo hello");

    SUBCASE("captures stdout and exit code") {
        const ExecutionResult result = repo->execute("echo hello", 10);
        CHECK(result.exit_code == 0);
        CHECK_FALSE(result.timed_out);
        CHECK(repo->read_artifact(result.stdout_path).content == "hello\n");
        CHECK(result.run_id == "run-001");
    }

    SUBCASE("working directory is the repo root") {
        const ExecutionResult result = repo->execute("pwd", 10);
        const std::string cwd = trim(repo->read_artifact(result.stdout_path).content);
        CHECK(fs::equivalent(fs::path(cwd), repo->root()));
    }

    SUBCASE("timeout kills the process tree and reports a killed exit") {
        const auto started = std::chrono::steady_clock::now();
        const ExecutionResult result = repo->execute("sleep 10", 1.0);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        CHECK(result.timed_out);
        CHECK(result.exit_code > 128); // killed
        CHECK(result.duration_seconds == doctest::Approx(1.0).epsilon(0.5));
        CHECK(wall < 5.0);
    }

    SUBCASE("metrics.json is parsed into the result") {
        const ExecutionResult result = repo->execute(
            "printf '{\"metric_name\":\"auc\",\"value\":0.9,\"higher_is_better\":true,"
            "\"split\":\"validation\"}' > metrics.json",
            10);
        REQUIRE(result.parsed_metrics);
        CHECK(result.parsed_metrics->metric_name == "auc");
        CHECK(result.parsed_metrics->value == 0.9);
        CHECK(result.parsed_metrics->higher_is_better);
        CHECK(repo->status() == RepoStatus::scored);
    }

    SUBCASE("unparseable metrics file keeps the result with no metrics") {
        const ExecutionResult result = repo->execute("echo 'not json' > metrics.json", 10);
        CHECK(result.exit_code == 0);
        CHECK_FALSE(result.parsed_metrics);
        CHECK(repo->status() == RepoStatus::coded);
    }

    SUBCASE("environment overrides reach the child") {
        const ExecutionResult result =
            repo->execute("printf '%s' \"$FORGE_PROBE\"", 10, {{"FORGE_PROBE", "injected"}});
        CHECK(repo->read_artifact(result.stdout_path).content == "injected");
    }

    SUBCASE("results are append-only with unique ordered run ids") {
        repo->execute("true", 10);
        repo->execute("false", 10);
        repo->execute("true", 10);
        const auto results = repo->results();
        REQUIRE(results.size() == 3);
        CHECK(results[0].run_id == "run-001");
        CHECK(results[1].run_id == "run-002");
        CHECK(results[2].run_id == "run-003");
        CHECK(results[1].exit_code == 1);
    }

    SUBCASE("results survive reopen") {
        repo->execute("echo persisted", 10);
        auto reopened = Repository::open(dir.path, 1);
        REQUIRE(reopened->results().size() == 1);
        CHECK(reopened->results()[0].command == "echo persisted");
        CHECK(reopened->status() == RepoStatus::coded);
    }
}

TEST_CASE("best_metric direction handling") {
    TempDir dir("ws-best");
    auto repo = Repository::create(dir.path, 1);
    repo->write_artifact("plan.md", "p");
    repo->write_artifact("code/x", "x");

    auto score = [&](const std::string& name, double value, bool higher) {
        json metrics = {{"metric_name", name},
                        {"value", value},
                        {"higher_is_better", higher},
                        {"split", "validation"}};
        repo->execute("printf '%s' '" + metrics.dump() + "' > metrics.json", 10);
    };

    SUBCASE("no scored runs: absent") { CHECK_FALSE(repo->best_metric()); }

    SUBCASE("higher is better keeps the max") {
        score("auc", 0.8, true);
        score("auc", 0.9, true);
        REQUIRE(repo->best_metric());
        CHECK(repo->best_metric()->value == 0.9);
    }

    SUBCASE("lower is better keeps the min") {
        score("rmse", 2.0, false);
        score("rmse", 1.5, false);
        REQUIRE(repo->best_metric());
        CHECK(repo->best_metric()->value == 1.5);
    }

    SUBCASE("test-split metrics are ignored for best_metric") {
        json metrics = {{"metric_name", "auc"},
                        {"value", 0.99},
                        {"higher_is_better", true},
                        {"split", "test"}};
        repo->execute("printf '%s' '" + metrics.dump() + "' > metrics.json", 10);
        CHECK_FALSE(repo->best_metric());
    }
}

TEST_CASE("halt") {
    TempDir dir("ws-halt");
    auto repo = Repository::create(dir.path, 1);
    repo->write_artifact("plan.md", "p");
    repo->write_artifact("code/x", "x");

    SUBCASE("halting kills a running process quickly") {
        std::thread executor([&] {
            try {
                repo->execute("sleep 30", 60);
            } catch (const Error&) {
            }
        });
        // Give the sleeper time to spawn.
        std::this_thread::sleep_for(std::chrono::milliseconds(300));
        const auto halted_at = std::chrono::steady_clock::now();
        repo->halt("manager decision");
        executor.join();
        const double kill_latency =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - halted_at).count();
        CHECK(kill_latency < 2.0);
        CHECK(repo->status() == RepoStatus::halted);
        CHECK(repo->halt_reason() == "manager decision");
    }

    SUBCASE("halt then write and execute are state errors") {
        repo->halt("stop");
        CHECK_THROWS_AS(repo->write_artifact("plan.md", "x"), Error);
        CHECK_THROWS_AS(repo->execute("true", 5), Error);
    }

    SUBCASE("double halt is a state error") {
        repo->halt("once");
        CHECK_THROWS_AS(repo->halt("twice"), Error);
    }
}

TEST_CASE("isolation: concurrent executes in distinct repos") {
    TempDir dir("ws-isolation");
    auto repo1 = Repository::create(dir.path, 1);
    auto repo2 = Repository::create(dir.path, 2);
    for (auto& repo : {repo1, repo2}) {
        repo->write_artifact("plan.md", "p");
        repo->write_artifact("code/x", "x");
    }
    repo1->write_artifact("secret.txt", "repo-one-secret");

    ExecutionResult r1, r2;
    std::thread t1([&] { r1 = repo1->execute("cat secret.txt", 10); });
    std::thread t2([&] { r2 = repo2->execute("cat secret.txt; echo rc=$?", 10); });
    t1.join();
    t2.join();
    CHECK(repo1->read_artifact(r1.stdout_path).content == "repo-one-secret");
    // repo 2 cannot see repo 1's file through its own cwd
    CHECK(contains(repo2->read_artifact(r2.stdout_path).content, "rc=1"));
}

TEST_CASE("recorded status transitions replay within the allowed relation") {
    TempDir dir("ws-replay");
    auto repo = Repository::create(dir.path, 1);

    repo->write_artifact("plan.md", "p");
    repo->write_artifact("code/t", "t");
    repo->execute("false", 5); // running, then back to coded
    repo->execute(
        "printf '{\"metric_name\":\"auc\",\"value\":0.5,\"higher_is_better\":true,"
        "\"split\":\"validation\"}' > metrics.json",
        5);
    repo->execute("true", 5); // scored -> running -> scored again
    repo->halt("end");

    const std::set<std::pair<RepoStatus, RepoStatus>> allowed = {
        {RepoStatus::empty, RepoStatus::planned},   {RepoStatus::planned, RepoStatus::coded},
        {RepoStatus::coded, RepoStatus::running},   {RepoStatus::running, RepoStatus::scored},
        {RepoStatus::scored, RepoStatus::running},  {RepoStatus::running, RepoStatus::coded},
        {RepoStatus::empty, RepoStatus::halted},    {RepoStatus::planned, RepoStatus::halted},
        {RepoStatus::coded, RepoStatus::halted},    {RepoStatus::running, RepoStatus::halted},
        {RepoStatus::scored, RepoStatus::halted},
    };
    const auto transitions = repo->transitions();
    CHECK(transitions.size() >= 8);
    for (const auto& step : transitions) CHECK(allowed.count(step) == 1);
    CHECK(transitions.back().second == RepoStatus::halted);
}

TEST_CASE("run_command captures output in memory") {
    TempDir dir("ws-runcmd");
    const CommandResult result = run_command(dir.path, "echo out; echo err >&2", 10);
    CHECK(result.exit_code == 0);
    CHECK(result.stdout_text == "out\n");
    CHECK(result.stderr_text == "err\n");

    SUBCASE("timeout") {
        const CommandResult slow = run_command(dir.path, "sleep 5", 0.5);
        CHECK(slow.timed_out);
    }
}
