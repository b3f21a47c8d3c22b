#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace forge {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ── files ───────────────────────────────────────────────────────────────

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, const std::string& content);
// Write to a sibling temp file, then rename over the target.
void atomic_write_file(const fs::path& path, const std::string& content);

json load_json_file(const fs::path& path);
void save_json_file(const fs::path& path, const json& value);

// ── strings ─────────────────────────────────────────────────────────────

std::string trim(const std::string& s);
std::string to_lower(std::string s);
std::vector<std::string> split_lines(const std::string& text);
std::string join(const std::vector<std::string>& parts, const std::string& sep);
bool contains(const std::string& haystack, const std::string& needle);

// Number of lines in a text, ignoring one trailing newline ("a\nb\n" is 2 lines).
std::size_t line_count(const std::string& text);

// Keep at most `max_chars`, preserving head and tail around an elision marker.
std::string truncate_middle(const std::string& text, std::size_t head_chars, std::size_t tail_chars);

// ── time ────────────────────────────────────────────────────────────────

// ISO-8601 UTC, second precision, e.g. "2026-08-10T12:00:00Z".
std::string now_iso_utc();
using IsoClock = std::function<std::string()>;

using SteadyClock = std::function<std::chrono::steady_clock::time_point()>;
SteadyClock real_steady_clock();

// ── hashing ─────────────────────────────────────────────────────────────

std::uint64_t fnv1a_64(const std::string& data);
std::uint64_t splitmix64(std::uint64_t x);

// ── misc ────────────────────────────────────────────────────────────────

// Runs fn(0..n-1) on up to max_parallel worker threads; rethrows the first
// exception after all workers finish.
void parallel_for(std::size_t n, int max_parallel, const std::function<void(std::size_t)>& fn);

void log_warning(const std::string& message);

} // namespace forge
