#include "forge/util.hpp"
#include "forge/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace forge {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::io: return "io error";
        case ErrorKind::format: return "format error";
        case ErrorKind::integrity: return "integrity error";
        case ErrorKind::not_found: return "not found";
        case ErrorKind::conflict: return "conflict";
        case ErrorKind::taxonomy: return "taxonomy error";
        case ErrorKind::security: return "security error";
        case ErrorKind::state: return "state error";
        case ErrorKind::protocol: return "protocol error";
        case ErrorKind::comparability: return "comparability error";
        case ErrorKind::precondition: return "precondition error";
        case ErrorKind::transport: return "transport error";
        case ErrorKind::exhausted: return "exhausted";
        case ErrorKind::context: return "context error";
        case ErrorKind::execution: return "execution error";
        case ErrorKind::invalid_input: return "invalid input";
        case ErrorKind::metric: return "metric error";
    }
    return "error";
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorKind::io, "cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) raise(ErrorKind::io, "read failed on " + path.string());
    return buf.str();
}

void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorKind::io, "cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) raise(ErrorKind::io, "write failed on " + path.string());
}

void atomic_write_file(const fs::path& path, const std::string& content) {
    static std::atomic<unsigned> counter{0};
    fs::path tmp = path;
    tmp += ".tmp-" + std::to_string(counter.fetch_add(1));
    write_file(tmp, content);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        raise(ErrorKind::io, "rename failed for " + path.string());
    }
}

json load_json_file(const fs::path& path) {
    const std::string text = read_file(path);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) raise(ErrorKind::format, "invalid JSON in " + path.string());
    return value;
}

void save_json_file(const fs::path& path, const json& value) {
    atomic_write_file(path, value.dump(2) + "\n");
}

std::string trim(const std::string& s) {
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(s[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1]))) --end;
    return s.substr(begin, end - begin);
}

std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::string current;
    for (char c : text) {
        if (c == '\n') {
            lines.push_back(current);
            current.clear();
        } else {
            current.push_back(c);
        }
    }
    if (!current.empty()) lines.push_back(current);
    return lines;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

std::size_t line_count(const std::string& text) {
    if (text.empty()) return 0;
    std::size_t n = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
    if (text.back() != '\n') ++n;
    return n;
}

std::string truncate_middle(const std::string& text, std::size_t head_chars, std::size_t tail_chars) {
    if (text.size() <= head_chars + tail_chars) return text;
    const std::size_t elided = text.size() - head_chars - tail_chars;
    return text.substr(0, head_chars) +
           "\n[... " + std::to_string(elided) + " characters elided ...]\n" +
           text.substr(text.size() - tail_chars);
}

std::string now_iso_utc() {
    const std::time_t t = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

SteadyClock real_steady_clock() {
    return [] { return std::chrono::steady_clock::now(); };
}

std::uint64_t fnv1a_64(const std::string& data) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void parallel_for(std::size_t n, int max_parallel, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    const std::size_t workers = std::min<std::size_t>(std::max(max_parallel, 1), n);
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

void log_warning(const std::string& message) {
    std::fprintf(stderr, "[warn] %s\n", message.c_str());
}

} // namespace forge
