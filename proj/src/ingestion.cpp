#include "forge/ingestion.hpp"
#include "forge/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <set>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace forge {

const char* to_string(SourceOrigin origin) {
    switch (origin) {
        case SourceOrigin::competition_writeup: return "competition_writeup";
        case SourceOrigin::blog: return "blog";
        case SourceOrigin::library_doc: return "library_doc";
        case SourceOrigin::code_repo: return "code_repo";
        case SourceOrigin::paper: return "paper";
    }
    return "blog";
}

SourceOrigin source_origin_from_string(const std::string& s) {
    if (s == "competition_writeup") return SourceOrigin::competition_writeup;
    if (s == "blog") return SourceOrigin::blog;
    if (s == "library_doc") return SourceOrigin::library_doc;
    if (s == "code_repo") return SourceOrigin::code_repo;
    if (s == "paper") return SourceOrigin::paper;
    raise(ErrorKind::format, "unknown source origin '" + s + "'");
}

// ── corpus manifest ─────────────────────────────────────────────────────

std::vector<SourceDocument> load_corpus(const fs::path& manifest_path) {
    const json manifest = load_json_file(manifest_path);
    if (!manifest.is_array())
        raise(ErrorKind::format, "corpus manifest must be a JSON array: " + manifest_path.string());
    const fs::path base = manifest_path.parent_path();

    std::vector<SourceDocument> docs;
    std::set<std::string> ids;
    for (const auto& record : manifest) {
        SourceDocument doc;
        doc.source_id = record.at("source_id").get<std::string>();
        doc.origin = source_origin_from_string(record.at("origin").get<std::string>());
        doc.origin_url = record.value("url", "");
        doc.fetched_at = record.value("fetched_at", "");
        doc.text = read_file(base / record.at("path").get<std::string>());
        if (!ids.insert(doc.source_id).second)
            raise(ErrorKind::format, "duplicate source_id '" + doc.source_id + "' in corpus");
        if (trim(doc.text).empty())
            raise(ErrorKind::format, "source '" + doc.source_id + "' is empty");
        docs.push_back(std::move(doc));
    }
    return docs;
}

void save_corpus_manifest(const fs::path& manifest_path, const std::vector<SourceDocument>& docs,
                          const std::vector<std::string>& relative_paths) {
    if (docs.size() != relative_paths.size())
        raise(ErrorKind::precondition, "one relative path per document required");
    json manifest = json::array();
    for (std::size_t i = 0; i < docs.size(); ++i) {
        manifest.push_back({{"source_id", docs[i].source_id},
                            {"origin", to_string(docs[i].origin)},
                            {"url", docs[i].origin_url},
                            {"path", relative_paths[i]},
                            {"fetched_at", docs[i].fetched_at}});
    }
    save_json_file(manifest_path, manifest);
}

// ── deduplication ───────────────────────────────────────────────────────

DedupResult dedup_corpus(const std::vector<SourceDocument>& docs, double threshold,
                         const IngestionConfig& config) {
    if (threshold <= 0.0 || threshold > 1.0)
        raise(ErrorKind::precondition, "dedup threshold must be in (0, 1]");

    std::vector<MinHashSignature> signatures(docs.size());
    parallel_for(docs.size(), config.max_parallel, [&](std::size_t i) {
        signatures[i] = minhash_signature(shingle(docs[i].text, config.shingle_k),
                                          config.num_hashes, config.seed);
    });

    // Greedy seed-based clusters over all pairs: the first unassigned doc
    // opens a cluster and absorbs every later unassigned doc similar to it.
    std::vector<int> cluster_of(docs.size(), -1);
    std::vector<std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        if (cluster_of[i] >= 0) continue;
        cluster_of[i] = static_cast<int>(clusters.size());
        clusters.push_back({i});
        for (std::size_t j = i + 1; j < docs.size(); ++j) {
            if (cluster_of[j] >= 0) continue;
            if (estimate_jaccard(signatures[i], signatures[j]) >= threshold) {
                cluster_of[j] = cluster_of[i];
                clusters.back().push_back(j);
            }
        }
    }

    DedupResult result;
    std::vector<bool> keep(docs.size(), false);
    for (const auto& cluster : clusters) {
        std::size_t rep = cluster.front();
        for (std::size_t m : cluster) {
            if (docs[m].text.size() > docs[rep].text.size() ||
                (docs[m].text.size() == docs[rep].text.size() &&
                 docs[m].source_id < docs[rep].source_id))
                rep = m;
        }
        keep[rep] = true;
        if (cluster.size() >= 2) {
            DuplicateCluster record;
            record.representative = docs[rep].source_id;
            for (std::size_t m : cluster) record.members.push_back(docs[m].source_id);
            result.clusters.push_back(std::move(record));
        }
    }
    for (std::size_t i = 0; i < docs.size(); ++i)
        if (keep[i]) result.kept.push_back(docs[i]);
    return result;
}

// ── relevance filtering ─────────────────────────────────────────────────

namespace {

struct Verdict {
    bool keep = true;
    std::string reason;
    bool fail_open = false;
};

Verdict parse_verdict(const std::string& text) {
    for (const auto& line : split_lines(text)) {
        const std::string t = trim(line);
        const std::string upper = to_lower(t);
        if (upper.rfind("keep", 0) == 0) {
            const std::size_t colon = t.find(':');
            return {true, colon == std::string::npos ? "" : trim(t.substr(colon + 1)), false};
        }
        if (upper.rfind("drop", 0) == 0) {
            const std::size_t colon = t.find(':');
            return {false, colon == std::string::npos ? "" : trim(t.substr(colon + 1)), false};
        }
    }
    return {true, "malformed verdict, failing open", true};
}

} // namespace

RelevanceResult filter_relevance(const std::vector<SourceDocument>& docs, Backend& backend,
                                 const PromptLibrary& prompts, int max_parallel) {
    const std::string system_prompt = prompts.raw("relevance_filter");

    std::vector<Verdict> verdicts(docs.size());
    parallel_for(docs.size(), max_parallel, [&](std::size_t i) {
        CompletionRequest request;
        request.temperature = 0.0;
        request.messages = {ChatMessage::system(system_prompt),
                            ChatMessage::user("source_id: " + docs[i].source_id +
                                              "\norigin: " + to_string(docs[i].origin) +
                                              "\n\n" + docs[i].text)};
        const CompletionResponse response = complete_with_retries(backend, request);
        if (!response.is_final()) {
            verdicts[i] = {true, "classifier responded with tool calls, failing open", true};
            return;
        }
        verdicts[i] = parse_verdict(response.final_text());
    });

    RelevanceResult result;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        if (verdicts[i].fail_open) {
            ++result.fail_open_count;
            log_warning("relevance filter: " + verdicts[i].reason + " for " + docs[i].source_id);
        }
        if (verdicts[i].keep)
            result.kept.push_back(docs[i]);
        else
            result.dropped.push_back({docs[i].source_id, verdicts[i].reason});
    }
    return result;
}

// ── embeddings ──────────────────────────────────────────────────────────

namespace {

class TestEmbeddingProvider : public EmbeddingProvider {
public:
    explicit TestEmbeddingProvider(std::size_t dimension) : dimension_(dimension) {}

    std::size_t dimension() const override { return dimension_; }

    // Hashed bag of words: deterministic, cheap, and similar texts land on
    // similar buckets, which is all the pipeline tests need.
    std::vector<double> embed(const std::string& text) override {
        std::vector<double> vec(dimension_, 0.0);
        std::string token;
        bool any = false;
        auto flush = [&] {
            if (token.empty()) return;
            vec[fnv1a_64(token) % dimension_] += 1.0;
            any = true;
            token.clear();
        };
        for (unsigned char c : text) {
            if (std::isspace(c)) {
                flush();
            } else {
                token.push_back(static_cast<char>(std::tolower(c)));
            }
        }
        flush();
        if (!any) vec[0] = 1.0;

        double norm = std::sqrt(std::inner_product(vec.begin(), vec.end(), vec.begin(), 0.0));
        for (auto& x : vec) x /= norm;
        return vec;
    }

private:
    std::size_t dimension_;
};

class HttpEmbeddingProvider : public EmbeddingProvider {
public:
    explicit HttpEmbeddingProvider(HttpEmbeddingConfig config) : config_(std::move(config)) {
        if (config_.dimension == 0)
            raise(ErrorKind::invalid_input, "embedding provider needs a fixed dimension");
        if (config_.base_url.rfind("http://", 0) != 0)
            raise(ErrorKind::invalid_input, "embedding base_url must be http://");
        const std::size_t path_start = config_.base_url.find('/', 7);
        host_ = path_start == std::string::npos ? config_.base_url
                                                : config_.base_url.substr(0, path_start);
        path_prefix_ = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
        if (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    }

    std::size_t dimension() const override { return config_.dimension; }

    std::vector<double> embed(const std::string& text) override {
        httplib::Client client(host_);
        client.set_read_timeout(config_.timeout_seconds, 0);
        httplib::Headers headers;
        if (!config_.api_key_env.empty()) {
            const char* key = std::getenv(config_.api_key_env.c_str());
            if (key && *key) headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        const json body = {{"model", config_.model}, {"input", text}};
        auto result = client.Post(path_prefix_ + "/embeddings", headers, body.dump(),
                                  "application/json");
        if (!result || result->status != 200)
            raise(ErrorKind::transport, "embedding request failed", /*retryable=*/true);
        const json payload = json::parse(result->body, nullptr, false);
        if (payload.is_discarded() || !payload.contains("data") || payload["data"].empty())
            raise(ErrorKind::protocol, "malformed embedding response");
        auto vec = payload["data"][0].at("embedding").get<std::vector<double>>();
        if (vec.size() != config_.dimension)
            raise(ErrorKind::protocol, "embedding dimension mismatch");
        double norm = std::sqrt(std::inner_product(vec.begin(), vec.end(), vec.begin(), 0.0));
        if (norm == 0.0) raise(ErrorKind::protocol, "zero embedding vector");
        for (auto& x : vec) x /= norm;
        return vec;
    }

private:
    HttpEmbeddingConfig config_;
    std::string host_;
    std::string path_prefix_;
};

} // namespace

std::unique_ptr<EmbeddingProvider> make_test_embedding_provider(std::size_t dimension) {
    return std::make_unique<TestEmbeddingProvider>(dimension);
}

std::unique_ptr<EmbeddingProvider> make_http_embedding_provider(HttpEmbeddingConfig config) {
    return std::make_unique<HttpEmbeddingProvider>(std::move(config));
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        raise(ErrorKind::precondition, "cosine of vectors with different dimensions");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> embed_document(const SourceDocument& doc, EmbeddingProvider& provider) {
    std::vector<double> vec = provider.embed(doc.text);
    const double norm = std::sqrt(std::inner_product(vec.begin(), vec.end(), vec.begin(), 0.0));
    if (std::abs(norm - 1.0) > 1e-6)
        raise(ErrorKind::protocol, "embedding for '" + doc.source_id + "' is not unit norm");
    return vec;
}

// ── grouping ────────────────────────────────────────────────────────────

static std::string group_id_for(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "group-%04zu", index + 1);
    return buf;
}

std::vector<SourceGroup> cluster_sources(const std::vector<SourceDocument>& docs,
                                         EmbeddingProvider& provider, double cosine_threshold) {
    std::vector<std::vector<double>> embeddings(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i)
        embeddings[i] = embed_document(docs[i], provider);

    std::vector<SourceGroup> groups;
    std::vector<std::size_t> representatives; // index of each group's first member
    for (std::size_t i = 0; i < docs.size(); ++i) {
        bool joined = false;
        for (std::size_t g = 0; g < groups.size(); ++g) {
            if (cosine(embeddings[representatives[g]], embeddings[i]) >= cosine_threshold) {
                groups[g].members.push_back(docs[i].source_id);
                joined = true;
                break;
            }
        }
        if (!joined) {
            SourceGroup group;
            group.group_id = group_id_for(groups.size());
            group.members = {docs[i].source_id};
            groups.push_back(std::move(group));
            representatives.push_back(i);
        }
    }
    return groups;
}

std::vector<SourceGroup> confirm_groups(const std::vector<SourceGroup>& groups,
                                        const std::vector<SourceDocument>& docs,
                                        Backend& backend, const PromptLibrary& prompts) {
    std::map<std::string, const SourceDocument*> by_id;
    for (const auto& doc : docs) by_id[doc.source_id] = &doc;

    std::vector<std::vector<std::string>> confirmed;
    for (const auto& group : groups) {
        if (group.members.size() < 2) {
            confirmed.push_back(group.members);
            continue;
        }
        std::string listing;
        for (const auto& id : group.members) {
            const auto it = by_id.find(id);
            if (it == by_id.end())
                raise(ErrorKind::not_found, "group member '" + id + "' not in corpus");
            listing += "--- " + id + " ---\n" +
                       truncate_middle(it->second->text, 2000, 500) + "\n";
        }
        CompletionRequest request;
        request.temperature = 0.0;
        request.messages = {ChatMessage::system(prompts.raw("group_confirm")),
                            ChatMessage::user(listing)};
        const CompletionResponse response = complete_with_retries(backend, request);
        const std::string answer =
            response.is_final() ? to_lower(trim(response.final_text())) : "";
        if (answer.rfind("accept", 0) == 0) {
            confirmed.push_back(group.members);
        } else {
            for (const auto& id : group.members) confirmed.push_back({id});
        }
    }

    std::vector<SourceGroup> result;
    for (std::size_t i = 0; i < confirmed.size(); ++i)
        result.push_back({group_id_for(i), confirmed[i], ""});
    return result;
}

// ── groups file ─────────────────────────────────────────────────────────

void save_groups(const fs::path& path, const std::vector<SourceGroup>& groups) {
    json out = json::array();
    for (const auto& group : groups) {
        json record = {{"group_id", group.group_id}, {"members", group.members}};
        if (!group.centroid_hint.empty()) record["centroid_hint"] = group.centroid_hint;
        out.push_back(std::move(record));
    }
    save_json_file(path, out);
}

std::vector<SourceGroup> load_groups(const fs::path& path) {
    const json data = load_json_file(path);
    if (!data.is_array()) raise(ErrorKind::format, "groups file must be a JSON array");
    std::vector<SourceGroup> groups;
    for (const auto& record : data) {
        SourceGroup group;
        group.group_id = record.at("group_id").get<std::string>();
        group.members = record.at("members").get<std::vector<std::string>>();
        group.centroid_hint = record.value("centroid_hint", "");
        if (group.members.empty())
            raise(ErrorKind::format, "group '" + group.group_id + "' has no members");
        groups.push_back(std::move(group));
    }
    return groups;
}

} // namespace forge
