#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "forge/llm.hpp"
#include "forge/minhash.hpp"
#include "forge/prompts.hpp"
#include "forge/util.hpp"

namespace forge {

// Turns a pre-fetched corpus of raw source files into deduplicated,
// relevance-filtered, topically grouped inputs for the L2 builder.

enum class SourceOrigin { competition_writeup, blog, library_doc, code_repo, paper };

const char* to_string(SourceOrigin origin);
SourceOrigin source_origin_from_string(const std::string& s);

struct SourceDocument {
    std::string source_id;
    std::string text;
    SourceOrigin origin = SourceOrigin::blog;
    std::string origin_url; // URL or path
    std::string fetched_at;
};

struct SourceGroup {
    std::string group_id;
    std::vector<std::string> members; // source_ids, >= 1, no duplicates
    std::string centroid_hint;        // optional text summary
};

struct IngestionConfig {
    std::size_t shingle_k = 5;
    std::size_t num_hashes = 128;
    std::uint64_t seed = 1;
    double dedup_threshold = 0.85;
    double cosine_threshold = 0.7;
    int max_parallel = 4;
};

// ── corpus manifest ─────────────────────────────────────────────────────
// JSON array of {source_id, origin, url, path, fetched_at}; paths are
// relative to the manifest's directory.

std::vector<SourceDocument> load_corpus(const fs::path& manifest_path);
void save_corpus_manifest(const fs::path& manifest_path,
                          const std::vector<SourceDocument>& docs,
                          const std::vector<std::string>& relative_paths);

// ── deduplication ───────────────────────────────────────────────────────

struct DuplicateCluster {
    std::string representative;       // kept member
    std::vector<std::string> members; // every member including the representative
};

struct DedupResult {
    std::vector<SourceDocument> kept;            // input order
    std::vector<DuplicateCluster> clusters;      // clusters of size >= 2
};

// Greedy seed-based clustering on pairwise estimated Jaccard >= threshold.
// Representative per cluster: longest text, ties by lowest source_id.
DedupResult dedup_corpus(const std::vector<SourceDocument>& docs, double threshold,
                         const IngestionConfig& config = {});

// ── relevance filtering ─────────────────────────────────────────────────

struct RelevanceDrop {
    std::string source_id;
    std::string reason;
};

struct RelevanceResult {
    std::vector<SourceDocument> kept; // input order preserved
    std::vector<RelevanceDrop> dropped;
    int fail_open_count = 0; // malformed verdicts treated as keep
};

RelevanceResult filter_relevance(const std::vector<SourceDocument>& docs, Backend& backend,
                                 const PromptLibrary& prompts, int max_parallel = 4);

// ── embeddings ──────────────────────────────────────────────────────────

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dimension() const = 0;
    // Implementations return an L2-normalized vector of `dimension()` size.
    virtual std::vector<double> embed(const std::string& text) = 0;
};

// Deterministic hashed bag-of-words provider for tests and offline runs.
std::unique_ptr<EmbeddingProvider> make_test_embedding_provider(std::size_t dimension = 256);

struct HttpEmbeddingConfig {
    std::string base_url;
    std::string model;
    std::size_t dimension = 0;
    std::string api_key_env;
    int timeout_seconds = 60;
};
std::unique_ptr<EmbeddingProvider> make_http_embedding_provider(HttpEmbeddingConfig config);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Provider call with the unit-norm postcondition enforced.
std::vector<double> embed_document(const SourceDocument& doc, EmbeddingProvider& provider);

// ── grouping ────────────────────────────────────────────────────────────

// Greedy agglomerative single-link pass: scan docs in order, join the first
// group whose representative (its first member) has cosine >= threshold,
// else open a new group. Deterministic given input order.
std::vector<SourceGroup> cluster_sources(const std::vector<SourceDocument>& docs,
                                         EmbeddingProvider& provider, double cosine_threshold);

// Per-group LLM confirmation for groups of >= 2 sources; a rejected group is
// split into singletons. Group ids are reassigned sequentially afterwards.
std::vector<SourceGroup> confirm_groups(const std::vector<SourceGroup>& groups,
                                        const std::vector<SourceDocument>& docs,
                                        Backend& backend, const PromptLibrary& prompts);

// ── groups file ─────────────────────────────────────────────────────────

void save_groups(const fs::path& path, const std::vector<SourceGroup>& groups);
std::vector<SourceGroup> load_groups(const fs::path& path);

} // namespace forge
