#pragma once

#include <optional>
#include <utility>

#include "forge/ingestion.hpp"
#include "forge/knowledge_store.hpp"
#include "forge/llm.hpp"
#include "forge/prompts.hpp"

namespace forge {

// The two LLM-based knowledge builders. The L2 builder distills a group of
// sources (or a finished run directory) into one document; the L1 builder
// writes or evolves a category's instruction and pointer index. Both answer
// in a fenced envelope and get exactly one corrective re-prompt per
// validation failure before hard failure.

struct BuilderConfig {
    std::size_t digest_cap_chars = 32 * 1024;   // run-directory digest
    std::size_t source_cap_chars = 16 * 1024;   // per member source text
    std::size_t doc_cap_chars = 16 * 1024;      // per L2 body fed to the L1 builder
    std::size_t instruction_max_lines = 400;    // L1 instruction length budget
    int max_parallel_builds = 2;
    IsoClock now = now_iso_utc;                 // injectable for deterministic stores
};

// ── envelopes ───────────────────────────────────────────────────────────
// One fenced block. L2: `CATEGORY: <key>` then `DESCRIPTION: <one line>`,
// blank line, body. L1: `DESCRIPTION: <one line>`, repeated
// `INDEX: <doc_id> :: <one-line description>`, blank line, instruction.

struct BuilderOutputEnvelope {
    CategoryKey chosen_category;
    std::string document_body;
    std::string description;
};

struct L1BuilderEnvelope {
    std::string instruction;
    std::vector<L2Pointer> l2_index;
};

BuilderOutputEnvelope parse_l2_envelope(const std::string& response_text);
L1BuilderEnvelope parse_l1_envelope(const std::string& response_text);

// ── L2 builder ──────────────────────────────────────────────────────────

std::pair<CategoryKey, L2Document> build_l2_from_sources(
    const SourceGroup& group, const std::vector<SourceDocument>& members,
    const std::vector<L1IndexEntry>& l1_index, Backend& backend, const PromptLibrary& prompts,
    const BuilderConfig& config = {});

// Requires a completed run (final report present). The builder input is a
// deterministic, size-capped digest of the run directory.
std::pair<CategoryKey, L2Document> build_l2_from_rundir(const fs::path& run_dir,
                                                        const std::vector<L1IndexEntry>& l1_index,
                                                        Backend& backend,
                                                        const PromptLibrary& prompts,
                                                        const BuilderConfig& config = {});

std::string assemble_run_digest(const fs::path& run_dir, std::size_t cap_chars);

// ── L1 builder ──────────────────────────────────────────────────────────

// Writes L1[key] from scratch over every stored document under key.
// Returns nullopt (with a warning) when the category has no documents.
std::optional<L1Value> bootstrap_l1(const KnowledgeBase& kb, const CategoryKey& key,
                                    Backend& backend, const PromptLibrary& prompts,
                                    const BuilderConfig& config = {});

// Evolution mode: extends the index by new_doc_id and edits the instruction
// in place; prior index entries are never dropped.
L1Value evolve_l1(const KnowledgeBase& kb, const CategoryKey& key, const std::string& new_doc_id,
                  Backend& backend, const PromptLibrary& prompts,
                  const BuilderConfig& config = {});

// ── bootstrap pipeline ──────────────────────────────────────────────────

struct BootstrapReport {
    std::size_t ingested = 0;
    std::size_t duplicates_dropped = 0;
    std::size_t relevance_dropped = 0;
    std::size_t fail_open = 0;
    std::size_t groups = 0;
    std::size_t docs_built = 0;
    std::size_t group_failures = 0;
    std::size_t categories_built = 0;
    std::size_t categories_skipped = 0;
    std::vector<std::string> failures;

    json to_json() const;
};

struct BootstrapOutcome {
    KnowledgeBase kb;
    BootstrapReport report;
};

// dedup -> relevance filter -> cluster -> confirm -> per-group L2 build ->
// per-category L1 bootstrap. Hard builder failures skip their group and are
// listed in the report; an empty resulting store is an error.
BootstrapOutcome bootstrap_knowledge_base(const std::vector<SourceDocument>& corpus,
                                          const std::vector<L1IndexEntry>& l1_index,
                                          Backend& backend, EmbeddingProvider& provider,
                                          const PromptLibrary& prompts,
                                          const IngestionConfig& ingest_config = {},
                                          const BuilderConfig& builder_config = {});

// The human-authored taxonomy, shipped as a JSON array of
// {key, kind, description}.
std::vector<L1IndexEntry> load_l1_index_file(const fs::path& path);

} // namespace forge
