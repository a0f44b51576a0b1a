#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stagelm/tokenizer.hpp"

namespace stagelm::corpus {

using tok::TokenId;

struct Document {
  std::string text;
  std::string source;
  std::size_t token_count = 0;
  // Filled by filter_short (or directly by synthetic generators); pack reuses
  // it instead of re-tokenizing.
  std::vector<TokenId> tokens;
};

// A JSONL shard and the source label its records default to.
struct ShardSpec {
  std::string path;
  std::string source;
};

struct IngestResult {
  std::vector<Document> documents;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

// Reads JSONL shards in order. Each line is {"text": ..., "source": ...}
// (source optional). Malformed records are skipped and tallied; an
// unreadable file is fatal.
IngestResult ingest(std::span<const ShardSpec> shards);

struct FilterStats {
  std::size_t kept = 0;
  std::size_t dropped = 0;
};

// Tokenizes every document (filling token_count/tokens) and keeps those with
// at least min_tokens tokens. The threshold counts the document's own tokens
// only, never separators.
std::vector<Document> filter_short(std::vector<Document> docs, const tok::Vocab& v,
                                   std::size_t min_tokens = 100, FilterStats* stats = nullptr);

struct MixtureEntry {
  std::string source;
  double proportion = 0.0;
};

struct MixtureSpec {
  std::vector<MixtureEntry> entries;
  std::uint64_t seed = 0;

  // Throws unless proportions lie in [0,1] and sum to 1 within 1e-9.
  void validate() const;
};

enum class ExhaustionPolicy { kStopAll, kRedistribute };

struct MixtureResult {
  std::vector<Document> documents;
  std::map<std::string, std::size_t> tokens_per_source;
  std::vector<std::string> notes;
};

// Seeded interleaving of the per-source streams. Each source keeps its own
// order; the next source is drawn with weight proportion / mean document
// length so that token shares converge to the proportions.
MixtureResult sample_mixture(const std::map<std::string, std::vector<Document>>& streams,
                             const MixtureSpec& spec,
                             ExhaustionPolicy policy = ExhaustionPolicy::kStopAll);

// Seeded uniform shuffle, then a contiguous partition into n_chunks with
// near-equal token counts. Every chunk is non-empty when there are at least
// n_chunks documents.
std::vector<std::vector<Document>> split_chunks(std::vector<Document> docs, std::size_t n_chunks,
                                                std::uint64_t seed);

struct PackedSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint16_t> boundaries;
  std::uint32_t chunk_index = 0;
};

struct PackProvenance {
  std::size_t documents_kept = 0;
  std::size_t documents_dropped = 0;
  std::map<std::string, std::size_t> tokens_per_source;
  std::size_t document_tokens = 0;
  std::size_t separator_count = 0;
  std::size_t emitted_tokens = 0;
  std::size_t dropped_tail_tokens = 0;
  std::string config_hash;
  std::vector<std::string> notes;
};

struct PackedDataset {
  std::uint32_t vocab_size = 0;
  std::uint32_t seq_len = 0;
  std::vector<PackedSequence> sequences;
  PackProvenance provenance;
};

// Concatenates documents with the end-of-text id between neighbours, cuts
// fixed windows, drops the final partial window and shuffles the windows.
PackedDataset pack(std::span<const Document> docs, const tok::Vocab& v, std::size_t seq_len,
                   std::uint64_t seed, std::uint32_t chunk_index = 0);
// Same, for token-level corpora that have no text vocabulary.
PackedDataset pack_tokens(std::span<const Document> docs, TokenId eot, std::uint32_t vocab_size,
                          std::size_t seq_len, std::uint64_t seed, std::uint32_t chunk_index = 0);

// One window per document holding its first seq_len tokens; shorter documents
// are excluded. Used for held-out evaluation sets.
PackedDataset pack_whole_documents(std::span<const Document> docs, std::uint32_t vocab_size,
                                   std::size_t seq_len);

void write_packtok(const PackedDataset& ds, const std::string& path);
PackedDataset read_packtok(const std::string& path);
void write_provenance(const PackProvenance& p, const std::string& path);

// Deterministic helpers shared by the pipeline.
void shuffle_in_place(std::vector<std::size_t>& order, std::uint64_t seed);

}  // namespace stagelm::corpus
