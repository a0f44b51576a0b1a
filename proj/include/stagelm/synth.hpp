#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stagelm/corpus.hpp"
#include "stagelm/longqa.hpp"
#include "stagelm/rng.hpp"

namespace stagelm::synth {

using tok::TokenId;

// Token-level corpus with long-range copy structure. Every document draws a
// private map key -> value. The stream mixes filler tokens from a global
// second-order Markov table, definition tokens (one id per key/value pair)
// and query pairs (key token followed by its value token), so a value can be
// predicted from any earlier definition or query of the same key, however far
// back it occurred.
struct KeyValueSpec {
  std::size_t fillers = 32;
  std::size_t keys = 16;
  std::size_t values = 16;
  double p_definition = 1.0 / 16;
  double p_query = 1.0 / 8;
  std::size_t min_doc_len = 1100;
  std::size_t max_doc_len = 2000;
  std::uint64_t table_seed = 0;  // Markov table; shared by all documents

  void validate() const;
  TokenId key_token(std::size_t k) const { return static_cast<TokenId>(fillers + k); }
  TokenId value_token(std::size_t v) const { return static_cast<TokenId>(fillers + keys + v); }
  TokenId definition_token(std::size_t k, std::size_t v) const {
    return static_cast<TokenId>(fillers + keys + values + k * values + v);
  }
  TokenId eot() const { return static_cast<TokenId>(fillers + keys + values + keys * values); }
  std::size_t vocab_size() const { return eot() + 1; }
};

class KeyValueGenerator {
 public:
  explicit KeyValueGenerator(KeyValueSpec spec);

  const KeyValueSpec& spec() const { return spec_; }
  std::vector<TokenId> document(Rng& rng, std::size_t length) const;
  std::vector<TokenId> document(Rng& rng) const;
  // n documents with lengths drawn from [min_doc_len, max_doc_len].
  std::vector<corpus::Document> documents(std::size_t n, std::uint64_t seed, const std::string& source = "kv") const;

 private:
  KeyValueSpec spec_;
  std::vector<TokenId> table_;  // fillers² rows × 3 successors
};

// Plain-text demo corpus: prose and small Python snippets, written as JSONL
// shards {"text": ...} for the tokenizer-train / pack pipeline.
std::vector<std::string> demo_prose(std::size_t n_docs, std::uint64_t seed);
std::vector<std::string> demo_code(std::size_t n_docs, std::uint64_t seed);
void write_jsonl(const std::vector<std::string>& texts, const std::string& path, const std::string& source = {});

// Offline stand-in for a chat provider: short deterministic replies for the
// summary, question, answer and judge prompts.
class DemoChatClient : public longqa::ChatClient {
 public:
  std::string send(const std::string& prompt, std::size_t max_tokens) override;
};

// Writes the demo inputs into dir: web.jsonl, code.jsonl, heldout.jsonl,
// chat.jsonl, qa_docs.jsonl and qa_transcript.jsonl (replies recorded from
// DemoChatClient for both question-generation settings).
struct DemoSizes {
  std::size_t web_docs = 600;
  std::size_t code_docs = 60;
  std::size_t heldout_docs = 24;
  std::size_t chat_examples = 32;
  std::size_t qa_docs = 3;
};
void write_demo_data(const std::string& dir, std::uint64_t seed, const DemoSizes& sizes = {},
                     const std::vector<std::string>& qa_models = {"model"});

}  // namespace stagelm::synth
