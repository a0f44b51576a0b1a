#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stagelm/tokenizer.hpp"
#include "stagelm/trainer.hpp"

namespace stagelm::inst {

using tok::TokenId;

inline constexpr std::string_view kHumanSentinel = "### Human: ";
inline constexpr std::string_view kAssistantSentinel = "### Assistant: ";

enum class Role { kHuman, kAssistant };

struct ChatTurn {
  Role role = Role::kHuman;
  std::string text;
};

struct ConversationExample {
  std::vector<ChatTurn> turns;
};

// Throws unless turns alternate human/assistant, start with human, end with
// assistant and carry non-empty text.
void validate(const ConversationExample& ex);

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Serialized text plus the byte spans of every assistant response and of the
// terminator.
struct Serialized {
  std::string text;
  std::vector<Span> response_spans;
  Span terminator;
};

// "### Human: p1 ### Assistant: r1 ### Human: p2 ### Assistant: r2<|endoftext|>"
Serialized serialize(const ConversationExample& ex);
std::string format_conversation(const ConversationExample& ex);

// Token ids for one example with a per-token flag marking assistant-response
// tokens and the terminator. Each serialized piece is encoded on its own so
// token spans line up with the character spans exactly.
struct TokenizedExample {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> supervised;
};
TokenizedExample tokenize_example(const ConversationExample& ex, const tok::Vocab& v);

// B rows of seq_len inputs; targets are the inputs shifted by one and
// loss_mask[t] == 1 exactly where targets[t] is a supervised token. Rows
// shorter than seq_len are padded with end-of-text and mask 0.
struct MaskedBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> row_lengths;
  std::size_t dropped = 0;
  std::vector<std::string> warnings;

  std::span<const TokenId> ids_row(std::size_t r) const { return {ids.data() + r * seq_len, row_lengths[r]}; }
  std::span<const TokenId> targets_row(std::size_t r) const {
    return {targets.data() + r * seq_len, row_lengths[r]};
  }
  std::span<const std::uint8_t> mask_row(std::size_t r) const {
    return {loss_mask.data() + r * seq_len, row_lengths[r]};
  }
  std::vector<model::SupervisedSequence> sequences() const;
};

// Right-truncates to seq_len+1 tokens; examples left without a supervised
// target are dropped with a warning. Holds every kept row of `examples`.
MaskedBatch build_masked_batch(std::span<const TokenizedExample> examples, TokenId pad_id, std::size_t seq_len);
MaskedBatch build_masked_batch(std::span<const ConversationExample> examples, const tok::Vocab& v,
                               std::size_t seq_len, std::size_t batch_size);

struct FinetuneHyper {
  train::OptimizerHyper optimizer{0.9, 0.99, 1e-8, 2e-5, 0.1, 0, 0.0, 1.0};
  std::size_t epochs = 3;
  std::size_t batch_size = 128;
  std::size_t seq_len = 8192;
  std::uint64_t shuffle_seed = 0;  // 0 keeps the data order every epoch
};

struct FinetuneRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

std::uint64_t finetune_steps(std::size_t n_examples, const FinetuneHyper& hyper);

// Masked-loss training over the already-tokenized examples.
void finetune(train::TrainState& state, std::span<const TokenizedExample> data, TokenId pad_id,
              const FinetuneHyper& hyper, int threads = 1,
              const std::function<void(const FinetuneRecord&)>& on_record = {});

// JSONL: {"turns": [{"role": "human", "text": ...}, {"role": "assistant", ...}]}
std::vector<ConversationExample> read_conversations(const std::string& path, std::size_t* skipped = nullptr);

}  // namespace stagelm::inst
