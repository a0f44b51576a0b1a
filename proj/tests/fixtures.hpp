#pragma once

#include <vector>

#include "stagelm/insttune.hpp"

namespace fixtures {

using stagelm::inst::ConversationExample;
using stagelm::inst::Role;

inline std::vector<ConversationExample> chat_examples() {
  const std::vector<std::pair<const char*, const char*>> pairs{
      {"What color is the sky?", "Blue."},
      {"Name a prime number.", "Seven."},
      {"Say hello.", "Hello there!"},
      {"Capital of France?", "Paris."},
      {"What is 2+2?", "Four."},
      {"Opposite of hot?", "Cold."},
      {"A fruit, please.", "Apple."},
      {"How many legs does a cat have?", "Four legs."},
  };
  std::vector<ConversationExample> out;
  for (const auto& [p, r] : pairs) out.push_back({{{Role::kHuman, p}, {Role::kAssistant, r}}});
  return out;
}

inline stagelm::model::ModelConfig chat_model_config(std::size_t vocab, std::size_t max_len) {
  stagelm::model::ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.max_seq_len = max_len;
  return c;
}

}  // namespace fixtures
