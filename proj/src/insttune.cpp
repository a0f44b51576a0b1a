#include "stagelm/insttune.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "stagelm/error.hpp"
#include "stagelm/rng.hpp"

namespace stagelm::inst {
namespace {

constexpr std::string_view kModule = "insttune";

[[noreturn]] void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(kModule), msg);
}

struct Piece {
  std::string_view text;
  bool supervised = false;
};

}  // namespace

void validate(const ConversationExample& ex) {
  if (ex.turns.empty()) fail(ErrorCode::kInvalidArgument, "conversation has no turns");
  for (std::size_t i = 0; i < ex.turns.size(); ++i) {
    const Role want = i % 2 == 0 ? Role::kHuman : Role::kAssistant;
    if (ex.turns[i].role != want) {
      fail(ErrorCode::kInvalidArgument, "turn " + std::to_string(i) + " breaks human/assistant alternation");
    }
    if (ex.turns[i].text.empty()) fail(ErrorCode::kInvalidArgument, "turn " + std::to_string(i) + " is empty");
  }
  if (ex.turns.back().role != Role::kAssistant) fail(ErrorCode::kInvalidArgument, "conversation must end with an assistant turn");
}

Serialized serialize(const ConversationExample& ex) {
  validate(ex);
  Serialized s;
  for (std::size_t i = 0; i < ex.turns.size(); ++i) {
    const auto& t = ex.turns[i];
    if (t.role == Role::kHuman) {
      if (i > 0) s.text += ' ';
      s.text += kHumanSentinel;
      s.text += t.text;
    } else {
      s.text += ' ';
      s.text += kAssistantSentinel;
      const std::size_t begin = s.text.size();
      s.text += t.text;
      s.response_spans.push_back({begin, s.text.size()});
    }
  }
  s.terminator.begin = s.text.size();
  s.text += tok::kEndOfText;
  s.terminator.end = s.text.size();
  return s;
}

std::string format_conversation(const ConversationExample& ex) { return serialize(ex).text; }

TokenizedExample tokenize_example(const ConversationExample& ex, const tok::Vocab& v) {
  const Serialized s = serialize(ex);
  const std::string_view text = s.text;
  std::vector<Piece> pieces;
  std::size_t cursor = 0;
  for (const auto& span : s.response_spans) {
    pieces.push_back({text.substr(cursor, span.begin - cursor), false});
    pieces.push_back({text.substr(span.begin, span.end - span.begin), true});
    cursor = span.end;
  }
  if (s.terminator.begin > cursor) pieces.push_back({text.substr(cursor, s.terminator.begin - cursor), false});

  TokenizedExample out;
  for (const auto& p : pieces) {
    const auto ids = tok::encode(v, p.text, false);
    out.ids.insert(out.ids.end(), ids.begin(), ids.end());
    out.supervised.insert(out.supervised.end(), ids.size(), p.supervised ? 1 : 0);
  }
  out.ids.push_back(v.eot_id());
  out.supervised.push_back(1);
  return out;
}

std::vector<model::SupervisedSequence> MaskedBatch::sequences() const {
  std::vector<model::SupervisedSequence> out;
  for (std::size_t r = 0; r < batch; ++r) out.push_back({ids_row(r), targets_row(r), mask_row(r)});
  return out;
}

MaskedBatch build_masked_batch(std::span<const TokenizedExample> examples, TokenId pad_id, std::size_t seq_len) {
  if (seq_len == 0) fail(ErrorCode::kInvalidArgument, "seq_len must be positive");
  MaskedBatch b;
  b.seq_len = seq_len;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    const std::size_t n = std::min(ex.ids.size(), seq_len + 1);
    if (n < 2) {
      ++b.dropped;
      b.warnings.push_back("example " + std::to_string(e) + " is too short to train on");
      continue;
    }
    const std::size_t len = n - 1;
    bool any = false;
    for (std::size_t t = 0; t < len; ++t) any = any || ex.supervised[t + 1];
    if (!any) {
      ++b.dropped;
      b.warnings.push_back("example " + std::to_string(e) + " lost every response token to truncation; dropped");
      continue;
    }
    for (std::size_t t = 0; t < seq_len; ++t) {
      const bool real = t < len;
      b.ids.push_back(real ? ex.ids[t] : pad_id);
      b.targets.push_back(real ? ex.ids[t + 1] : pad_id);
      b.loss_mask.push_back(real ? ex.supervised[t + 1] : 0);
    }
    b.row_lengths.push_back(len);
    ++b.batch;
  }
  return b;
}

MaskedBatch build_masked_batch(std::span<const ConversationExample> examples, const tok::Vocab& v,
                               std::size_t seq_len, std::size_t batch_size) {
  std::vector<TokenizedExample> toks;
  for (const auto& ex : examples.first(std::min(batch_size, examples.size()))) toks.push_back(tokenize_example(ex, v));
  return build_masked_batch(toks, v.eot_id(), seq_len);
}

std::uint64_t finetune_steps(std::size_t n_examples, const FinetuneHyper& hyper) {
  if (hyper.batch_size == 0) fail(ErrorCode::kInvalidArgument, "batch_size must be positive");
  return static_cast<std::uint64_t>((n_examples + hyper.batch_size - 1) / hyper.batch_size) * hyper.epochs;
}

void finetune(train::TrainState& state, std::span<const TokenizedExample> data, TokenId pad_id,
              const FinetuneHyper& hyper, int threads, const std::function<void(const FinetuneRecord&)>& on_record) {
  hyper.optimizer.validate();
  if (hyper.seq_len > state.cfg.max_seq_len) {
    fail(ErrorCode::kConfig, "fine-tuning seq_len " + std::to_string(hyper.seq_len) + " exceeds max_seq_len");
  }
  const MaskedBatch rows = build_masked_batch(data, pad_id, hyper.seq_len);
  for (const auto& w : rows.warnings) state.events.push_back({state.step, "warning", w});
  if (rows.batch == 0) fail(ErrorCode::kNoSupervisedPositions, "no trainable fine-tuning examples");

  const auto all = rows.sequences();
  const std::uint64_t total = finetune_steps(rows.batch, hyper);
  std::vector<std::size_t> order(rows.batch);
  std::uint64_t k = 0;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (hyper.shuffle_seed != 0) {
      Rng rng(hyper.shuffle_seed + epoch);
      fisher_yates(order, rng);
    }
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size, ++k) {
      std::vector<model::SupervisedSequence> batch;
      std::uint64_t tokens = 0;
      for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch_size); ++i) {
        batch.push_back(all[order[i]]);
        tokens += all[order[i]].tokens.size();
      }
      const double lr = train::scheduled_lr(k, total, hyper.optimizer);
      const double loss = train::train_step(state, batch, hyper.optimizer, lr, threads);
      ++state.step;
      state.tokens_seen += tokens;
      if (on_record) on_record({k, epoch, lr, loss});
    }
  }
}

std::vector<ConversationExample> read_conversations(const std::string& path, std::size_t* skipped) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path);
  std::vector<ConversationExample> out;
  std::size_t bad = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    ConversationExample ex;
    bool ok = j.is_object() && j.contains("turns") && j["turns"].is_array();
    if (ok) {
      for (const auto& t : j["turns"]) {
        if (!t.is_object() || !t.contains("role") || !t.contains("text") || !t["role"].is_string() ||
            !t["text"].is_string()) {
          ok = false;
          break;
        }
        const auto role = t["role"].get<std::string>();
        if (role != "human" && role != "assistant") {
          ok = false;
          break;
        }
        ex.turns.push_back({role == "human" ? Role::kHuman : Role::kAssistant, t["text"].get<std::string>()});
      }
    }
    if (ok) {
      try {
        validate(ex);
      } catch (const Error&) {
        ok = false;
      }
    }
    if (ok) {
      out.push_back(std::move(ex));
    } else {
      ++bad;
    }
  }
  if (skipped) *skipped = bad;
  return out;
}

}  // namespace stagelm::inst
