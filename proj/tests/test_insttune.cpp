#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "scalar_oracle.hpp"
#include "stagelm/error.hpp"
#include "stagelm/insttune.hpp"

using namespace stagelm;
using namespace stagelm::inst;
namespace fs = std::filesystem;

namespace {

const tok::Vocab& byte_vocab() {
  static const tok::Vocab v({}, {tok::special_from_name(tok::kEndOfText)});
  return v;
}

ConversationExample pair(const std::string& p, const std::string& r) {
  return {{{Role::kHuman, p}, {Role::kAssistant, r}}};
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto i = s.find(needle); i != std::string::npos; i = s.find(needle, i + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("conversation format") {
  CHECK(format_conversation(pair("p", "r")) == "### Human: p ### Assistant: r<|endoftext|>");

  ConversationExample two{{{Role::kHuman, "a"}, {Role::kAssistant, "b"}, {Role::kHuman, "c"}, {Role::kAssistant, "d"}}};
  const auto s = format_conversation(two);
  CHECK(s == "### Human: a ### Assistant: b ### Human: c ### Assistant: d<|endoftext|>");
  CHECK(count(s, "### Human: ") == 2);
  CHECK(count(s, "### Assistant: ") == 2);
  CHECK(s.find("### Human: ") < s.find("### Assistant: "));

  CHECK_THROWS_AS(format_conversation({}), Error);
  CHECK_THROWS_AS(format_conversation({{{Role::kAssistant, "x"}}}), Error);
  CHECK_THROWS_AS(format_conversation({{{Role::kHuman, "x"}}}), Error);
  CHECK_THROWS_AS(format_conversation({{{Role::kHuman, "x"}, {Role::kHuman, "y"}, {Role::kAssistant, "z"}}}), Error);
  CHECK_THROWS_AS(format_conversation(pair("", "r")), Error);
}

TEST_CASE("response spans cover the responses exactly") {
  ConversationExample ex{
      {{Role::kHuman, "hi"}, {Role::kAssistant, "yo ###"}, {Role::kHuman, "more"}, {Role::kAssistant, "done"}}};
  const auto s = serialize(ex);
  REQUIRE(s.response_spans.size() == 2);
  CHECK(s.text.substr(s.response_spans[0].begin, s.response_spans[0].end - s.response_spans[0].begin) == "yo ###");
  CHECK(s.text.substr(s.response_spans[1].begin, s.response_spans[1].end - s.response_spans[1].begin) == "done");
  CHECK(s.text.substr(s.terminator.begin) == "<|endoftext|>");
}

TEST_CASE("mask counts") {
  const auto& v = byte_vocab();
  const auto t = tokenize_example(pair("What?", "Blue sky"), v);
  std::size_t sup = 0;
  for (auto f : t.supervised) sup += f;
  CHECK(sup == 8 + 1);
  CHECK(t.ids.back() == v.eot_id());

  std::vector<TokenizedExample> one{t};
  const auto b = build_masked_batch(one, v.eot_id(), 64);
  REQUIRE(b.batch == 1);
  std::size_t m = 0;
  for (auto f : b.mask_row(0)) m += f;
  CHECK(m == 9);
  for (std::size_t i = 0; i + 1 < t.ids.size(); ++i) {
    CHECK(b.ids_row(0)[i] == t.ids[i]);
    CHECK(b.targets_row(0)[i] == t.ids[i + 1]);
  }
  // prompt bytes are never supervised
  const std::string prefix = "### Human: What? ### Assistant: ";
  for (std::size_t i = 0; i + 1 < prefix.size(); ++i) CHECK(b.mask_row(0)[i] == 0);
  CHECK(b.mask_row(0)[prefix.size() - 1] == 1);
}

TEST_CASE("truncation policy") {
  const auto& v = byte_vocab();
  std::vector<TokenizedExample> ex{tokenize_example(pair("a long prompt that fills the window", "r"), v),
                                   tokenize_example(pair("p", "response"), v)};
  const auto b = build_masked_batch(ex, v.eot_id(), 40);
  CHECK(b.batch == 1);
  CHECK(b.dropped == 1);
  REQUIRE(b.warnings.size() == 1);
  CHECK(b.warnings[0].find("example 0") != std::string::npos);

  CHECK(b.row_lengths[0] == ex[1].ids.size() - 1);
  const auto cut = build_masked_batch(std::span(ex).subspan(1), v.eot_id(), 32);
  REQUIRE(cut.batch == 1);
  CHECK(cut.row_lengths[0] == 32);
  CHECK(cut.mask_row(0)[31] == 1);
}

TEST_CASE("masked loss matches the oracle over response positions") {
  const auto& v = byte_vocab();
  auto cfg = fixtures::chat_model_config(v.size(), 128);
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  Rng rng(17);
  const auto p = model::init_params<double>(cfg, rng);
  std::vector<TokenizedExample> ex{tokenize_example(pair("Hi?", "Hey."), v)};
  const auto b = build_masked_batch(ex, v.eot_id(), 64);
  REQUIRE(b.batch == 1);
  const auto r = model::backward(p, cfg, b.ids_row(0), b.targets_row(0), b.mask_row(0));

  std::vector<std::uint32_t> ids(b.ids_row(0).begin(), b.ids_row(0).end());
  std::vector<std::uint32_t> tg(b.targets_row(0).begin(), b.targets_row(0).end());
  std::vector<std::uint8_t> mk(b.mask_row(0).begin(), b.mask_row(0).end());
  CHECK(std::abs(r.loss - oracle::masked_loss(p, cfg, ids, tg, mk)) < 1e-6);

  for (std::size_t i = 0; i < tg.size(); ++i) {
    if (!mk[i]) tg[i] = (tg[i] + 7) % 256;
  }
  const auto r2 = model::backward(p, cfg, b.ids_row(0), std::span<const tok::TokenId>(tg), b.mask_row(0));
  CHECK(r2.loss == r.loss);
  CHECK(r2.grads.lm_head == r.grads.lm_head);
}

TEST_CASE("epoch accounting and schedule endpoints") {
  FinetuneHyper h;
  h.batch_size = 3;
  h.epochs = 3;
  CHECK(finetune_steps(8, h) == 9);
  CHECK(finetune_steps(9, h) == 9);
  CHECK(finetune_steps(10, h) == 12);

  const auto& v = byte_vocab();
  auto cfg = fixtures::chat_model_config(v.size(), 64);
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  auto state = train::TrainState::fresh(cfg, 2);
  std::vector<TokenizedExample> data;
  for (const auto& c : fixtures::chat_examples()) data.push_back(tokenize_example(c, v));
  h.seq_len = 64;
  std::vector<FinetuneRecord> rec;
  finetune(state, data, v.eot_id(), h, 1, [&](const FinetuneRecord& r) { rec.push_back(r); });
  REQUIRE(rec.size() == 9);
  CHECK(std::abs(rec.front().lr - 2e-5) < 1e-12);
  CHECK(std::abs(rec.back().lr - 2e-6) < 1e-12);
  CHECK(rec.back().epoch == 2);
  CHECK(state.step == 9);
}

TEST_CASE("overfit eight conversations") {
  const auto& v = byte_vocab();
  const auto cfg = fixtures::chat_model_config(v.size(), 64);
  auto state = train::TrainState::fresh(cfg, 5);
  std::vector<TokenizedExample> data;
  for (const auto& c : fixtures::chat_examples()) data.push_back(tokenize_example(c, v));
  FinetuneHyper h;
  h.optimizer.base_lr = 1e-2;
  h.batch_size = 8;
  h.seq_len = 64;
  h.epochs = 150;
  finetune(state, data, v.eot_id(), h);
  const auto b = build_masked_batch(data, v.eot_id(), 64);
  for (std::size_t r = 0; r < b.batch; ++r) {
    const auto nll = model::token_nll(state.params, cfg, b.ids_row(r), b.targets_row(r));
    double s = 0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < nll.size(); ++t) {
      if (b.mask_row(r)[t]) {
        s += nll[t];
        ++n;
      }
    }
    CHECK(s / static_cast<double>(n) < 0.5);
  }
}

TEST_CASE("conversation jsonl") {
  const auto dir = fs::temp_directory_path() / "stagelm_test_inst";
  fs::create_directories(dir);
  const auto p = (dir / "c.jsonl").string();
  std::ofstream(p) << "{\"turns\": [{\"role\": \"human\", \"text\": \"a\"}, {\"role\": \"assistant\", \"text\": \"b\"}]}\n"
                   << "{\"turns\": [{\"role\": \"assistant\", \"text\": \"b\"}]}\n"
                   << "garbage\n";
  std::size_t skipped = 0;
  const auto ex = read_conversations(p, &skipped);
  REQUIRE(ex.size() == 1);
  CHECK(skipped == 2);
  CHECK(ex[0].turns[1].text == "b");
}
