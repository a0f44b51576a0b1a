#include "stagelm/synth.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "stagelm/error.hpp"
#include "stagelm/hash.hpp"

namespace stagelm::synth {

void KeyValueSpec::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidArgument, "synth", m); };
  if (fillers < 1 || keys < 1 || values < 1) bad("fillers, keys and values must be positive");
  if (p_definition < 0 || p_query < 0 || p_definition + p_query >= 1) bad("token mix probabilities out of range");
  if (min_doc_len < 2 || max_doc_len < min_doc_len) bad("document length range is invalid");
}

KeyValueGenerator::KeyValueGenerator(KeyValueSpec spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec_.table_seed);
  table_.resize(spec_.fillers * spec_.fillers * 3);
  for (auto& t : table_) t = static_cast<TokenId>(uniform_index(rng, spec_.fillers));
}

std::vector<TokenId> KeyValueGenerator::document(Rng& rng, std::size_t length) const {
  const auto& s = spec_;
  std::vector<std::size_t> f(s.keys);
  for (auto& v : f) v = uniform_index(rng, s.values);
  std::vector<TokenId> out;
  out.reserve(length + 1);
  out.push_back(static_cast<TokenId>(uniform_index(rng, s.fillers)));
  out.push_back(static_cast<TokenId>(uniform_index(rng, s.fillers)));
  auto filler_or_zero = [&](TokenId t) { return t < s.fillers ? t : TokenId{0}; };
  while (out.size() < length) {
    const double u = uniform_unit(rng);
    if (u < s.p_definition) {
      const auto k = uniform_index(rng, s.keys);
      out.push_back(s.definition_token(k, f[k]));
    } else if (u < s.p_definition + s.p_query) {
      const auto k = uniform_index(rng, s.keys);
      out.push_back(s.key_token(k));
      out.push_back(s.value_token(f[k]));
    } else {
      const std::size_t a = filler_or_zero(out[out.size() - 2]);
      const std::size_t b = filler_or_zero(out.back());
      out.push_back(table_[(a * s.fillers + b) * 3 + uniform_index(rng, 3)]);
    }
  }
  out.resize(length);
  return out;
}

std::vector<TokenId> KeyValueGenerator::document(Rng& rng) const {
  const auto n = spec_.min_doc_len + uniform_index(rng, spec_.max_doc_len - spec_.min_doc_len + 1);
  return document(rng, n);
}

std::vector<corpus::Document> KeyValueGenerator::documents(std::size_t n, std::uint64_t seed,
                                                           const std::string& source) const {
  Rng rng(seed);
  std::vector<corpus::Document> out(n);
  for (auto& d : out) {
    d.tokens = document(rng);
    d.token_count = d.tokens.size();
    d.source = source;
  }
  return out;
}

namespace {

template <std::size_t N>
const char* pick(Rng& rng, const char* const (&words)[N]) {
  return words[uniform_index(rng, N)];
}

constexpr const char* kSubjects[] = {"The river", "A small bird", "The old library", "Our neighbour", "The committee",
                                     "A quiet engine", "The northern wind", "Every student", "The harbour town",
                                     "A young teacher"};
constexpr const char* kVerbs[] = {"carries", "remembers", "builds", "watches", "gathers", "explains", "follows",
                                  "measures", "repairs", "describes"};
constexpr const char* kObjects[] = {"the evening light", "a long letter", "the winter harvest", "several maps",
                                    "the broken bridge", "a careful plan", "the morning market", "two tall towers",
                                    "the distant hills", "an open window"};
constexpr const char* kTails[] = {"before the rain", "with great patience", "after dinner", "in the village",
                                  "for the third time", "without a word", "near the station", "every spring"};
constexpr const char* kNames[] = {"total", "count", "value", "items", "result", "index", "buffer", "score"};
constexpr const char* kFuncs[] = {"compute", "update", "merge", "scale", "parse", "collect", "render", "check"};

}  // namespace

std::vector<std::string> demo_prose(std::size_t n_docs, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> out;
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::string text;
    const auto paragraphs = 2 + uniform_index(rng, 3);
    for (std::size_t p = 0; p < paragraphs; ++p) {
      const auto sentences = 4 + uniform_index(rng, 5);
      for (std::size_t s = 0; s < sentences; ++s) {
        text += pick(rng, kSubjects);
        text += ' ';
        text += pick(rng, kVerbs);
        text += ' ';
        text += pick(rng, kObjects);
        text += ' ';
        text += pick(rng, kTails);
        text += s + 1 < sentences ? ". " : ".";
      }
      if (p + 1 < paragraphs) text += "\n\n";
    }
    out.push_back(std::move(text));
  }
  return out;
}

std::vector<std::string> demo_code(std::size_t n_docs, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> out;
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::string text;
    const auto funcs = 3 + uniform_index(rng, 3);
    for (std::size_t f = 0; f < funcs; ++f) {
      const std::string fn = std::string(pick(rng, kFuncs)) + "_" + pick(rng, kNames);
      const std::string a = pick(rng, kNames), b = pick(rng, kNames);
      text += "def " + fn + "(" + a + ", " + b + "):\n";
      text += "    " + std::string(pick(rng, kNames)) + " = " + a + " + " + b + "\n";
      text += "    for i in range(" + std::to_string(2 + uniform_index(rng, 30)) + "):\n";
      text += "        " + a + " = " + a + " * 2\n";
      text += "    return " + a + "\n\n";
    }
    out.push_back(std::move(text));
  }
  return out;
}

void write_jsonl(const std::vector<std::string>& texts, const std::string& path, const std::string& source) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "synth", "cannot write " + path);
  for (const auto& t : texts) {
    nlohmann::json j{{"text", t}};
    if (!source.empty()) j["source"] = source;
    out << j.dump() << "\n";
  }
}

}  // namespace stagelm::synth

namespace stagelm::synth {
namespace {

std::string first_sentence(std::string_view text) {
  const auto dot = text.find('.');
  return std::string(text.substr(0, dot == std::string_view::npos ? text.size() : dot + 1));
}

std::string after_last_newline(std::string_view text) {
  const auto nl = text.rfind('\n');
  return std::string(nl == std::string_view::npos ? text : text.substr(nl + 1));
}

}  // namespace

std::string DemoChatClient::send(const std::string& prompt, std::size_t) {
  if (prompt.rfind("Summarize", 0) == 0) return "Summary: " + first_sentence(after_last_newline(prompt));
  if (prompt.rfind("Using the context", 0) == 0) {
    const std::string ctx = first_sentence(after_last_newline(prompt));
    return "1. What explains the claim that " + ctx + "\n2. How would the outcome change?\n3. Who is affected and why?";
  }
  if (prompt.find("JSON object") != std::string::npos) {
    const std::uint64_t h = fnv1a64(prompt);
    return "{\"coherence\": " + std::to_string(1 + h % 3) + ", \"relevance\": " + std::to_string(1 + (h >> 8) % 3) +
           ", \"accuracy\": " + std::to_string((h >> 16) % 4) + "}";
  }
  const auto doc = prompt.find("Document:\n");
  return doc == std::string::npos ? "I do not know." : first_sentence(std::string_view(prompt).substr(doc + 10));
}

void write_demo_data(const std::string& dir, std::uint64_t seed, const DemoSizes& sizes,
                     const std::vector<std::string>& qa_models) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  write_jsonl(demo_prose(sizes.web_docs, seed), (d / "web.jsonl").string());
  write_jsonl(demo_code(sizes.code_docs, seed + 1), (d / "code.jsonl").string());

  const auto long_docs = demo_prose(sizes.heldout_docs * 4, seed + 2);
  std::vector<std::string> heldout;
  for (std::size_t i = 0; i + 3 < long_docs.size(); i += 4) {
    heldout.push_back(long_docs[i] + "\n\n" + long_docs[i + 1] + "\n\n" + long_docs[i + 2] + "\n\n" + long_docs[i + 3]);
  }
  write_jsonl(heldout, (d / "heldout.jsonl").string());

  {
    std::ofstream out(d / "chat.jsonl", std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "synth", "cannot write chat.jsonl");
    Rng rng(seed + 3);
    const char* const questions[] = {"What does the river carry?", "Who repairs the bridge?", "Describe the market.",
                                     "When does the wind arrive?", "What did the teacher explain?"};
    const char* const answers[] = {"It carries the evening light.", "Our neighbour repairs it.",
                                   "It is busy every spring.", "It arrives after dinner.", "She explained a careful plan."};
    for (std::size_t i = 0; i < sizes.chat_examples; ++i) {
      const auto k = uniform_index(rng, 5);
      nlohmann::json turns = nlohmann::json::array();
      turns.push_back({{"role", "human"}, {"text", questions[k]}});
      turns.push_back({{"role", "assistant"}, {"text", answers[k]}});
      if (i % 4 == 3) {
        turns.push_back({{"role", "human"}, {"text", "And then?"}});
        turns.push_back({{"role", "assistant"}, {"text", "Then everyone went home."}});
      }
      out << nlohmann::json{{"turns", turns}}.dump() << "\n";
    }
  }

  std::vector<longqa::QADocument> docs;
  {
    const auto texts = demo_prose(sizes.qa_docs, seed + 4);
    const char* const domains[] = {"geography", "history", "engineering"};
    std::ofstream out(d / "qa_docs.jsonl", std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "synth", "cannot write qa_docs.jsonl");
    for (std::size_t i = 0; i < texts.size(); ++i) {
      longqa::QADocument q{"doc" + std::to_string(i + 1), "Report " + std::to_string(i + 1), domains[i % 3], texts[i]};
      out << nlohmann::json{{"id", q.id}, {"title", q.title}, {"domain", q.domain}, {"text", q.text}}.dump() << "\n";
      docs.push_back(std::move(q));
    }
  }
  const auto transcript = (d / "qa_transcript.jsonl").string();
  std::filesystem::remove(transcript);
  DemoChatClient demo;
  longqa::RecordingClient rec(demo, transcript);
  std::vector<longqa::AnswerModel> models;
  for (const auto& m : qa_models) models.push_back({m, &rec});
  for (auto setting : {longqa::Setting::kQgPassage, longqa::Setting::kQgSummary}) {
    longqa::run_pipeline(docs, setting, rec, models, rec);
  }
}

}  // namespace stagelm::synth
