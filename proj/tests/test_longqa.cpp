#include <catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stagelm/error.hpp"
#include "stagelm/longqa.hpp"

using namespace stagelm;
using namespace stagelm::longqa;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

const fs::path kGolden = fs::path(STAGELM_TEST_DATA) / "golden";

// Answers every prompt kind from its opening words; the judge alternates
// between two fixed verdicts.
class ScriptedClient : public ChatClient {
 public:
  std::string send(const std::string& prompt, std::size_t max_tokens) override {
    last_max_tokens = max_tokens;
    ++calls;
    if (prompt.rfind("Summarize", 0) == 0) return "A short summary.";
    if (prompt.rfind("Using the context", 0) == 0) return "1. Why does it matter?\n2. How does it work?\nnoise\n3. What follows?";
    if (prompt.find("JSON object") != std::string::npos) {
      return (judged++ % 2 == 0) ? "Scores: {\"coherence\": 3, \"relevance\": 3, \"accuracy\": 3}"
                                 : "{\"coherence\": 2, \"relevance\": 2, \"accuracy\": 2}";
    }
    return "An answer.";
  }
  std::size_t last_max_tokens = 0;
  std::size_t calls = 0;
  std::size_t judged = 0;
};

class FailingClient : public ChatClient {
 public:
  std::string send(const std::string&, std::size_t) override {
    throw Error(ErrorCode::kClientFailure, "longqa", "offline");
  }
};

}  // namespace

TEST_CASE("summary prompt golden file") {
  const auto p = build_summary_prompt("Photosynthesis", "biology", "Plants turn light into chemical energy.");
  CHECK(p == slurp(kGolden / "summary_prompt.txt"));
  CHECK(p.rfind("Summarize the paragraphs below in the context of Photosynthesis in biology.", 0) == 0);
  CHECK(p.find("{title}") == std::string::npos);
  CHECK(p.find("{domain}") == std::string::npos);
  const std::string uni = "Ünïcode 日本";
  CHECK(build_summary_prompt(uni, "d", "x").find(uni) != std::string::npos);
  CHECK_THROWS_AS(build_summary_prompt("", "d", "x"), Error);
  CHECK_THROWS_AS(build_summary_prompt("t", "", "x"), Error);
}

TEST_CASE("question prompt golden file") {
  const auto p = build_qg_prompt("Plants turn light into chemical energy.");
  CHECK(p == slurp(kGolden / "qg_prompt.txt"));
  CHECK(p.find("display only the top 3") != std::string::npos);
  CHECK(p.find("Rank the generated questions in the order of decreasing complexity") != std::string::npos);
  CHECK(p.find("{context}") == std::string::npos);
  CHECK_THROWS_AS(build_qg_prompt(""), Error);
}

TEST_CASE("answer request") {
  const auto r = build_answer_request("Why?", "The document.");
  CHECK(r.max_tokens == 512);
  CHECK(r.prompt.find("Why?") != std::string::npos);
  CHECK(r.prompt.find("The document.") != std::string::npos);
  CHECK(build_answer_request("q", "d", 8).max_tokens == 64);
  CHECK(build_answer_request("q", "d", 10000).max_tokens == 1);
  CHECK_THROWS_AS(build_answer_request("", "d"), Error);
}

TEST_CASE("request validation") {
  QGRequest q;
  q.context = "c";
  CHECK_NOTHROW(q.validate());
  q.title = "t";
  CHECK_THROWS_AS(q.validate(), Error);
  q.setting = Setting::kQgSummary;
  CHECK_THROWS_AS(q.validate(), Error);
  q.domain = "d";
  CHECK_NOTHROW(q.validate());
  CHECK(setting_from_string("qg_summary") == Setting::kQgSummary);
  CHECK_THROWS_AS(setting_from_string("other"), Error);

  JudgeRequest j{"q", "a", "ctx"};
  const auto jp = build_judge_prompt(j);
  for (const char* w : {"coherence", "relevance", "accuracy", "0-3"}) CHECK(jp.find(w) != std::string::npos);
  CHECK_THROWS_AS(build_judge_prompt({"q", "", "ctx"}), Error);
}

TEST_CASE("reply parsing") {
  const auto s = parse_judge_response("sure: {\"coherence\": 2.5, \"relevance\": 1, \"accuracy\": 0}");
  CHECK(s.coherence == 2.5);
  CHECK(s.accuracy == 0);
  CHECK_THROWS_AS(parse_judge_response("no json"), Error);
  CHECK_THROWS_AS(parse_judge_response("{\"coherence\": 4, \"relevance\": 1, \"accuracy\": 1}"), Error);
  CHECK_THROWS_AS(parse_judge_response("{\"coherence\": 1, \"relevance\": 1}"), Error);

  const auto q = parse_questions("Here you go:\n1. First?\n2) Second?\n- Third?\n4. Fourth?", 3);
  CHECK(q == std::vector<std::string>{"First?", "Second?", "Third?"});
  CHECK(parse_questions("nothing numbered", 3).empty());
}

TEST_CASE("aggregation of published rows") {
  const JudgeScores top{2.81, 2.72, 2.70};
  const auto m = aggregate("top", std::span(&top, 1));
  CHECK(std::round(m.avg * 100) / 100 == Catch::Approx(2.74));
  // rows whose published average agrees with the rounded inputs
  const std::vector<std::array<double, 4>> rows{{2.77, 2.64, 2.58, 2.66}, {2.78, 2.68, 2.50, 2.65},
                                                {2.28, 2.22, 1.75, 2.08}, {1.65, 1.91, 1.58, 1.71}};
  for (const auto& r : rows) {
    const JudgeScores s{r[0], r[1], r[2]};
    CHECK(std::abs(aggregate("x", std::span(&s, 1)).avg - r[3]) <= 0.01 + 1e-12);
  }
  // two rows cannot be reproduced from their rounded inputs
  for (const auto& r : std::vector<std::array<double, 4>>{{2.79, 2.74, 2.40, 2.63}, {2.55, 2.48, 2.30, 2.43}}) {
    const JudgeScores s{r[0], r[1], r[2]};
    CHECK(std::abs(aggregate("x", std::span(&s, 1)).avg - r[3]) > 0.01);
  }
  CHECK(aggregate("none", {}).n == 0);
}

TEST_CASE("pipeline with fixtures") {
  const auto dir = fs::temp_directory_path() / "stagelm_test_longqa";
  fs::create_directories(dir);
  const auto transcript = (dir / "t.jsonl").string();
  fs::remove(transcript);

  const std::vector<QADocument> docs{{"d1", "Plants", "biology", "Plants turn light into chemical energy."},
                                     {"d2", "Tides", "physics", "The moon pulls the oceans."}};
  ScriptedClient live;
  RecordingClient rec(live, transcript);
  std::vector<AnswerModel> models{{"m", &rec}};
  const auto first = run_pipeline(docs, Setting::kQgSummary, rec, models, rec);
  CHECK(first.errors.empty());
  REQUIRE(first.table.size() == 1);
  CHECK(first.table[0].n == 6);
  CHECK(first.table[0].coherence == Catch::Approx(2.5));
  CHECK(first.table[0].avg == Catch::Approx(2.5));
  CHECK(results_csv(first.table) == "Model,Coherence,Relevance,Accuracy,Avg.\nm,2.50,2.50,2.50,2.50\n");

  FixtureClient replay(transcript);
  std::vector<AnswerModel> replay_models{{"m", &replay}};
  const auto second = run_pipeline(docs, Setting::kQgSummary, replay, replay_models, replay);
  CHECK(results_csv(second.table) == results_csv(first.table));
  REQUIRE(second.items.size() == first.items.size());
  for (std::size_t i = 0; i < first.items.size(); ++i) {
    CHECK(second.items[i].document_id == first.items[i].document_id);
    CHECK(second.items[i].question == first.items[i].question);
  }

  CHECK(run_pipeline({}, Setting::kQgPassage, live, models, live).table.empty());

  FailingClient down;
  std::vector<AnswerModel> bad{{"m", &down}};
  const auto partial = run_pipeline(docs, Setting::kQgPassage, live, bad, live);
  CHECK(partial.errors.size() == 2);
  CHECK(partial.table.empty());
  CHECK(partial.errors[0].document_id == "d1");

  FixtureClient empty(std::map<std::string, std::string>{});
  CHECK_THROWS_AS(empty.send("x", 1), Error);
  CHECK(request_hash("x", 1) != request_hash("x", 2));
}
