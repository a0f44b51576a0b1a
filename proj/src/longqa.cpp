#include "stagelm/longqa.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stagelm/error.hpp"
#include "stagelm/hash.hpp"

namespace stagelm::longqa {
namespace {

constexpr std::string_view kModule = "longqa";

[[noreturn]] void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(kModule), msg);
}

void require(std::string_view value, const char* field) {
  if (value.empty()) fail(ErrorCode::kInvalidArgument, std::string(field) + " must not be empty");
}

std::string substitute(std::string_view tmpl, std::initializer_list<std::pair<std::string_view, std::string_view>> slots) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    bool hit = false;
    if (tmpl[i] == '{') {
      for (const auto& [name, value] : slots) {
        if (tmpl.compare(i + 1, name.size(), name) == 0 && i + 1 + name.size() < tmpl.size() &&
            tmpl[i + 1 + name.size()] == '}') {
          out += value;
          i += name.size() + 2;
          hit = true;
          break;
        }
      }
    }
    if (!hit) out += tmpl[i++];
  }
  return out;
}

constexpr std::string_view kAnswerTemplate =
    "Read the document below and answer the question that follows it.\n\nDocument:\n{document}\n\nQuestion: "
    "{question}\nAnswer:";

constexpr std::string_view kJudgeTemplate =
    "You are grading an answer to a question about a reference text. Rate the answer on a scale of 0-3 for "
    "each of the following dimensions: coherence, relevance, and accuracy. 0 means very poor and 3 means "
    "excellent.\n\nReference text:\n{context}\n\nQuestion: {question}\n\nAnswer:\n{answer}\n\nReply with only a "
    "JSON object of the form {\"coherence\": <0-3>, \"relevance\": <0-3>, \"accuracy\": <0-3>}.";

}  // namespace

const char* to_string(Setting s) { return s == Setting::kQgPassage ? "qg_passage" : "qg_summary"; }

Setting setting_from_string(std::string_view s) {
  if (s == "qg_passage" || s == "qg-passage") return Setting::kQgPassage;
  if (s == "qg_summary" || s == "qg-summary") return Setting::kQgSummary;
  fail(ErrorCode::kInvalidArgument, "unknown long-form QA setting '" + std::string(s) + "'");
}

void QGRequest::validate() const {
  require(context, "context");
  const bool summary = setting == Setting::kQgSummary;
  if (summary && (title.empty() || domain.empty())) fail(ErrorCode::kInvalidArgument, "qg_summary needs title and domain");
  if (!summary && (!title.empty() || !domain.empty())) {
    fail(ErrorCode::kInvalidArgument, "title and domain are only meaningful for qg_summary");
  }
  if (max_questions == 0) fail(ErrorCode::kInvalidArgument, "max_questions must be positive");
}

std::string build_summary_prompt(std::string_view title, std::string_view domain, std::string_view passage) {
  require(title, "title");
  require(domain, "domain");
  require(passage, "passage");
  return substitute(kSummaryTemplate, {{"title", title}, {"domain", domain}, {"passage", passage}});
}

std::string build_qg_prompt(std::string_view context) {
  require(context, "context");
  return substitute(kQuestionTemplate, {{"context", context}});
}

std::string build_answer_prompt(std::string_view question, std::string_view document) {
  require(question, "question");
  require(document, "document");
  return substitute(kAnswerTemplate, {{"document", document}, {"question", question}});
}

ChatRequest build_answer_request(std::string_view question, std::string_view document, std::size_t scale_factor) {
  if (scale_factor == 0) fail(ErrorCode::kInvalidArgument, "scale_factor must be positive");
  return {build_answer_prompt(question, document), std::max<std::size_t>(1, kAnswerMaxTokens / scale_factor)};
}

void JudgeRequest::validate() const {
  require(question, "question");
  require(candidate_answer, "candidate_answer");
  require(reference_context, "reference_context");
}

std::string build_judge_prompt(const JudgeRequest& req) {
  req.validate();
  return substitute(kJudgeTemplate,
                    {{"context", req.reference_context}, {"question", req.question}, {"answer", req.candidate_answer}});
}

JudgeScores parse_judge_response(std::string_view reply) {
  const auto open = reply.find('{');
  const auto close = reply.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
    fail(ErrorCode::kParse, "judge reply holds no JSON object");
  }
  const auto j = nlohmann::json::parse(reply.substr(open, close - open + 1), nullptr, false);
  if (!j.is_object()) fail(ErrorCode::kParse, "judge reply JSON is malformed");
  auto score = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_number()) fail(ErrorCode::kParse, std::string("judge reply lacks ") + key);
    const double v = j[key].get<double>();
    if (v < 0 || v > 3) fail(ErrorCode::kParse, std::string(key) + " score outside 0-3");
    return v;
  };
  return {score("coherence"), score("relevance"), score("accuracy")};
}

std::vector<std::string> parse_questions(std::string_view reply, std::size_t limit) {
  std::vector<std::string> out;
  std::istringstream in{std::string(reply)};
  std::string line;
  while (out.size() < limit && std::getline(in, line)) {
    std::size_t i = line.find_first_not_of(" \t");
    if (i == std::string::npos) continue;
    std::size_t j = i;
    while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i && j < line.size() && (line[j] == '.' || line[j] == ')')) {
      i = j + 1;
    } else if (line[i] == '-' || line[i] == '*') {
      i += 1;
    } else {
      continue;
    }
    i = line.find_first_not_of(" \t", i);
    if (i == std::string::npos) continue;
    auto end = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(i, end - i + 1));
  }
  return out;
}

std::string request_hash(std::string_view prompt, std::size_t max_tokens) {
  std::uint64_t h = fnv1a64(prompt);
  h = fnv1a64("\x1f" + std::to_string(max_tokens), h);
  return hex64(h);
}

FixtureClient::FixtureClient(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot read transcript " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_object() || !j.contains("request_hash") || !j.contains("response_text") ||
        !j["request_hash"].is_string() || !j["response_text"].is_string()) {
      fail(ErrorCode::kParse, path + ":" + std::to_string(lineno) + ": malformed transcript record");
    }
    responses_[j["request_hash"].get<std::string>()] = j["response_text"].get<std::string>();
  }
}

FixtureClient::FixtureClient(std::map<std::string, std::string> responses) : responses_(std::move(responses)) {}

std::string FixtureClient::send(const std::string& prompt, std::size_t max_tokens) {
  const auto h = request_hash(prompt, max_tokens);
  auto it = responses_.find(h);
  if (it == responses_.end()) fail(ErrorCode::kClientFailure, "no recorded response for request " + h);
  return it->second;
}

RecordingClient::RecordingClient(ChatClient& inner, std::string transcript_path)
    : inner_(inner), path_(std::move(transcript_path)) {}

std::string RecordingClient::send(const std::string& prompt, std::size_t max_tokens) {
  std::string reply = inner_.send(prompt, max_tokens);
  std::ofstream out(path_, std::ios::app);
  if (!out) fail(ErrorCode::kIo, "cannot append to transcript " + path_);
  nlohmann::json j{{"request_hash", request_hash(prompt, max_tokens)}, {"response_text", reply}};
  out << j.dump() << "\n";
  return reply;
}

ModelScores aggregate(std::string model, std::span<const JudgeScores> scores) {
  ModelScores m;
  m.model = std::move(model);
  m.n = scores.size();
  if (scores.empty()) return m;
  for (const auto& s : scores) {
    m.coherence += s.coherence;
    m.relevance += s.relevance;
    m.accuracy += s.accuracy;
  }
  const double n = static_cast<double>(scores.size());
  m.coherence /= n;
  m.relevance /= n;
  m.accuracy /= n;
  m.avg = (m.coherence + m.relevance + m.accuracy) / 3.0;
  return m;
}

PipelineResult run_pipeline(std::span<const QADocument> documents, Setting setting, ChatClient& question_client,
                            std::span<const AnswerModel> models, ChatClient& judge, const PipelineOptions& opts) {
  PipelineResult result;
  std::map<std::string, std::vector<JudgeScores>> per_model;
  for (const auto& doc : documents) {
    try {
      std::string context = doc.text;
      if (setting == Setting::kQgSummary) {
        context = question_client.send(build_summary_prompt(doc.title, doc.domain, doc.text), kAnswerMaxTokens);
      }
      const auto questions = parse_questions(question_client.send(build_qg_prompt(context), kAnswerMaxTokens),
                                             opts.max_questions);
      if (questions.empty()) fail(ErrorCode::kParse, "question generation returned no questions");
      std::vector<ItemResult> items;
      for (const auto& q : questions) {
        for (const auto& m : models) {
          const auto req = build_answer_request(q, doc.text, opts.scale_factor);
          ItemResult item{doc.id, m.name, q, m.client->send(req.prompt, req.max_tokens), {}};
          const auto verdict = judge.send(build_judge_prompt({q, item.answer, doc.text}), kAnswerMaxTokens);
          item.scores = parse_judge_response(verdict);
          items.push_back(std::move(item));
        }
      }
      for (auto& item : items) {
        per_model[item.model].push_back(item.scores);
        result.items.push_back(std::move(item));
      }
    } catch (const std::exception& e) {
      result.errors.push_back({doc.id, e.what()});
    }
  }
  for (const auto& m : models) {
    auto it = per_model.find(m.name);
    if (it != per_model.end()) result.table.push_back(aggregate(m.name, it->second));
  }
  return result;
}

std::string results_csv(std::span<const ModelScores> table) {
  std::string out = "Model,Coherence,Relevance,Accuracy,Avg.\n";
  char buf[128];
  for (const auto& m : table) {
    std::snprintf(buf, sizeof buf, ",%.2f,%.2f,%.2f,%.2f\n", m.coherence, m.relevance, m.accuracy, m.avg);
    out += m.model + buf;
  }
  return out;
}

std::vector<QADocument> read_documents(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path);
  std::vector<QADocument> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      fail(ErrorCode::kParse, path + ":" + std::to_string(lineno) + ": document needs a text field");
    }
    QADocument d;
    d.id = j.value("id", std::to_string(lineno));
    d.title = j.value("title", "");
    d.domain = j.value("domain", "");
    d.text = j["text"].get<std::string>();
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace stagelm::longqa
