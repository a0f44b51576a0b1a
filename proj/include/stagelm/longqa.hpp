#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stagelm::longqa {

inline constexpr std::string_view kSummaryTemplate =
    "Summarize the paragraphs below in the context of {title} in {domain}.\n{passage}";
inline constexpr std::string_view kQuestionTemplate =
    "Using the context below, come up with follow-up questions such that answers are beyond few words or a "
    "couple of phrases. Rank the generated questions in the order of decreasing complexity to answer and display "
    "only the top 3.\n{context}";
inline constexpr std::size_t kAnswerMaxTokens = 512;

enum class Setting { kQgPassage, kQgSummary };
const char* to_string(Setting s);
Setting setting_from_string(std::string_view s);

struct QGRequest {
  Setting setting = Setting::kQgPassage;
  std::string title;   // qg_summary only
  std::string domain;  // qg_summary only
  std::string context;
  std::size_t max_questions = 3;

  void validate() const;
};

std::string build_summary_prompt(std::string_view title, std::string_view domain, std::string_view passage);
std::string build_qg_prompt(std::string_view context);
std::string build_answer_prompt(std::string_view question, std::string_view document);

struct ChatRequest {
  std::string prompt;
  std::size_t max_tokens = 0;
};

// max_tokens = 512 / scale_factor (at least 1).
ChatRequest build_answer_request(std::string_view question, std::string_view document, std::size_t scale_factor = 1);

struct JudgeRequest {
  std::string question;
  std::string candidate_answer;
  std::string reference_context;

  void validate() const;
};

// House template: the rubric dimensions and 0-3 scale are fixed, the wording
// of the instructions is this project's own.
std::string build_judge_prompt(const JudgeRequest& req);

struct JudgeScores {
  double coherence = 0;
  double relevance = 0;
  double accuracy = 0;
};

// Reads the first JSON object in the reply; each score must lie in [0,3].
JudgeScores parse_judge_response(std::string_view reply);

// Numbered or bulleted lines from a question-generation reply, at most `limit`.
std::vector<std::string> parse_questions(std::string_view reply, std::size_t limit);

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string send(const std::string& prompt, std::size_t max_tokens) = 0;
};

std::string request_hash(std::string_view prompt, std::size_t max_tokens);

// Replays {request_hash, response_text} JSONL transcripts.
class FixtureClient : public ChatClient {
 public:
  explicit FixtureClient(const std::string& path);
  FixtureClient(std::map<std::string, std::string> responses);
  std::string send(const std::string& prompt, std::size_t max_tokens) override;
  std::size_t size() const { return responses_.size(); }

 private:
  std::map<std::string, std::string> responses_;
};

// Forwards to another client and appends every exchange to a transcript.
class RecordingClient : public ChatClient {
 public:
  RecordingClient(ChatClient& inner, std::string transcript_path);
  std::string send(const std::string& prompt, std::size_t max_tokens) override;

 private:
  ChatClient& inner_;
  std::string path_;
};

struct HttpClientOptions {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4";
  std::string api_key_env = "STAGELM_LLM_API_KEY";
  int max_retries = 4;
  double initial_backoff_s = 1.0;
  int timeout_s = 120;
};

// OpenAI-compatible chat-completions client.
std::unique_ptr<ChatClient> make_http_client(const HttpClientOptions& opts);

struct QADocument {
  std::string id;
  std::string title;
  std::string domain;
  std::string text;
};

struct AnswerModel {
  std::string name;
  ChatClient* client = nullptr;
};

struct PipelineOptions {
  std::size_t max_questions = 3;
  std::size_t scale_factor = 1;
};

struct ItemResult {
  std::string document_id;
  std::string model;
  std::string question;
  std::string answer;
  JudgeScores scores;
};

struct DocumentError {
  std::string document_id;
  std::string message;
};

struct ModelScores {
  std::string model;
  double coherence = 0;
  double relevance = 0;
  double accuracy = 0;
  double avg = 0;
  std::size_t n = 0;
};

struct PipelineResult {
  std::vector<ModelScores> table;
  std::vector<ItemResult> items;
  std::vector<DocumentError> errors;
};

// Per-dimension means and their average.
ModelScores aggregate(std::string model, std::span<const JudgeScores> scores);

// For each document: (optionally summarize), generate questions, have every
// model answer them, and judge the answers. A failing document is recorded
// and skipped.
PipelineResult run_pipeline(std::span<const QADocument> documents, Setting setting, ChatClient& question_client,
                            std::span<const AnswerModel> models, ChatClient& judge,
                            const PipelineOptions& opts = {});

// Model,Coherence,Relevance,Accuracy,Avg. with two decimals.
std::string results_csv(std::span<const ModelScores> table);

std::vector<QADocument> read_documents(const std::string& path);

}  // namespace stagelm::longqa
