#include <chrono>
#include <cstdlib>
#include <thread>

#ifdef STAGELM_HAVE_OPENSSL
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "stagelm/error.hpp"
#include "stagelm/longqa.hpp"

namespace stagelm::longqa {
namespace {

class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpClientOptions opts) : opts_(std::move(opts)) {
    const char* key = std::getenv(opts_.api_key_env.c_str());
    if (!key || !*key) {
      throw Error(ErrorCode::kClientFailure, "longqa", "environment variable " + opts_.api_key_env + " is not set");
    }
    key_ = key;
  }

  std::string send(const std::string& prompt, std::size_t max_tokens) override {
    httplib::Client cli(opts_.base_url);
    cli.set_read_timeout(opts_.timeout_s, 0);
    cli.set_bearer_token_auth(key_);
    const nlohmann::json body{{"model", opts_.model},
                              {"max_tokens", max_tokens},
                              {"temperature", 0},
                              {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
    double wait = opts_.initial_backoff_s;
    std::string last_error;
    for (int attempt = 0; attempt <= opts_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::duration<double>(wait));
        wait *= 2;
      }
      auto res = cli.Post(opts_.path, body.dump(), "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw Error(ErrorCode::kClientFailure, "longqa", "HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      const auto j = nlohmann::json::parse(res->body, nullptr, false);
      if (j.is_discarded() || !j.contains("choices") || j["choices"].empty()) {
        throw Error(ErrorCode::kClientFailure, "longqa", "unexpected response body");
      }
      return j["choices"][0]["message"]["content"].get<std::string>();
    }
    throw Error(ErrorCode::kClientFailure, "longqa", "request failed after retries: " + last_error);
  }

 private:
  HttpClientOptions opts_;
  std::string key_;
};

}  // namespace

std::unique_ptr<ChatClient> make_http_client(const HttpClientOptions& opts) {
  return std::make_unique<HttpChatClient>(opts);
}

}  // namespace stagelm::longqa
