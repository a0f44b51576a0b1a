#include <catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "stagelm/config.hpp"
#include "stagelm/error.hpp"

using namespace stagelm;
using namespace stagelm::config;
namespace fs = std::filesystem;

namespace {

const char* kMinimal = R"([run]
seed = 3

[corpus]
shards = web=web.jsonl

[stage.1]
seq_len = 64
token_budget = 4096
batch_size = 4
)";

std::string error_of(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    parse_config_text(text, "t.conf", overrides);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
    return e.what();
  }
  return {};
}

struct Proc {
  int status = -1;
  std::string out;
};

Proc run(const std::string& args) {
  Proc p;
  const std::string cmd = std::string(STAGELM_CLI) + " " + args + " 2>&1";
  FILE* f = popen(cmd.c_str(), "r");
  REQUIRE(f);
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), f)) p.out += buf.data();
  const int st = pclose(f);
  p.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return p;
}

}  // namespace

TEST_CASE("minimal config takes defaults") {
  const auto c = parse_config_text(kMinimal, "t.conf");
  CHECK(c.seed == 3);
  CHECK(c.threads == 1);
  REQUIRE(c.shards.size() == 1);
  CHECK(c.shards[0].source == "web");
  CHECK(c.min_tokens == 100);
  REQUIRE(c.stages.size() == 1);
  CHECK(c.stages[0].seq_len == 64);
  CHECK(c.model.max_seq_len == 64);
  CHECK(c.scale_factor == 8);
  CHECK(c.carbon.pue == Catch::Approx(1.10));
  CHECK(c.hash.size() == 16);
  CHECK(parse_config_text(kMinimal, "other.conf").hash == c.hash);
}

TEST_CASE("hash ignores run placement but not training settings") {
  const auto base = parse_config_text(kMinimal, "t.conf");
  CHECK(parse_config_text(kMinimal, "t.conf", {"run.threads=4", "run.output_dir=elsewhere"}).hash == base.hash);
  CHECK(parse_config_text(kMinimal, "t.conf", {"run.seed=4"}).hash != base.hash);
  CHECK(parse_config_text(kMinimal, "t.conf", {"optimizer.base_lr=1e-3"}).hash != base.hash);
}

TEST_CASE("overrides apply after the file") {
  const auto c = parse_config_text(kMinimal, "t.conf", {"run.seed=11", "stage.1.batch_size=8"});
  CHECK(c.seed == 11);
  CHECK(c.stages[0].batch_size == 8);
}

TEST_CASE("unknown key is reported with its line") {
  const std::string text = std::string(kMinimal) + "\n[model]\nfoo = 1\n";
  const auto msg = error_of(text);
  CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("t.conf:13"));
  CHECK_THAT(msg, Catch::Matchers::ContainsSubstring("unknown key 'foo' in [model]"));
}

TEST_CASE("malformed configs") {
  CHECK_THAT(error_of(std::string(kMinimal) + "[nope]\n"), Catch::Matchers::ContainsSubstring("section"));
  CHECK_THAT(error_of(std::string(kMinimal) + "[model]\nd_model = wide\n"),
             Catch::Matchers::ContainsSubstring("expects an unsigned integer"));
  CHECK_THAT(error_of(std::string(kMinimal) + "[model]\nd_model = 8\nd_model = 16\n"),
             Catch::Matchers::ContainsSubstring("duplicate"));
  CHECK_THAT(error_of(kMinimal, {"corpus.mixture=web=0.5, code=0.5"}), Catch::Matchers::ContainsSubstring("code"));
  CHECK_THAT(error_of(std::string(kMinimal) + "[finetune]\nbase = stage.4\n"),
             Catch::Matchers::ContainsSubstring("stage"));
  CHECK_THAT(error_of(std::string(kMinimal) + "[stage.3]\nseq_len = 128\ntoken_budget = 1\n"),
             Catch::Matchers::ContainsSubstring("stage"));
  CHECK_FALSE(error_of(kMinimal, {"nodot"}).empty());
}

TEST_CASE("cli carbon and usage errors") {
  const auto ok = run("carbon --hours 270336 --watts 192 --pue 1.10 --intensity 0.079");
  CHECK(ok.status == 0);
  CHECK_THAT(ok.out, Catch::Matchers::ContainsSubstring("57.1 MWh, 4.51 tCO2eq"));
  const auto csv = run("carbon --hours 1000 --watts 100 --intensity 0.5 --csv");
  CHECK(csv.status == 0);
  CHECK_THAT(csv.out, Catch::Matchers::ContainsSubstring("device_hours,device_power_w,pue"));
  const auto bad = run("carbon --hours 10 --watts 0 --intensity 0.5");
  CHECK(bad.status == 1);
  CHECK_THAT(bad.out, Catch::Matchers::ContainsSubstring("module=carbon"));
  const auto unknown = run("frobnicate");
  CHECK(unknown.status == 2);
  CHECK(run("--version").out == "stagelm 0.1.0\n");
}

TEST_CASE("cli reports config errors with exit code 1") {
  const auto dir = fs::temp_directory_path() / "stagelm_test_config";
  fs::create_directories(dir);
  const auto p = (dir / "bad.conf").string();
  std::ofstream(p) << kMinimal << "[model]\nfoo = 1\n";
  const auto r = run("--config " + p + " pack");
  CHECK(r.status == 1);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("unknown key 'foo'"));
}

TEST_CASE("shipped configs parse") {
  for (const auto& e : fs::directory_iterator(fs::path(STAGELM_TEST_DATA).parent_path() / "configs")) {
    INFO(e.path().string());
    const auto c = parse_config(e.path().string());
    CHECK(c.stages.size() == 3);
    CHECK(c.stages[0].token_budget * 4 == c.stages[1].token_budget * 8);
    CHECK(c.stages[1].token_budget * 3 == c.stages[2].token_budget * 4);
  }
}
