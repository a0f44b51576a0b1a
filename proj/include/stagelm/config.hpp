#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stagelm/carbon.hpp"
#include "stagelm/corpus.hpp"
#include "stagelm/insttune.hpp"
#include "stagelm/longqa.hpp"
#include "stagelm/model.hpp"
#include "stagelm/trainer.hpp"

namespace stagelm::config {

struct StageConfig {
  std::size_t seq_len = 0;
  std::uint64_t token_budget = 0;
  std::size_t batch_size = 1;
};

struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  int threads = 1;
  std::string output_dir = "out";
  std::string data_dir = ".";

  // [corpus]
  std::vector<corpus::ShardSpec> shards;  // paths already resolved against data_dir
  corpus::MixtureSpec mixture;            // empty: every document, in order
  std::size_t min_tokens = 100;
  std::size_t chunks = 1;
  std::size_t chunk_index = 0;

  // [tokenizer]
  std::size_t vocab_size = 512;
  std::size_t sample_docs = 0;  // 0: all documents
  int max_space_run = 16;

  // [model]; vocab_size 0 means "take it from the tokenizer"
  model::ModelConfig model;

  // [optimizer]
  train::OptimizerHyper optimizer;

  // [curriculum] and [stage.N]
  std::vector<StageConfig> stages;
  std::size_t scale_factor = 8;
  bool allow_reepoch = false;
  std::size_t spike_window = 32;
  double spike_threshold = 6.0;

  // [eval]
  std::string heldout;
  std::size_t bucket_size = 32;

  // [finetune]
  std::string finetune_data;
  std::size_t finetune_base_stage = 0;  // 1-based; 0 = last stage
  inst::FinetuneHyper finetune;

  // [longqa]
  std::string qa_documents;
  std::string qa_transcript;
  longqa::Setting qa_setting = longqa::Setting::kQgPassage;
  std::vector<std::string> qa_models{"model"};
  std::size_t qa_scale_factor = 1;
  longqa::HttpClientOptions qa_http;

  // [carbon]
  carbon::CarbonInput carbon{0, 0, 1.10, 0};

  // FNV-1a over the canonical key=value listing (run.threads, run.output_dir
  // and run.data_dir excluded: they do not change results).
  std::string hash;
  std::string canonical;

  std::string out_path(const std::string& name) const;
};

// `overrides` are "section.key=value" strings applied after the file. Errors
// carry the origin and line number of the offending entry.
RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {});
RunConfig parse_config_text(const std::string& text, const std::string& origin,
                            const std::vector<std::string>& overrides = {});

}  // namespace stagelm::config
