#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stagelm/carbon.hpp"
#include "stagelm/config.hpp"
#include "stagelm/corpus.hpp"
#include "stagelm/error.hpp"
#include "stagelm/evalppl.hpp"
#include "stagelm/hash.hpp"
#include "stagelm/insttune.hpp"
#include "stagelm/longqa.hpp"
#include "stagelm/synth.hpp"
#include "stagelm/tokenizer.hpp"
#include "stagelm/trainer.hpp"

namespace fs = std::filesystem;
using namespace stagelm;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

config::RunConfig load(const Globals& g) {
  if (g.config_path.empty()) throw Error(ErrorCode::kConfig, "cli", "this command needs --config");
  auto overrides = g.sets;
  if (g.seed) overrides.push_back("run.seed=" + std::to_string(*g.seed));
  if (g.threads) overrides.push_back("run.threads=" + std::to_string(*g.threads));
  auto c = config::parse_config(g.config_path, overrides);
  fs::create_directories(c.output_dir);
  return c;
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

// manifest.json in the output directory maps every artifact to the config
// hash that produced it and a content hash.
void record(const config::RunConfig& c, const std::string& command, const std::vector<std::string>& names) {
  const auto path = c.out_path("manifest.json");
  nlohmann::json m = nlohmann::json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    m = nlohmann::json::parse(in, nullptr, false);
    if (!m.is_object()) m = nlohmann::json::object();
  }
  m["config_hash"] = c.hash;
  for (const auto& n : names) {
    m["artifacts"][n] = {{"command", command}, {"config_hash", c.hash}, {"fnv64", file_hash(c.out_path(n))}};
  }
  std::ofstream(path) << m.dump(2) << "\n";
}

std::vector<corpus::Document> read_corpus(const config::RunConfig& c) {
  if (c.shards.empty()) throw Error(ErrorCode::kConfig, "cli", "corpus.shards is empty");
  auto r = corpus::ingest(c.shards);
  if (r.skipped) std::fprintf(stderr, "corpus: skipped %zu malformed records\n", r.skipped);
  return std::move(r.documents);
}

tok::Vocab load_vocab(const config::RunConfig& c) { return tok::Vocab::load_file(c.out_path("vocab.bpe")); }

std::string stage_file(std::size_t i, const char* ext) { return "stage" + std::to_string(i + 1) + ext; }

model::ModelConfig model_config(const config::RunConfig& c, std::size_t vocab) {
  auto m = c.model;
  if (m.vocab_size == 0) m.vocab_size = vocab;
  if (m.vocab_size != vocab) {
    throw Error(ErrorCode::kConfig, "cli", "model.vocab_size " + std::to_string(m.vocab_size) +
                                               " differs from the data vocabulary " + std::to_string(vocab));
  }
  m.validate();
  return m;
}

int cmd_tokenizer_train(const config::RunConfig& c) {
  const auto docs = read_corpus(c);
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (c.sample_docs > 0 && c.sample_docs < docs.size()) {
    corpus::shuffle_in_place(order, c.seed);
    order.resize(c.sample_docs);
    std::sort(order.begin(), order.end());
  }
  std::vector<std::string> sample;
  for (auto i : order) sample.push_back(docs[i].text);
  const auto v = tok::train_bpe(sample, c.vocab_size, tok::default_specials(c.max_space_run));
  v.save_file(c.out_path("vocab.bpe"));
  record(c, "tokenizer-train", {"vocab.bpe"});
  std::printf("vocab.bpe: %zu tokens from %zu documents\n", v.size(), sample.size());
  return 0;
}

int cmd_pack(const config::RunConfig& c) {
  if (c.stages.empty()) throw Error(ErrorCode::kConfig, "cli", "no [stage.N] sections configured");
  const auto v = load_vocab(c);
  corpus::FilterStats fs_stats;
  auto docs = corpus::filter_short(read_corpus(c), v, c.min_tokens, &fs_stats);
  std::vector<std::string> notes;
  if (!c.mixture.entries.empty()) {
    std::map<std::string, std::vector<corpus::Document>> streams;
    for (auto& d : docs) streams[d.source].push_back(std::move(d));
    auto mix = corpus::sample_mixture(streams, c.mixture);
    docs = std::move(mix.documents);
    notes = mix.notes;
  }
  auto chunks = corpus::split_chunks(std::move(docs), std::max<std::size_t>(c.chunks, 1), c.seed);
  const auto& chunk = chunks[c.chunk_index];
  std::vector<std::string> written;
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    auto ds = corpus::pack(chunk, v, c.stages[i].seq_len, c.seed + i, static_cast<std::uint32_t>(c.chunk_index));
    ds.provenance.documents_dropped = fs_stats.dropped;
    ds.provenance.config_hash = c.hash;
    ds.provenance.notes.insert(ds.provenance.notes.end(), notes.begin(), notes.end());
    corpus::write_packtok(ds, c.out_path(stage_file(i, ".packtok")));
    corpus::write_provenance(ds.provenance, c.out_path(stage_file(i, ".provenance")));
    written.push_back(stage_file(i, ".packtok"));
    written.push_back(stage_file(i, ".provenance"));
    std::printf("%s: %zu windows of %zu tokens\n", stage_file(i, ".packtok").c_str(), ds.sequences.size(),
                c.stages[i].seq_len);
  }
  if (!c.heldout.empty()) {
    auto held = corpus::ingest(std::vector<corpus::ShardSpec>{{c.heldout, "heldout"}}).documents;
    const std::size_t L = c.stages.back().seq_len;
    held = corpus::filter_short(std::move(held), v, L);
    auto ds = corpus::pack_whole_documents(held, static_cast<std::uint32_t>(v.size()), L);
    ds.provenance.config_hash = c.hash;
    corpus::write_packtok(ds, c.out_path("heldout.packtok"));
    written.push_back("heldout.packtok");
    std::printf("heldout.packtok: %zu documents of %zu tokens\n", ds.sequences.size(), L);
  }
  record(c, "pack", written);
  return 0;
}

int cmd_pretrain(const config::RunConfig& c, const std::string& resume, std::optional<std::uint64_t> max_steps) {
  if (c.stages.empty()) throw Error(ErrorCode::kConfig, "cli", "no [stage.N] sections configured");
  std::vector<corpus::PackedDataset> data;
  train::StagePlan plan;
  plan.scale_factor = c.scale_factor;
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    data.push_back(corpus::read_packtok(c.out_path(stage_file(i, ".packtok"))));
  }
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    plan.stages.push_back({c.stages[i].seq_len, c.stages[i].token_budget, c.stages[i].batch_size, &data[i]});
  }
  plan.validate();
  const auto mcfg = model_config(c, data.front().vocab_size);

  train::TrainState state;
  if (resume.empty()) {
    state = train::TrainState::fresh(mcfg, c.seed);
    state.config_hash = c.hash;
  } else {
    state = train::load_checkpoint(resume, &mcfg);
    if (state.config_hash != c.hash) {
      throw Error(ErrorCode::kConfig, "cli", "checkpoint was written under config " + state.config_hash +
                                                 ", active config is " + c.hash);
    }
  }

  std::vector<train::LossRecord> records;
  train::RunOptions opts;
  opts.threads = c.threads;
  opts.allow_reepoch = c.allow_reepoch;
  opts.spike_window = c.spike_window;
  opts.spike_threshold = c.spike_threshold;
  opts.schedule_total_steps = plan.total_steps();
  opts.on_record = [&](const train::LossRecord& r) { records.push_back(r); };

  std::vector<std::string> written;
  std::uint64_t budget_left = max_steps.value_or(UINT64_MAX);
  bool interrupted = false;
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    if (state.stage_index > static_cast<std::int64_t>(i) ||
        (state.stage_index == static_cast<std::int64_t>(i) && state.stage_done)) {
      continue;
    }
    if (budget_left == 0) {
      interrupted = true;
      break;
    }
    opts.checkpoint_path = c.out_path(stage_file(i, ".ckpt"));
    if (max_steps) opts.max_steps = budget_left;
    const std::size_t before = state.events.size();
    budget_left -= train::run_stage(state, plan.stages[i], i, c.optimizer, opts);
    std::size_t spikes = 0;
    for (std::size_t e = before; e < state.events.size(); ++e) {
      const auto& ev = state.events[e];
      if (ev.kind == "spike") {
        ++spikes;
      } else if (ev.kind != "checkpoint") {
        std::fprintf(stderr, "trainer: step %llu %s: %s\n", static_cast<unsigned long long>(ev.step), ev.kind.c_str(),
                     ev.detail.c_str());
      }
    }
    if (spikes) std::fprintf(stderr, "trainer: stage %zu: %zu loss spikes flagged (events.log)\n", i + 1, spikes);
    if (!state.stage_done) {
      interrupted = true;
      break;
    }
    written.push_back(stage_file(i, ".ckpt"));
    const double last = records.empty() ? 0.0 : records.back().loss;
    std::printf("stage %zu (seq_len %zu) done at step %llu, loss %.4f\n", i + 1, plan.stages[i].seq_len,
                static_cast<unsigned long long>(state.step), last);
  }
  train::write_loss_csv(records, c.out_path("loss.csv"), !resume.empty());
  written.push_back("loss.csv");
  {
    std::ofstream ev(c.out_path("events.log"), resume.empty() ? std::ios::trunc : std::ios::app);
    for (const auto& e : state.events) ev << e.step << "\t" << e.kind << "\t" << e.detail << "\n";
  }
  written.push_back("events.log");
  // scripts name their inputs relative to the output directory (run gnuplot there)
  eval::write_loss_plot_script("loss.csv", c.out_path("loss.gp"), "loss.png");
  written.push_back("loss.gp");
  if (interrupted) {
    train::save_checkpoint(state, c.out_path("resume.ckpt"));
    written.push_back("resume.ckpt");
    std::printf("stopped at step %llu; resume with --resume %s\n", static_cast<unsigned long long>(state.step),
                c.out_path("resume.ckpt").c_str());
  }
  record(c, "pretrain", written);
  return 0;
}

int cmd_eval(const config::RunConfig& c, std::vector<std::string> checkpoints) {
  const auto held = corpus::read_packtok(c.out_path("heldout.packtok"));
  if (checkpoints.empty()) {
    for (std::size_t i = 0; i < c.stages.size(); ++i) checkpoints.push_back(c.out_path(stage_file(i, ".ckpt")));
  }
  const auto mcfg = model_config(c, held.vocab_size);
  std::vector<eval::PerPositionReport> reports;
  std::vector<std::string> tags;
  for (const auto& path : checkpoints) {
    const auto st = train::load_checkpoint(path, &mcfg);
    const std::string tag = fs::path(path).stem().string();
    reports.push_back(eval::per_position_perplexity(st.params, mcfg, held, c.bucket_size, tag, c.threads));
    tags.push_back(tag);
  }
  eval::write_report_csv(reports, c.out_path("ppl.csv"));
  const auto table = eval::compare_stage_models(reports);
  eval::write_comparison_csv(table, c.out_path("ppl_compare.csv"));
  eval::write_ppl_plot_script("ppl.csv", tags, c.out_path("ppl.gp"), "ppl.png");
  for (std::size_t m = 0; m < reports.size(); ++m) {
    std::printf("%s: %zu documents, spearman(ppl, position) = %.4f\n", tags[m].c_str(), reports[m].n_docs,
                table.spearman[m]);
  }
  record(c, "eval-ppl", {"ppl.csv", "ppl_compare.csv", "ppl.gp"});
  return 0;
}

int cmd_finetune(const config::RunConfig& c) {
  if (c.finetune_data.empty()) throw Error(ErrorCode::kConfig, "cli", "finetune.data is not set");
  const auto v = load_vocab(c);
  std::size_t skipped = 0;
  const auto convs = inst::read_conversations(c.finetune_data, &skipped);
  if (skipped) std::fprintf(stderr, "insttune: skipped %zu malformed conversations\n", skipped);
  std::vector<inst::TokenizedExample> data;
  for (const auto& ex : convs) data.push_back(inst::tokenize_example(ex, v));
  const std::size_t base = c.finetune_base_stage ? c.finetune_base_stage - 1 : c.stages.size() - 1;
  const auto mcfg = model_config(c, v.size());
  auto state = train::load_checkpoint(c.out_path(stage_file(base, ".ckpt")), &mcfg);
  state.config_hash = c.hash;
  std::vector<inst::FinetuneRecord> rec;
  inst::finetune(state, data, v.eot_id(), c.finetune, c.threads,
                 [&](const inst::FinetuneRecord& r) { rec.push_back(r); });
  for (const auto& w : state.events) {
    if (w.kind == "warning") std::fprintf(stderr, "insttune: %s\n", w.detail.c_str());
  }
  train::save_checkpoint(state, c.out_path("finetune.ckpt"));
  {
    std::ofstream out(c.out_path("finetune_loss.csv"));
    out << "step,epoch,lr,loss\n";
    char buf[96];
    for (const auto& r : rec) {
      std::snprintf(buf, sizeof buf, "%llu,%zu,%.9g,%.9g\n", static_cast<unsigned long long>(r.step), r.epoch, r.lr,
                    r.loss);
      out << buf;
    }
  }
  std::printf("fine-tuned %zu examples for %zu epochs (%zu steps), final loss %.4f\n", data.size(), c.finetune.epochs,
              rec.size(), rec.empty() ? 0.0 : rec.back().loss);
  record(c, "finetune", {"finetune.ckpt", "finetune_loss.csv"});
  return 0;
}

int cmd_longqa(const config::RunConfig& c, bool live) {
  if (c.qa_documents.empty()) throw Error(ErrorCode::kConfig, "cli", "longqa.documents is not set");
  if (c.qa_transcript.empty()) throw Error(ErrorCode::kConfig, "cli", "longqa.transcript is not set");
  const auto docs = longqa::read_documents(c.qa_documents);
  std::unique_ptr<longqa::ChatClient> http;
  std::unique_ptr<longqa::ChatClient> client;
  if (live) {
    http = longqa::make_http_client(c.qa_http);
    client = std::make_unique<longqa::RecordingClient>(*http, c.qa_transcript);
  } else {
    client = std::make_unique<longqa::FixtureClient>(c.qa_transcript);
  }
  std::vector<longqa::AnswerModel> models;
  for (const auto& m : c.qa_models) models.push_back({m, client.get()});
  longqa::PipelineOptions opts;
  opts.scale_factor = c.qa_scale_factor;
  const auto result = longqa::run_pipeline(docs, c.qa_setting, *client, models, *client, opts);
  for (const auto& e : result.errors) std::fprintf(stderr, "longqa: document %s: %s\n", e.document_id.c_str(), e.message.c_str());
  const auto csv = longqa::results_csv(result.table);
  std::ofstream(c.out_path("longqa.csv")) << csv;
  std::fputs(csv.c_str(), stdout);
  record(c, "longqa", {"longqa.csv"});
  return result.errors.empty() ? 0 : 1;
}

int cmd_carbon(const carbon::CarbonInput& in, bool csv) {
  const auto r = carbon::estimate(in);
  std::printf("%s\n", carbon::format_report(r).c_str());
  if (csv) std::printf("%s\n%s\n", carbon::csv_header().c_str(), carbon::csv_row(r).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stagelm: staged-length language model training toolkit"};
  app.set_version_flag("--version", std::string("stagelm ") + STAGELM_VERSION);
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "Run configuration file");
  app.add_option("--set", g.sets, "Override a config value: section.key=value (repeatable)");
  app.add_option("--seed", g.seed, "Override run.seed");
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);

  auto* tt = app.add_subcommand("tokenizer-train", "Train the BPE vocabulary on the configured corpus");
  auto* pk = app.add_subcommand("pack", "Filter, mix and pack the corpus for every stage");
  auto* pt = app.add_subcommand("pretrain", "Run the staged pre-training curriculum");
  std::string resume;
  std::optional<std::uint64_t> max_steps;
  pt->add_option("--resume", resume, "Continue from a checkpoint");
  pt->add_option("--max-steps", max_steps, "Stop after this many steps and write resume.ckpt");
  auto* ev = app.add_subcommand("eval-ppl", "Per-position perplexity of stage checkpoints");
  std::vector<std::string> checkpoints;
  ev->add_option("--checkpoint", checkpoints, "Checkpoints to evaluate (default: every stage)");
  auto* ft = app.add_subcommand("finetune", "Instruction fine-tuning with prompt-loss masking");
  auto* qa = app.add_subcommand("longqa", "Long-form QA question generation and judging");
  bool live = false;
  qa->add_flag("--live", live, "Call the configured provider and append to the transcript");
  auto* cb = app.add_subcommand("carbon", "Energy and carbon estimate");
  carbon::CarbonInput cin{0, 0, 1.10, 0};
  bool have[4] = {false, false, false, false};
  bool csv = false;
  cb->add_option("--hours", cin.device_hours, "Device-hours")->each([&](const std::string&) { have[0] = true; });
  cb->add_option("--watts", cin.device_power_w, "Power per device in watts")->each([&](const std::string&) { have[1] = true; });
  cb->add_option("--pue", cin.pue, "Power usage effectiveness")->each([&](const std::string&) { have[2] = true; });
  cb->add_option("--intensity", cin.carbon_intensity, "tCO2eq per MWh")->each([&](const std::string&) { have[3] = true; });
  cb->add_flag("--csv", csv, "Also print a CSV row");
  auto* sd = app.add_subcommand("synth-demo", "Write the synthetic demo corpus and fixtures");
  std::string demo_out = "demo-data";
  std::uint64_t demo_seed = 1;
  sd->add_option("--out", demo_out, "Output directory");
  sd->add_option("--demo-seed", demo_seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "stagelm: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*tt) return cmd_tokenizer_train(load(g));
    if (*pk) return cmd_pack(load(g));
    if (*pt) return cmd_pretrain(load(g), resume, max_steps);
    if (*ev) return cmd_eval(load(g), checkpoints);
    if (*ft) return cmd_finetune(load(g));
    if (*qa) return cmd_longqa(load(g), live);
    if (*cb) {
      if (!g.config_path.empty()) {
        const auto c = load(g);
        if (!have[0]) cin.device_hours = c.carbon.device_hours;
        if (!have[1]) cin.device_power_w = c.carbon.device_power_w;
        if (!have[2]) cin.pue = c.carbon.pue;
        if (!have[3]) cin.carbon_intensity = c.carbon.carbon_intensity;
      }
      return cmd_carbon(cin, csv);
    }
    if (*sd) {
      synth::write_demo_data(demo_out, demo_seed);
      std::printf("demo data written to %s\n", demo_out.c_str());
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error module=%s code=%s: %s\n", e.module().c_str(), to_string(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error module=cli code=internal: %s\n", e.what());
    return 1;
  }
  return 2;
}
