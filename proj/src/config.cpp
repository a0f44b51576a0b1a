#include "stagelm/config.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "stagelm/error.hpp"
#include "stagelm/hash.hpp"

namespace stagelm::config {
namespace {

namespace fs = std::filesystem;

struct Entry {
  std::string value;
  std::string where;  // "file:line" or "--set"
};

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw Error(ErrorCode::kConfig, "config", where + ": " + msg);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

template <class T>
T parse_integer(const Entry& e, const std::string& key, const char* what) {
  T v{};
  const auto* b = e.value.data();
  const auto* end = b + e.value.size();
  const auto r = std::from_chars(b, end, v);
  if (e.value.empty() || r.ec != std::errc() || r.ptr != end) {
    fail(e.where, "key '" + key + "' expects " + what + ", got '" + e.value + "'");
  }
  return v;
}

double parse_double(const Entry& e, const std::string& key) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(e.value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (e.value.empty() || used != e.value.size()) fail(e.where, "key '" + key + "' expects a number, got '" + e.value + "'");
  return v;
}

bool parse_bool(const Entry& e, const std::string& key) {
  if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "0" || e.value == "no") return false;
  fail(e.where, "key '" + key + "' expects true or false, got '" + e.value + "'");
}

using Setter = std::function<void(RunConfig&, const Entry&, const std::string&)>;

struct Key {
  std::string def;
  Setter set;
};

template <class T>
Setter uint_into(T RunConfig::*field) {
  return [field](RunConfig& c, const Entry& e, const std::string& k) {
    c.*field = static_cast<T>(parse_integer<std::uint64_t>(e, k, "an unsigned integer"));
  };
}

template <class F>
Setter with(F f) {
  return f;
}

Setter uint_ref(std::function<std::size_t&(RunConfig&)> ref) {
  return [ref](RunConfig& c, const Entry& e, const std::string& k) {
    ref(c) = static_cast<std::size_t>(parse_integer<std::uint64_t>(e, k, "an unsigned integer"));
  };
}
Setter double_ref(std::function<double&(RunConfig&)> ref) {
  return [ref](RunConfig& c, const Entry& e, const std::string& k) { ref(c) = parse_double(e, k); };
}
Setter bool_ref(std::function<bool&(RunConfig&)> ref) {
  return [ref](RunConfig& c, const Entry& e, const std::string& k) { ref(c) = parse_bool(e, k); };
}
Setter string_ref(std::function<std::string&(RunConfig&)> ref) {
  return [ref](RunConfig& c, const Entry& e, const std::string&) { ref(c) = e.value; };
}

const std::map<std::string, Key>& schema() {
  static const std::map<std::string, Key> s = [] {
    std::map<std::string, Key> m;
    m["run.seed"] = {"0", uint_into(&RunConfig::seed)};
    m["run.threads"] = {"1", with([](RunConfig& c, const Entry& e, const std::string& k) {
                          c.threads = parse_integer<int>(e, k, "an integer");
                          if (c.threads < 1) fail(e.where, "run.threads must be at least 1");
                        })};
    m["run.output_dir"] = {"out", string_ref([](RunConfig& c) -> std::string& { return c.output_dir; })};
    m["run.data_dir"] = {".", string_ref([](RunConfig& c) -> std::string& { return c.data_dir; })};

    // shards and mixture are resolved after all keys are read
    m["corpus.shards"] = {"", [](RunConfig&, const Entry&, const std::string&) {}};
    m["corpus.mixture"] = {"", [](RunConfig&, const Entry&, const std::string&) {}};
    m["corpus.min_tokens"] = {"100", uint_into(&RunConfig::min_tokens)};
    m["corpus.chunks"] = {"1", uint_into(&RunConfig::chunks)};
    m["corpus.chunk_index"] = {"0", uint_into(&RunConfig::chunk_index)};

    m["tokenizer.vocab_size"] = {"512", uint_into(&RunConfig::vocab_size)};
    m["tokenizer.sample_docs"] = {"0", uint_into(&RunConfig::sample_docs)};
    m["tokenizer.max_space_run"] = {"16", with([](RunConfig& c, const Entry& e, const std::string& k) {
                                      c.max_space_run = parse_integer<int>(e, k, "an integer");
                                    })};

    auto mref = [](std::size_t model::ModelConfig::*f) {
      return uint_ref([f](RunConfig& c) -> std::size_t& { return c.model.*f; });
    };
    m["model.vocab_size"] = {"0", mref(&model::ModelConfig::vocab_size)};
    m["model.d_model"] = {"64", mref(&model::ModelConfig::d_model)};
    m["model.n_heads"] = {"4", mref(&model::ModelConfig::n_heads)};
    m["model.n_layers"] = {"2", mref(&model::ModelConfig::n_layers)};
    m["model.max_seq_len"] = {"0", mref(&model::ModelConfig::max_seq_len)};
    m["model.ffn_hidden"] = {"0", mref(&model::ModelConfig::ffn_hidden)};
    m["model.rms_eps"] = {"1e-5", double_ref([](RunConfig& c) -> double& { return c.model.rms_eps; })};
    m["model.rope_base"] = {"10000", double_ref([](RunConfig& c) -> double& { return c.model.rope_base; })};
    m["model.parallel_residual"] = {"false",
                                    bool_ref([](RunConfig& c) -> bool& { return c.model.parallel_residual; })};

    auto oref = [](double train::OptimizerHyper::*f) {
      return double_ref([f](RunConfig& c) -> double& { return c.optimizer.*f; });
    };
    m["optimizer.base_lr"] = {"3e-3", oref(&train::OptimizerHyper::base_lr)};
    m["optimizer.beta1"] = {"0.9", oref(&train::OptimizerHyper::beta1)};
    m["optimizer.beta2"] = {"0.99", oref(&train::OptimizerHyper::beta2)};
    m["optimizer.eps"] = {"1e-8", oref(&train::OptimizerHyper::eps)};
    m["optimizer.floor_fraction"] = {"0.1", oref(&train::OptimizerHyper::floor_fraction)};
    m["optimizer.weight_decay"] = {"0", oref(&train::OptimizerHyper::weight_decay)};
    m["optimizer.grad_clip_norm"] = {"1.0", oref(&train::OptimizerHyper::grad_clip_norm)};
    m["optimizer.warmup_steps"] = {"0", uint_ref([](RunConfig& c) -> std::size_t& { return c.optimizer.warmup_steps; })};

    m["curriculum.scale_factor"] = {"8", uint_into(&RunConfig::scale_factor)};
    m["curriculum.allow_reepoch"] = {"false", bool_ref([](RunConfig& c) -> bool& { return c.allow_reepoch; })};
    m["curriculum.spike_window"] = {"32", uint_into(&RunConfig::spike_window)};
    m["curriculum.spike_threshold"] = {"6", double_ref([](RunConfig& c) -> double& { return c.spike_threshold; })};

    m["eval.heldout"] = {"", string_ref([](RunConfig& c) -> std::string& { return c.heldout; })};
    m["eval.bucket_size"] = {"32", uint_into(&RunConfig::bucket_size)};

    m["finetune.data"] = {"", string_ref([](RunConfig& c) -> std::string& { return c.finetune_data; })};
    m["finetune.base"] = {"", [](RunConfig&, const Entry&, const std::string&) {}};
    m["finetune.epochs"] = {"3", uint_ref([](RunConfig& c) -> std::size_t& { return c.finetune.epochs; })};
    m["finetune.batch_size"] = {"16", uint_ref([](RunConfig& c) -> std::size_t& { return c.finetune.batch_size; })};
    m["finetune.seq_len"] = {"1024", uint_ref([](RunConfig& c) -> std::size_t& { return c.finetune.seq_len; })};
    m["finetune.base_lr"] = {"2e-5", double_ref([](RunConfig& c) -> double& { return c.finetune.optimizer.base_lr; })};
    m["finetune.floor_fraction"] = {
        "0.1", double_ref([](RunConfig& c) -> double& { return c.finetune.optimizer.floor_fraction; })};
    m["finetune.shuffle_seed"] = {"0", with([](RunConfig& c, const Entry& e, const std::string& k) {
                                    c.finetune.shuffle_seed = parse_integer<std::uint64_t>(e, k, "an unsigned integer");
                                  })};

    m["longqa.documents"] = {"", string_ref([](RunConfig& c) -> std::string& { return c.qa_documents; })};
    m["longqa.transcript"] = {"", string_ref([](RunConfig& c) -> std::string& { return c.qa_transcript; })};
    m["longqa.setting"] = {"qg_passage", with([](RunConfig& c, const Entry& e, const std::string&) {
                             try {
                               c.qa_setting = longqa::setting_from_string(e.value);
                             } catch (const Error&) {
                               fail(e.where, "longqa.setting must be qg_passage or qg_summary, got '" + e.value + "'");
                             }
                           })};
    m["longqa.models"] = {"model", with([](RunConfig& c, const Entry& e, const std::string&) {
                            c.qa_models = split_list(e.value);
                            if (c.qa_models.empty()) fail(e.where, "longqa.models must name at least one model");
                          })};
    m["longqa.scale_factor"] = {"1", uint_into(&RunConfig::qa_scale_factor)};
    m["longqa.base_url"] = {"https://api.openai.com",
                            string_ref([](RunConfig& c) -> std::string& { return c.qa_http.base_url; })};
    m["longqa.model"] = {"gpt-4", string_ref([](RunConfig& c) -> std::string& { return c.qa_http.model; })};
    m["longqa.api_key_env"] = {"STAGELM_LLM_API_KEY",
                               string_ref([](RunConfig& c) -> std::string& { return c.qa_http.api_key_env; })};

    m["carbon.device_hours"] = {"0", double_ref([](RunConfig& c) -> double& { return c.carbon.device_hours; })};
    m["carbon.device_power_w"] = {"0", double_ref([](RunConfig& c) -> double& { return c.carbon.device_power_w; })};
    m["carbon.pue"] = {"1.10", double_ref([](RunConfig& c) -> double& { return c.carbon.pue; })};
    m["carbon.carbon_intensity"] = {"0",
                                    double_ref([](RunConfig& c) -> double& { return c.carbon.carbon_intensity; })};
    return m;
  }();
  return s;
}

const std::vector<std::string> kStageKeys{"seq_len", "token_budget", "batch_size"};

bool is_stage_section(const std::string& section, std::size_t* index) {
  if (section.rfind("stage.", 0) != 0) return false;
  const std::string n = section.substr(6);
  std::size_t v = 0;
  const auto r = std::from_chars(n.data(), n.data() + n.size(), v);
  if (n.empty() || r.ec != std::errc() || r.ptr != n.data() + n.size() || v == 0) return false;
  *index = v;
  return true;
}

void put(std::map<std::string, Entry>& entries, const std::string& section, const std::string& key, Entry e) {
  const std::string full = section + "." + key;
  std::size_t idx = 0;
  const bool stage = is_stage_section(section, &idx);
  if (stage ? std::find(kStageKeys.begin(), kStageKeys.end(), key) == kStageKeys.end() : !schema().count(full)) {
    fail(e.where, "unknown key '" + key + "' in [" + section + "]");
  }
  entries[full] = std::move(e);
}

std::string resolve(const std::string& dir, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(dir) / p).lexically_normal().string();
}

}  // namespace

std::string RunConfig::out_path(const std::string& name) const { return (fs::path(output_dir) / name).string(); }

RunConfig parse_config_text(const std::string& text, const std::string& origin,
                            const std::vector<std::string>& overrides) {
  std::map<std::string, Entry> entries;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  std::map<std::string, std::string> seen_sections;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(where, "malformed section header '" + s + "'");
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      std::size_t idx = 0;
      bool known = is_stage_section(section, &idx);
      for (const auto& [k, _] : schema()) known = known || k.rfind(section + ".", 0) == 0;
      if (!known) fail(where, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(where, "expected key = value");
    if (section.empty()) fail(where, "key outside of any section");
    const std::string key = trim(std::string_view(s).substr(0, eq));
    std::string value = trim(std::string_view(s).substr(eq + 1));
    const auto hash = value.find(" #");
    if (hash != std::string::npos) value = trim(value.substr(0, hash));
    if (entries.count(section + "." + key)) fail(where, "duplicate key '" + key + "' in [" + section + "]");
    put(entries, section, key, {value, where});
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.rfind('.', eq);
    if (eq == std::string::npos || dot == std::string::npos || dot == 0) {
      fail("--set " + o, "expected section.key=value");
    }
    put(entries, o.substr(0, dot), trim(o.substr(dot + 1, eq - dot - 1)), {trim(o.substr(eq + 1)), "--set " + o});
  }

  RunConfig c;
  std::vector<std::string> canon;
  for (const auto& [full, key] : schema()) {
    auto it = entries.find(full);
    const Entry e = it != entries.end() ? it->second : Entry{key.def, "default " + full};
    key.set(c, e, full);
    if (full != "run.threads" && full != "run.output_dir" && full != "run.data_dir") canon.push_back(full + "=" + e.value);
  }

  // stages must be numbered 1..n without gaps
  std::map<std::size_t, StageConfig> stages;
  std::map<std::size_t, std::string> stage_where;
  for (const auto& [full, e] : entries) {
    std::size_t idx = 0;
    const auto dot = full.rfind('.');
    if (!is_stage_section(full.substr(0, dot), &idx)) continue;
    const std::string key = full.substr(dot + 1);
    auto& st = stages[idx];
    stage_where.emplace(idx, e.where);
    const auto v = parse_integer<std::uint64_t>(e, full, "an unsigned integer");
    if (key == "seq_len") st.seq_len = v;
    if (key == "token_budget") st.token_budget = v;
    if (key == "batch_size") st.batch_size = v;
    canon.push_back(full + "=" + e.value);
  }
  std::size_t expect = 1;
  for (const auto& [idx, st] : stages) {
    if (idx != expect) fail(stage_where[idx], "stage sections must be numbered 1.." + std::to_string(stages.size()));
    if (st.seq_len == 0 || st.token_budget == 0 || st.batch_size == 0) {
      fail(stage_where[idx], "[stage." + std::to_string(idx) + "] needs positive seq_len, token_budget and batch_size");
    }
    if (!c.stages.empty() && st.seq_len <= c.stages.back().seq_len) {
      fail(stage_where[idx], "stage sequence lengths must strictly increase");
    }
    c.stages.push_back(st);
    ++expect;
  }

  auto entry = [&](const std::string& k) {
    auto it = entries.find(k);
    return it != entries.end() ? it->second : Entry{schema().at(k).def, "default " + k};
  };
  // corpus.shards = source=path, ...
  {
    const Entry e = entry("corpus.shards");
    for (const auto& item : split_list(e.value)) {
      const auto eq = item.find('=');
      if (eq == std::string::npos || eq == 0) fail(e.where, "corpus.shards entries must read source=path, got '" + item + "'");
      c.shards.push_back({resolve(c.data_dir, trim(item.substr(eq + 1))), trim(item.substr(0, eq))});
    }
  }
  {
    const Entry e = entry("corpus.mixture");
    for (const auto& item : split_list(e.value)) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) fail(e.where, "corpus.mixture entries must read source=proportion, got '" + item + "'");
      const std::string src = trim(item.substr(0, eq));
      const Entry w{trim(item.substr(eq + 1)), e.where};
      const bool known = std::any_of(c.shards.begin(), c.shards.end(), [&](const auto& s) { return s.source == src; });
      if (!known) fail(e.where, "corpus.mixture references unknown source '" + src + "'");
      c.mixture.entries.push_back({src, parse_double(w, "corpus.mixture")});
    }
    c.mixture.seed = c.seed;
    if (!c.mixture.entries.empty()) {
      try {
        c.mixture.validate();
      } catch (const Error& err) {
        fail(e.where, err.what());
      }
    }
  }
  {
    const Entry e = entry("finetune.base");
    if (!e.value.empty()) {
      std::size_t idx = 0;
      if (!is_stage_section(e.value, &idx) || idx > c.stages.size()) {
        fail(e.where, "finetune.base references unknown stage '" + e.value + "'");
      }
      c.finetune_base_stage = idx;
    }
  }
  if (c.chunk_index >= std::max<std::size_t>(c.chunks, 1)) fail(entry("corpus.chunk_index").where, "chunk_index must be below chunks");
  c.heldout = resolve(c.data_dir, c.heldout);
  c.finetune_data = resolve(c.data_dir, c.finetune_data);
  c.qa_documents = resolve(c.data_dir, c.qa_documents);
  c.qa_transcript = resolve(c.data_dir, c.qa_transcript);
  c.finetune.optimizer.beta1 = c.optimizer.beta1;
  c.finetune.optimizer.beta2 = c.optimizer.beta2;
  c.finetune.optimizer.eps = c.optimizer.eps;
  c.finetune.optimizer.grad_clip_norm = c.optimizer.grad_clip_norm;
  if (c.model.max_seq_len == 0 && !c.stages.empty()) c.model.max_seq_len = c.stages.back().seq_len;

  std::sort(canon.begin(), canon.end());
  for (const auto& l : canon) c.canonical += l + "\n";
  c.hash = hex64(fnv1a64(c.canonical));
  return c;
}

RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "config", "cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path, overrides);
}

}  // namespace stagelm::config
