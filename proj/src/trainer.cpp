#include "stagelm/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "stagelm/error.hpp"

namespace stagelm::train {
namespace {

constexpr std::string_view kModule = "trainer";
constexpr std::string_view kMagic = "ckpt v1";
constexpr std::string_view kEndMarker = "ckpt-end";

[[noreturn]] void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(kModule), msg);
}

double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t epoch, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (epoch > 0) {
    Rng rng(seed);
    fisher_yates(order, rng);
  }
  return order;
}

// ---- checkpoint encoding ---------------------------------------------------

void put_u8(std::ostream& o, std::uint8_t v) { o.put(static_cast<char>(v)); }
void put_u32(std::ostream& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::ostream& o, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) o.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  std::istream& in;
  const std::string& path;

  void bytes(char* dst, std::size_t n) {
    if (!in.read(dst, static_cast<std::streamsize>(n))) fail(ErrorCode::kTruncated, "truncated checkpoint " + path);
  }
  std::uint64_t uint(int width) {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = width - 1; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::string line() {
    std::string s;
    if (!std::getline(in, s)) fail(ErrorCode::kTruncated, "truncated checkpoint " + path);
    return s;
  }
};

void write_tensor(std::ostream& o, const std::string& name, const model::Matrix<float>& m) {
  put_u32(o, static_cast<std::uint32_t>(name.size()));
  o.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u8(o, 1);  // f32
  put_u32(o, 2);
  put_u64(o, static_cast<std::uint64_t>(m.rows()));
  put_u64(o, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) put_u32(o, std::bit_cast<std::uint32_t>(m.data()[i]));
}

std::string hexfloat(double v) {
  std::ostringstream s;
  s << std::hexfloat << v;
  return s.str();
}

std::string config_lines(const ModelConfig& c) {
  std::ostringstream s;
  s << "vocab_size=" << c.vocab_size << "\n"
    << "d_model=" << c.d_model << "\n"
    << "n_heads=" << c.n_heads << "\n"
    << "n_layers=" << c.n_layers << "\n"
    << "max_seq_len=" << c.max_seq_len << "\n"
    << "ffn_hidden=" << c.ffn() << "\n"
    << "rms_eps=" << hexfloat(c.rms_eps) << "\n"
    << "rope_base=" << hexfloat(c.rope_base) << "\n"
    << "parallel_residual=" << (c.parallel_residual ? 1 : 0) << "\n";
  return s.str();
}

bool same_config(const ModelConfig& a, const ModelConfig& b) { return config_lines(a) == config_lines(b); }

}  // namespace

void OptimizerHyper::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::kInvalidArgument, m); };
  if (!(beta1 > 0 && beta1 < 1)) bad("beta1 must lie in (0,1)");
  if (!(beta2 > 0 && beta2 < 1)) bad("beta2 must lie in (0,1)");
  if (!(eps > 0)) bad("eps must be positive");
  if (!(base_lr > 0)) bad("base_lr must be positive");
  if (!(floor_fraction > 0 && floor_fraction <= 1)) bad("floor_fraction must lie in (0,1]");
  if (weight_decay < 0) bad("weight_decay must be non-negative");
}

double cosine_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr,
                 double floor_fraction) {
  if (warmup_steps >= total_steps && total_steps > 0) {
    fail(ErrorCode::kInvalidArgument, "warmup_steps must be smaller than total_steps");
  }
  if (step > total_steps) fail(ErrorCode::kInvalidArgument, "step beyond total_steps");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double floor = floor_fraction * base_lr;
  if (total_steps == 0) return base_lr;
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return floor + (base_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double scheduled_lr(std::uint64_t step, std::uint64_t total_updates, const OptimizerHyper& hyper) {
  if (total_updates == 0) fail(ErrorCode::kInvalidArgument, "schedule has no updates");
  const std::uint64_t last = total_updates - 1;
  if (hyper.warmup_steps > 0 && hyper.warmup_steps >= last) {
    fail(ErrorCode::kConfig, "warmup_steps " + std::to_string(hyper.warmup_steps) + " leaves no decay phase in " +
                                 std::to_string(total_updates) + " updates");
  }
  return cosine_lr(std::min(step, last), hyper.warmup_steps, last, hyper.base_lr, hyper.floor_fraction);
}

template <class T>
double global_norm(const Gradients<T>& grads) {
  double ss = 0.0;
  grads.for_each([&](const std::string&, const model::Matrix<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = static_cast<double>(m.data()[i]);
      ss += v * v;
    }
  });
  return std::sqrt(ss);
}

template <class T>
double clip_gradients(Gradients<T>& grads, double max_norm) {
  if (!(max_norm > 0)) fail(ErrorCode::kInvalidArgument, "max_norm must be positive");
  const double norm = global_norm(grads);
  if (std::isfinite(norm) && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    grads.for_each([&](const std::string&, model::Matrix<T>& m) { m *= scale; });
  }
  return norm;
}

template double global_norm<float>(const Gradients<float>&);
template double global_norm<double>(const Gradients<double>&);
template double clip_gradients<float>(Gradients<float>&, double);
template double clip_gradients<double>(Gradients<double>&, double);

TrainState TrainState::fresh(const ModelConfig& cfg, std::uint64_t seed) {
  TrainState s;
  s.cfg = cfg;
  s.rng.seed(seed);
  s.params = model::init_params<float>(cfg, s.rng);
  s.adam_m = ModelParams<float>::zeros(cfg);
  s.adam_v = ModelParams<float>::zeros(cfg);
  return s;
}

bool adam_step(TrainState& state, const Gradients<float>& grads, const OptimizerHyper& hyper, double lr) {
  bool finite = true;
  grads.for_each([&](const std::string&, const model::Matrix<float>& m) {
    if (finite && !m.allFinite()) finite = false;
  });
  if (!finite) {
    state.events.push_back({state.step, "nan-grad", "non-finite gradient; update skipped"});
    return false;
  }
  const std::uint64_t t = state.adam_t + 1;
  const float b1 = static_cast<float>(hyper.beta1), b2 = static_cast<float>(hyper.beta2);
  const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(hyper.beta1, static_cast<double>(t))));
  const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(hyper.beta2, static_cast<double>(t))));
  const float flr = static_cast<float>(lr), eps = static_cast<float>(hyper.eps);
  const float decay = static_cast<float>(lr * hyper.weight_decay);

  std::vector<const model::Matrix<float>*> g;
  grads.for_each([&](const std::string&, const model::Matrix<float>& m) { g.push_back(&m); });
  std::vector<model::Matrix<float>*> m1, m2;
  state.adam_m.for_each([&](const std::string&, model::Matrix<float>& m) { m1.push_back(&m); });
  state.adam_v.for_each([&](const std::string&, model::Matrix<float>& m) { m2.push_back(&m); });
  std::size_t k = 0;
  state.params.for_each([&](const std::string&, model::Matrix<float>& p) {
    float* pd = p.data();
    float* md = m1[k]->data();
    float* vd = m2[k]->data();
    const float* gd = g[k]->data();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      md[i] = b1 * md[i] + (1.0f - b1) * gd[i];
      vd[i] = b2 * vd[i] + (1.0f - b2) * gd[i] * gd[i];
      const float mhat = md[i] * c1;
      const float vhat = vd[i] * c2;
      pd[i] = pd[i] - flr * mhat / (std::sqrt(vhat) + eps) - decay * pd[i];
    }
    ++k;
  });
  state.adam_t = t;
  return true;
}

std::vector<SpikeEvent> monitor_spikes(std::span<const double> losses, std::size_t window, double threshold_sigma) {
  if (window < 8) fail(ErrorCode::kInvalidArgument, "spike window must be at least 8");
  std::vector<SpikeEvent> out;
  for (std::size_t i = window; i < losses.size(); ++i) {
    std::vector<double> w(losses.begin() + static_cast<std::ptrdiff_t>(i - window),
                          losses.begin() + static_cast<std::ptrdiff_t>(i));
    const double med = median_of(w);
    for (auto& x : w) x = std::abs(x - med);
    const double mad = median_of(w);
    if (losses[i] > med + threshold_sigma * mad && losses[i] > med) {
      out.push_back({i, losses[i], med, mad, mad > 0 ? (losses[i] - med) / mad : INFINITY});
    }
  }
  return out;
}

void StagePlan::validate() const {
  if (stages.empty()) fail(ErrorCode::kConfig, "stage plan is empty");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.token_budget == 0) fail(ErrorCode::kConfig, "stage " + std::to_string(i) + " has a zero token budget");
    if (s.batch_size == 0) fail(ErrorCode::kConfig, "stage " + std::to_string(i) + " has a zero batch size");
    if (i > 0 && s.seq_len <= stages[i - 1].seq_len) {
      fail(ErrorCode::kStageOrder, "stage sequence lengths must strictly increase");
    }
    if (s.dataset && s.dataset->seq_len != s.seq_len) {
      fail(ErrorCode::kConfig, "stage " + std::to_string(i) + " dataset seq_len differs from the stage");
    }
  }
}

std::uint64_t StagePlan::steps_in(std::size_t stage) const {
  const auto& s = stages.at(stage);
  return s.token_budget / (static_cast<std::uint64_t>(s.batch_size) * s.seq_len);
}

std::uint64_t StagePlan::total_steps() const {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) n += steps_in(i);
  return n;
}

double train_step(TrainState& state, std::span<const model::SupervisedSequence> batch, const OptimizerHyper& hyper,
                  double lr, int threads) {
  Gradients<float> grads;
  const float loss = model::backward_batch(state.params, state.cfg, batch, grads, threads);
  if (hyper.grad_clip_norm > 0) clip_gradients(grads, hyper.grad_clip_norm);
  adam_step(state, grads, hyper, lr);
  return static_cast<double>(loss);
}

std::uint64_t run_stage(TrainState& state, const StageSpec& stage, std::size_t stage_number,
                        const OptimizerHyper& hyper, const RunOptions& opts) {
  hyper.validate();
  if (!stage.dataset) fail(ErrorCode::kConfig, "stage has no dataset");
  const auto& ds = *stage.dataset;
  if (ds.seq_len != stage.seq_len) fail(ErrorCode::kConfig, "dataset seq_len does not match the stage");
  if (stage.seq_len < 2 || stage.seq_len - 1 > state.cfg.max_seq_len) {
    fail(ErrorCode::kConfig, "stage seq_len " + std::to_string(stage.seq_len) + " does not fit max_seq_len");
  }
  if (stage.batch_size == 0) fail(ErrorCode::kConfig, "batch size must be positive");

  const bool resuming = state.stage_index == static_cast<std::int64_t>(stage_number) && !state.stage_done;
  if (!resuming) {
    if (static_cast<std::int64_t>(stage_number) != state.stage_index + 1) {
      fail(ErrorCode::kStageOrder, "stage " + std::to_string(stage_number) + " cannot follow stage " +
                                       std::to_string(state.stage_index));
    }
    if (stage.seq_len <= state.last_seq_len) {
      fail(ErrorCode::kStageOrder, "stage seq_len " + std::to_string(stage.seq_len) +
                                       " does not exceed the previous stage's " + std::to_string(state.last_seq_len));
    }
    state.stage_index = static_cast<std::int64_t>(stage_number);
    state.stage_step = 0;
    state.stage_cursor = 0;
    state.stage_epoch = 0;
    state.epoch_seed = 0;
    state.stage_done = false;
    state.last_seq_len = stage.seq_len;
  }

  const std::uint64_t per_step = static_cast<std::uint64_t>(stage.batch_size) * stage.seq_len;
  const std::uint64_t steps_total = stage.token_budget / per_step;
  if (steps_total == 0) {
    state.events.push_back({state.step, "warning",
                            "token budget " + std::to_string(stage.token_budget) + " below one batch of " +
                                std::to_string(per_step) + " tokens; no steps run"});
  }
  const std::uint64_t sched_total = opts.schedule_total_steps ? opts.schedule_total_steps : steps_total;
  const std::size_t n = ds.sequences.size();
  if (!opts.allow_reepoch) {
    const std::uint64_t needed = (steps_total - state.stage_step) * stage.batch_size;
    const std::uint64_t available = n - std::min<std::uint64_t>(n, state.stage_cursor);
    if (needed > available) {
      const std::uint64_t short_by = (needed - available) * stage.seq_len;
      fail(ErrorCode::kDatasetExhausted, "dataset exhausted: " + std::to_string(short_by) +
                                             " tokens of the stage budget remain unserved");
    }
  } else if (n == 0 && steps_total > 0) {
    fail(ErrorCode::kDatasetExhausted, "stage dataset is empty");
  }

  std::vector<std::size_t> order = epoch_permutation(n, state.stage_epoch, state.epoch_seed);
  std::vector<model::SupervisedSequence> batch(stage.batch_size);
  std::uint64_t executed = 0;
  const std::size_t L = stage.seq_len;

  while (state.stage_step < steps_total && (!opts.max_steps || executed < *opts.max_steps)) {
    for (std::size_t b = 0; b < stage.batch_size; ++b) {
      if (state.stage_cursor >= n) {
        if (!opts.allow_reepoch) fail(ErrorCode::kDatasetExhausted, "dataset exhausted mid-stage");
        state.stage_cursor = 0;
        ++state.stage_epoch;
        state.epoch_seed = state.rng();
        order = epoch_permutation(n, state.stage_epoch, state.epoch_seed);
        state.events.push_back({state.step, "epoch", "stage " + std::to_string(stage_number) + " epoch " +
                                                         std::to_string(state.stage_epoch)});
      }
      const auto& ids = ds.sequences[order[state.stage_cursor++]].ids;
      batch[b] = {std::span<const tok::TokenId>(ids.data(), L - 1), std::span<const tok::TokenId>(ids.data() + 1, L - 1), {}};
    }
    const double lr = scheduled_lr(state.step, sched_total, hyper);
    const double loss = train_step(state, batch, hyper, lr, opts.threads);
    ++state.step;
    ++state.stage_step;
    ++executed;
    state.tokens_seen += per_step;

    state.loss_history.push_back(loss);
    if (state.loss_history.size() > kLossHistoryCapacity) state.loss_history.erase(state.loss_history.begin());
    const std::size_t h = state.loss_history.size();
    if (h > opts.spike_window && opts.spike_window >= 8) {
      const auto tail = std::span<const double>(state.loss_history).subspan(h - opts.spike_window - 1);
      for (const auto& e : monitor_spikes(tail, opts.spike_window, opts.spike_threshold)) {
        std::ostringstream msg;
        msg << "loss " << e.loss << " vs median " << e.median << " (" << e.magnitude << " MAD)";
        state.events.push_back({state.step - 1, "spike", msg.str()});
      }
    }
    if (opts.on_record) opts.on_record({state.step - 1, state.tokens_seen, stage_number, L, lr, loss});
  }

  if (state.stage_step >= steps_total) {
    state.stage_done = true;
    if (!opts.checkpoint_path.empty()) {
      save_checkpoint(state, opts.checkpoint_path);
      state.events.push_back(
          {state.step, "checkpoint", std::filesystem::path(opts.checkpoint_path).filename().string()});
    }
  }
  return executed;
}

void save_checkpoint(const TrainState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write checkpoint " + path);
  out << kMagic << "\n" << config_lines(state.cfg);
  out << "step=" << state.step << "\n"
      << "adam_t=" << state.adam_t << "\n"
      << "tokens_seen=" << state.tokens_seen << "\n"
      << "stage_index=" << state.stage_index << "\n"
      << "stage_step=" << state.stage_step << "\n"
      << "stage_cursor=" << state.stage_cursor << "\n"
      << "stage_epoch=" << state.stage_epoch << "\n"
      << "epoch_seed=" << state.epoch_seed << "\n"
      << "stage_done=" << (state.stage_done ? 1 : 0) << "\n"
      << "last_seq_len=" << state.last_seq_len << "\n"
      << "config_hash=" << state.config_hash << "\n";
  out << "loss_history=";
  for (std::size_t i = 0; i < state.loss_history.size(); ++i) {
    out << (i ? "," : "") << hexfloat(state.loss_history[i]);
  }
  out << "\n";
  out << "rng=" << state.rng << "\n";

  std::vector<std::pair<std::string, const model::Matrix<float>*>> tensors;
  state.params.for_each([&](const std::string& n, const model::Matrix<float>& m) { tensors.emplace_back("params." + n, &m); });
  state.adam_m.for_each([&](const std::string& n, const model::Matrix<float>& m) { tensors.emplace_back("adam_m." + n, &m); });
  state.adam_v.for_each([&](const std::string& n, const model::Matrix<float>& m) { tensors.emplace_back("adam_v." + n, &m); });
  out << "tensors=" << tensors.size() << "\n";
  for (const auto& [name, m] : tensors) write_tensor(out, name, *m);
  out << kEndMarker;
  if (!out) fail(ErrorCode::kIo, "error while writing checkpoint " + path);
}

TrainState load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read checkpoint " + path);
  Reader rd{in, path};
  std::string magic;
  if (!std::getline(in, magic)) fail(ErrorCode::kBadMagic, "bad magic in " + path);
  if (magic != kMagic) {
    if (magic.rfind("ckpt v", 0) == 0) fail(ErrorCode::kVersionMismatch, "unsupported checkpoint version '" + magic + "'");
    fail(ErrorCode::kBadMagic, "bad magic in " + path);
  }
  std::map<std::string, std::string> kv;
  std::string tensor_count;
  while (true) {
    const std::string line = rd.line();
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::kParse, "malformed checkpoint header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    kv[key] = line.substr(eq + 1);
    if (key == "tensors") break;
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) fail(ErrorCode::kParse, "checkpoint missing key " + k);
    return it->second;
  };
  auto u64 = [&](const std::string& k) { return static_cast<std::uint64_t>(std::stoull(get(k))); };

  TrainState s;
  try {
    s.cfg.vocab_size = u64("vocab_size");
    s.cfg.d_model = u64("d_model");
    s.cfg.n_heads = u64("n_heads");
    s.cfg.n_layers = u64("n_layers");
    s.cfg.max_seq_len = u64("max_seq_len");
    s.cfg.ffn_hidden = u64("ffn_hidden");
    s.cfg.rms_eps = std::strtod(get("rms_eps").c_str(), nullptr);
    s.cfg.rope_base = std::strtod(get("rope_base").c_str(), nullptr);
    s.cfg.parallel_residual = get("parallel_residual") == "1";
    s.step = u64("step");
    s.adam_t = u64("adam_t");
    s.tokens_seen = u64("tokens_seen");
    s.stage_index = std::stoll(get("stage_index"));
    s.stage_step = u64("stage_step");
    s.stage_cursor = u64("stage_cursor");
    s.stage_epoch = u64("stage_epoch");
    s.epoch_seed = u64("epoch_seed");
    s.stage_done = get("stage_done") == "1";
    s.last_seq_len = u64("last_seq_len");
  } catch (const std::logic_error&) {
    fail(ErrorCode::kParse, "malformed numeric field in checkpoint " + path);
  }
  s.config_hash = get("config_hash");
  {
    std::istringstream hs(get("loss_history"));
    std::string item;
    while (std::getline(hs, item, ',')) s.loss_history.push_back(std::strtod(item.c_str(), nullptr));
  }
  {
    std::istringstream rs(get("rng"));
    rs >> s.rng;
    if (!rs) fail(ErrorCode::kParse, "malformed rng state in checkpoint " + path);
  }
  s.cfg.validate();
  if (expected && !same_config(*expected, s.cfg)) {
    fail(ErrorCode::kShapeMismatch, "checkpoint model config differs from the active config");
  }

  std::map<std::string, model::Matrix<float>*> slots;
  s.params = ModelParams<float>::zeros(s.cfg);
  s.adam_m = ModelParams<float>::zeros(s.cfg);
  s.adam_v = ModelParams<float>::zeros(s.cfg);
  s.params.for_each([&](const std::string& n, model::Matrix<float>& m) { slots["params." + n] = &m; });
  s.adam_m.for_each([&](const std::string& n, model::Matrix<float>& m) { slots["adam_m." + n] = &m; });
  s.adam_v.for_each([&](const std::string& n, model::Matrix<float>& m) { slots["adam_v." + n] = &m; });

  const std::uint64_t count = u64("tensors");
  if (count != slots.size()) {
    fail(ErrorCode::kShapeMismatch, "checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                                        std::to_string(slots.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = rd.uint(4);
    if (name_len > 4096) fail(ErrorCode::kParse, "implausible tensor name length in " + path);
    std::string name(name_len, '\0');
    rd.bytes(name.data(), name_len);
    const auto dtype = rd.uint(1);
    if (dtype != 1) fail(ErrorCode::kParse, "unsupported tensor dtype tag for " + name);
    const auto rank = rd.uint(4);
    if (rank != 2) fail(ErrorCode::kShapeMismatch, "tensor " + name + " has rank " + std::to_string(rank));
    const auto rows = rd.uint(8), cols = rd.uint(8);
    auto it = slots.find(name);
    if (it == slots.end()) fail(ErrorCode::kShapeMismatch, "unexpected tensor " + name);
    auto& m = *it->second;
    if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols())) {
      fail(ErrorCode::kShapeMismatch, "tensor " + name + " is " + std::to_string(rows) + "x" + std::to_string(cols) +
                                          ", config implies " + std::to_string(m.rows()) + "x" +
                                          std::to_string(m.cols()));
    }
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      m.data()[k] = std::bit_cast<float>(static_cast<std::uint32_t>(rd.uint(4)));
    }
  }
  std::string end(kEndMarker.size(), '\0');
  rd.bytes(end.data(), end.size());
  if (end != kEndMarker) fail(ErrorCode::kTruncated, "checkpoint end marker missing in " + path);
  return s;
}

void write_loss_csv(std::span<const LossRecord> records, const std::string& path, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  if (!append || out.tellp() == 0) out << "step,tokens_seen,stage,seq_len,lr,loss\n";
  char buf[64];
  for (const auto& r : records) {
    out << r.step << "," << r.tokens_seen << "," << r.stage << "," << r.seq_len << ",";
    std::snprintf(buf, sizeof buf, "%.9g,%.9g", r.lr, r.loss);
    out << buf << "\n";
  }
}

}  // namespace stagelm::train
