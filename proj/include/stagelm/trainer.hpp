#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stagelm/corpus.hpp"
#include "stagelm/model.hpp"
#include "stagelm/rng.hpp"

namespace stagelm::train {

using model::Gradients;
using model::ModelConfig;
using model::ModelParams;

struct OptimizerHyper {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double base_lr = 3e-4;
  double floor_fraction = 0.1;
  std::size_t warmup_steps = 0;
  double weight_decay = 0.0;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const;
};

// Linear warmup to base_lr, then cosine decay to floor_fraction·base_lr at
// total_steps.
double cosine_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr,
                 double floor_fraction);

// Learning rate for update `step` (0-based) of a run of `total_updates`
// updates: the first update sees cosine_lr(0) and the last the floor.
double scheduled_lr(std::uint64_t step, std::uint64_t total_updates, const OptimizerHyper& hyper);

// Scales grads in place when their global L2 norm exceeds max_norm. Returns
// the norm before clipping.
template <class T>
double clip_gradients(Gradients<T>& grads, double max_norm);

template <class T>
double global_norm(const Gradients<T>& grads);

struct TrainEvent {
  std::uint64_t step = 0;
  std::string kind;  // nan-grad, spike, warning, epoch, checkpoint
  std::string detail;
};

struct LossRecord {
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  std::size_t stage = 0;
  std::size_t seq_len = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline constexpr std::size_t kLossHistoryCapacity = 1024;

struct TrainState {
  ModelConfig cfg;
  ModelParams<float> params;
  Gradients<float> adam_m;
  Gradients<float> adam_v;
  std::uint64_t step = 0;        // training steps taken, including aborted ones
  std::uint64_t adam_t = 0;      // applied optimizer updates (bias correction)
  std::uint64_t tokens_seen = 0;
  std::int64_t stage_index = -1;  // stage currently running or last finished
  std::uint64_t stage_step = 0;   // steps completed inside stage_index
  std::uint64_t stage_cursor = 0; // sequences consumed in the current epoch
  std::uint64_t stage_epoch = 0;
  std::uint64_t epoch_seed = 0;
  bool stage_done = false;
  std::size_t last_seq_len = 0;
  Rng rng;
  std::vector<double> loss_history;  // most recent kLossHistoryCapacity losses
  std::string config_hash;
  std::vector<TrainEvent> events;  // observational, not checkpointed

  static TrainState fresh(const ModelConfig& cfg, std::uint64_t seed);
};

// Bias-corrected Adam with decoupled weight decay. Non-finite gradients abort
// the update (params and moments untouched) and record a nan-grad event;
// returns whether the update was applied.
bool adam_step(TrainState& state, const Gradients<float>& grads, const OptimizerHyper& hyper, double lr);

struct SpikeEvent {
  std::size_t index = 0;
  double loss = 0.0;
  double median = 0.0;
  double mad = 0.0;
  double magnitude = 0.0;  // (loss - median) / mad
};

// Flags loss[i] > median + threshold·MAD of the preceding `window` values.
// MAD is the raw median absolute deviation. window must be at least 8.
std::vector<SpikeEvent> monitor_spikes(std::span<const double> losses, std::size_t window,
                                       double threshold_sigma);

struct StageSpec {
  std::size_t seq_len = 0;
  std::uint64_t token_budget = 0;
  std::size_t batch_size = 1;  // sequences per step
  const corpus::PackedDataset* dataset = nullptr;
};

struct StagePlan {
  std::vector<StageSpec> stages;
  std::size_t scale_factor = 8;

  void validate() const;
  std::uint64_t steps_in(std::size_t stage) const;
  std::uint64_t total_steps() const;
};

struct RunOptions {
  int threads = 1;
  bool allow_reepoch = false;
  std::size_t spike_window = 32;
  double spike_threshold = 6.0;
  std::uint64_t schedule_total_steps = 0;  // 0: use the stage's own step count
  std::optional<std::uint64_t> max_steps;  // stop early (resume testing)
  std::string checkpoint_path;             // written when the stage completes
  std::function<void(const LossRecord&)> on_record;
};

// One optimizer step on a prepared batch. Returns the batch loss.
double train_step(TrainState& state, std::span<const model::SupervisedSequence> batch,
                  const OptimizerHyper& hyper, double lr, int threads);

// Runs (or resumes) stage `stage_number` of a plan. Returns the number of
// steps executed in this call.
std::uint64_t run_stage(TrainState& state, const StageSpec& stage, std::size_t stage_number,
                        const OptimizerHyper& hyper, const RunOptions& opts = {});

void save_checkpoint(const TrainState& state, const std::string& path);
// When expected is given the stored config must match it (kShapeMismatch).
TrainState load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

// append adds rows to an existing file (header only when it is empty).
void write_loss_csv(std::span<const LossRecord> records, const std::string& path, bool append = false);

}  // namespace stagelm::train
