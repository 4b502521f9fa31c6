// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rnntaux/data.hpp"
#include "rnntaux/losses.hpp"
#include "rnntaux/model.hpp"

namespace rnntaux::train {

using diffcore::NDArray;
using model::ParamSet;

struct TrainConfig {
  losses::Mode mode = losses::Mode::Baseline;
  losses::LossWeights weights;
  std::size_t batch_size = 4;
  std::size_t max_steps = 2000;
  double peak_lr = 1e-3;
  // stage lengths; zeros derive the 10%/40%/50% split of max_steps
  std::size_t warmup_steps = 0;
  std::size_t hold_steps = 0;
  std::size_t decay_steps = 0;
  double floor_lr_ratio = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip_norm = 5.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 250;
  bool kl_gate_decoder_on_primary = false;
  // frequency/time masking of training features; 0 masks = off. Mask draws
  // are keyed on (seed, step, batch slot), so pausing and resuming replays
  // the same masks.
  std::size_t augment_freq_masks = 0;
  std::size_t augment_max_freq_width = 0;
  std::size_t augment_time_masks = 0;
  std::size_t augment_max_time_width = 0;

  bool augment_enabled() const {
    return augment_freq_masks > 0 || augment_time_masks > 0;
  }
  void finalize_stages();  // fills zero stage lengths from max_steps
  void validate() const;
};

using GradMap = std::map<std::string, NDArray>;

struct AdamState {
  GradMap m;
  GradMap v;
  std::size_t step = 0;
};

// Bias-corrected per-coordinate update; moments are created on first use.
void adam_step(ParamSet& params, const GradMap& grads, AdamState& state, double lr,
               double beta1, double beta2, double epsilon);

// Warmup ramps linearly from floor to peak, hold stays at peak, decay is a
// geometric interpolation reaching the floor exactly at the final step.
double tri_stage_lr(std::size_t step, const TrainConfig& config);

// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm. Non-finite gradients after clipping raise.
double clip_gradients(GradMap& grads, double max_norm);

struct MetricEntry {
  std::size_t step = 0;
  double lr = 0.0;
  losses::LossReport report;
  std::optional<double> valid_loss;
  std::optional<double> valid_wer;
};

struct Checkpoint {
  std::size_t step = 0;
  ParamSet params;
  AdamState adam;
  std::string model_config_json;
  std::string train_config_json;
  std::vector<MetricEntry> history;
};

// Single little-endian binary file: magic "RNTAUX01", then length-prefixed
// named records. Parameters and moments round-trip bitwise.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// One JSON object per metric entry, for JSON-lines logs.
std::string metric_json_line(const MetricEntry& entry);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricEntry> log;
};

// Runs (or resumes) the optimization loop. Batches are drawn by a
// counter-based generator keyed on (seed, step), so a resumed run replays
// the uninterrupted trajectory bitwise. limit_steps > 0 pauses after that
// many steps of this call, leaving a resumable checkpoint. Aborts with a
// runtime error on a non-finite loss, naming the step.
TrainResult train(const data::Dataset& train_set, const data::Dataset* valid_set,
                  const model::ModelConfig& mconfig, const TrainConfig& tconfig,
                  const std::optional<ParamSet>& initial = std::nullopt,
                  const Checkpoint* resume = nullptr, std::size_t jobs = 1,
                  std::size_t limit_steps = 0);

struct CePretrainResult {
  GradMap encoder;             // encoder arrays only; the head is discarded
  double frame_accuracy = 0.0;  // training-set accuracy of the discarded head
};

// Frame-state cross-entropy pretraining of the encoder: a temporary linear
// head on the top layer is trained jointly and discarded.
CePretrainResult ce_pretrain(const data::Dataset& train_set,
                             const model::ModelConfig& mconfig,
                             const TrainConfig& tconfig, std::size_t jobs = 1);

// Mean greedy token-WER and mean total loss over a dataset.
double dataset_wer(const data::Dataset& ds, const ParamSet& params,
                   const model::ModelConfig& mconfig, std::size_t jobs = 1);
double dataset_loss(const data::Dataset& ds, const ParamSet& params,
                    const model::ModelConfig& mconfig, losses::Mode mode,
                    const losses::LossWeights& weights, std::size_t jobs = 1);

// Frame accuracy of a linear state head; used by pretraining diagnostics.
double frame_accuracy(const data::Dataset& ds, const ParamSet& encoder_params,
                      const GradMap& head, const model::ModelConfig& mconfig);

}  // namespace rnntaux::train
