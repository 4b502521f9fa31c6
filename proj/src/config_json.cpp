// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/config_json.hpp"

#include "rnntaux/common.hpp"
#include "rnntaux/losses.hpp"
#include "rnntaux/train.hpp"

namespace rnntaux::config {

using detail::cat;

void require_known_keys(const json& j, const std::set<std::string>& allowed,
                        const std::string& context) {
  if (!j.is_object()) {
    throw std::invalid_argument(cat("config: ", context, " must be an object"));
  }
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw std::invalid_argument(cat("config: unknown key '", key, "' in ", context));
    }
  }
}

namespace {

template <class T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    out = j.at(key).get<T>();
  }
}

void maybe_set(const json& j, const char* key, std::set<std::size_t>& out) {
  if (j.contains(key)) {
    out.clear();
    for (const auto& v : j.at(key)) {
      out.insert(v.get<std::size_t>());
    }
  }
}

}  // namespace

json to_json(const model::ModelConfig& c) {
  return json{{"input_dim", c.input_dim},
              {"encoder_layers", c.encoder_layers},
              {"encoder_hidden", c.encoder_hidden},
              {"subsample_after", c.subsample_after},
              {"pred_layers", c.pred_layers},
              {"pred_hidden", c.pred_hidden},
              {"joint_hidden", c.joint_hidden},
              {"vocab_size", c.vocab_size},
              {"aux_taps", c.aux_taps},
              {"ce_taps", c.ce_taps},
              {"aux_mlp_hidden", c.aux_mlp_hidden},
              {"state_vocab_size", c.state_vocab_size}};
}

model::ModelConfig model_config_from_json(const json& j) {
  require_known_keys(j,
                     {"input_dim", "encoder_layers", "encoder_hidden", "subsample_after",
                      "pred_layers", "pred_hidden", "joint_hidden", "vocab_size",
                      "aux_taps", "ce_taps", "aux_mlp_hidden", "state_vocab_size"},
                     "model");
  model::ModelConfig c;
  maybe(j, "input_dim", c.input_dim);
  maybe(j, "encoder_layers", c.encoder_layers);
  maybe(j, "encoder_hidden", c.encoder_hidden);
  maybe_set(j, "subsample_after", c.subsample_after);
  maybe(j, "pred_layers", c.pred_layers);
  maybe(j, "pred_hidden", c.pred_hidden);
  maybe(j, "joint_hidden", c.joint_hidden);
  maybe(j, "vocab_size", c.vocab_size);
  maybe_set(j, "aux_taps", c.aux_taps);
  maybe_set(j, "ce_taps", c.ce_taps);
  maybe(j, "aux_mlp_hidden", c.aux_mlp_hidden);
  maybe(j, "state_vocab_size", c.state_vocab_size);
  return c;
}

json to_json(const train::TrainConfig& c) {
  return json{{"mode", losses::mode_to_string(c.mode)},
              {"lambda_aux", c.weights.lambda_aux},
              {"lambda_ce", c.weights.lambda_ce},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"peak_lr", c.peak_lr},
              {"warmup_steps", c.warmup_steps},
              {"hold_steps", c.hold_steps},
              {"decay_steps", c.decay_steps},
              {"floor_lr_ratio", c.floor_lr_ratio},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"grad_clip_norm", c.grad_clip_norm},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"kl_gate_decoder_on_primary", c.kl_gate_decoder_on_primary},
              {"augment_freq_masks", c.augment_freq_masks},
              {"augment_max_freq_width", c.augment_max_freq_width},
              {"augment_time_masks", c.augment_time_masks},
              {"augment_max_time_width", c.augment_max_time_width}};
}

train::TrainConfig train_config_from_json(const json& j) {
  require_known_keys(j,
                     {"mode", "lambda_aux", "lambda_ce", "batch_size", "max_steps",
                      "peak_lr", "warmup_steps", "hold_steps", "decay_steps",
                      "floor_lr_ratio", "beta1", "beta2", "epsilon", "grad_clip_norm",
                      "seed", "eval_every", "kl_gate_decoder_on_primary",
                      "augment_freq_masks", "augment_max_freq_width",
                      "augment_time_masks", "augment_max_time_width"},
                     "train");
  train::TrainConfig c;
  if (j.contains("mode")) {
    c.mode = losses::mode_from_string(j.at("mode").get<std::string>());
  }
  maybe(j, "lambda_aux", c.weights.lambda_aux);
  maybe(j, "lambda_ce", c.weights.lambda_ce);
  maybe(j, "batch_size", c.batch_size);
  maybe(j, "max_steps", c.max_steps);
  maybe(j, "peak_lr", c.peak_lr);
  maybe(j, "warmup_steps", c.warmup_steps);
  maybe(j, "hold_steps", c.hold_steps);
  maybe(j, "decay_steps", c.decay_steps);
  maybe(j, "floor_lr_ratio", c.floor_lr_ratio);
  maybe(j, "beta1", c.beta1);
  maybe(j, "beta2", c.beta2);
  maybe(j, "epsilon", c.epsilon);
  maybe(j, "grad_clip_norm", c.grad_clip_norm);
  maybe(j, "seed", c.seed);
  maybe(j, "eval_every", c.eval_every);
  maybe(j, "kl_gate_decoder_on_primary", c.kl_gate_decoder_on_primary);
  maybe(j, "augment_freq_masks", c.augment_freq_masks);
  maybe(j, "augment_max_freq_width", c.augment_max_freq_width);
  maybe(j, "augment_time_masks", c.augment_time_masks);
  maybe(j, "augment_max_time_width", c.augment_max_time_width);
  c.finalize_stages();
  return c;
}

json to_json(const data::SyntheticTaskSpec& s) {
  return json{{"base_symbols", s.base_symbols},
              {"feature_dim", s.feature_dim},
              {"dur_min", s.dur_min},
              {"dur_max", s.dur_max},
              {"noise_std", s.noise_std},
              {"u_min", s.u_min},
              {"u_max", s.u_max},
              {"seed", s.seed},
              {"tying", data::tying_to_string(s.tying)}};
}

data::SyntheticTaskSpec task_spec_from_json(const json& j) {
  require_known_keys(j,
                     {"base_symbols", "feature_dim", "dur_min", "dur_max", "noise_std",
                      "u_min", "u_max", "seed", "tying"},
                     "data.task");
  data::SyntheticTaskSpec s;
  maybe(j, "base_symbols", s.base_symbols);
  maybe(j, "feature_dim", s.feature_dim);
  maybe(j, "dur_min", s.dur_min);
  maybe(j, "dur_max", s.dur_max);
  maybe(j, "noise_std", s.noise_std);
  maybe(j, "u_min", s.u_min);
  maybe(j, "u_max", s.u_max);
  maybe(j, "seed", s.seed);
  if (j.contains("tying")) {
    s.tying = data::tying_from_string(j.at("tying").get<std::string>());
  }
  return s;
}

}  // namespace rnntaux::config
