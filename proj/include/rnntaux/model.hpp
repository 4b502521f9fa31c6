// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rnntaux/diffcore.hpp"

namespace rnntaux::model {

using diffcore::Graph;
using diffcore::NDArray;
using diffcore::Node;

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t encoder_layers = 4;
  std::size_t encoder_hidden = 64;
  std::set<std::size_t> subsample_after = {1};  // stride-2 after these layers
  std::size_t pred_layers = 1;
  std::size_t pred_hidden = 64;
  std::size_t joint_hidden = 128;
  std::size_t vocab_size = 9;  // blank + labels; index 0 is blank
  std::set<std::size_t> aux_taps = {2};   // subset of {1..L-1}
  std::set<std::size_t> ce_taps = {2, 4};  // subset of {1..L}
  std::size_t aux_mlp_hidden = 64;
  std::size_t state_vocab_size = 72;

  void validate() const;
  // encoder layers 1..boundary are shared with the auxiliary branches
  std::size_t shared_boundary() const;
  static ModelConfig desk_default();
  static ModelConfig toy();
};

enum class Partition { EncShared, EncUpper, Decoder, AuxHead, CeHead };

const char* partition_name(Partition p);
Partition partition_of(const std::string& param_name, const ModelConfig& config);

struct ParamSet {
  std::map<std::string, NDArray> values;

  std::size_t element_count() const;
  bool same_shapes(const ParamSet& o) const;
};

ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

// Lazily materializes graph leaves for parameters; gated variants wrap the
// same leaf so the decoder can take primary-path gradients while the
// auxiliary path is blocked.
class ParamBinding {
 public:
  ParamBinding(Graph& graph, const ParamSet& params, const ModelConfig& config);

  Graph& graph() { return *graph_; }
  const ModelConfig& config() const { return *config_; }

  Node* get(const std::string& name);
  Node* get_gated(const std::string& name);
  bool touched(const std::string& name) const;

  // Redirects gated lookups to a frozen parameter copy. Forward values are
  // unchanged when the copy equals the live values; finite differences over
  // the live parameters then measure exactly what the gated backward
  // computes.
  void set_gated_override(const ParamSet* frozen) { gated_override_ = frozen; }

  // Post-backward gradient per parameter; zeros for parameters the graph
  // never touched.
  std::map<std::string, NDArray> grads() const;

 private:
  Graph* graph_;
  const ParamSet* params_;
  const ModelConfig* config_;
  const ParamSet* gated_override_ = nullptr;
  std::map<std::string, Node*> leaves_;
  std::map<std::string, Node*> gated_;
};

struct EncoderOutput {
  // h^{enc,l} for l = 1..L; layer l at index l-1, shape (T_l, hidden)
  std::vector<Node*> layers;
  // original frame index feeding each surviving position, per layer
  std::vector<std::vector<std::size_t>> frame_origin;

  std::size_t frames_out() const { return layers.back()->value.dim(0); }
  Node* top() const { return layers.back(); }
};

EncoderOutput encode(ParamBinding& pb, const NDArray& features);

// h^pred rows 0..U: row u is the state after consuming blank, y_1..y_u.
Node* predict(ParamBinding& pb, const std::vector<int>& labels);

// predict computed entirely from gated parameter lookups; used where the
// auxiliary path must not see live decoder parameters.
Node* predict_gated(ParamBinding& pb, const std::vector<int>& labels);

// (T', U+1, K) log-probabilities; feed-forward combine then log-softmax.
Node* join_grid(ParamBinding& pb, Node* enc_top, Node* pred);

// Auxiliary branch at encoder layer `tap`: one-hidden-layer MLP into the
// shared decoder; decoder parameters and the prediction output enter behind
// a closed grad-gate.
Node* aux_posterior_grid(ParamBinding& pb, const EncoderOutput& enc, std::size_t tap,
                         Node* pred);

// (T_l, |S|) frame-state log-probabilities; MLP head below the top layer,
// single linear map at the top.
Node* ce_frame_logprobs(ParamBinding& pb, const EncoderOutput& enc, std::size_t tap);

// join_grid with the decoder parameters and prediction output behind a
// closed grad-gate; forward values match join_grid bitwise.
Node* gated_decoder_grid(ParamBinding& pb, Node* enc_top, Node* pred);

// Incremental prediction network for decoding.
struct PredictorState {
  std::vector<Node*> h;
  std::vector<Node*> c;
  Node* output = nullptr;  // (pred_hidden)
};

PredictorState predictor_start(ParamBinding& pb);
PredictorState predictor_step(ParamBinding& pb, const PredictorState& state, int label);

// Single-cell joint combine from cached projections A_t = enc_t * W_enc and
// B = pred * W_pred; returns (K) log-probabilities.
Node* joint_row_from_proj(ParamBinding& pb, Node* enc_proj_row, Node* pred_proj);
Node* enc_joint_proj(ParamBinding& pb, Node* enc_top);   // (T', J)
Node* pred_joint_proj(ParamBinding& pb, Node* pred_vec);  // (J)

// Indices selecting every 2^k-th position so a length-`from` sequence aligns
// with a later layer of length `to`.
std::vector<std::size_t> decimation_indices(std::size_t from, std::size_t to);

}  // namespace rnntaux::model
