// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/model.hpp"

#include <cmath>

#include "rnntaux/common.hpp"

namespace rnntaux::model {

using detail::cat;

void ModelConfig::validate() const {
  if (input_dim == 0 || encoder_layers == 0 || encoder_hidden == 0 ||
      pred_layers == 0 || pred_hidden == 0 || joint_hidden == 0 ||
      aux_mlp_hidden == 0) {
    throw std::invalid_argument("model config: all sizes must be positive");
  }
  if (vocab_size < 2) {
    throw std::invalid_argument("model config: vocab_size must include blank and a label");
  }
  for (std::size_t l : subsample_after) {
    if (l < 1 || l > encoder_layers) {
      throw std::invalid_argument(cat("model config: subsample layer ", l,
                                      " outside [1,", encoder_layers, "]"));
    }
  }
  for (std::size_t l : aux_taps) {
    if (l < 1 || l >= encoder_layers) {
      throw std::invalid_argument(cat("model config: aux tap ", l,
                                      " outside [1,", encoder_layers - 1, "]"));
    }
  }
  for (std::size_t l : ce_taps) {
    if (l < 1 || l > encoder_layers) {
      throw std::invalid_argument(cat("model config: ce tap ", l,
                                      " outside [1,", encoder_layers, "]"));
    }
  }
  if (!ce_taps.empty() && state_vocab_size < 2) {
    throw std::invalid_argument("model config: state_vocab_size must be >= 2 with ce taps");
  }
}

std::size_t ModelConfig::shared_boundary() const {
  if (aux_taps.empty()) {
    return encoder_layers;
  }
  return *aux_taps.rbegin();
}

ModelConfig ModelConfig::desk_default() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.input_dim = 5;
  c.encoder_layers = 3;
  c.encoder_hidden = 6;
  c.subsample_after = {1};
  c.pred_layers = 1;
  c.pred_hidden = 6;
  c.joint_hidden = 10;
  c.vocab_size = 5;
  c.aux_taps = {2};
  c.ce_taps = {2, 3};
  c.aux_mlp_hidden = 6;
  c.state_vocab_size = 12;
  return c;
}

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::EncShared: return "enc_shared";
    case Partition::EncUpper: return "enc_upper";
    case Partition::Decoder: return "decoder";
    case Partition::AuxHead: return "aux_heads";
    case Partition::CeHead: return "ce_heads";
  }
  return "?";
}

Partition partition_of(const std::string& name, const ModelConfig& config) {
  if (name.rfind("enc.", 0) == 0) {
    const std::size_t layer = std::stoul(name.substr(4));
    return layer <= config.shared_boundary() ? Partition::EncShared : Partition::EncUpper;
  }
  if (name.rfind("pred.", 0) == 0 || name.rfind("joint.", 0) == 0) {
    return Partition::Decoder;
  }
  if (name.rfind("aux.", 0) == 0) {
    return Partition::AuxHead;
  }
  if (name.rfind("ce.", 0) == 0) {
    return Partition::CeHead;
  }
  throw std::invalid_argument(cat("unknown parameter name '", name, "'"));
}

std::size_t ParamSet::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : values) {
    n += v.numel();
  }
  return n;
}

bool ParamSet::same_shapes(const ParamSet& o) const {
  if (values.size() != o.values.size()) {
    return false;
  }
  for (const auto& [name, v] : values) {
    auto it = o.values.find(name);
    if (it == o.values.end() || it->second.shape != v.shape) {
      return false;
    }
  }
  return true;
}

namespace {

NDArray init_matrix(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  NDArray a({rows, cols});
  for (double& v : a.data) {
    v = rng.uniform(-bound, bound);
  }
  return a;
}

NDArray init_vector(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  NDArray a({n});
  for (double& v : a.data) {
    v = rng.uniform(-bound, bound);
  }
  return a;
}

std::string enc_name(std::size_t layer, const char* part) {
  return cat("enc.", layer, ".", part);
}

}  // namespace

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0x9a7a));
  ParamSet p;
  const std::size_t H = config.encoder_hidden;
  const std::size_t P = config.pred_hidden;
  const std::size_t J = config.joint_hidden;
  const std::size_t K = config.vocab_size;

  for (std::size_t l = 1; l <= config.encoder_layers; ++l) {
    const std::size_t in = (l == 1) ? config.input_dim : H;
    p.values[enc_name(l, "wx")] = init_matrix(in, 4 * H, in, rng);
    p.values[enc_name(l, "wh")] = init_matrix(H, 4 * H, H, rng);
    p.values[enc_name(l, "b")] = init_vector(4 * H, in, rng);
  }

  p.values["pred.embed"] = init_matrix(K, P, P, rng);
  for (std::size_t l = 1; l <= config.pred_layers; ++l) {
    p.values[cat("pred.", l, ".wx")] = init_matrix(P, 4 * P, P, rng);
    p.values[cat("pred.", l, ".wh")] = init_matrix(P, 4 * P, P, rng);
    p.values[cat("pred.", l, ".b")] = init_vector(4 * P, P, rng);
  }

  p.values["joint.w_enc"] = init_matrix(H, J, H, rng);
  p.values["joint.w_pred"] = init_matrix(P, J, P, rng);
  p.values["joint.b"] = init_vector(J, H, rng);
  p.values["joint.w_out"] = init_matrix(J, K, J, rng);
  p.values["joint.b_out"] = init_vector(K, J, rng);

  const std::size_t A = config.aux_mlp_hidden;
  for (std::size_t l : config.aux_taps) {
    p.values[cat("aux.", l, ".w1")] = init_matrix(H, A, H, rng);
    p.values[cat("aux.", l, ".b1")] = init_vector(A, H, rng);
    p.values[cat("aux.", l, ".w2")] = init_matrix(A, H, A, rng);
    p.values[cat("aux.", l, ".b2")] = init_vector(H, A, rng);
  }

  const std::size_t S = config.state_vocab_size;
  for (std::size_t l : config.ce_taps) {
    if (l < config.encoder_layers) {
      p.values[cat("ce.", l, ".w1")] = init_matrix(H, A, H, rng);
      p.values[cat("ce.", l, ".b1")] = init_vector(A, H, rng);
      p.values[cat("ce.", l, ".w2")] = init_matrix(A, S, A, rng);
      p.values[cat("ce.", l, ".b2")] = init_vector(S, A, rng);
    } else {
      p.values[cat("ce.", l, ".w")] = init_matrix(H, S, H, rng);
      p.values[cat("ce.", l, ".b")] = init_vector(S, H, rng);
    }
  }
  return p;
}

ParamBinding::ParamBinding(Graph& graph, const ParamSet& params, const ModelConfig& config)
    : graph_(&graph), params_(&params), config_(&config) {}

Node* ParamBinding::get(const std::string& name) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) {
    return it->second;
  }
  auto pit = params_->values.find(name);
  if (pit == params_->values.end()) {
    throw std::invalid_argument(cat("parameter '", name, "' not found"));
  }
  Node* n = graph_->leaf(pit->second);
  leaves_[name] = n;
  return n;
}

Node* ParamBinding::get_gated(const std::string& name) {
  auto it = gated_.find(name);
  if (it != gated_.end()) {
    return it->second;
  }
  Node* n;
  if (gated_override_ != nullptr) {
    auto pit = gated_override_->values.find(name);
    if (pit == gated_override_->values.end()) {
      throw std::invalid_argument(cat("gated override missing parameter '", name, "'"));
    }
    n = graph_->leaf(pit->second);
  } else {
    n = graph_->gate(get(name));
  }
  gated_[name] = n;
  return n;
}

bool ParamBinding::touched(const std::string& name) const {
  return leaves_.count(name) > 0;
}

std::map<std::string, NDArray> ParamBinding::grads() const {
  std::map<std::string, NDArray> out;
  for (const auto& [name, value] : params_->values) {
    auto it = leaves_.find(name);
    if (it != leaves_.end() && it->second->has_grad()) {
      out[name] = NDArray(value.shape, it->second->grad);
    } else {
      out[name] = NDArray(value.shape);
    }
  }
  return out;
}

namespace {

// One LSTM layer over a (T, in) sequence; returns stacked (T, H) outputs.
// The input projection is batched across time; the recurrence is stepwise.
Node* lstm_layer(Graph& g, Node* seq, Node* wx, Node* wh, Node* b) {
  const std::size_t T = seq->value.dim(0);
  const std::size_t H = wh->value.dim(0);
  Node* xproj = g.add(g.matmul(seq, wx), b);  // (T, 4H)
  Node* h = g.leaf(NDArray({H}));
  Node* c = g.leaf(NDArray({H}));
  std::vector<Node*> outputs;
  outputs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    Node* gates = g.add(g.reshape(g.slice_axis(xproj, 0, t, 1), {4 * H}), g.matmul(h, wh));
    Node* in_gate = g.sigmoid(g.slice_axis(gates, 0, 0, H));
    Node* forget_gate = g.sigmoid(g.slice_axis(gates, 0, H, H));
    Node* cell_in = g.tanh(g.slice_axis(gates, 0, 2 * H, H));
    Node* out_gate = g.sigmoid(g.slice_axis(gates, 0, 3 * H, H));
    c = g.add(g.mul(forget_gate, c), g.mul(in_gate, cell_in));
    h = g.mul(out_gate, g.tanh(c));
    outputs.push_back(h);
  }
  return g.stack_rows(outputs);
}

// One LSTM cell step on rank-1 state vectors.
void lstm_cell_step(Graph& g, Node* x, Node* wx, Node* wh, Node* b, Node*& h, Node*& c) {
  const std::size_t H = wh->value.dim(0);
  Node* gates = g.add(g.add(g.matmul(x, wx), b), g.matmul(h, wh));
  Node* in_gate = g.sigmoid(g.slice_axis(gates, 0, 0, H));
  Node* forget_gate = g.sigmoid(g.slice_axis(gates, 0, H, H));
  Node* cell_in = g.tanh(g.slice_axis(gates, 0, 2 * H, H));
  Node* out_gate = g.sigmoid(g.slice_axis(gates, 0, 3 * H, H));
  c = g.add(g.mul(forget_gate, c), g.mul(in_gate, cell_in));
  h = g.mul(out_gate, g.tanh(c));
}

std::vector<std::size_t> even_indices(std::size_t n) {
  std::vector<std::size_t> idx;
  idx.reserve((n + 1) / 2);
  for (std::size_t i = 0; i < n; i += 2) {
    idx.push_back(i);
  }
  return idx;
}

}  // namespace

EncoderOutput encode(ParamBinding& pb, const NDArray& features) {
  const ModelConfig& cfg = pb.config();
  Graph& g = pb.graph();
  if (features.rank() != 2 || features.dim(1) != cfg.input_dim) {
    throw std::invalid_argument(cat("encode: features must be (T,", cfg.input_dim,
                                    "), got ", diffcore::shape_str(features.shape)));
  }
  if (features.dim(0) < 1) {
    throw std::invalid_argument("encode: need at least T=1 frames (minimum T is 1)");
  }

  EncoderOutput out;
  Node* seq = g.leaf(features);
  std::vector<std::size_t> origin(features.dim(0));
  for (std::size_t t = 0; t < origin.size(); ++t) {
    origin[t] = t;
  }

  for (std::size_t l = 1; l <= cfg.encoder_layers; ++l) {
    Node* h = lstm_layer(g, seq, pb.get(enc_name(l, "wx")), pb.get(enc_name(l, "wh")),
                         pb.get(enc_name(l, "b")));
    if (cfg.subsample_after.count(l)) {
      const std::vector<std::size_t> keep = even_indices(h->value.dim(0));
      h = g.gather_rows(h, keep);
      std::vector<std::size_t> next_origin(keep.size());
      for (std::size_t i = 0; i < keep.size(); ++i) {
        next_origin[i] = origin[keep[i]];
      }
      origin = std::move(next_origin);
    }
    out.layers.push_back(h);
    out.frame_origin.push_back(origin);
    seq = h;
  }
  return out;
}

namespace {

Node* predict_impl(ParamBinding& pb, const std::vector<int>& labels, bool gated) {
  const ModelConfig& cfg = pb.config();
  Graph& g = pb.graph();
  auto param = [&](const std::string& name) {
    return gated ? pb.get_gated(name) : pb.get(name);
  };
  std::vector<std::size_t> tokens;
  tokens.reserve(labels.size() + 1);
  tokens.push_back(0);  // y_0 = blank
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.vocab_size) {
      throw std::invalid_argument(cat("predict: label ", y, " outside [0,",
                                      cfg.vocab_size, ")"));
    }
    tokens.push_back(static_cast<std::size_t>(y));
  }
  Node* seq = g.gather_rows(param("pred.embed"), tokens);  // (U+1, P)
  for (std::size_t l = 1; l <= cfg.pred_layers; ++l) {
    seq = lstm_layer(g, seq, param(cat("pred.", l, ".wx")), param(cat("pred.", l, ".wh")),
                     param(cat("pred.", l, ".b")));
  }
  return seq;
}

}  // namespace

Node* predict(ParamBinding& pb, const std::vector<int>& labels) {
  return predict_impl(pb, labels, /*gated=*/false);
}

Node* predict_gated(ParamBinding& pb, const std::vector<int>& labels) {
  return predict_impl(pb, labels, /*gated=*/true);
}

namespace {

Node* joint_logits(ParamBinding& pb, Node* enc_side, Node* pred, bool gated) {
  Graph& g = pb.graph();
  auto dec = [&](const char* name) {
    return gated ? pb.get_gated(name) : pb.get(name);
  };
  Node* a = g.matmul(enc_side, dec("joint.w_enc"));   // (T', J)
  Node* b = g.matmul(pred, dec("joint.w_pred"));      // (U+1, J)
  Node* s = g.add(g.outer_sum(a, b), dec("joint.b"));  // (T', U+1, J)
  Node* hidden = g.tanh(s);
  return g.add(g.matmul(hidden, dec("joint.w_out")), dec("joint.b_out"));
}

}  // namespace

Node* join_grid(ParamBinding& pb, Node* enc_top, Node* pred) {
  const ModelConfig& cfg = pb.config();
  if (enc_top->value.rank() != 2 || enc_top->value.dim(1) != cfg.encoder_hidden) {
    throw std::invalid_argument(cat("join_grid: encoder side must be (T',",
                                    cfg.encoder_hidden, "), got ",
                                    diffcore::shape_str(enc_top->value.shape)));
  }
  if (pred->value.rank() != 2 || pred->value.dim(1) != cfg.pred_hidden) {
    throw std::invalid_argument(cat("join_grid: prediction side must be (U+1,",
                                    cfg.pred_hidden, "), got ",
                                    diffcore::shape_str(pred->value.shape)));
  }
  return pb.graph().log_softmax(joint_logits(pb, enc_top, pred, /*gated=*/false));
}

Node* gated_decoder_grid(ParamBinding& pb, Node* enc_top, Node* pred) {
  Graph& g = pb.graph();
  return g.log_softmax(joint_logits(pb, enc_top, g.gate(pred), /*gated=*/true));
}

std::vector<std::size_t> decimation_indices(std::size_t from, std::size_t to) {
  std::size_t stride = 1;
  std::size_t len = from;
  while (len > to) {
    len = (len + 1) / 2;
    stride *= 2;
  }
  if (len != to) {
    throw std::invalid_argument(cat("decimation: cannot align length ", from,
                                    " to length ", to));
  }
  std::vector<std::size_t> idx(to);
  for (std::size_t i = 0; i < to; ++i) {
    idx[i] = i * stride;
  }
  return idx;
}

Node* aux_posterior_grid(ParamBinding& pb, const EncoderOutput& enc, std::size_t tap,
                         Node* pred) {
  const ModelConfig& cfg = pb.config();
  Graph& g = pb.graph();
  if (!cfg.aux_taps.count(tap)) {
    throw std::invalid_argument(cat("aux branch: layer ", tap, " is not a configured tap"));
  }
  Node* h = enc.layers[tap - 1];
  const std::size_t t_prime = enc.frames_out();
  if (h->value.dim(0) != t_prime) {
    h = g.gather_rows(h, decimation_indices(h->value.dim(0), t_prime));
  }
  Node* hidden = g.tanh(g.add(g.matmul(h, pb.get(cat("aux.", tap, ".w1"))),
                              pb.get(cat("aux.", tap, ".b1"))));
  Node* mlp = g.add(g.matmul(hidden, pb.get(cat("aux.", tap, ".w2"))),
                    pb.get(cat("aux.", tap, ".b2")));  // (T', H)
  return g.log_softmax(joint_logits(pb, mlp, g.gate(pred), /*gated=*/true));
}

Node* ce_frame_logprobs(ParamBinding& pb, const EncoderOutput& enc, std::size_t tap) {
  const ModelConfig& cfg = pb.config();
  Graph& g = pb.graph();
  if (!cfg.ce_taps.count(tap)) {
    throw std::invalid_argument(cat("ce head: layer ", tap, " is not a configured tap"));
  }
  Node* h = enc.layers[tap - 1];
  Node* logits;
  if (tap < cfg.encoder_layers) {
    Node* hidden = g.tanh(g.add(g.matmul(h, pb.get(cat("ce.", tap, ".w1"))),
                                pb.get(cat("ce.", tap, ".b1"))));
    logits = g.add(g.matmul(hidden, pb.get(cat("ce.", tap, ".w2"))),
                   pb.get(cat("ce.", tap, ".b2")));
  } else {
    logits = g.add(g.matmul(h, pb.get(cat("ce.", tap, ".w"))),
                   pb.get(cat("ce.", tap, ".b")));
  }
  return g.log_softmax(logits);
}

PredictorState predictor_start(ParamBinding& pb) {
  const ModelConfig& cfg = pb.config();
  Graph& g = pb.graph();
  PredictorState st;
  for (std::size_t l = 0; l < cfg.pred_layers; ++l) {
    st.h.push_back(g.leaf(NDArray({cfg.pred_hidden})));
    st.c.push_back(g.leaf(NDArray({cfg.pred_hidden})));
  }
  return predictor_step(pb, st, 0);
}

PredictorState predictor_step(ParamBinding& pb, const PredictorState& state, int label) {
  const ModelConfig& cfg = pb.config();
  Graph& g = pb.graph();
  if (label < 0 || static_cast<std::size_t>(label) >= cfg.vocab_size) {
    throw std::invalid_argument(cat("predictor: label ", label, " outside [0,",
                                    cfg.vocab_size, ")"));
  }
  PredictorState next = state;
  Node* x = g.reshape(
      g.gather_rows(pb.get("pred.embed"), {static_cast<std::size_t>(label)}),
      {cfg.pred_hidden});
  for (std::size_t l = 1; l <= cfg.pred_layers; ++l) {
    Node* h = next.h[l - 1];
    Node* c = next.c[l - 1];
    lstm_cell_step(g, x, pb.get(cat("pred.", l, ".wx")), pb.get(cat("pred.", l, ".wh")),
                   pb.get(cat("pred.", l, ".b")), h, c);
    next.h[l - 1] = h;
    next.c[l - 1] = c;
    x = h;
  }
  next.output = x;
  return next;
}

Node* enc_joint_proj(ParamBinding& pb, Node* enc_top) {
  return pb.graph().matmul(enc_top, pb.get("joint.w_enc"));
}

Node* pred_joint_proj(ParamBinding& pb, Node* pred_vec) {
  return pb.graph().matmul(pred_vec, pb.get("joint.w_pred"));
}

Node* joint_row_from_proj(ParamBinding& pb, Node* enc_proj_row, Node* pred_proj) {
  Graph& g = pb.graph();
  Node* s = g.add(g.add(enc_proj_row, pred_proj), pb.get("joint.b"));
  Node* logits = g.add(g.matmul(g.tanh(s), pb.get("joint.w_out")), pb.get("joint.b_out"));
  return g.log_softmax(logits);
}

}  // namespace rnntaux::model
