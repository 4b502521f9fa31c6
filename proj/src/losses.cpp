// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/losses.hpp"

#include <cmath>

#include "rnntaux/common.hpp"
#include "rnntaux/lattice.hpp"

namespace rnntaux::losses {

using detail::cat;
using model::EncoderOutput;
using model::ParamBinding;

Mode mode_from_string(const std::string& s) {
  if (s == "baseline") return Mode::Baseline;
  if (s == "aux") return Mode::Aux;
  if (s == "kl") return Mode::Kl;
  if (s == "aux+kl") return Mode::AuxKl;
  if (s == "ce") return Mode::Ce;
  if (s == "aux+kl+ce") return Mode::AuxKlCe;
  throw std::invalid_argument(cat("unknown mode '", s, "'"));
}

std::string mode_to_string(Mode m) {
  switch (m) {
    case Mode::Baseline: return "baseline";
    case Mode::Aux: return "aux";
    case Mode::Kl: return "kl";
    case Mode::AuxKl: return "aux+kl";
    case Mode::Ce: return "ce";
    case Mode::AuxKlCe: return "aux+kl+ce";
  }
  return "?";
}

const std::vector<Mode>& all_modes() {
  static const std::vector<Mode> modes = {Mode::Baseline, Mode::Aux,  Mode::Kl,
                                          Mode::AuxKl,    Mode::Ce, Mode::AuxKlCe};
  return modes;
}

bool mode_uses_aux(Mode m) { return m == Mode::Aux || m == Mode::AuxKl || m == Mode::AuxKlCe; }
bool mode_uses_kl(Mode m) { return m == Mode::Kl || m == Mode::AuxKl || m == Mode::AuxKlCe; }
bool mode_uses_ce(Mode m) { return m == Mode::Ce || m == Mode::AuxKlCe; }

void LossWeights::validate() const {
  if (!(std::isfinite(lambda_aux) && std::isfinite(lambda_ce)) || lambda_aux < 0.0 ||
      lambda_ce < 0.0) {
    throw std::invalid_argument("loss weights must be finite and non-negative");
  }
}

double LossReport::recombine(const LossWeights& w, Mode mode) const {
  double aux_kl = 0.0;
  if (mode_uses_aux(mode)) {
    for (const auto& [l, v] : aux_rnnt) {
      aux_kl += v;
    }
  }
  if (mode_uses_kl(mode)) {
    for (const auto& [l, v] : kl) {
      aux_kl += v;
    }
  }
  double ce_sum = 0.0;
  if (mode_uses_ce(mode)) {
    for (const auto& [l, v] : ce) {
      ce_sum += v;
    }
  }
  return primary + w.lambda_aux * aux_kl + w.lambda_ce * ce_sum;
}

Node* rnnt_loss_node(Graph& g, Node* grid, const std::vector<int>& labels) {
  lattice::RnntResult r = lattice::rnnt_loss(grid->value, labels);
  NDArray grad = std::move(r.grad);
  return g.custom(
      {grid}, NDArray::scalar(r.loss),
      [grad](const std::vector<double>& up, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>& dst = *pg[0];
        for (std::size_t i = 0; i < grad.numel(); ++i) {
          dst[i] += up[0] * grad.data[i];
        }
      });
}

Node* symmetric_kl_node(Graph& g, Node* primary_grid, Node* aux_grid) {
  lattice::validate_grid_pair(primary_grid->value, aux_grid->value);
  const std::size_t u_rows = primary_grid->value.dim(1);
  const std::size_t labels = primary_grid->value.dim(2);
  if (u_rows <= 1) {
    return g.constant(0.0);  // no label positions to average over
  }
  Node* p = g.slice_axis(primary_grid, 1, 1, u_rows - 1);
  Node* q = g.slice_axis(aux_grid, 1, 1, u_rows - 1);
  Node* diff = g.add(p, g.negate(q));
  Node* both = g.add(g.mul(g.exp(p), diff), g.mul(g.exp(q), g.negate(diff)));
  Node* per_cell = g.scale(g.mean_axis(both, 2), static_cast<double>(labels));
  return g.mean_axis(g.mean_axis(per_cell, 1), 0);
}

double symmetric_kl(const NDArray& primary, const NDArray& aux) {
  Graph g;
  return symmetric_kl_node(g, g.leaf(primary), g.leaf(aux))->value.data[0];
}

PerLayerTerms aux_rnnt_objective(Graph& g, const std::map<std::size_t, Node*>& aux_grids,
                                 const std::vector<int>& labels) {
  PerLayerTerms out;
  for (const auto& [layer, grid] : aux_grids) {
    Node* term = rnnt_loss_node(g, grid, labels);
    out.terms[layer] = term;
    out.total = out.total ? g.add(out.total, term) : term;
  }
  if (!out.total) {
    out.total = g.constant(0.0);
  }
  return out;
}

PerLayerTerms aux_ce_objective(Graph& g,
                               const std::map<std::size_t, Node*>& frame_logprobs,
                               const std::map<std::size_t, std::vector<int>>& states) {
  PerLayerTerms out;
  for (const auto& [layer, logprobs] : frame_logprobs) {
    auto sit = states.find(layer);
    if (sit == states.end()) {
      throw std::invalid_argument(cat("ce objective: no frame states for layer ", layer));
    }
    const std::vector<int>& s = sit->second;
    if (s.size() != logprobs->value.dim(0)) {
      throw std::invalid_argument(cat("ce objective: layer ", layer, " has ",
                                      logprobs->value.dim(0), " frames but ", s.size(),
                                      " state labels"));
    }
    std::vector<std::size_t> idx(s.size());
    for (std::size_t t = 0; t < s.size(); ++t) {
      if (s[t] < 0 || static_cast<std::size_t>(s[t]) >= logprobs->value.dim(1)) {
        throw std::invalid_argument(cat("ce objective: state ", s[t], " outside [0,",
                                        logprobs->value.dim(1), ")"));
      }
      idx[t] = static_cast<std::size_t>(s[t]);
    }
    Node* picked = g.take_per_row(logprobs, idx);
    Node* term = g.negate(g.mean_axis(picked, 0));
    out.terms[layer] = term;
    out.total = out.total ? g.add(out.total, term) : term;
  }
  if (!out.total) {
    out.total = g.constant(0.0);
  }
  return out;
}

LossReport ObjectiveGraph::report(const LossWeights& w, Mode mode) const {
  LossReport r;
  r.primary = primary ? primary->value.data[0] : 0.0;
  for (const auto& [l, n] : aux_terms) {
    r.aux_rnnt[l] = n->value.data[0];
  }
  for (const auto& [l, n] : kl_terms) {
    r.kl[l] = n->value.data[0];
  }
  for (const auto& [l, n] : ce_terms) {
    r.ce[l] = n->value.data[0];
  }
  r.total = total->value.data[0];
  (void)w;
  (void)mode;
  return r;
}

ObjectiveGraph build_objective(ParamBinding& pb, const NDArray& features,
                               const std::vector<int>& labels,
                               const std::vector<int>* frame_states, Mode mode,
                               const LossWeights& weights,
                               const ObjectiveOptions& options) {
  weights.validate();
  const model::ModelConfig& cfg = pb.config();
  Graph& g = pb.graph();

  const bool use_aux = mode_uses_aux(mode);
  const bool use_kl = mode_uses_kl(mode);
  const bool use_ce = mode_uses_ce(mode);
  if (use_ce && frame_states == nullptr) {
    throw std::invalid_argument(cat("mode ", mode_to_string(mode),
                                    " requires frame states"));
  }

  if (options.frozen_decoder != nullptr) {
    pb.set_gated_override(options.frozen_decoder);
  }

  ObjectiveGraph out;
  EncoderOutput enc = model::encode(pb, features);
  Node* pred = model::predict(pb, labels);
  Node* grid = model::join_grid(pb, enc.top(), pred);
  out.primary = rnnt_loss_node(g, grid, labels);

  if (use_aux || use_kl) {
    // the auxiliary side of the decoder: gate over the live prediction
    // output, or a recomputation from the frozen copy
    Node* aux_pred = options.frozen_decoder ? model::predict_gated(pb, labels) : pred;
    Node* kl_reference = grid;
    if (use_kl && options.kl_gate_decoder_on_primary) {
      // same forward values, decoder parameters behind the gate
      kl_reference = model::gated_decoder_grid(pb, enc.top(), aux_pred);
    }
    for (std::size_t layer : cfg.aux_taps) {
      Node* aux_grid = model::aux_posterior_grid(pb, enc, layer, aux_pred);
      if (use_aux) {
        out.aux_terms[layer] = rnnt_loss_node(g, aux_grid, labels);
      }
      if (use_kl) {
        lattice::validate_grid_pair(kl_reference->value, aux_grid->value);
        out.kl_terms[layer] = symmetric_kl_node(g, kl_reference, aux_grid);
      }
    }
  }

  if (use_ce) {
    std::map<std::size_t, Node*> logprobs;
    std::map<std::size_t, std::vector<int>> per_layer_states;
    for (std::size_t layer : cfg.ce_taps) {
      logprobs[layer] = model::ce_frame_logprobs(pb, enc, layer);
      const std::vector<std::size_t>& origin = enc.frame_origin[layer - 1];
      std::vector<int> aligned(origin.size());
      for (std::size_t i = 0; i < origin.size(); ++i) {
        if (origin[i] >= frame_states->size()) {
          throw std::invalid_argument(cat("frame states cover ", frame_states->size(),
                                          " frames but layer ", layer, " needs frame ",
                                          origin[i]));
        }
        aligned[i] = (*frame_states)[origin[i]];
      }
      per_layer_states[layer] = std::move(aligned);
    }
    PerLayerTerms ce = aux_ce_objective(g, logprobs, per_layer_states);
    out.ce_terms = ce.terms;
    out.ce_sum = ce.total;
  }

  // unweighted aux+kl sum in layer order, aux before kl per layer
  for (const auto& [l, n] : out.aux_terms) {
    out.aux_kl_sum = out.aux_kl_sum ? g.add(out.aux_kl_sum, n) : n;
  }
  for (const auto& [l, n] : out.kl_terms) {
    out.aux_kl_sum = out.aux_kl_sum ? g.add(out.aux_kl_sum, n) : n;
  }

  Node* total = options.include_primary ? out.primary : nullptr;
  if (out.aux_kl_sum) {
    Node* weighted = g.scale(out.aux_kl_sum, weights.lambda_aux);
    total = total ? g.add(total, weighted) : weighted;
  }
  if (out.ce_sum) {
    Node* weighted = g.scale(out.ce_sum, weights.lambda_ce);
    total = total ? g.add(total, weighted) : weighted;
  }
  out.total = total ? total : g.constant(0.0);
  return out;
}

ObjectiveResult total_objective(const NDArray& features, const std::vector<int>& labels,
                                const std::vector<int>* frame_states,
                                const model::ParamSet& params,
                                const model::ModelConfig& config,
                                const LossWeights& weights, Mode mode,
                                const ObjectiveOptions& options) {
  Graph g;
  ParamBinding pb(g, params, config);
  ObjectiveGraph obj = build_objective(pb, features, labels, frame_states, mode, weights,
                                       options);
  g.backward(obj.total);
  ObjectiveResult res;
  res.report = obj.report(weights, mode);
  res.grads = pb.grads();
  return res;
}

diffcore::GradCheckReport gradcheck_objective(
    const NDArray& features, const std::vector<int>& labels,
    const std::vector<int>* frame_states, const model::ParamSet& params,
    const model::ModelConfig& config, const LossWeights& weights, Mode mode,
    double step, double tol, std::size_t max_coords_per_array, std::uint64_t seed) {
  ObjectiveOptions options;
  options.frozen_decoder = &params;

  auto f = [&](const diffcore::ParamValues& vals) {
    model::ParamSet live;
    live.values = vals;
    return total_objective(features, labels, frame_states, live, config, weights, mode,
                           options)
        .report.total;
  };
  ObjectiveResult at_base =
      total_objective(features, labels, frame_states, params, config, weights, mode,
                      options);
  return diffcore::finite_diff_check(f, params.values, at_base.grads, step, tol,
                                     max_coords_per_array, seed);
}

std::map<model::Partition, double> per_partition_max(
    const diffcore::GradCheckReport& report, const model::ModelConfig& config) {
  std::map<model::Partition, double> out;
  for (const auto& [name, res] : report.arrays) {
    model::Partition part = model::partition_of(name, config);
    auto it = out.find(part);
    if (it == out.end() || res.max_rel_error > it->second) {
      out[part] = res.max_rel_error;
    }
  }
  return out;
}

}  // namespace rnntaux::losses
