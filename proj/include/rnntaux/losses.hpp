// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rnntaux/model.hpp"

namespace rnntaux::losses {

using diffcore::Graph;
using diffcore::NDArray;
using diffcore::Node;

enum class Mode { Baseline, Aux, Kl, AuxKl, Ce, AuxKlCe };

Mode mode_from_string(const std::string& s);
std::string mode_to_string(Mode m);
const std::vector<Mode>& all_modes();
bool mode_uses_aux(Mode m);
bool mode_uses_kl(Mode m);
bool mode_uses_ce(Mode m);

struct LossWeights {
  double lambda_aux = 0.3;
  double lambda_ce = 0.6;

  void validate() const;
};

struct LossReport {
  double primary = 0.0;
  std::map<std::size_t, double> aux_rnnt;  // per tapped layer
  std::map<std::size_t, double> kl;        // per tapped layer
  std::map<std::size_t, double> ce;        // per tapped layer
  double total = 0.0;

  // the configured combination recomputed from the parts
  double recombine(const LossWeights& w, Mode mode) const;
};

struct ObjectiveOptions {
  bool include_primary = true;
  // Alternative reading of the divergence term: recompute the primary grid
  // behind a decoder gate before feeding it to the KL, so the divergence
  // moves only encoder and head parameters. Default follows the combined
  // objective's signature, which lets the divergence reach the decoder
  // through the primary posterior.
  bool kl_gate_decoder_on_primary = false;
  // When set, auxiliary branches read decoder parameters from this frozen
  // copy instead of a gate over the live values. With frozen == live the
  // forward pass is unchanged, and the objective becomes the function whose
  // true derivative the gated backward computes — which is what a
  // finite-difference oracle must evaluate.
  const model::ParamSet* frozen_decoder = nullptr;
};

// Wraps the lattice loss as a graph node with its analytic grid gradient.
Node* rnnt_loss_node(Graph& g, Node* grid, const std::vector<int>& labels);

// Symmetric KL divergence between two posterior grids, averaged over frames
// and the label positions u = 1..U; U = 0 contributes 0 by convention.
Node* symmetric_kl_node(Graph& g, Node* primary_grid, Node* aux_grid);
double symmetric_kl(const NDArray& primary, const NDArray& aux);

// Indicator-gated sum of auxiliary transducer losses over the tapped layers.
struct PerLayerTerms {
  Node* total = nullptr;
  std::map<std::size_t, Node*> terms;
};

PerLayerTerms aux_rnnt_objective(Graph& g, const std::map<std::size_t, Node*>& aux_grids,
                                 const std::vector<int>& labels);

// Frame-state cross entropy per tapped layer; each layer is averaged over
// its own (possibly decimated) frame count, then layers are summed.
PerLayerTerms aux_ce_objective(Graph& g,
                               const std::map<std::size_t, Node*>& frame_logprobs,
                               const std::map<std::size_t, std::vector<int>>& states);

struct ObjectiveGraph {
  Node* total = nullptr;
  Node* primary = nullptr;
  std::map<std::size_t, Node*> aux_terms;
  std::map<std::size_t, Node*> kl_terms;
  std::map<std::size_t, Node*> ce_terms;
  Node* aux_kl_sum = nullptr;  // unweighted sum of aux + kl parts
  Node* ce_sum = nullptr;      // unweighted sum of ce parts

  LossReport report(const LossWeights& w, Mode mode) const;
};

ObjectiveGraph build_objective(model::ParamBinding& pb, const NDArray& features,
                               const std::vector<int>& labels,
                               const std::vector<int>* frame_states, Mode mode,
                               const LossWeights& weights,
                               const ObjectiveOptions& options = {});

struct ObjectiveResult {
  LossReport report;
  std::map<std::string, NDArray> grads;
};

// One-call forward+backward over a fresh graph.
ObjectiveResult total_objective(const NDArray& features, const std::vector<int>& labels,
                                const std::vector<int>* frame_states,
                                const model::ParamSet& params,
                                const model::ModelConfig& config,
                                const LossWeights& weights, Mode mode,
                                const ObjectiveOptions& options = {});

// Gate-aware finite-difference verification of the full objective: the
// analytic gradients come from the gated backward, and the probed function
// keeps the auxiliary-path decoder frozen at the base point so the two
// describe the same function.
diffcore::GradCheckReport gradcheck_objective(
    const NDArray& features, const std::vector<int>& labels,
    const std::vector<int>* frame_states, const model::ParamSet& params,
    const model::ModelConfig& config, const LossWeights& weights, Mode mode,
    double step, double tol, std::size_t max_coords_per_array, std::uint64_t seed);

// Per-partition maxima folded from a gradcheck report.
std::map<model::Partition, double> per_partition_max(
    const diffcore::GradCheckReport& report, const model::ModelConfig& config);

}  // namespace rnntaux::losses
