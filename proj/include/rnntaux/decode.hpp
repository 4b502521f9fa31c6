// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "rnntaux/model.hpp"

namespace rnntaux::decode {

using diffcore::NDArray;

struct Hypothesis {
  std::vector<int> labels;  // blank never appears
  double score = 0.0;       // fused log score, alignment-summed
};

// Add-one-smoothed n-gram model over the label vocabulary plus an end
// marker. End events are not counted, only smoothed, so the label-token
// counts match plain frequency estimates; conditionals still normalize.
class NGramLM {
 public:
  NGramLM(std::size_t order, std::size_t num_labels);

  std::size_t order() const { return order_; }
  // label in [1, num_labels], or 0 for the end marker; context is the
  // preceding label (0 = sentence start). Unigram ignores the context.
  double log_prob(int context, int label) const;

 private:
  friend NGramLM train_ngram_lm(const std::vector<std::vector<int>>& transcripts,
                                std::size_t order, std::size_t num_labels);
  std::size_t order_;
  std::size_t num_labels_;
  std::vector<double> table_;  // (contexts) x (num_labels + 1)
};

NGramLM train_ngram_lm(const std::vector<std::vector<int>>& transcripts,
                       std::size_t order, std::size_t num_labels);

struct Fusion {
  const NGramLM* lm = nullptr;
  double mu = 0.0;
};

// Frame-synchronous greedy: repeated argmax at (t, u); blank advances the
// frame, labels advance the prefix, ties resolve to the lowest index.
std::vector<int> greedy_decode(const NDArray& features, const model::ParamSet& params,
                               const model::ModelConfig& config,
                               std::size_t max_symbols_per_frame = 10);

// Frame-synchronous beam with prefix merging: hypotheses with equal label
// sequences merge by logaddexp, fusion adds mu * log P_lm per emission, and
// each round prunes finalized and extending candidates together to the beam
// width. Returns the N-best list best-first.
std::vector<Hypothesis> beam_search(const NDArray& features,
                                    const model::ParamSet& params,
                                    const model::ModelConfig& config,
                                    std::size_t beam_width,
                                    const std::optional<Fusion>& fusion = std::nullopt,
                                    std::size_t max_symbols_per_frame = 10);

}  // namespace rnntaux::decode
