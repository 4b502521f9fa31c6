// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rnntaux/diffcore.hpp"

namespace rnntaux::data {

using diffcore::NDArray;

enum class ContextTying { CenterOnly, LeftCenter, Triple };

ContextTying tying_from_string(const std::string& s);
std::string tying_to_string(ContextTying t);

struct SyntheticTaskSpec {
  std::size_t base_symbols = 8;  // G; labels are 1..G, 0 is blank
  std::size_t feature_dim = 16;
  std::size_t dur_min = 1;
  std::size_t dur_max = 3;
  double noise_std = 0.3;
  std::size_t u_min = 2;
  std::size_t u_max = 10;
  std::uint64_t seed = 1;
  ContextTying tying = ContextTying::LeftCenter;

  void validate() const;
};

// |S| for the tying scheme: G, G*(G+1), or (G+1)*G*(G+1); the +1 slots carry
// the boundary sentinel context.
std::size_t state_vocab_size(const SyntheticTaskSpec& spec);

// Frame-state ids enumerate (left, center, right) context tuples; these
// decode them again.
int state_center_symbol(int state, const SyntheticTaskSpec& spec);

struct Utterance {
  std::string id;
  NDArray features;               // (T, d), mean/variance normalized
  std::vector<int> labels;        // U symbols in [1, G]; no adjacent repeats
  std::vector<int> frame_states;  // T ids in [0, |S|)
};

struct Dataset {
  SyntheticTaskSpec spec;
  std::size_t num_symbols = 0;       // G
  std::size_t state_vocab_size = 0;  // |S|
  std::vector<Utterance> utterances;
};

// Deterministic given (spec.seed, stream): symbol prototypes depend on the
// seed only, so different streams draw disjoint utterances of the same task.
Dataset generate_dataset(const SyntheticTaskSpec& spec, std::size_t n_utterances,
                         std::uint64_t stream = 0);

// Frequency/time masking: each mask draws a width uniform on [0, max] and a
// band start, then zeroes the band (zero is the normalized feature mean).
// The input is copied, not modified.
NDArray spec_augment_mask(const NDArray& x, std::size_t freq_masks,
                          std::size_t max_freq_width, std::size_t time_masks,
                          std::size_t max_time_width, std::uint64_t seed);

// JSON-lines dataset file: a header line with the task echo and vocabulary
// sizes, then one utterance per line. Round-trips exactly.
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace rnntaux::data
