// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "rnntaux/diffcore.hpp"

namespace rnntaux::lattice {

using diffcore::NDArray;

// Log-probability grid over the alignment lattice: shape (T', U+1, K) with
// index 0 of the last axis reserved for blank. Labels take values in [1, K).

struct AlphaBeta {
  NDArray alpha;  // (T', U+1)
  NDArray beta;   // (T', U+1)
  double log_prob = 0.0;
};

struct RnntResult {
  double loss = 0.0;
  NDArray grad;  // d loss / d grid entry, same shape as the grid
};

// Exact transducer loss -log P(y|x) by log-space forward recursion, with the
// analytic gradient (negated transition occupancies) w.r.t. the grid.
RnntResult rnnt_loss(const NDArray& grid, const std::vector<int>& labels);

// Forward/backward log-probability tables, exposed for verification.
AlphaBeta forward_backward(const NDArray& grid, const std::vector<int>& labels);

// Direct evaluation of the alignment sum: enumerates every monotone path
// whose blank removal equals the labels. Restricted to T'+U <= 12.
double brute_force_rnnt_loss(const NDArray& grid, const std::vector<int>& labels);

std::size_t brute_force_path_count(std::size_t frames, std::size_t labels);

// Throws unless every (t,u) slice is a normalized distribution within tol.
void validate_grid(const NDArray& grid, double tol = 1e-9);

// Shape/normalization gate ahead of grid-to-grid divergences.
void validate_grid_pair(const NDArray& primary, const NDArray& aux);

}  // namespace rnntaux::lattice
