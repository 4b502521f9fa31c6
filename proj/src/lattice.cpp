// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/lattice.hpp"

#include <cmath>

#include "rnntaux/common.hpp"

namespace rnntaux::lattice {

using detail::cat;
using diffcore::logaddexp;

namespace {

// Log-zero sentinel for unreachable cells; large but finite so sums of
// sentinels never overflow and exp() of differences underflows to 0.
constexpr double kLogZero = -1e30;

void check_grid(const NDArray& grid, const std::vector<int>& labels) {
  if (grid.rank() != 3) {
    throw std::invalid_argument(cat("rnnt: grid must be rank 3 (T',U+1,K), got ",
                                    diffcore::shape_str(grid.shape)));
  }
  if (grid.numel() == 0) {
    throw std::invalid_argument("rnnt: empty grid");
  }
  const std::size_t U = labels.size();
  if (U + 1 > grid.dim(1)) {
    throw std::invalid_argument(cat("rnnt: ", U, " labels need grid dimension ", U + 1,
                                    " but grid has ", grid.dim(1)));
  }
  if (U + 1 != grid.dim(1)) {
    throw std::invalid_argument(cat("rnnt: grid dimension ", grid.dim(1),
                                    " does not match ", U, " labels"));
  }
  const std::size_t K = grid.dim(2);
  if (K < 2) {
    throw std::invalid_argument("rnnt: vocabulary must include blank and a label");
  }
  for (int y : labels) {
    if (y < 1 || static_cast<std::size_t>(y) >= K) {
      throw std::invalid_argument(cat("rnnt: label ", y, " outside [1,", K, ")"));
    }
  }
}

}  // namespace

void validate_grid(const NDArray& grid, double tol) {
  if (grid.rank() != 3) {
    throw std::invalid_argument(cat("grid: must be rank 3, got ",
                                    diffcore::shape_str(grid.shape)));
  }
  const std::size_t T = grid.dim(0);
  const std::size_t U1 = grid.dim(1);
  const std::size_t K = grid.dim(2);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      double mx = grid.at3(t, u, 0);
      for (std::size_t k = 1; k < K; ++k) {
        mx = std::max(mx, grid.at3(t, u, k));
      }
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        s += std::exp(grid.at3(t, u, k) - mx);
      }
      const double lse = mx + std::log(s);
      if (std::abs(lse) > tol) {
        throw std::invalid_argument(cat("grid: slice (t=", t, ",u=", u,
                                        ") is not normalized; logsumexp = ", lse));
      }
    }
  }
}

void validate_grid_pair(const NDArray& primary, const NDArray& aux) {
  if (primary.shape != aux.shape) {
    throw std::invalid_argument(cat("grid pair: shapes differ, ",
                                    diffcore::shape_str(primary.shape), " vs ",
                                    diffcore::shape_str(aux.shape)));
  }
  validate_grid(primary);
  validate_grid(aux);
}

AlphaBeta forward_backward(const NDArray& grid, const std::vector<int>& labels) {
  check_grid(grid, labels);
  const std::size_t T = grid.dim(0);
  const std::size_t U = labels.size();

  AlphaBeta ab;
  ab.alpha = NDArray::full({T, U + 1}, kLogZero);
  ab.beta = NDArray::full({T, U + 1}, kLogZero);
  NDArray& alpha = ab.alpha;
  NDArray& beta = ab.beta;

  // alpha(t,u): log prob of having emitted y_1..y_u with frames 0..t-1 fully
  // consumed, now positioned at frame t.
  alpha.at2(0, 0) = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u <= U; ++u) {
      double v = (t == 0 && u == 0) ? 0.0 : kLogZero;
      if (t > 0) {
        v = logaddexp(v, alpha.at2(t - 1, u) + grid.at3(t - 1, u, 0));
      }
      if (u > 0) {
        v = logaddexp(v, alpha.at2(t, u - 1) + grid.at3(t, u - 1, labels[u - 1]));
      }
      alpha.at2(t, u) = v;
    }
  }

  // beta(t,u): log prob of emitting y_{u+1}..y_U from (t,u) and consuming the
  // remaining frames, including the terminal blank.
  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t u = U + 1; u-- > 0;) {
      double v = kLogZero;
      if (t == T - 1 && u == U) {
        v = grid.at3(t, u, 0);
      } else {
        if (t + 1 < T) {
          v = logaddexp(v, grid.at3(t, u, 0) + beta.at2(t + 1, u));
        }
        if (u < U) {
          v = logaddexp(v, grid.at3(t, u, labels[u]) + beta.at2(t, u + 1));
        }
      }
      beta.at2(t, u) = v;
    }
  }

  ab.log_prob = alpha.at2(T - 1, U) + grid.at3(T - 1, U, 0);
  return ab;
}

RnntResult rnnt_loss(const NDArray& grid, const std::vector<int>& labels) {
  validate_grid(grid, 1e-6);
  AlphaBeta ab = forward_backward(grid, labels);
  const std::size_t T = grid.dim(0);
  const std::size_t U = labels.size();
  const double log_prob = ab.log_prob;

  RnntResult res;
  res.loss = -log_prob;
  res.grad = NDArray(grid.shape);

  // d(-logP)/d grid(t,u,k) is the negated occupancy of the matching
  // transition; exp() of sentinel-dominated terms vanishes, which excludes
  // unreachable cells without special casing.
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u <= U; ++u) {
      const double a = ab.alpha.at2(t, u);
      double blank_tail;
      if (t + 1 < T) {
        blank_tail = ab.beta.at2(t + 1, u);
      } else {
        blank_tail = (u == U) ? 0.0 : kLogZero;  // final blank exits the lattice
      }
      const double occ_blank = std::exp(a + grid.at3(t, u, 0) + blank_tail - log_prob);
      res.grad.at3(t, u, 0) = -occ_blank;
      if (u < U) {
        const double occ_emit =
            std::exp(a + grid.at3(t, u, labels[u]) + ab.beta.at2(t, u + 1) - log_prob);
        res.grad.at3(t, u, labels[u]) -= occ_emit;
      }
    }
  }
  return res;
}

std::size_t brute_force_path_count(std::size_t frames, std::size_t labels) {
  // C(frames + labels - 1, labels): emissions placed among all but the
  // terminal blank transition.
  std::size_t n = frames + labels - 1;
  std::size_t k = labels;
  std::size_t c = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    c = c * (n - k + i) / i;
  }
  return c;
}

namespace {

void enumerate_paths(const NDArray& grid, const std::vector<int>& labels, std::size_t t,
                     std::size_t u, double acc, double& total) {
  const std::size_t T = grid.dim(0);
  const std::size_t U = labels.size();
  if (t == T - 1 && u == U) {
    total = logaddexp(total, acc + grid.at3(t, u, 0));
    return;
  }
  if (u < U) {
    enumerate_paths(grid, labels, t, u + 1, acc + grid.at3(t, u, labels[u]), total);
  }
  if (t + 1 < T) {
    enumerate_paths(grid, labels, t + 1, u, acc + grid.at3(t, u, 0), total);
  }
}

}  // namespace

double brute_force_rnnt_loss(const NDArray& grid, const std::vector<int>& labels) {
  check_grid(grid, labels);
  const std::size_t T = grid.dim(0);
  const std::size_t U = labels.size();
  if (T + U > 12) {
    throw std::invalid_argument(cat("brute force: instance too large, T'+U = ", T + U,
                                    " exceeds 12"));
  }
  double total = kLogZero;
  enumerate_paths(grid, labels, 0, 0, 0.0, total);
  return -total;
}

}  // namespace rnntaux::lattice
