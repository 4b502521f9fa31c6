// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/eval.hpp"

#include <stdexcept>

#include "rnntaux/common.hpp"

namespace rnntaux::eval {

using detail::cat;

WerBreakdown& WerBreakdown::operator+=(const WerBreakdown& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  ref_tokens += o.ref_tokens;
  return *this;
}

WerBreakdown edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const std::size_t m = ref.size();
  const std::size_t n = hyp.size();
  std::vector<std::size_t> dp((m + 1) * (n + 1));
  auto cell = [&](std::size_t i, std::size_t j) -> std::size_t& {
    return dp[i * (n + 1) + j];
  };
  for (std::size_t i = 0; i <= m; ++i) {
    cell(i, 0) = i;
  }
  for (std::size_t j = 0; j <= n; ++j) {
    cell(0, j) = j;
  }
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      const std::size_t diag = cell(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const std::size_t del = cell(i - 1, j) + 1;
      const std::size_t ins = cell(i, j - 1) + 1;
      cell(i, j) = std::min({diag, del, ins});
    }
  }

  WerBreakdown out;
  out.ref_tokens = m;
  std::size_t i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] && cell(i, j) == cell(i - 1, j - 1)) {
      --i, --j;
    } else if (i > 0 && j > 0 && cell(i, j) == cell(i - 1, j - 1) + 1) {
      ++out.substitutions;
      --i, --j;
    } else if (i > 0 && cell(i, j) == cell(i - 1, j) + 1) {
      ++out.deletions;
      --i;
    } else {
      ++out.insertions;
      --j;
    }
  }
  return out;
}

WerBreakdown corpus_wer(const std::map<std::string, std::vector<int>>& refs,
                        const std::map<std::string, std::vector<int>>& hyps) {
  if (refs.size() != hyps.size()) {
    throw std::invalid_argument(cat("corpus wer: ", refs.size(), " references vs ",
                                    hyps.size(), " hypotheses"));
  }
  WerBreakdown pooled;
  for (const auto& [id, ref] : refs) {
    auto it = hyps.find(id);
    if (it == hyps.end()) {
      throw std::invalid_argument(cat("corpus wer: no hypothesis for id '", id, "'"));
    }
    pooled += edit_distance(ref, it->second);
  }
  return pooled;
}

double werr(const std::map<std::string, double>& baseline,
            const std::map<std::string, double>& candidate) {
  if (baseline.size() != candidate.size() || baseline.empty()) {
    throw std::invalid_argument("werr: set keys must match and be nonempty");
  }
  double sum = 0.0;
  for (const auto& [set, base] : baseline) {
    auto it = candidate.find(set);
    if (it == candidate.end()) {
      throw std::invalid_argument(cat("werr: candidate is missing set '", set, "'"));
    }
    if (!(base > 0.0)) {
      throw std::invalid_argument(cat("werr: baseline wer for set '", set,
                                      "' must be positive"));
    }
    sum += (base - it->second) / base;
  }
  return 100.0 * sum / static_cast<double>(baseline.size());
}

}  // namespace rnntaux::eval
