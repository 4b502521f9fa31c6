// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

namespace rnntaux::eval {

struct WerBreakdown {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_tokens = 0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
  // empty-reference corpora divide by 1 rather than 0
  double wer() const {
    return static_cast<double>(errors()) /
           static_cast<double>(ref_tokens > 0 ? ref_tokens : 1);
  }

  WerBreakdown& operator+=(const WerBreakdown& o);
};

// Levenshtein alignment with unit costs; equal-cost ties resolve
// match > substitute > delete > insert.
WerBreakdown edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp);

// Pooled corpus WER: error counts and reference sizes are summed across
// utterances (aligned by id) before the division.
WerBreakdown corpus_wer(const std::map<std::string, std::vector<int>>& refs,
                        const std::map<std::string, std::vector<int>>& hyps);

// Relative WER reduction: the unweighted mean over sets of
// (baseline - candidate) / baseline, as a percentage.
double werr(const std::map<std::string, double>& baseline,
            const std::map<std::string, double>& candidate);

}  // namespace rnntaux::eval
