// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/decode.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "rnntaux/common.hpp"

namespace rnntaux::decode {

using detail::cat;
using diffcore::Graph;
using diffcore::Node;
using diffcore::logaddexp;
using model::ModelConfig;
using model::ParamBinding;
using model::ParamSet;
using model::PredictorState;

NGramLM::NGramLM(std::size_t order, std::size_t num_labels)
    : order_(order), num_labels_(num_labels) {
  if (order != 1 && order != 2) {
    throw std::invalid_argument("ngram: order must be 1 or 2");
  }
  if (num_labels == 0) {
    throw std::invalid_argument("ngram: empty label vocabulary");
  }
  const std::size_t contexts = (order == 1) ? 1 : num_labels + 1;
  table_.assign(contexts * (num_labels + 1), 0.0);
}

double NGramLM::log_prob(int context, int label) const {
  if (label < 0 || static_cast<std::size_t>(label) > num_labels_) {
    throw std::invalid_argument(cat("ngram: label ", label, " outside [0,", num_labels_,
                                    "]"));
  }
  const std::size_t ctx =
      (order_ == 1) ? 0 : static_cast<std::size_t>(std::max(context, 0));
  // table rows: columns 0..num_labels-1 are labels 1..num_labels, the last
  // column is the end marker
  const std::size_t col = (label == 0) ? num_labels_ : static_cast<std::size_t>(label - 1);
  return table_[ctx * (num_labels_ + 1) + col];
}

NGramLM train_ngram_lm(const std::vector<std::vector<int>>& transcripts,
                       std::size_t order, std::size_t num_labels) {
  if (transcripts.empty()) {
    throw std::invalid_argument("ngram: empty corpus");
  }
  NGramLM lm(order, num_labels);
  const std::size_t vocab = num_labels + 1;  // labels + end marker

  if (order == 1) {
    std::vector<std::size_t> counts(num_labels, 0);
    std::size_t total = 0;
    for (const auto& y : transcripts) {
      for (int tok : y) {
        if (tok < 1 || static_cast<std::size_t>(tok) > num_labels) {
          throw std::invalid_argument(cat("ngram: token ", tok, " outside [1,",
                                          num_labels, "]"));
        }
        ++counts[tok - 1];
        ++total;
      }
    }
    for (std::size_t w = 0; w < vocab; ++w) {
      const std::size_t c = (w < num_labels) ? counts[w] : 0;
      lm.table_[w] = std::log(static_cast<double>(c + 1) /
                              static_cast<double>(total + vocab));
    }
    return lm;
  }

  // bigram: contexts are start (0) and each label; only label-to-label
  // transitions are counted so every conditional normalizes with the same
  // add-one mass
  const std::size_t contexts = num_labels + 1;
  std::vector<std::size_t> pair_counts(contexts * vocab, 0);
  std::vector<std::size_t> ctx_totals(contexts, 0);
  for (const auto& y : transcripts) {
    int prev = 0;
    for (int tok : y) {
      if (tok < 1 || static_cast<std::size_t>(tok) > num_labels) {
        throw std::invalid_argument(cat("ngram: token ", tok, " outside [1,", num_labels,
                                        "]"));
      }
      ++pair_counts[static_cast<std::size_t>(prev) * vocab +
                    static_cast<std::size_t>(tok - 1)];
      ++ctx_totals[static_cast<std::size_t>(prev)];
      prev = tok;
    }
  }
  for (std::size_t c = 0; c < contexts; ++c) {
    for (std::size_t w = 0; w < vocab; ++w) {
      lm.table_[c * vocab + w] =
          std::log(static_cast<double>(pair_counts[c * vocab + w] + 1) /
                   static_cast<double>(ctx_totals[c] + vocab));
    }
  }
  return lm;
}

namespace {

// per-utterance decode context: encoder projections computed once
struct DecodeContext {
  Graph graph;
  std::unique_ptr<ParamBinding> pb;
  Node* enc_proj = nullptr;  // (T', J)
  std::size_t frames = 0;

  DecodeContext(const NDArray& features, const ParamSet& params, const ModelConfig& cfg) {
    pb = std::make_unique<ParamBinding>(graph, params, cfg);
    model::EncoderOutput enc = model::encode(*pb, features);
    enc_proj = model::enc_joint_proj(*pb, enc.top());
    frames = enc.frames_out();
  }

  Node* frame_row(std::size_t t) {
    return graph.reshape(graph.slice_axis(enc_proj, 0, t, 1),
                         {enc_proj->value.dim(1)});
  }

  const std::vector<double>& posterior(Node* frame, Node* pred_proj) {
    return model::joint_row_from_proj(*pb, frame, pred_proj)->value.data;
  }
};

std::size_t argmax_lowest(const std::vector<double>& row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > row[best]) {
      best = k;
    }
  }
  return best;
}

struct BeamHyp {
  double score = 0.0;
  PredictorState state;
  Node* pred_proj = nullptr;
};

}  // namespace

std::vector<int> greedy_decode(const NDArray& features, const ParamSet& params,
                               const ModelConfig& config,
                               std::size_t max_symbols_per_frame) {
  if (max_symbols_per_frame < 1) {
    throw std::invalid_argument("greedy: max_symbols_per_frame must be >= 1");
  }
  DecodeContext ctx(features, params, config);
  PredictorState state = model::predictor_start(*ctx.pb);
  Node* pred_proj = model::pred_joint_proj(*ctx.pb, state.output);

  std::vector<int> out;
  for (std::size_t t = 0; t < ctx.frames; ++t) {
    Node* frame = ctx.frame_row(t);
    for (std::size_t emitted = 0; emitted < max_symbols_per_frame; ++emitted) {
      const std::size_t k = argmax_lowest(ctx.posterior(frame, pred_proj));
      if (k == 0) {
        break;
      }
      out.push_back(static_cast<int>(k));
      state = model::predictor_step(*ctx.pb, state, static_cast<int>(k));
      pred_proj = model::pred_joint_proj(*ctx.pb, state.output);
    }
  }
  return out;
}

std::vector<Hypothesis> beam_search(const NDArray& features, const ParamSet& params,
                                    const ModelConfig& config, std::size_t beam_width,
                                    const std::optional<Fusion>& fusion,
                                    std::size_t max_symbols_per_frame) {
  if (beam_width == 0) {
    throw std::invalid_argument("beam: beam_width must be >= 1");
  }
  const double mu = fusion ? fusion->mu : 0.0;
  const NGramLM* lm = fusion ? fusion->lm : nullptr;
  if (fusion && lm == nullptr) {
    throw std::invalid_argument("beam: fusion requested without a language model");
  }

  DecodeContext ctx(features, params, config);
  using Labels = std::vector<int>;

  std::map<Labels, BeamHyp> beam;
  {
    BeamHyp root;
    root.state = model::predictor_start(*ctx.pb);
    root.pred_proj = model::pred_joint_proj(*ctx.pb, root.state.output);
    root.score = 0.0;
    beam.emplace(Labels{}, root);
  }

  for (std::size_t t = 0; t < ctx.frames; ++t) {
    Node* frame = ctx.frame_row(t);
    std::map<Labels, BeamHyp> finals;
    std::map<Labels, BeamHyp> active = std::move(beam);

    auto merge_final = [&](const Labels& labels, double score, const BeamHyp& src) {
      auto it = finals.find(labels);
      if (it == finals.end()) {
        BeamHyp h = src;
        h.score = score;
        finals.emplace(labels, std::move(h));
      } else {
        it->second.score = logaddexp(it->second.score, score);
      }
    };

    for (std::size_t round = 0; round <= max_symbols_per_frame; ++round) {
      // candidate extensions of this round; keys are unique because every
      // child determines its parent (prefix) and emitted label
      struct Candidate {
        double score;
        const BeamHyp* parent;
        int label;
      };
      std::map<Labels, Candidate> extensions;

      for (const auto& [labels, hyp] : active) {
        const std::vector<double>& row = ctx.posterior(frame, hyp.pred_proj);
        merge_final(labels, hyp.score + row[0], hyp);
        if (round == max_symbols_per_frame) {
          continue;  // emission cap: this round only consumes the blank
        }
        for (std::size_t k = 1; k < row.size(); ++k) {
          double s = hyp.score + row[k];
          if (lm != nullptr) {
            const int context = labels.empty() ? 0 : labels.back();
            s += mu * lm->log_prob(context, static_cast<int>(k));
          }
          Labels child = labels;
          child.push_back(static_cast<int>(k));
          extensions.emplace(std::move(child),
                             Candidate{s, &hyp, static_cast<int>(k)});
        }
      }
      if (extensions.empty()) {
        break;
      }

      // prune finalized and extending candidates together: survivors are the
      // beam_width best, everything else is discarded for this frame
      struct Ranked {
        double score;
        bool is_final;
        const Labels* labels;
      };
      std::vector<Ranked> ranked;
      ranked.reserve(finals.size() + extensions.size());
      for (const auto& [labels, hyp] : finals) {
        ranked.push_back({hyp.score, true, &labels});
      }
      for (const auto& [labels, cand] : extensions) {
        ranked.push_back({cand.score, false, &labels});
      }
      std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        if (a.score != b.score) {
          return a.score > b.score;
        }
        if (a.is_final != b.is_final) {
          return a.is_final;
        }
        return *a.labels < *b.labels;
      });
      if (ranked.size() > beam_width) {
        ranked.resize(beam_width);
      }

      std::map<Labels, BeamHyp> surviving_finals;
      std::map<Labels, BeamHyp> next_active;
      for (const Ranked& r : ranked) {
        if (r.is_final) {
          surviving_finals.emplace(*r.labels, finals.at(*r.labels));
        } else {
          const Candidate& cand = extensions.at(*r.labels);
          BeamHyp child;
          child.score = cand.score;
          child.state = model::predictor_step(*ctx.pb, cand.parent->state, cand.label);
          child.pred_proj = model::pred_joint_proj(*ctx.pb, child.state.output);
          next_active.emplace(*r.labels, std::move(child));
        }
      }
      finals = std::move(surviving_finals);
      active = std::move(next_active);
      if (active.empty()) {
        break;
      }
    }
    if (finals.size() > beam_width) {
      std::vector<std::pair<double, const Labels*>> order;
      order.reserve(finals.size());
      for (const auto& [labels, hyp] : finals) {
        order.push_back({hyp.score, &labels});
      }
      std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) {
          return a.first > b.first;
        }
        return *a.second < *b.second;
      });
      std::map<Labels, BeamHyp> trimmed;
      for (std::size_t i = 0; i < beam_width; ++i) {
        trimmed.emplace(*order[i].second, finals.at(*order[i].second));
      }
      finals = std::move(trimmed);
    }
    beam = std::move(finals);
  }

  std::vector<Hypothesis> nbest;
  nbest.reserve(beam.size());
  for (const auto& [labels, hyp] : beam) {
    nbest.push_back({labels, hyp.score});
  }
  std::sort(nbest.begin(), nbest.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) {
      return a.score > b.score;
    }
    return a.labels < b.labels;
  });
  if (nbest.size() > beam_width) {
    nbest.resize(beam_width);
  }
  return nbest;
}

}  // namespace rnntaux::decode
