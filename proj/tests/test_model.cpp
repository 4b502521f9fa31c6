// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "rnntaux/common.hpp"
#include "rnntaux/model.hpp"

using namespace rnntaux;
using namespace rnntaux::diffcore;
using namespace rnntaux::model;

namespace {

NDArray random_features(std::size_t T, std::size_t d, Rng& rng) {
  NDArray x({T, d});
  for (double& v : x.data) {
    v = rng.uniform(-1.0, 1.0);
  }
  return x;
}

ParamSet zero_params(const ModelConfig& cfg) {
  ParamSet p = init_params(cfg, 0);
  for (auto& [name, v] : p.values) {
    std::fill(v.data.begin(), v.data.end(), 0.0);
  }
  return p;
}

// Standalone recomputation of one joint cell from raw parameter arrays.
std::vector<double> plain_joint_logprobs(const ParamSet& p, const ModelConfig& cfg,
                                         const double* enc_row, const double* pred_row) {
  const NDArray& we = p.values.at("joint.w_enc");
  const NDArray& wp = p.values.at("joint.w_pred");
  const NDArray& b = p.values.at("joint.b");
  const NDArray& wo = p.values.at("joint.w_out");
  const NDArray& bo = p.values.at("joint.b_out");
  const std::size_t J = cfg.joint_hidden;
  const std::size_t K = cfg.vocab_size;
  std::vector<double> hidden(J, 0.0);
  for (std::size_t j = 0; j < J; ++j) {
    double a = 0.0, c = 0.0;
    for (std::size_t h = 0; h < cfg.encoder_hidden; ++h) {
      a += enc_row[h] * we.at2(h, j);
    }
    for (std::size_t q = 0; q < cfg.pred_hidden; ++q) {
      c += pred_row[q] * wp.at2(q, j);
    }
    hidden[j] = std::tanh(a + c + b.data[j]);
  }
  std::vector<double> logits(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double z = bo.data[k];
    for (std::size_t j = 0; j < J; ++j) {
      z += hidden[j] * wo.at2(j, k);
    }
    logits[k] = z;
  }
  double mx = logits[0];
  for (double z : logits) {
    mx = std::max(mx, z);
  }
  double s = 0.0;
  for (double z : logits) {
    s += std::exp(z - mx);
  }
  const double lse = mx + std::log(s);
  for (double& z : logits) {
    z -= lse;
  }
  return logits;
}

}  // namespace

TEST_CASE("subsampling halves the recorded layer lengths") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.encoder_layers = 5;
  cfg.subsample_after = {1, 2};
  cfg.aux_taps = {2};
  cfg.ce_taps = {2, 5};
  ParamSet p = init_params(cfg, 1);
  Rng rng(2);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(20, cfg.input_dim, rng));
  std::vector<std::size_t> lengths;
  for (Node* layer : enc.layers) {
    lengths.push_back(layer->value.dim(0));
  }
  CHECK(lengths == std::vector<std::size_t>{10, 5, 5, 5, 5});
  // non-increasing and exact ceil halving at subsample layers
  CHECK(enc.frames_out() == 5);
  CHECK(enc.frame_origin[0] == std::vector<std::size_t>{0, 2, 4, 6, 8, 10, 12, 14, 16, 18});
  CHECK(enc.frame_origin[1] == std::vector<std::size_t>{0, 4, 8, 12, 16});
}

TEST_CASE("degenerate one-frame input survives the stack") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.subsample_after = {};
  ParamSet p = init_params(cfg, 1);
  Rng rng(3);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(1, cfg.input_dim, rng));
  for (Node* layer : enc.layers) {
    CHECK(layer->value.dim(0) == 1);
  }
}

TEST_CASE("zero parameters give zero activations, constant over time") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = zero_params(cfg);
  Rng rng(4);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(6, cfg.input_dim, rng));
  for (double v : enc.layers[0]->value.data) {
    CHECK(v == 0.0);
  }
  for (double v : enc.top()->value.data) {
    CHECK(v == 0.0);
  }
}

TEST_CASE("empty input is rejected naming the minimum length") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 1);
  Graph g;
  ParamBinding pb(g, p, cfg);
  CHECK_THROWS_WITH_AS(encode(pb, NDArray({0, cfg.input_dim})),
                       doctest::Contains("minimum T is 1"), std::invalid_argument);
}

TEST_CASE("prediction network is causal") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 7);
  Graph g;
  ParamBinding pb(g, p, cfg);

  Node* a = predict(pb, {1, 2, 3});
  Node* b = predict(pb, {1, 2, 4});
  CHECK(a->value.dim(0) == 4);
  // shared first two labels: rows 0..2 identical
  for (std::size_t u = 0; u <= 2; ++u) {
    for (std::size_t i = 0; i < cfg.pred_hidden; ++i) {
      CHECK(a->value.at2(u, i) == b->value.at2(u, i));
    }
  }
  // permuting later labels leaves the early states unchanged
  Node* c = predict(pb, {1, 4, 2});
  for (std::size_t u = 0; u <= 1; ++u) {
    for (std::size_t i = 0; i < cfg.pred_hidden; ++i) {
      CHECK(a->value.at2(u, i) == c->value.at2(u, i));
    }
  }
  // the start state alone serves an empty prefix
  Node* start = predict(pb, {});
  CHECK(start->value.dim(0) == 1);
  for (std::size_t i = 0; i < cfg.pred_hidden; ++i) {
    CHECK(start->value.at2(0, i) == a->value.at2(0, i));
  }
  CHECK_THROWS_AS(predict(pb, {99}), std::invalid_argument);
}

TEST_CASE("incremental predictor steps reproduce the batched rows") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.pred_layers = 2;
  ParamSet p = init_params(cfg, 11);
  Graph g;
  ParamBinding pb(g, p, cfg);
  std::vector<int> labels = {2, 1, 3};
  Node* rows = predict(pb, labels);
  PredictorState st = predictor_start(pb);
  for (std::size_t u = 0;; ++u) {
    for (std::size_t i = 0; i < cfg.pred_hidden; ++i) {
      CHECK(st.output->value.data[i] == rows->value.at2(u, i));
    }
    if (u == labels.size()) {
      break;
    }
    st = predictor_step(pb, st, labels[u]);
  }
}

TEST_CASE("joint grid is normalized and matches standalone recomputation") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 13);
  Rng rng(14);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(7, cfg.input_dim, rng));
  Node* pred = predict(pb, {1, 2});
  Node* grid = join_grid(pb, enc.top(), pred);

  const std::size_t T = grid->value.dim(0);
  const std::size_t U1 = grid->value.dim(1);
  const std::size_t K = grid->value.dim(2);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        s += std::exp(grid->value.at3(t, u, k));
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }

  // pointwise recomputation oracle
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      const double* enc_row = enc.top()->value.data.data() + t * cfg.encoder_hidden;
      const double* pred_row = pred->value.data.data() + u * cfg.pred_hidden;
      std::vector<double> expect = plain_joint_logprobs(p, cfg, enc_row, pred_row);
      for (std::size_t k = 0; k < K; ++k) {
        CHECK(grid->value.at3(t, u, k) == doctest::Approx(expect[k]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("zero joint weights give a uniform posterior everywhere") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 17);
  for (auto& [name, v] : p.values) {
    if (name.rfind("joint.", 0) == 0) {
      std::fill(v.data.begin(), v.data.end(), 0.0);
    }
  }
  Rng rng(18);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(5, cfg.input_dim, rng));
  Node* grid = join_grid(pb, enc.top(), predict(pb, {1}));
  const double expect = -std::log(static_cast<double>(cfg.vocab_size));
  for (double v : grid->value.data) {
    CHECK(v == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("auxiliary grid shares the primary grid geometry") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 19);
  Rng rng(20);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(9, cfg.input_dim, rng));
  Node* pred = predict(pb, {1, 2, 3});
  Node* grid = join_grid(pb, enc.top(), pred);
  Node* aux = aux_posterior_grid(pb, enc, 2, pred);
  CHECK(aux->value.shape == grid->value.shape);
  CHECK_THROWS_AS(aux_posterior_grid(pb, enc, 1, pred), std::invalid_argument);
}

TEST_CASE("aux branch with a pass-through head reproduces the primary grid") {
  // T=1 gives a single encoder output row, so an MLP with w2 = 0 and
  // b2 = that row is exactly identity-equivalent on the tapped input and the
  // shared decoder must produce the identical grid.
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 23);
  Rng rng(24);
  NDArray x = random_features(1, cfg.input_dim, rng);
  std::vector<int> y = {1, 3};

  std::vector<double> top_row;
  {
    Graph g0;
    ParamBinding pb0(g0, p, cfg);
    EncoderOutput enc0 = encode(pb0, x);
    REQUIRE(enc0.frames_out() == 1);
    top_row = enc0.top()->value.data;
  }
  p.values["aux.2.w2"] = NDArray({cfg.aux_mlp_hidden, cfg.encoder_hidden});
  p.values["aux.2.b2"] = NDArray({cfg.encoder_hidden}, top_row);

  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, x);
  Node* pred = predict(pb, y);
  Node* grid = join_grid(pb, enc.top(), pred);
  Node* aux = aux_posterior_grid(pb, enc, 2, pred);
  REQUIRE(aux->value.shape == grid->value.shape);
  for (std::size_t i = 0; i < grid->value.numel(); ++i) {
    CHECK(aux->value.data[i] == grid->value.data[i]);
  }
}

TEST_CASE("aux branch gradients avoid the decoder but reach the head and shared encoder") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 29);
  Rng rng(30);
  NDArray x = random_features(8, cfg.input_dim, rng);
  std::vector<int> y = {1, 2};

  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, x);
  Node* pred = predict(pb, y);
  Node* aux = aux_posterior_grid(pb, enc, 2, pred);
  Node* root = g.mean_axis(g.mean_axis(g.mean_axis(aux, 2), 1), 0);
  g.backward(root);
  auto grads = pb.grads();

  for (const auto& [name, grad] : grads) {
    const Partition part = partition_of(name, cfg);
    double norm = 0.0;
    for (double v : grad.data) {
      norm += std::abs(v);
    }
    if (part == Partition::Decoder) {
      CHECK_MESSAGE(norm == 0.0, name);
    } else if (part == Partition::AuxHead) {
      CHECK_MESSAGE(norm > 0.0, name);
    } else if (part == Partition::EncShared) {
      CHECK_MESSAGE(norm > 0.0, name);
    }
  }

  // finite differences on a few aux-head coordinates
  auto eval = [&](const ParamSet& ps) {
    Graph g2;
    ParamBinding pb2(g2, ps, cfg);
    EncoderOutput e2 = encode(pb2, x);
    Node* pr2 = predict(pb2, y);
    Node* a2 = aux_posterior_grid(pb2, e2, 2, pr2);
    return g2.mean_axis(g2.mean_axis(g2.mean_axis(a2, 2), 1), 0)->value.data[0];
  };
  const double step = 1e-5;
  const NDArray& gw1 = grads.at("aux.2.w1");
  for (std::size_t c = 0; c < 5; ++c) {
    ParamSet pp = p, pm = p;
    pp.values["aux.2.w1"].data[c] += step;
    pm.values["aux.2.w1"].data[c] -= step;
    const double numeric = (eval(pp) - eval(pm)) / (2 * step);
    const double denom = std::max({std::abs(gw1.data[c]), std::abs(numeric), 1e-8});
    CHECK(std::abs(gw1.data[c] - numeric) / denom < 1e-6);
  }
}

TEST_CASE("ce heads are normalized; the top head is a bare linear map") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 31);
  Rng rng(32);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(6, cfg.input_dim, rng));

  Node* mid = ce_frame_logprobs(pb, enc, 2);
  Node* top = ce_frame_logprobs(pb, enc, 3);
  for (Node* lp : {mid, top}) {
    for (std::size_t r = 0; r < lp->value.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < lp->value.dim(1); ++k) {
        s += std::exp(lp->value.at2(r, k));
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  // top head has exactly hidden*|S| + |S| parameters
  const std::size_t expect =
      cfg.encoder_hidden * cfg.state_vocab_size + cfg.state_vocab_size;
  CHECK(p.values.at("ce.3.w").numel() + p.values.at("ce.3.b").numel() == expect);
  CHECK(p.values.count("ce.3.w1") == 0);
  CHECK_THROWS_AS(ce_frame_logprobs(pb, enc, 1), std::invalid_argument);
}

TEST_CASE("zero ce head weights give the uniform state posterior") {
  ModelConfig cfg = ModelConfig::toy();
  ParamSet p = init_params(cfg, 33);
  for (auto& [name, v] : p.values) {
    if (name.rfind("ce.", 0) == 0) {
      std::fill(v.data.begin(), v.data.end(), 0.0);
    }
  }
  Rng rng(34);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(4, cfg.input_dim, rng));
  Node* lp = ce_frame_logprobs(pb, enc, 2);
  const double expect = -std::log(static_cast<double>(cfg.state_vocab_size));
  for (double v : lp->value.data) {
    CHECK(v == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("parameter partitions cover every array exactly once with the expected sizes") {
  ModelConfig cfg = ModelConfig::desk_default();
  ParamSet p = init_params(cfg, 37);

  const std::size_t H = cfg.encoder_hidden;
  const std::size_t P = cfg.pred_hidden;
  const std::size_t J = cfg.joint_hidden;
  const std::size_t K = cfg.vocab_size;
  const std::size_t A = cfg.aux_mlp_hidden;
  const std::size_t S = cfg.state_vocab_size;
  std::size_t expect = 0;
  for (std::size_t l = 1; l <= cfg.encoder_layers; ++l) {
    const std::size_t in = (l == 1) ? cfg.input_dim : H;
    expect += in * 4 * H + H * 4 * H + 4 * H;
  }
  expect += K * P;
  for (std::size_t l = 1; l <= cfg.pred_layers; ++l) {
    expect += P * 4 * P + P * 4 * P + 4 * P;
  }
  expect += H * J + P * J + J + J * K + K;
  expect += cfg.aux_taps.size() * (H * A + A + A * H + H);
  for (std::size_t l : cfg.ce_taps) {
    expect += (l < cfg.encoder_layers) ? (H * A + A + A * S + S) : (H * S + S);
  }
  CHECK(p.element_count() == expect);

  std::map<Partition, std::size_t> sizes;
  for (const auto& [name, v] : p.values) {
    sizes[partition_of(name, cfg)] += v.numel();
  }
  std::size_t total = 0;
  for (const auto& [part, n] : sizes) {
    total += n;
  }
  CHECK(total == expect);
  CHECK(sizes[Partition::EncShared] > 0);
  CHECK(sizes[Partition::EncUpper] > 0);
  CHECK(sizes[Partition::Decoder] > 0);
}

TEST_CASE("tap decimation aligns longer layers with the final frame rate") {
  CHECK(decimation_indices(16, 4) == std::vector<std::size_t>{0, 4, 8, 12});
  CHECK(decimation_indices(5, 5) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(decimation_indices(7, 4) == std::vector<std::size_t>{0, 2, 4, 6});
  CHECK_THROWS_AS(decimation_indices(6, 4), std::invalid_argument);

  // an aux tap placed before the last subsampling stage is decimated to T'
  ModelConfig cfg = ModelConfig::toy();
  cfg.encoder_layers = 3;
  cfg.subsample_after = {2};
  cfg.aux_taps = {1};
  cfg.ce_taps = {3};
  ParamSet p = init_params(cfg, 41);
  Rng rng(42);
  Graph g;
  ParamBinding pb(g, p, cfg);
  EncoderOutput enc = encode(pb, random_features(9, cfg.input_dim, rng));
  CHECK(enc.layers[0]->value.dim(0) == 9);
  CHECK(enc.frames_out() == 5);
  Node* pred = predict(pb, {1});
  Node* aux = aux_posterior_grid(pb, enc, 1, pred);
  CHECK(aux->value.dim(0) == 5);
}

TEST_CASE("config validation rejects malformed tap sets") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.aux_taps = {cfg.encoder_layers};  // tap at L is not allowed
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig::toy();
  cfg.ce_taps = {cfg.encoder_layers};  // but a CE tap at L is
  CHECK_NOTHROW(cfg.validate());
  cfg = ModelConfig::toy();
  cfg.vocab_size = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
