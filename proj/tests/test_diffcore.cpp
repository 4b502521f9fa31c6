// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "rnntaux/common.hpp"
#include "rnntaux/diffcore.hpp"

using namespace rnntaux;
using namespace rnntaux::diffcore;

namespace {

NDArray random_array(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  NDArray a(std::move(shape));
  for (double& v : a.data) {
    v = rng.uniform(lo, hi);
  }
  return a;
}

// Central-difference gradient of a scalar graph function w.r.t. one input.
// Rebuilds the graph per evaluation, mirroring define-by-run use.
template <class BuildFn>
double max_rel_error_vs_fd(const BuildFn& build, std::vector<NDArray> inputs,
                           std::size_t wrt, double step = 1e-5) {
  Graph g;
  std::vector<Node*> leaves;
  for (const NDArray& in : inputs) {
    leaves.push_back(g.leaf(in));
  }
  Node* root = build(g, leaves);
  g.backward(root);
  const std::vector<double> analytic = leaves[wrt]->grad;

  double worst = 0.0;
  for (std::size_t c = 0; c < inputs[wrt].numel(); ++c) {
    auto eval = [&](double delta) {
      std::vector<NDArray> shifted = inputs;
      shifted[wrt].data[c] += delta;
      Graph g2;
      std::vector<Node*> l2;
      for (const NDArray& in : shifted) {
        l2.push_back(g2.leaf(in));
      }
      return build(g2, l2)->value.data[0];
    };
    const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
    const double a = analytic.empty() ? 0.0 : analytic[c];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("log_softmax of zeros is uniform") {
  Graph g;
  Node* n = g.log_softmax(g.leaf(NDArray({2}, {0.0, 0.0})));
  CHECK(n->value.data[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  CHECK(n->value.data[1] == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("add broadcasts a vector across rows") {
  Graph g;
  NDArray a({2, 3}, {1, 2, 3, 4, 5, 6});
  Node* out = g.add(g.leaf(a), g.leaf(NDArray({3}, {0.0, 0.0, 0.0})));
  CHECK(out->value.data == a.data);

  Node* out2 = g.add(g.leaf(a), g.leaf(NDArray({3}, {10, 20, 30})));
  CHECK(out2->value.at2(0, 0) == 11);
  CHECK(out2->value.at2(1, 2) == 36);
}

TEST_CASE("logsumexp evaluates the log of the probability sum") {
  Graph g;
  Node* n = g.logsumexp(g.leaf(NDArray({2}, {std::log(0.25), std::log(0.75)})));
  CHECK(n->value.data[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("logsumexp is overflow-safe under large shifts") {
  Rng rng(7);
  NDArray a = random_array({5}, rng);
  NDArray b = a;
  for (double& v : b.data) {
    v += 1000.0;
  }
  Graph g;
  const double base = g.logsumexp(g.leaf(a))->value.data[0];
  const double shifted = g.logsumexp(g.leaf(b))->value.data[0];
  CHECK(shifted - base == doctest::Approx(1000.0).epsilon(1e-12));
  CHECK(std::abs(shifted - base - 1000.0) < 1e-9);
}

TEST_CASE("backward of x*x at x=3 gives 6") {
  Graph g;
  Node* x = g.leaf(NDArray::scalar(3.0));
  Node* y = g.mul(x, x);
  g.backward(y);
  CHECK(x->grad[0] == doctest::Approx(6.0));
}

TEST_CASE("backward of a constant function leaves zero gradients") {
  Graph g;
  Node* x = g.leaf(NDArray::scalar(3.0));
  Node* c = g.constant(5.0);
  g.backward(c);
  CHECK_FALSE(x->has_grad());
  CHECK(x->grad_at(0) == 0.0);
}

TEST_CASE("non-scalar backward root is rejected") {
  Graph g;
  Node* x = g.leaf(NDArray({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(x), std::invalid_argument);
}

TEST_CASE("primitive gradients match central finite differences") {
  Rng rng(11);
  const double tol = 1e-6;

  SUBCASE("matmul") {
    std::vector<NDArray> in = {random_array({3, 4}, rng), random_array({4, 2}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      return g.mean_axis(g.mean_axis(g.tanh(g.matmul(l[0], l[1])), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
    CHECK(max_rel_error_vs_fd(build, in, 1) < tol);
  }
  SUBCASE("matmul with batched leading dims") {
    std::vector<NDArray> in = {random_array({2, 3, 4}, rng), random_array({4, 2}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      Node* m = g.matmul(l[0], l[1]);
      return g.mean_axis(g.mean_axis(g.mean_axis(g.sigmoid(m), 2), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
    CHECK(max_rel_error_vs_fd(build, in, 1) < tol);
  }
  SUBCASE("broadcast add") {
    std::vector<NDArray> in = {random_array({3, 4}, rng), random_array({4}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      return g.mean_axis(g.mean_axis(g.tanh(g.add(l[0], l[1])), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
    CHECK(max_rel_error_vs_fd(build, in, 1) < tol);
  }
  SUBCASE("mul, exp, negate, scale") {
    std::vector<NDArray> in = {random_array({6}, rng), random_array({6}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      Node* prod = g.mul(l[0], g.exp(g.negate(l[1])));
      return g.mean_axis(g.scale(prod, 1.7), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
    CHECK(max_rel_error_vs_fd(build, in, 1) < tol);
  }
  SUBCASE("log_softmax and logsumexp") {
    std::vector<NDArray> in = {random_array({2, 4}, rng)};
    auto build_ls = [](Graph& g, const std::vector<Node*>& l) {
      return g.mean_axis(g.mean_axis(g.log_softmax(l[0]), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build_ls, in, 0) < tol);
    auto build_lse = [](Graph& g, const std::vector<Node*>& l) {
      return g.mean_axis(g.logsumexp(g.tanh(l[0])), 0);
    };
    CHECK(max_rel_error_vs_fd(build_lse, in, 0) < tol);
  }
  SUBCASE("concat on last axis") {
    std::vector<NDArray> in = {random_array({2, 3}, rng), random_array({2, 2}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      Node* c = g.concat_last({l[0], l[1]});
      return g.mean_axis(g.mean_axis(g.tanh(c), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
    CHECK(max_rel_error_vs_fd(build, in, 1) < tol);
  }
  SUBCASE("gather_rows with repeated indices") {
    std::vector<NDArray> in = {random_array({4, 3}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      Node* gr = g.gather_rows(l[0], {1, 1, 3, 0});
      return g.mean_axis(g.mean_axis(g.sigmoid(gr), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
  }
  SUBCASE("take_per_row") {
    std::vector<NDArray> in = {random_array({3, 4}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      return g.mean_axis(g.take_per_row(g.tanh(l[0]), {2, 0, 3}), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
  }
  SUBCASE("outer_sum") {
    std::vector<NDArray> in = {random_array({3, 4}, rng), random_array({2, 4}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      Node* os = g.tanh(g.outer_sum(l[0], l[1]));
      return g.mean_axis(g.mean_axis(g.mean_axis(os, 2), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
    CHECK(max_rel_error_vs_fd(build, in, 1) < tol);
  }
  SUBCASE("slice_axis and stack_rows and reshape") {
    std::vector<NDArray> in = {random_array({3, 4}, rng)};
    auto build = [](Graph& g, const std::vector<Node*>& l) {
      Node* a = g.slice_axis(l[0], 1, 1, 2);      // (3,2)
      Node* r0 = g.reshape(g.slice_axis(a, 0, 0, 1), {2});
      Node* r1 = g.reshape(g.slice_axis(a, 0, 2, 1), {2});
      Node* st = g.stack_rows({r0, r1, r0});       // (3,2)
      return g.mean_axis(g.mean_axis(g.tanh(st), 1), 0);
    };
    CHECK(max_rel_error_vs_fd(build, in, 0) < tol);
  }
}

TEST_CASE("mean of log-softmax matches finite differences") {
  Rng rng(23);
  std::vector<NDArray> in = {random_array({2, 4}, rng)};
  auto build = [](Graph& g, const std::vector<Node*>& l) {
    return g.mean_axis(g.mean_axis(g.log_softmax(l[0]), 1), 0);
  };
  CHECK(max_rel_error_vs_fd(build, in, 0) < 1e-6);
}

TEST_CASE("grad-gate blocks flow without changing forward values") {
  Rng rng(31);
  NDArray w = random_array({3, 3}, rng);
  NDArray x = random_array({3}, rng);

  auto run = [&](bool gated) {
    Graph g;
    Node* wn = g.leaf(w);
    Node* xn = g.leaf(x);
    Node* used = gated ? g.gate(wn) : wn;
    Node* out = g.mean_axis(g.tanh(g.matmul(xn, used)), 0);
    g.backward(out);
    return std::tuple<std::vector<double>, std::vector<double>, std::vector<double>>(
        out->value.data, wn->has_grad() ? wn->grad : std::vector<double>(9, 0.0),
        xn->grad);
  };

  auto [v_open, gw_open, gx_open] = run(false);
  auto [v_closed, gw_closed, gx_closed] = run(true);

  // forward outputs bitwise equal
  CHECK(std::memcmp(v_open.data(), v_closed.data(), sizeof(double)) == 0);
  // gradient through the gate is exactly zero
  for (double v : gw_closed) {
    CHECK(v == 0.0);
  }
  bool any_nonzero = false;
  for (double v : gw_open) {
    any_nonzero |= (v != 0.0);
  }
  CHECK(any_nonzero);
  // the ungated path is unaffected
  for (std::size_t i = 0; i < gx_open.size(); ++i) {
    CHECK(gx_open[i] == gx_closed[i]);
  }
}

TEST_CASE("repeated backward calls accumulate additively") {
  Graph g;
  Node* x = g.leaf(NDArray::scalar(3.0));
  Node* y = g.mul(x, x);
  g.backward(y);
  g.backward(y);
  CHECK(x->grad[0] == doctest::Approx(12.0));
  g.zero_grad();
  g.backward(y);
  CHECK(x->grad[0] == doctest::Approx(6.0));
}

TEST_CASE("shape mismatches raise structured errors") {
  Graph g;
  Node* a = g.leaf(NDArray({2, 3}));
  Node* b = g.leaf(NDArray({2, 2}));
  CHECK_THROWS_WITH_AS(g.mul(a, b), doctest::Contains("mul"), std::invalid_argument);
  CHECK_THROWS_AS(g.matmul(a, g.leaf(NDArray({4, 2}))), std::invalid_argument);
  CHECK_THROWS_AS(g.add(a, g.leaf(NDArray({2}))), std::invalid_argument);
  CHECK_THROWS_AS(g.leaf(NDArray({1}, {std::nan("")})), std::invalid_argument);
}

TEST_CASE("finite_diff_check validates an exact quadratic") {
  ParamValues params;
  Rng rng(5);
  params["a"] = random_array({4}, rng);
  params["b"] = random_array({2, 3}, rng);

  auto f = [](const ParamValues& p) {
    double s = 0.0;
    for (const auto& [k, v] : p) {
      for (double x : v.data) {
        s += x * x;
      }
    }
    return s;
  };
  ParamValues grads;
  for (const auto& [k, v] : params) {
    NDArray gkv = v;
    for (double& x : gkv.data) {
      x *= 2.0;
    }
    grads[k] = gkv;
  }
  auto report = finite_diff_check(f, params, grads, 1e-5, 1e-9, 64, 0);
  CHECK(report.pass);
  CHECK(report.max_rel_error <= 1e-9);
}

TEST_CASE("finite_diff_check detects a non-deterministic function") {
  ParamValues params;
  params["a"] = NDArray({1}, {1.0});
  int calls = 0;
  auto f = [&calls](const ParamValues& p) {
    return p.at("a").data[0] + 1e-3 * (calls++);
  };
  ParamValues grads;
  grads["a"] = NDArray({1}, {1.0});
  CHECK_THROWS_AS(finite_diff_check(f, params, grads, 1e-5, 1e-6, 8, 0),
                  std::runtime_error);
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
  ParamValues params;
  params["a"] = NDArray({2}, {0.7, -0.3});
  auto f = [](const ParamValues& p) {
    return p.at("a").data[0] * p.at("a").data[0] + p.at("a").data[1];
  };
  ParamValues grads;
  grads["a"] = NDArray({2}, {2 * 0.7 + 0.5, 1.0});
  auto report = finite_diff_check(f, params, grads, 1e-5, 1e-4, 8, 0);
  CHECK_FALSE(report.pass);
}
