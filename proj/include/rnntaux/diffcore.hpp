// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace rnntaux::diffcore {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of 64-bit reals. Rank 0 (empty shape) is a scalar.
struct NDArray {
  Shape shape;
  std::vector<double> data;

  NDArray() = default;
  explicit NDArray(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
  NDArray(Shape s, std::vector<double> d);

  static NDArray scalar(double v);
  static NDArray full(Shape s, double v);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& at2(std::size_t i, std::size_t j);
  double at2(std::size_t i, std::size_t j) const;
  double& at3(std::size_t i, std::size_t j, std::size_t k);
  double at3(std::size_t i, std::size_t j, std::size_t k) const;

  bool same_shape(const NDArray& o) const { return shape == o.shape; }
  bool all_finite() const;
};

enum class OpKind {
  Leaf,
  Gate,
  Reshape,
  MatMul,
  Add,
  Mul,
  Tanh,
  Sigmoid,
  Exp,
  Negate,
  Scale,
  LogSoftmax,
  LogSumExp,
  Concat,
  StackRows,
  MeanAxis,
  GatherRows,
  TakePerRow,
  OuterSum,
  SliceAxis,
  Custom,
};

const char* op_name(OpKind k);

// Backward hook for Custom nodes: given the node's upstream gradient,
// accumulate into the supplied per-parent gradient buffers.
using CustomBackward =
    std::function<void(const std::vector<double>& upstream,
                       const std::vector<std::vector<double>*>& parent_grads)>;

struct Node {
  OpKind kind;
  std::size_t id = 0;
  std::vector<Node*> parents;
  NDArray value;
  // Accumulated gradient; empty until backward first touches this node.
  std::vector<double> grad;
  // When false, backward writes nothing into this node's parents.
  bool grad_gate = true;

  // op attributes
  std::size_t axis = 0;
  std::size_t start = 0;
  double scalar = 0.0;
  std::vector<std::size_t> indices;
  CustomBackward custom_backward;

  bool has_grad() const { return !grad.empty(); }
  double grad_at(std::size_t i) const { return grad.empty() ? 0.0 : grad[i]; }
};

// Define-by-run computation graph. Node values are computed eagerly at
// construction; creation order is a topological order, so backward is a
// single reverse sweep. Single-threaded per instance.
class Graph {
 public:
  Node* leaf(NDArray value);
  Node* constant(double v) { return leaf(NDArray::scalar(v)); }

  Node* reshape(Node* a, Shape shape);
  Node* matmul(Node* a, Node* b);
  Node* add(Node* a, Node* b);  // b may broadcast over a's leading axes
  Node* mul(Node* a, Node* b);
  Node* tanh(Node* a);
  Node* sigmoid(Node* a);
  Node* exp(Node* a);
  Node* negate(Node* a);
  Node* scale(Node* a, double c);
  Node* log_softmax(Node* a);  // last axis
  Node* logsumexp(Node* a);    // reduces last axis
  Node* concat(const std::vector<Node*>& parts, std::size_t axis);
  Node* concat_last(const std::vector<Node*>& parts);
  Node* stack_rows(const std::vector<Node*>& rows);
  Node* mean_axis(Node* a, std::size_t axis);
  Node* gather_rows(Node* a, std::vector<std::size_t> idx);
  Node* take_per_row(Node* a, std::vector<std::size_t> col_idx);
  Node* outer_sum(Node* a, Node* b);
  Node* slice_axis(Node* a, std::size_t axis, std::size_t start, std::size_t len);
  Node* gate(Node* a);  // identity with a closed grad-gate
  Node* custom(std::vector<Node*> parents, NDArray value, CustomBackward backward);

  // Accumulates d(root)/d(node) into every reachable node's grad.
  // root must be scalar-valued. Repeated calls accumulate additively.
  void backward(Node* root);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

 private:
  Node* push(OpKind kind, std::vector<Node*> parents, NDArray value);
  void propagate(const Node& n, const std::vector<double>& g,
                 std::vector<std::vector<double>>& wave);

  std::vector<std::unique_ptr<Node>> nodes_;
};

double logaddexp(double a, double b);

// ---------------------------------------------------------------------------
// Finite-difference verification harness.

using ParamValues = std::map<std::string, NDArray>;

struct GradCheckArray {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  std::map<std::string, GradCheckArray> arrays;
};

// Central differences on sampled coordinates against the supplied analytic
// gradients. f must be deterministic; two base evaluations are compared
// bitwise and a mismatch raises. Relative error uses
// |analytic - numeric| / max(|analytic|, |numeric|, denom_floor).
//
// denom_floor absorbs coordinates whose true gradient sits below the
// finite-difference noise floor: one ulp of the objective divided by 2*step
// (about 5e-11 for a loss near 5 at step 1e-5) bounds the achievable
// absolute accuracy, so floors far below step*noise make near-zero
// coordinates fail on rounding alone.
GradCheckReport finite_diff_check(
    const std::function<double(const ParamValues&)>& f,
    const ParamValues& params, const ParamValues& analytic_grads, double step,
    double tol, std::size_t max_coords_per_array, std::uint64_t seed,
    double denom_floor = 1e-5);

}  // namespace rnntaux::diffcore
