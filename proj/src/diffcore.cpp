// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "rnntaux/common.hpp"

namespace rnntaux::diffcore {

using detail::cat;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      s += ",";
    }
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

NDArray::NDArray(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (data.size() != shape_numel(shape)) {
    throw std::invalid_argument(cat("NDArray: data length ", data.size(),
                                    " does not match shape ", shape_str(shape)));
  }
}

NDArray NDArray::scalar(double v) { return NDArray(Shape{}, {v}); }

NDArray NDArray::full(Shape s, double v) {
  NDArray a(std::move(s));
  std::fill(a.data.begin(), a.data.end(), v);
  return a;
}

double& NDArray::at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
double NDArray::at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
double& NDArray::at3(std::size_t i, std::size_t j, std::size_t k) {
  return data[(i * shape[1] + j) * shape[2] + k];
}
double NDArray::at3(std::size_t i, std::size_t j, std::size_t k) const {
  return data[(i * shape[1] + j) * shape[2] + k];
}

bool NDArray::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Gate: return "gate";
    case OpKind::Reshape: return "reshape";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Negate: return "negate";
    case OpKind::Scale: return "scale";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LogSumExp: return "logsumexp";
    case OpKind::Concat: return "concat";
    case OpKind::StackRows: return "stack_rows";
    case OpKind::MeanAxis: return "mean_axis";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::TakePerRow: return "take_per_row";
    case OpKind::OuterSum: return "outer_sum";
    case OpKind::SliceAxis: return "slice_axis";
    case OpKind::Custom: return "custom";
  }
  return "?";
}

double logaddexp(double a, double b) {
  if (a < b) {
    std::swap(a, b);
  }
  const double d = b - a;  // <= 0
  if (d < -745.0) {
    return a;
  }
  return a + std::log1p(std::exp(d));
}

namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw std::invalid_argument(cat(op_name(kind), ": ", detail));
}

void check_finite_result(OpKind kind, const NDArray& v) {
  if (!v.all_finite()) {
    throw std::runtime_error(cat(op_name(kind), ": non-finite result"));
  }
}

// Collapses a's leading axes: a viewed as (rows, cols) with cols = last dim.
std::size_t leading_rows(const NDArray& a) {
  return a.rank() == 0 ? 1 : a.numel() / a.shape.back();
}

}  // namespace

Node* Graph::push(OpKind kind, std::vector<Node*> parents, NDArray value) {
  auto n = std::make_unique<Node>();
  n->kind = kind;
  n->id = nodes_.size();
  n->parents = std::move(parents);
  n->value = std::move(value);
  Node* raw = n.get();
  nodes_.push_back(std::move(n));
  return raw;
}

Node* Graph::leaf(NDArray value) {
  if (!value.all_finite()) {
    throw std::invalid_argument("leaf: non-finite input");
  }
  return push(OpKind::Leaf, {}, std::move(value));
}

Node* Graph::gate(Node* a) {
  Node* n = push(OpKind::Gate, {a}, a->value);
  n->grad_gate = false;
  return n;
}

Node* Graph::reshape(Node* a, Shape shape) {
  if (shape_numel(shape) != a->value.numel()) {
    shape_error(OpKind::Reshape, cat("cannot reshape ", shape_str(a->value.shape),
                                     " to ", shape_str(shape)));
  }
  NDArray v(std::move(shape), a->value.data);
  return push(OpKind::Reshape, {a}, std::move(v));
}

Node* Graph::matmul(Node* a, Node* b) {
  const NDArray& A = a->value;
  const NDArray& B = b->value;
  if (A.rank() < 1 || B.rank() != 2) {
    shape_error(OpKind::MatMul, cat("operands must be (...,K) x (K,N); got ",
                                    shape_str(A.shape), " x ", shape_str(B.shape)));
  }
  const std::size_t K = A.shape.back();
  if (B.shape[0] != K) {
    shape_error(OpKind::MatMul, cat("inner dimensions differ: ", shape_str(A.shape),
                                    " x ", shape_str(B.shape)));
  }
  const std::size_t M = leading_rows(A);
  const std::size_t N = B.shape[1];
  Shape out_shape(A.shape.begin(), A.shape.end() - 1);
  out_shape.push_back(N);
  NDArray C(out_shape);
  const double* pa = A.data.data();
  const double* pb = B.data.data();
  double* pc = C.data.data();
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t k = 0; k < K; ++k) {
      const double av = pa[m * K + k];
      if (av != 0.0) {
        const double* brow = pb + k * N;
        double* crow = pc + m * N;
        for (std::size_t n = 0; n < N; ++n) {
          crow[n] += av * brow[n];
        }
      }
    }
  }
  check_finite_result(OpKind::MatMul, C);
  return push(OpKind::MatMul, {a, b}, std::move(C));
}

Node* Graph::add(Node* a, Node* b) {
  const NDArray& A = a->value;
  const NDArray& B = b->value;
  if (B.rank() > A.rank()) {
    shape_error(OpKind::Add, cat("broadcast operand has higher rank: ",
                                 shape_str(A.shape), " + ", shape_str(B.shape)));
  }
  // b's shape must equal the trailing dims of a's shape.
  for (std::size_t i = 0; i < B.rank(); ++i) {
    if (B.shape[B.rank() - 1 - i] != A.shape[A.rank() - 1 - i]) {
      shape_error(OpKind::Add, cat("operand shapes do not conform: ", shape_str(A.shape),
                                   " + ", shape_str(B.shape)));
    }
  }
  NDArray C = A;
  const std::size_t inner = B.numel();
  if (inner > 0) {
    for (std::size_t i = 0; i < C.numel(); ++i) {
      C.data[i] += B.data[i % inner];
    }
  }
  check_finite_result(OpKind::Add, C);
  return push(OpKind::Add, {a, b}, std::move(C));
}

Node* Graph::mul(Node* a, Node* b) {
  if (!a->value.same_shape(b->value)) {
    shape_error(OpKind::Mul, cat("operand shapes differ: ", shape_str(a->value.shape),
                                 " vs ", shape_str(b->value.shape)));
  }
  NDArray C = a->value;
  for (std::size_t i = 0; i < C.numel(); ++i) {
    C.data[i] *= b->value.data[i];
  }
  check_finite_result(OpKind::Mul, C);
  return push(OpKind::Mul, {a, b}, std::move(C));
}

Node* Graph::tanh(Node* a) {
  NDArray C = a->value;
  for (double& v : C.data) {
    v = std::tanh(v);
  }
  return push(OpKind::Tanh, {a}, std::move(C));
}

Node* Graph::sigmoid(Node* a) {
  NDArray C = a->value;
  for (double& v : C.data) {
    v = 1.0 / (1.0 + std::exp(-v));
  }
  return push(OpKind::Sigmoid, {a}, std::move(C));
}

Node* Graph::exp(Node* a) {
  NDArray C = a->value;
  for (double& v : C.data) {
    v = std::exp(v);
  }
  check_finite_result(OpKind::Exp, C);
  return push(OpKind::Exp, {a}, std::move(C));
}

Node* Graph::negate(Node* a) {
  NDArray C = a->value;
  for (double& v : C.data) {
    v = -v;
  }
  return push(OpKind::Negate, {a}, std::move(C));
}

Node* Graph::scale(Node* a, double c) {
  if (!std::isfinite(c)) {
    throw std::invalid_argument("scale: non-finite factor");
  }
  NDArray C = a->value;
  for (double& v : C.data) {
    v *= c;
  }
  Node* n = push(OpKind::Scale, {a}, std::move(C));
  n->scalar = c;
  return n;
}

Node* Graph::log_softmax(Node* a) {
  const NDArray& A = a->value;
  if (A.rank() < 1) {
    shape_error(OpKind::LogSoftmax, "operand must have rank >= 1");
  }
  const std::size_t K = A.shape.back();
  const std::size_t R = leading_rows(A);
  NDArray C = A;
  for (std::size_t r = 0; r < R; ++r) {
    double* row = C.data.data() + r * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) {
      mx = std::max(mx, row[k]);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      s += std::exp(row[k] - mx);
    }
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) {
      row[k] -= lse;
    }
  }
  check_finite_result(OpKind::LogSoftmax, C);
  return push(OpKind::LogSoftmax, {a}, std::move(C));
}

Node* Graph::logsumexp(Node* a) {
  const NDArray& A = a->value;
  if (A.rank() < 1) {
    shape_error(OpKind::LogSumExp, "operand must have rank >= 1");
  }
  const std::size_t K = A.shape.back();
  const std::size_t R = leading_rows(A);
  Shape out_shape(A.shape.begin(), A.shape.end() - 1);
  NDArray C(out_shape);
  for (std::size_t r = 0; r < R; ++r) {
    const double* row = A.data.data() + r * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) {
      mx = std::max(mx, row[k]);
    }
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      s += std::exp(row[k] - mx);
    }
    C.data[r] = mx + std::log(s);
  }
  check_finite_result(OpKind::LogSumExp, C);
  return push(OpKind::LogSumExp, {a}, std::move(C));
}

Node* Graph::concat(const std::vector<Node*>& parts, std::size_t axis) {
  if (parts.empty()) {
    shape_error(OpKind::Concat, "no operands");
  }
  const Shape& s0 = parts[0]->value.shape;
  if (axis >= s0.size()) {
    shape_error(OpKind::Concat, cat("axis ", axis, " out of range for rank ", s0.size()));
  }
  std::size_t axis_total = 0;
  for (const Node* p : parts) {
    const Shape& s = p->value.shape;
    if (s.size() != s0.size()) {
      shape_error(OpKind::Concat, "operand ranks differ");
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) {
        shape_error(OpKind::Concat, cat("operand shapes differ outside axis: ",
                                        shape_str(s0), " vs ", shape_str(s)));
      }
    }
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;
  NDArray C(out_shape);
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) {
    outer *= s0[i];
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s0.size(); ++i) {
    inner *= s0[i];
  }
  std::size_t offset = 0;
  for (const Node* p : parts) {
    const std::size_t len = p->value.shape[axis];
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = p->value.data.data() + o * len * inner;
      double* dst = C.data.data() + (o * axis_total + offset) * inner;
      std::memcpy(dst, src, len * inner * sizeof(double));
    }
    offset += len;
  }
  std::vector<Node*> ps(parts.begin(), parts.end());
  Node* n = push(OpKind::Concat, std::move(ps), std::move(C));
  n->axis = axis;
  return n;
}

Node* Graph::concat_last(const std::vector<Node*>& parts) {
  if (parts.empty()) {
    shape_error(OpKind::Concat, "no operands");
  }
  return concat(parts, parts[0]->value.rank() - 1);
}

Node* Graph::stack_rows(const std::vector<Node*>& rows) {
  if (rows.empty()) {
    shape_error(OpKind::StackRows, "no operands");
  }
  const Shape& s0 = rows[0]->value.shape;
  for (const Node* r : rows) {
    if (r->value.shape != s0) {
      shape_error(OpKind::StackRows, cat("operand shapes differ: ", shape_str(s0),
                                         " vs ", shape_str(r->value.shape)));
    }
  }
  Shape out_shape;
  out_shape.push_back(rows.size());
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  NDArray C(out_shape);
  const std::size_t inner = rows[0]->value.numel();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::memcpy(C.data.data() + r * inner, rows[r]->value.data.data(),
                inner * sizeof(double));
  }
  std::vector<Node*> ps(rows.begin(), rows.end());
  return push(OpKind::StackRows, std::move(ps), std::move(C));
}

Node* Graph::mean_axis(Node* a, std::size_t axis) {
  const NDArray& A = a->value;
  if (axis >= A.rank()) {
    shape_error(OpKind::MeanAxis, cat("axis ", axis, " out of range for rank ", A.rank()));
  }
  const std::size_t n = A.shape[axis];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) {
    outer *= A.shape[i];
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < A.rank(); ++i) {
    inner *= A.shape[i];
  }
  Shape out_shape;
  for (std::size_t i = 0; i < A.rank(); ++i) {
    if (i != axis) {
      out_shape.push_back(A.shape[i]);
    }
  }
  NDArray C(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* src = A.data.data() + (o * n + j) * inner;
      double* dst = C.data.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        dst[i] += src[i];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : C.data) {
    v *= inv;
  }
  check_finite_result(OpKind::MeanAxis, C);
  Node* node = push(OpKind::MeanAxis, {a}, std::move(C));
  node->axis = axis;
  return node;
}

Node* Graph::gather_rows(Node* a, std::vector<std::size_t> idx) {
  const NDArray& A = a->value;
  if (A.rank() < 1) {
    shape_error(OpKind::GatherRows, "operand must have rank >= 1");
  }
  const std::size_t rows = A.shape[0];
  for (std::size_t i : idx) {
    if (i >= rows) {
      shape_error(OpKind::GatherRows, cat("index ", i, " out of range [0,", rows, ")"));
    }
  }
  const std::size_t inner = A.numel() / std::max<std::size_t>(rows, 1);
  Shape out_shape = A.shape;
  out_shape[0] = idx.size();
  NDArray C(out_shape);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::memcpy(C.data.data() + r * inner, A.data.data() + idx[r] * inner,
                inner * sizeof(double));
  }
  Node* n = push(OpKind::GatherRows, {a}, std::move(C));
  n->indices = std::move(idx);
  return n;
}

Node* Graph::take_per_row(Node* a, std::vector<std::size_t> col_idx) {
  const NDArray& A = a->value;
  if (A.rank() != 2) {
    shape_error(OpKind::TakePerRow, cat("operand must be rank 2, got ",
                                        shape_str(A.shape)));
  }
  if (col_idx.size() != A.shape[0]) {
    shape_error(OpKind::TakePerRow, cat("need one index per row: ", col_idx.size(),
                                        " vs ", A.shape[0]));
  }
  NDArray C(Shape{A.shape[0]});
  for (std::size_t r = 0; r < col_idx.size(); ++r) {
    if (col_idx[r] >= A.shape[1]) {
      shape_error(OpKind::TakePerRow, cat("column index ", col_idx[r],
                                          " out of range [0,", A.shape[1], ")"));
    }
    C.data[r] = A.at2(r, col_idx[r]);
  }
  Node* n = push(OpKind::TakePerRow, {a}, std::move(C));
  n->indices = std::move(col_idx);
  return n;
}

Node* Graph::outer_sum(Node* a, Node* b) {
  const NDArray& A = a->value;
  const NDArray& B = b->value;
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1]) {
    shape_error(OpKind::OuterSum, cat("operands must be (M,K) and (N,K); got ",
                                      shape_str(A.shape), " and ", shape_str(B.shape)));
  }
  const std::size_t M = A.shape[0];
  const std::size_t N = B.shape[0];
  const std::size_t K = A.shape[1];
  NDArray C(Shape{M, N, K});
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t n = 0; n < N; ++n) {
      const double* ra = A.data.data() + m * K;
      const double* rb = B.data.data() + n * K;
      double* rc = C.data.data() + (m * N + n) * K;
      for (std::size_t k = 0; k < K; ++k) {
        rc[k] = ra[k] + rb[k];
      }
    }
  }
  check_finite_result(OpKind::OuterSum, C);
  return push(OpKind::OuterSum, {a, b}, std::move(C));
}

Node* Graph::slice_axis(Node* a, std::size_t axis, std::size_t start, std::size_t len) {
  const NDArray& A = a->value;
  if (axis >= A.rank()) {
    shape_error(OpKind::SliceAxis, cat("axis ", axis, " out of range for rank ", A.rank()));
  }
  if (start + len > A.shape[axis]) {
    shape_error(OpKind::SliceAxis, cat("slice [", start, ",", start + len,
                                       ") exceeds dimension ", A.shape[axis]));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) {
    outer *= A.shape[i];
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < A.rank(); ++i) {
    inner *= A.shape[i];
  }
  Shape out_shape = A.shape;
  out_shape[axis] = len;
  NDArray C(out_shape);
  const std::size_t dim = A.shape[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(C.data.data() + o * len * inner,
                A.data.data() + (o * dim + start) * inner, len * inner * sizeof(double));
  }
  Node* n = push(OpKind::SliceAxis, {a}, std::move(C));
  n->axis = axis;
  n->start = start;
  return n;
}

Node* Graph::custom(std::vector<Node*> parents, NDArray value, CustomBackward backward) {
  Node* n = push(OpKind::Custom, std::move(parents), std::move(value));
  n->custom_backward = std::move(backward);
  return n;
}

void Graph::backward(Node* root) {
  if (root == nullptr || root->value.numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar-valued");
  }
  // Per-call wave buffers keep repeated backward calls additive: the wave is
  // propagated fresh and only then folded into the persistent accumulators.
  std::vector<std::vector<double>> wave(root->id + 1);
  wave[root->id].assign(1, 1.0);
  for (std::size_t i = root->id + 1; i-- > 0;) {
    const Node& n = *nodes_[i];
    if (wave[i].empty()) {
      continue;
    }
    if (n.grad_gate) {
      propagate(n, wave[i], wave);
    }
    std::vector<double>& acc = n.grad.empty()
        ? (nodes_[i]->grad.assign(n.value.numel(), 0.0), nodes_[i]->grad)
        : nodes_[i]->grad;
    for (std::size_t j = 0; j < acc.size(); ++j) {
      acc[j] += wave[i][j];
    }
    wave[i].clear();
    wave[i].shrink_to_fit();
  }
}

void Graph::zero_grad() {
  for (auto& n : nodes_) {
    n->grad.clear();
  }
}

namespace {

std::vector<double>& touch(std::vector<std::vector<double>>& wave, const Node* p) {
  std::vector<double>& w = wave[p->id];
  if (w.empty()) {
    w.assign(p->value.numel(), 0.0);
  }
  return w;
}

}  // namespace

void Graph::propagate(const Node& n, const std::vector<double>& g,
                      std::vector<std::vector<double>>& wave) {
  switch (n.kind) {
    case OpKind::Leaf:
      return;
    case OpKind::Gate:
    case OpKind::Reshape: {
      std::vector<double>& pa = touch(wave, n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        pa[i] += g[i];
      }
      return;
    }
    case OpKind::MatMul: {
      const NDArray& A = n.parents[0]->value;
      const NDArray& B = n.parents[1]->value;
      const std::size_t K = A.shape.back();
      const std::size_t M = leading_rows(A);
      const std::size_t N = B.shape[1];
      std::vector<double>& da = touch(wave, n.parents[0]);
      std::vector<double>& db = touch(wave, n.parents[1]);
      for (std::size_t m = 0; m < M; ++m) {
        const double* grow = g.data() + m * N;
        const double* arow = A.data.data() + m * K;
        for (std::size_t k = 0; k < K; ++k) {
          const double* brow = B.data.data() + k * N;
          double s = 0.0;
          for (std::size_t col = 0; col < N; ++col) {
            s += grow[col] * brow[col];
          }
          da[m * K + k] += s;
          const double av = arow[k];
          if (av != 0.0) {
            double* dbrow = db.data() + k * N;
            for (std::size_t col = 0; col < N; ++col) {
              dbrow[col] += av * grow[col];
            }
          }
        }
      }
      return;
    }
    case OpKind::Add: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      std::vector<double>& db = touch(wave, n.parents[1]);
      const std::size_t inner = n.parents[1]->value.numel();
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i];
        db[i % inner] += g[i];
      }
      return;
    }
    case OpKind::Mul: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      std::vector<double>& db = touch(wave, n.parents[1]);
      const NDArray& A = n.parents[0]->value;
      const NDArray& B = n.parents[1]->value;
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i] * B.data[i];
        db[i] += g[i] * A.data[i];
      }
      return;
    }
    case OpKind::Tanh: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n.value.data[i];
        da[i] += g[i] * (1.0 - y * y);
      }
      return;
    }
    case OpKind::Sigmoid: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n.value.data[i];
        da[i] += g[i] * y * (1.0 - y);
      }
      return;
    }
    case OpKind::Exp: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i] * n.value.data[i];
      }
      return;
    }
    case OpKind::Negate: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] -= g[i];
      }
      return;
    }
    case OpKind::Scale: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += n.scalar * g[i];
      }
      return;
    }
    case OpKind::LogSoftmax: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      const std::size_t K = n.value.shape.back();
      const std::size_t R = leading_rows(n.value);
      for (std::size_t r = 0; r < R; ++r) {
        const double* grow = g.data() + r * K;
        const double* yrow = n.value.data.data() + r * K;
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          s += grow[k];
        }
        double* drow = da.data() + r * K;
        for (std::size_t k = 0; k < K; ++k) {
          drow[k] += grow[k] - std::exp(yrow[k]) * s;
        }
      }
      return;
    }
    case OpKind::LogSumExp: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      const NDArray& A = n.parents[0]->value;
      const std::size_t K = A.shape.back();
      const std::size_t R = leading_rows(A);
      for (std::size_t r = 0; r < R; ++r) {
        const double y = n.value.data[r];
        const double* arow = A.data.data() + r * K;
        double* drow = da.data() + r * K;
        for (std::size_t k = 0; k < K; ++k) {
          drow[k] += g[r] * std::exp(arow[k] - y);
        }
      }
      return;
    }
    case OpKind::Concat: {
      const Shape& os = n.value.shape;
      std::size_t outer = 1;
      for (std::size_t i = 0; i < n.axis; ++i) {
        outer *= os[i];
      }
      std::size_t inner = 1;
      for (std::size_t i = n.axis + 1; i < os.size(); ++i) {
        inner *= os[i];
      }
      const std::size_t total = os[n.axis];
      std::size_t offset = 0;
      for (Node* p : n.parents) {
        std::vector<double>& dp = touch(wave, p);
        const std::size_t len = p->value.shape[n.axis];
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.data() + (o * total + offset) * inner;
          double* dst = dp.data() + o * len * inner;
          for (std::size_t i = 0; i < len * inner; ++i) {
            dst[i] += src[i];
          }
        }
        offset += len;
      }
      return;
    }
    case OpKind::StackRows: {
      const std::size_t inner = n.parents[0]->value.numel();
      for (std::size_t r = 0; r < n.parents.size(); ++r) {
        std::vector<double>& dp = touch(wave, n.parents[r]);
        const double* src = g.data() + r * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          dp[i] += src[i];
        }
      }
      return;
    }
    case OpKind::MeanAxis: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      const NDArray& A = n.parents[0]->value;
      const std::size_t cnt = A.shape[n.axis];
      std::size_t outer = 1;
      for (std::size_t i = 0; i < n.axis; ++i) {
        outer *= A.shape[i];
      }
      std::size_t inner = 1;
      for (std::size_t i = n.axis + 1; i < A.rank(); ++i) {
        inner *= A.shape[i];
      }
      const double inv = 1.0 / static_cast<double>(cnt);
      for (std::size_t o = 0; o < outer; ++o) {
        const double* grow = g.data() + o * inner;
        for (std::size_t j = 0; j < cnt; ++j) {
          double* drow = da.data() + (o * cnt + j) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            drow[i] += grow[i] * inv;
          }
        }
      }
      return;
    }
    case OpKind::GatherRows: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      const std::size_t rows = n.parents[0]->value.shape[0];
      const std::size_t inner = n.parents[0]->value.numel() / std::max<std::size_t>(rows, 1);
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        const double* src = g.data() + r * inner;
        double* dst = da.data() + n.indices[r] * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          dst[i] += src[i];
        }
      }
      return;
    }
    case OpKind::TakePerRow: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      const std::size_t cols = n.parents[0]->value.shape[1];
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        da[r * cols + n.indices[r]] += g[r];
      }
      return;
    }
    case OpKind::OuterSum: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      std::vector<double>& db = touch(wave, n.parents[1]);
      const std::size_t M = n.parents[0]->value.shape[0];
      const std::size_t N = n.parents[1]->value.shape[0];
      const std::size_t K = n.parents[0]->value.shape[1];
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t nn = 0; nn < N; ++nn) {
          const double* grow = g.data() + (m * N + nn) * K;
          double* darow = da.data() + m * K;
          double* dbrow = db.data() + nn * K;
          for (std::size_t k = 0; k < K; ++k) {
            darow[k] += grow[k];
            dbrow[k] += grow[k];
          }
        }
      }
      return;
    }
    case OpKind::SliceAxis: {
      std::vector<double>& da = touch(wave, n.parents[0]);
      const NDArray& A = n.parents[0]->value;
      const std::size_t dim = A.shape[n.axis];
      const std::size_t len = n.value.shape[n.axis];
      std::size_t outer = 1;
      for (std::size_t i = 0; i < n.axis; ++i) {
        outer *= A.shape[i];
      }
      std::size_t inner = 1;
      for (std::size_t i = n.axis + 1; i < A.rank(); ++i) {
        inner *= A.shape[i];
      }
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = g.data() + o * len * inner;
        double* dst = da.data() + (o * dim + n.start) * inner;
        for (std::size_t i = 0; i < len * inner; ++i) {
          dst[i] += src[i];
        }
      }
      return;
    }
    case OpKind::Custom: {
      std::vector<std::vector<double>*> pgrads;
      pgrads.reserve(n.parents.size());
      for (Node* p : n.parents) {
        pgrads.push_back(&touch(wave, p));
      }
      n.custom_backward(g, pgrads);
      return;
    }
  }
}

GradCheckReport finite_diff_check(
    const std::function<double(const ParamValues&)>& f, const ParamValues& params,
    const ParamValues& analytic_grads, double step, double tol,
    std::size_t max_coords_per_array, std::uint64_t seed, double denom_floor) {
  if (step <= 0.0 || denom_floor <= 0.0) {
    throw std::invalid_argument("finite_diff_check: step and floor must be positive");
  }
  const double base0 = f(params);
  const double base1 = f(params);
  if (std::memcmp(&base0, &base1, sizeof(double)) != 0) {
    throw std::runtime_error("finite_diff_check: f is not deterministic");
  }

  GradCheckReport report;
  ParamValues work = params;
  std::size_t array_index = 0;
  for (const auto& [name, value] : params) {
    auto it = analytic_grads.find(name);
    if (it == analytic_grads.end()) {
      throw std::invalid_argument(
          detail::cat("finite_diff_check: no analytic gradient for '", name, "'"));
    }
    const NDArray& grad = it->second;
    if (grad.numel() != value.numel()) {
      throw std::invalid_argument(
          detail::cat("finite_diff_check: gradient size mismatch for '", name, "'"));
    }

    std::vector<std::size_t> coords;
    if (value.numel() <= max_coords_per_array) {
      coords.resize(value.numel());
      for (std::size_t i = 0; i < coords.size(); ++i) {
        coords[i] = i;
      }
    } else {
      // deterministic partial Fisher-Yates sample without replacement
      Rng rng(mix_seed(seed, array_index));
      std::vector<std::size_t> all(value.numel());
      for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
      }
      for (std::size_t i = 0; i < max_coords_per_array; ++i) {
        const std::size_t j = i + rng.uniform_int(all.size() - i);
        std::swap(all[i], all[j]);
      }
      coords.assign(all.begin(), all.begin() + max_coords_per_array);
    }

    GradCheckArray res;
    std::vector<double>& w = work[name].data;
    for (std::size_t c : coords) {
      const double saved = w[c];
      w[c] = saved + step;
      const double fp = f(work);
      w[c] = saved - step;
      const double fm = f(work);
      w[c] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = grad.data[c];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), denom_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel >= res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_index = c;
        res.analytic = analytic;
        res.numeric = numeric;
      }
      ++res.coords_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, res.max_rel_error);
    report.arrays[name] = res;
    ++array_index;
  }
  report.pass = report.max_rel_error <= tol;
  return report;
}

}  // namespace rnntaux::diffcore
