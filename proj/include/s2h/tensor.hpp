#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "s2h/error.hpp"

namespace s2h {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::uint64_t id = 0;
  // Linkage into the active tape; stale once `generation` no longer matches.
  std::int64_t node = -1;
  std::uint64_t generation = 0;

  TensorImpl(Shape s, std::vector<double> v, bool rg);
};

}  // namespace detail

// Dense row-major array of 64-bit reals. Copies are cheap handles sharing
// storage; `clone` makes an independent off-tape copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  // A gradient leaf: participates in recording and may appear in a GradientMap.
  static Tensor leaf(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->values.size(); }
  std::span<const double> values() const { return impl_->values; }
  std::span<double> values_mut() { return impl_->values; }
  double at(std::size_t i) const { return impl_->values[i]; }
  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
  std::uint64_t id() const { return impl_->id; }

  Tensor clone() const;
  bool is_scalar() const { return impl_ && impl_->values.size() == 1; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// leaf id -> gradient of identical shape; absent key means exactly zero.
class GradientMap {
 public:
  bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
  const Tensor* find(std::uint64_t leaf_id) const;
  // Gradient for `leaf`, materializing zeros when absent.
  Tensor get(const Tensor& leaf) const;
  void set(const Tensor& leaf, Tensor grad) { grads_[leaf.id()] = std::move(grad); }
  bool empty() const { return grads_.empty(); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

enum class OpKind : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  scale,
  matmul,
  matmul_nt,
  conv2d,
  relu,
  exp,
  log,
  sum_all,
  mean_all,
  sum_last,
  softmax_last,
  log_softmax_last,
  add_channel,
  mul_channel,
  mask_relax,
  reshape,
};

// Reverse-mode tape. Constructing a Tape makes it the active recorder on the
// current thread; destruction restores the previous one. Nodes are appended
// in topological order and never mutated, so several backward passes over the
// same graph (with different roots or target sets) give identical results.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // d(root)/d(target) for each target, restricted to the requested set.
  // Leaves outside `targets` receive no accumulation at all. Targets that are
  // absent from the tape are omitted from the map (their gradient is zero).
  GradientMap backward(const Tensor& root, std::span<const Tensor> targets) const;
  GradientMap backward(const Tensor& root, std::initializer_list<Tensor> targets) const;
  // Unrestricted form: targets = every leaf recorded on this tape.
  GradientMap backward(const Tensor& root) const;

  std::size_t node_count() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }

  struct Node {
    OpKind kind = OpKind::leaf;
    std::array<int, 2> parents{-1, -1};
    std::shared_ptr<detail::TensorImpl> in0, in1, out;
    std::uint64_t leaf_id = 0;
    int i0 = 0, i1 = 0;        // op integers (conv stride / pad)
    std::vector<double> aux;   // op-specific saved context
  };

  int ensure_leaf(const std::shared_ptr<detail::TensorImpl>& impl);
  int record(Node node);
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, int> leaf_nodes_;  // leaf id -> node index
  std::uint64_t generation_ = 0;
  Tape* previous_ = nullptr;
};

// Suspends recording for its lifetime (evaluation-only regions, finite
// differences inside grad_check).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_ = nullptr;
};

// --- primitives -----------------------------------------------------------
// Every primitive validates shapes, checks the result for NaN/Inf (numeric
// error, never silent propagation) and records itself iff an input is
// connected to the active tape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] . [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] . [n x k]^T
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_last(const Tensor& a);
Tensor softmax_last(const Tensor& a);
Tensor log_softmax_last(const Tensor& a);
// Broadcast `v` ([C]) along the channel axis of x ([B x C] or [B x C x H x W]).
Tensor add_channel(const Tensor& x, const Tensor& v);
Tensor mul_channel(const Tensor& x, const Tensor& v);
// Fused softmax + suffix-sum: out[i] = sum_{k>=i} softmax(u)[k], out[0] == 1
// exactly. 1-D only.
Tensor mask_relax(const Tensor& u);
Tensor reshape(const Tensor& a, Shape shape);

// Same values, no tape linkage, requires_grad = false. Idempotent.
Tensor detach(const Tensor& t);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of x. x must be a gradient leaf.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

}  // namespace s2h
