#include "s2h/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace s2h {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tensor_id{1};
std::atomic<std::uint64_t> g_next_generation{1};

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by '") + op + "'");
    }
  }
}

// Node index of `impl` on the active tape, registering gradient leaves on
// first contact; -1 when the input is a plain constant.
int link_input(Tape* tape, const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!tape || !impl) return -1;
  if (impl->generation == tape->generation() && impl->node >= 0) {
    return static_cast<int>(impl->node);
  }
  if (impl->requires_grad) return tape->ensure_leaf(impl);
  return -1;
}

Tensor make_result(OpKind kind, const char* name, Shape shape, std::vector<double> values,
                   const Tensor& a, const Tensor& b = Tensor(), int i0 = 0, int i1 = 0,
                   std::vector<double> aux = {}) {
  check_finite(values, name);
  auto impl = std::make_shared<detail::TensorImpl>(std::move(shape), std::move(values), false);
  Tape* tape = Tape::active();
  if (tape) {
    int pa = link_input(tape, a.impl());
    int pb = b.defined() ? link_input(tape, b.impl()) : -1;
    if (pa >= 0 || pb >= 0) {
      Tape::Node node;
      node.kind = kind;
      node.parents = {pa, pb};
      node.in0 = a.impl();
      node.in1 = b.defined() ? b.impl() : nullptr;
      node.out = impl;
      node.i0 = i0;
      node.i1 = i1;
      node.aux = std::move(aux);
      int idx = tape->record(std::move(node));
      impl->node = idx;
      impl->generation = tape->generation();
    }
  }
  return Tensor(std::move(impl));
}

void require(bool cond, const char* op, const std::string& detail) {
  if (!cond) throw DimensionError(std::string(op) + ": " + detail);
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

TensorImpl::TensorImpl(Shape s, std::vector<double> v, bool rg)
    : shape(std::move(s)), values(std::move(v)), requires_grad(rg),
      id(g_next_tensor_id.fetch_add(1)) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_size(shape);
  return Tensor(std::make_shared<detail::TensorImpl>(std::move(shape), std::vector<double>(n, 0.0), false));
}

Tensor Tensor::full(Shape shape, double value) {
  std::size_t n = shape_size(shape);
  return Tensor(std::make_shared<detail::TensorImpl>(std::move(shape), std::vector<double>(n, value), false));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  return Tensor(std::make_shared<detail::TensorImpl>(std::move(shape), std::move(values), false));
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

Tensor Tensor::leaf(Shape shape, std::vector<double> values) {
  return Tensor(std::make_shared<detail::TensorImpl>(std::move(shape), std::move(values), true));
}

double Tensor::item() const {
  if (!is_scalar()) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return impl_->values[0];
}

Tensor Tensor::clone() const {
  return Tensor(std::make_shared<detail::TensorImpl>(impl_->shape, impl_->values, false));
}

const Tensor* GradientMap::find(std::uint64_t leaf_id) const {
  auto it = grads_.find(leaf_id);
  return it == grads_.end() ? nullptr : &it->second;
}

Tensor GradientMap::get(const Tensor& leaf) const {
  if (const Tensor* g = find(leaf.id())) return *g;
  return Tensor::zeros(leaf.shape());
}

Tape::Tape() : generation_(g_next_generation.fetch_add(1)), previous_(g_active_tape) {
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

int Tape::ensure_leaf(const std::shared_ptr<detail::TensorImpl>& impl) {
  auto it = leaf_nodes_.find(impl->id);
  if (it != leaf_nodes_.end()) return it->second;
  Node node;
  node.kind = OpKind::leaf;
  node.leaf_id = impl->id;
  node.out = impl;
  int idx = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  leaf_nodes_.emplace(impl->id, idx);
  impl->node = idx;
  impl->generation = generation_;
  return idx;
}

int Tape::record(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

GradientMap Tape::backward(const Tensor& root, std::initializer_list<Tensor> targets) const {
  std::vector<Tensor> v(targets);
  return backward(root, std::span<const Tensor>(v));
}

GradientMap Tape::backward(const Tensor& root) const {
  std::vector<Tensor> all;
  all.reserve(leaf_nodes_.size());
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::leaf) all.push_back(Tensor(n.out));
  }
  return backward(root, std::span<const Tensor>(all));
}

GradientMap Tape::backward(const Tensor& root, std::span<const Tensor> targets) const {
  if (!root.defined() || !root.is_scalar()) {
    throw ContractError("backward: root must be a scalar tensor");
  }
  const auto& rimpl = root.impl();
  if (rimpl->generation != generation_ || rimpl->node < 0) {
    throw ContractError("backward: root is not on this tape");
  }
  const int root_node = static_cast<int>(rimpl->node);
  const int n = static_cast<int>(nodes_.size());

  // Targets must be gradient leaves; those never recorded simply yield zero.
  std::vector<char> is_target(static_cast<std::size_t>(n), 0);
  for (const Tensor& t : targets) {
    if (!t.requires_grad()) {
      throw ContractError("backward: target is not a gradient leaf");
    }
    auto it = leaf_nodes_.find(t.id());
    if (it == leaf_nodes_.end()) continue;
    if (nodes_[static_cast<std::size_t>(it->second)].kind != OpKind::leaf) {
      throw ContractError("backward: target is not a leaf on this tape");
    }
    is_target[static_cast<std::size_t>(it->second)] = 1;
  }

  // useful[i]: a target leaf is reachable from node i via parent edges.
  std::vector<char> useful(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    if (is_target[static_cast<std::size_t>(i)]) {
      useful[static_cast<std::size_t>(i)] = 1;
      continue;
    }
    for (int p : nodes_[static_cast<std::size_t>(i)].parents) {
      if (p >= 0 && useful[static_cast<std::size_t>(p)]) {
        useful[static_cast<std::size_t>(i)] = 1;
        break;
      }
    }
  }
  // reached[i]: node i is an ancestor computation of the root.
  std::vector<char> reached(static_cast<std::size_t>(n), 0);
  reached[static_cast<std::size_t>(root_node)] = 1;
  for (int i = root_node; i >= 0; --i) {
    if (!reached[static_cast<std::size_t>(i)]) continue;
    for (int p : nodes_[static_cast<std::size_t>(i)].parents) {
      if (p >= 0) reached[static_cast<std::size_t>(p)] = 1;
    }
  }

  std::vector<std::vector<double>> adjoint(static_cast<std::size_t>(n));
  auto adj = [&](int i) -> std::vector<double>& {
    auto& a = adjoint[static_cast<std::size_t>(i)];
    if (a.empty()) a.assign(nodes_[static_cast<std::size_t>(i)].out->values.size(), 0.0);
    return a;
  };
  auto live = [&](int i) {
    return i >= 0 && reached[static_cast<std::size_t>(i)] && useful[static_cast<std::size_t>(i)];
  };

  if (live(root_node)) adj(root_node)[0] = 1.0;

  for (int i = root_node; i >= 0; --i) {
    if (!live(i) || adjoint[static_cast<std::size_t>(i)].empty()) continue;
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    const std::vector<double>& g = adjoint[static_cast<std::size_t>(i)];
    const int pa = node.parents[0];
    const int pb = node.parents[1];
    const bool la = live(pa);
    const bool lb = live(pb);
    if (node.kind != OpKind::leaf && !la && !lb) continue;
    const std::vector<double>& x = node.in0 ? node.in0->values : node.out->values;
    const std::vector<double>& y = node.in1 ? node.in1->values : node.out->values;

    switch (node.kind) {
      case OpKind::leaf:
        break;
      case OpKind::add: {
        if (la) {
          auto& da = adj(pa);
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k];
        }
        if (lb) {
          auto& db = adj(pb);
          for (std::size_t k = 0; k < g.size(); ++k) db[k] += g[k];
        }
        break;
      }
      case OpKind::sub: {
        if (la) {
          auto& da = adj(pa);
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k];
        }
        if (lb) {
          auto& db = adj(pb);
          for (std::size_t k = 0; k < g.size(); ++k) db[k] -= g[k];
        }
        break;
      }
      case OpKind::mul: {
        if (la) {
          auto& da = adj(pa);
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k] * y[k];
        }
        if (lb) {
          auto& db = adj(pb);
          for (std::size_t k = 0; k < g.size(); ++k) db[k] += g[k] * x[k];
        }
        break;
      }
      case OpKind::scale: {
        const double c = node.aux[0];
        if (la) {
          auto& da = adj(pa);
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += c * g[k];
        }
        break;
      }
      case OpKind::matmul: {
        const std::size_t m = node.in0->shape[0];
        const std::size_t kk = node.in0->shape[1];
        const std::size_t nn = node.in1->shape[1];
        if (la) {
          auto& da = adj(pa);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < kk; ++c) {
              double acc = 0.0;
              for (std::size_t j = 0; j < nn; ++j) acc += g[r * nn + j] * y[c * nn + j];
              da[r * kk + c] += acc;
            }
        }
        if (lb) {
          auto& db = adj(pb);
          for (std::size_t c = 0; c < kk; ++c)
            for (std::size_t j = 0; j < nn; ++j) {
              double acc = 0.0;
              for (std::size_t r = 0; r < m; ++r) acc += x[r * kk + c] * g[r * nn + j];
              db[c * nn + j] += acc;
            }
        }
        break;
      }
      case OpKind::matmul_nt: {
        // out = A . B^T, A: [m x k], B: [n x k]
        const std::size_t m = node.in0->shape[0];
        const std::size_t kk = node.in0->shape[1];
        const std::size_t nn = node.in1->shape[0];
        if (la) {
          auto& da = adj(pa);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < kk; ++c) {
              double acc = 0.0;
              for (std::size_t j = 0; j < nn; ++j) acc += g[r * nn + j] * y[j * kk + c];
              da[r * kk + c] += acc;
            }
        }
        if (lb) {
          auto& db = adj(pb);
          for (std::size_t j = 0; j < nn; ++j)
            for (std::size_t c = 0; c < kk; ++c) {
              double acc = 0.0;
              for (std::size_t r = 0; r < m; ++r) acc += g[r * nn + j] * x[r * kk + c];
              db[j * kk + c] += acc;
            }
        }
        break;
      }
      case OpKind::conv2d: {
        const std::size_t stride = static_cast<std::size_t>(node.i0);
        const std::size_t pad = static_cast<std::size_t>(node.i1);
        const Shape& xs = node.in0->shape;  // [B, Ci, H, W]
        const Shape& ws = node.in1->shape;  // [Co, Ci, kh, kw]
        const Shape& os = node.out->shape;  // [B, Co, Ho, Wo]
        const std::size_t B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
        const std::size_t Co = ws[0], kh = ws[2], kw = ws[3];
        const std::size_t Ho = os[2], Wo = os[3];
        std::vector<double>* da = la ? &adj(pa) : nullptr;
        std::vector<double>* db = lb ? &adj(pb) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t oh = 0; oh < Ho; ++oh)
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                const double gv = g[((b * Co + co) * Ho + oh) * Wo + ow];
                if (gv == 0.0) continue;
                for (std::size_t ci = 0; ci < Ci; ++ci)
                  for (std::size_t u = 0; u < kh; ++u)
                    for (std::size_t v = 0; v < kw; ++v) {
                      const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + u) -
                                                static_cast<std::ptrdiff_t>(pad);
                      const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + v) -
                                                static_cast<std::ptrdiff_t>(pad);
                      if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(H) ||
                          iw >= static_cast<std::ptrdiff_t>(W))
                        continue;
                      const std::size_t xi =
                          ((b * Ci + ci) * H + static_cast<std::size_t>(ih)) * W +
                          static_cast<std::size_t>(iw);
                      const std::size_t wi = ((co * Ci + ci) * kh + u) * kw + v;
                      if (da) (*da)[xi] += gv * y[wi];
                      if (db) (*db)[wi] += gv * x[xi];
                    }
              }
        break;
      }
      case OpKind::relu: {
        if (la) {
          auto& da = adj(pa);
          // Subgradient at 0 is 0.
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += x[k] > 0.0 ? g[k] : 0.0;
        }
        break;
      }
      case OpKind::exp: {
        if (la) {
          auto& da = adj(pa);
          const auto& out = node.out->values;
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k] * out[k];
        }
        break;
      }
      case OpKind::log: {
        if (la) {
          auto& da = adj(pa);
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k] / x[k];
        }
        break;
      }
      case OpKind::sum_all: {
        if (la) {
          auto& da = adj(pa);
          for (std::size_t k = 0; k < da.size(); ++k) da[k] += g[0];
        }
        break;
      }
      case OpKind::mean_all: {
        if (la) {
          auto& da = adj(pa);
          const double s = g[0] / static_cast<double>(da.size());
          for (std::size_t k = 0; k < da.size(); ++k) da[k] += s;
        }
        break;
      }
      case OpKind::sum_last: {
        if (la) {
          auto& da = adj(pa);
          const std::size_t K = last_dim(node.in0->shape);
          for (std::size_t r = 0; r < g.size(); ++r)
            for (std::size_t k = 0; k < K; ++k) da[r * K + k] += g[r];
        }
        break;
      }
      case OpKind::softmax_last: {
        if (la) {
          auto& da = adj(pa);
          const auto& out = node.out->values;
          const std::size_t K = last_dim(node.in0->shape);
          const std::size_t rows = out.size() / K;
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t k = 0; k < K; ++k) dot += g[r * K + k] * out[r * K + k];
            for (std::size_t k = 0; k < K; ++k)
              da[r * K + k] += out[r * K + k] * (g[r * K + k] - dot);
          }
        }
        break;
      }
      case OpKind::log_softmax_last: {
        if (la) {
          auto& da = adj(pa);
          const auto& out = node.out->values;
          const std::size_t K = last_dim(node.in0->shape);
          const std::size_t rows = out.size() / K;
          for (std::size_t r = 0; r < rows; ++r) {
            double gsum = 0.0;
            for (std::size_t k = 0; k < K; ++k) gsum += g[r * K + k];
            for (std::size_t k = 0; k < K; ++k)
              da[r * K + k] += g[r * K + k] - std::exp(out[r * K + k]) * gsum;
          }
        }
        break;
      }
      case OpKind::add_channel:
      case OpKind::mul_channel: {
        const Shape& xs = node.in0->shape;
        const std::size_t C = node.in1->shape[0];
        const std::size_t B = xs[0];
        const std::size_t spatial = node.out->values.size() / (B * C);
        const bool is_mul = node.kind == OpKind::mul_channel;
        std::vector<double>* da = la ? &adj(pa) : nullptr;
        std::vector<double>* db = lb ? &adj(pb) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (b * C + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              const double gv = g[base + s];
              if (da) (*da)[base + s] += is_mul ? gv * y[c] : gv;
              if (db) (*db)[c] += is_mul ? gv * x[base + s] : gv;
            }
          }
        break;
      }
      case OpKind::mask_relax: {
        if (la) {
          auto& da = adj(pa);
          const std::size_t C = g.size();
          const std::vector<double>& p = node.aux;  // softmax(u)
          const auto& w = node.out->values;
          double gw = 0.0;
          for (std::size_t k = 0; k < C; ++k) gw += g[k] * w[k];
          double prefix = 0.0;
          for (std::size_t j = 0; j < C; ++j) {
            prefix += g[j];
            da[j] += p[j] * (prefix - gw);
          }
        }
        break;
      }
      case OpKind::reshape: {
        if (la) {
          auto& da = adj(pa);
          for (std::size_t k = 0; k < g.size(); ++k) da[k] += g[k];
        }
        break;
      }
    }
  }

  GradientMap result;
  for (const Tensor& t : targets) {
    auto it = leaf_nodes_.find(t.id());
    if (it == leaf_nodes_.end()) continue;
    const int idx = it->second;
    if (!reached[static_cast<std::size_t>(idx)]) continue;
    const auto& a = adjoint[static_cast<std::size_t>(idx)];
    if (a.empty()) continue;
    result.set(t, Tensor::from_values(t.shape(), a));
  }
  return result;
}

NoGradScope::NoGradScope() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = saved_; }

// --- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(OpKind::add, "add", a.shape(), std::move(out), a, b);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(OpKind::sub, "sub", a.shape(), std::move(out), a, b);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(OpKind::mul, "mul", a.shape(), std::move(out), a, b);
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return make_result(OpKind::scale, "scale", a.shape(), std::move(out), a, Tensor(), 0, 0, {c});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul", "inputs must be 2-D");
  require(a.shape()[1] == b.shape()[0], "matmul",
          "inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  auto av = a.values(), bv = b.values();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < k; ++c) {
      const double x = av[r * k + c];
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += x * bv[c * n + j];
    }
  return make_result(OpKind::matmul, "matmul", {m, n}, std::move(out), a, b);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul_nt", "inputs must be 2-D");
  require(a.shape()[1] == b.shape()[1], "matmul_nt",
          "inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<double> out(m * n, 0.0);
  auto av = a.values(), bv = b.values();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += av[r * k + c] * bv[j * k + c];
      out[r * n + j] = acc;
    }
  return make_result(OpKind::matmul_nt, "matmul_nt", {m, n}, std::move(out), a, b);
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  require(x.shape().size() == 4, "conv2d", "input must be [B,C,H,W]");
  require(w.shape().size() == 4, "conv2d", "kernel must be [Co,Ci,kh,kw]");
  require(stride == 1 || stride == 2, "conv2d", "stride must be 1 or 2");
  const std::size_t B = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t Co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  require(w.shape()[1] == Ci, "conv2d", "kernel channels " + std::to_string(w.shape()[1]) +
                                            " != input channels " + std::to_string(Ci));
  require(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d", "kernel larger than padded input");
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(B * Co * Ho * Wo, 0.0);
  auto xv = x.values(), wv = w.values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + u) -
                                          static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + v) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(H) ||
                    iw >= static_cast<std::ptrdiff_t>(W))
                  continue;
                acc += xv[((b * Ci + ci) * H + static_cast<std::size_t>(ih)) * W +
                          static_cast<std::size_t>(iw)] *
                       wv[((co * Ci + ci) * kh + u) * kw + v];
              }
          out[((b * Co + co) * Ho + oh) * Wo + ow] = acc;
        }
  return make_result(OpKind::conv2d, "conv2d", {B, Co, Ho, Wo}, std::move(out), x, w,
                     static_cast<int>(stride), static_cast<int>(pad));
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return make_result(OpKind::relu, "relu", a.shape(), std::move(out), a);
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  return make_result(OpKind::exp, "exp", a.shape(), std::move(out), a);
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  return make_result(OpKind::log, "log", a.shape(), std::move(out), a);
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_result(OpKind::sum_all, "sum_all", {1}, {acc}, a);
}

Tensor mean_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return make_result(OpKind::mean_all, "mean_all", {1}, {acc / static_cast<double>(a.size())}, a);
}

Tensor sum_last(const Tensor& a) {
  const std::size_t K = last_dim(a.shape());
  const std::size_t rows = a.size() / K;
  Shape out_shape(a.shape().begin(), a.shape().end());
  if (out_shape.size() <= 1) {
    out_shape = {1};
  } else {
    out_shape.pop_back();
  }
  std::vector<double> out(rows, 0.0);
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < K; ++k) out[r] += av[r * K + k];
  return make_result(OpKind::sum_last, "sum_last", std::move(out_shape), std::move(out), a);
}

namespace {

std::vector<double> softmax_rows(std::span<const double> v, std::size_t K, bool log_space) {
  const std::size_t rows = v.size() / K;
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = v[r * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, v[r * K + k]);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(v[r * K + k] - mx);
    if (log_space) {
      const double lden = std::log(denom);
      for (std::size_t k = 0; k < K; ++k) out[r * K + k] = v[r * K + k] - mx - lden;
    } else {
      for (std::size_t k = 0; k < K; ++k) out[r * K + k] = std::exp(v[r * K + k] - mx) / denom;
    }
  }
  return out;
}

}  // namespace

Tensor softmax_last(const Tensor& a) {
  const std::size_t K = last_dim(a.shape());
  return make_result(OpKind::softmax_last, "softmax_last", a.shape(),
                     softmax_rows(a.values(), K, false), a);
}

Tensor log_softmax_last(const Tensor& a) {
  const std::size_t K = last_dim(a.shape());
  return make_result(OpKind::log_softmax_last, "log_softmax_last", a.shape(),
                     softmax_rows(a.values(), K, true), a);
}

namespace {

Tensor channel_broadcast(OpKind kind, const char* name, const Tensor& x, const Tensor& v) {
  require(x.shape().size() == 2 || x.shape().size() == 4, name, "x must be [B,C] or [B,C,H,W]");
  require(v.shape().size() == 1, name, "v must be 1-D");
  const std::size_t C = x.shape()[1];
  require(v.shape()[0] == C, name, "channel count " + std::to_string(v.shape()[0]) +
                                       " != x channels " + std::to_string(C));
  const std::size_t B = x.shape()[0];
  const std::size_t spatial = x.size() / (B * C);
  std::vector<double> out(x.size());
  auto xv = x.values(), vv = v.values();
  const bool is_mul = kind == OpKind::mul_channel;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * spatial;
      const double s = vv[c];
      for (std::size_t k = 0; k < spatial; ++k)
        out[base + k] = is_mul ? xv[base + k] * s : xv[base + k] + s;
    }
  return make_result(kind, name, x.shape(), std::move(out), x, v);
}

}  // namespace

Tensor add_channel(const Tensor& x, const Tensor& v) {
  return channel_broadcast(OpKind::add_channel, "add_channel", x, v);
}

Tensor mul_channel(const Tensor& x, const Tensor& v) {
  return channel_broadcast(OpKind::mul_channel, "mul_channel", x, v);
}

Tensor mask_relax(const Tensor& u) {
  require(u.shape().size() == 1 && u.size() >= 1, "mask_relax", "u must be non-empty 1-D");
  const std::size_t C = u.size();
  std::vector<double> p = softmax_rows(u.values(), C, false);
  std::vector<double> w(C);
  double suffix = 0.0;
  for (std::size_t i = C; i-- > 0;) {
    suffix += p[i];
    w[i] = suffix;
  }
  // The full suffix sum is 1 by construction; pin it so the invariant holds
  // bit-exactly (its true derivative is 0 and the backward honors that).
  w[0] = 1.0;
  for (double& wi : w) wi = std::min(wi, 1.0);
  return make_result(OpKind::mask_relax, "mask_relax", u.shape(), std::move(w), u, Tensor(), 0, 0,
                     std::move(p));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_size(shape) == a.size(), "reshape",
          "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(OpKind::reshape, "reshape", std::move(shape), std::move(out), a);
}

Tensor detach(const Tensor& t) {
  return Tensor(std::make_shared<detail::TensorImpl>(
      t.shape(), std::vector<double>(t.values().begin(), t.values().end()), false));
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  if (h <= 0.0) throw ContractError("grad_check: step must be positive");
  if (!x.requires_grad()) throw ContractError("grad_check: x must be a gradient leaf");

  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y = f(x);
    if (!y.is_scalar()) throw ContractError("grad_check: f must be scalar-valued");
    GradientMap grads = tape.backward(y, {x});
    Tensor g = grads.get(x);
    analytic.assign(g.values().begin(), g.values().end());
  }

  double max_err = 0.0;
  {
    NoGradScope no_grad;
    auto xv = x.values_mut();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double saved = xv[i];
      xv[i] = saved + h;
      const double fp = f(x).item();
      xv[i] = saved - h;
      const double fm = f(x).item();
      xv[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace s2h
