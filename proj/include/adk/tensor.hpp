#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adk/rng.hpp"

namespace adk {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

template <typename T>
class Tensor;

namespace detail {

// Storage plus graph node. `parents` and `backward_fn` exist only on op
// outputs that participate in differentiation; leaves and inference-mode
// results carry data alone.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized lazily during backward
  bool requires_grad = false;
  std::vector<Tensor<T>> parents;
  std::function<void(Node<T>&)> backward_fn;
};

}  // namespace detail

// N-dimensional row-major array with reverse-mode differentiation. Value
// semantics: copies share the underlying node; op outputs never alias their
// inputs. The only sanctioned mutation of an existing tensor is the
// optimizer's in-place parameter update through data_mut().
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires float or double");

 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_vector(std::move(shape), {}, requires_grad, T(0));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return from_vector(std::move(shape), {}, requires_grad, value);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_vector(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  static Tensor from_vector(Shape shape, std::vector<T> values,
                            bool requires_grad = false, T fill = T(0)) {
    auto node = std::make_shared<detail::Node<T>>();
    std::int64_t n = shape_numel(shape);
    node->shape = std::move(shape);
    if (values.empty()) {
      node->data.assign(static_cast<std::size_t>(n), fill);
    } else {
      if (static_cast<std::int64_t>(values.size()) != n)
        throw std::invalid_argument("from_vector: data length " +
                                    std::to_string(values.size()) +
                                    " does not match shape " + shape_str(node->shape));
      node->data = std::move(values);
    }
    node->requires_grad = requires_grad;
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  // Op-output constructor: wires parents and the backward closure. If no
  // parent needs gradients the graph edges are dropped on the spot.
  static Tensor make_op(Shape shape, std::vector<T> data,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node<T>&)> backward_fn) {
    Tensor t = from_vector(std::move(shape), std::move(data));
    bool any = false;
    for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
    if (any) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  int ndim() const { return static_cast<int>(node().shape.size()); }
  std::int64_t dim(int i) const { return node().shape.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node().data.size()); }
  bool requires_grad() const { return node().requires_grad; }

  std::span<const T> data() const { return node().data; }
  std::span<T> data_mut() { return node_mut().data; }

  bool has_grad() const { return defined() && !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::vector<T>& grad_buffer() {  // allocated zeroed on first touch
    auto& n = node_mut();
    if (n.grad.empty()) n.grad.assign(n.data.size(), T(0));
    return n.grad;
  }
  void zero_grad() { node_mut().grad.clear(); }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return node().data[0];
  }

  template <typename... Ix>
  T& at(Ix... idx) {
    return node_mut().data[flat_index({static_cast<std::int64_t>(idx)...})];
  }
  template <typename... Ix>
  T at(Ix... idx) const {
    return node().data[flat_index({static_cast<std::int64_t>(idx)...})];
  }

  // Deep copy of the values; no graph, no gradient requirement.
  Tensor clone() const {
    return from_vector(node().shape, std::vector<T>(node().data), false);
  }

  // Same values, cut out of the graph.
  Tensor detach() const { return clone(); }

  // Reverse-mode sweep from a scalar. Reachable gradients are reset first,
  // so each call reports the gradients of exactly this evaluation.
  void backward() {
    if (numel() != 1)
      throw std::invalid_argument("backward(): loss must be scalar, got shape " +
                                  shape_str(shape()));
    if (!requires_grad()) return;
    std::vector<detail::Node<T>*> order = topo_order();
    for (auto* n : order)
      if (n->requires_grad) n->grad.assign(n->data.size(), T(0));
    node_mut().grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>* n = *it;
      if (n->backward_fn) n->backward_fn(*n);
    }
  }

  detail::Node<T>& node_mut() {
    check();
    return *node_;
  }
  const detail::Node<T>& node() const {
    check();
    return *node_;
  }
  const detail::Node<T>* node_ptr() const { return node_.get(); }

 private:
  void check() const {
    if (!node_) throw std::logic_error("use of undefined Tensor");
  }

  std::size_t flat_index(std::initializer_list<std::int64_t> idx) const {
    const Shape& s = node().shape;
    if (idx.size() != s.size())
      throw std::invalid_argument("at(): rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (std::int64_t i : idx) {
      if (i < 0 || i >= s[k]) throw std::out_of_range("at(): index out of range");
      flat = flat * s[k] + i;
      ++k;
    }
    return static_cast<std::size_t>(flat);
  }

  std::vector<detail::Node<T>*> topo_order() {
    std::vector<detail::Node<T>*> order;
    std::unordered_set<const detail::Node<T>*> seen;
    // Iterative post-order; graphs from long sampling chains would overflow
    // a recursive walk.
    struct Frame {
      detail::Node<T>* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        detail::Node<T>* p = f.node->parents[f.next_parent].node_.get();
        ++f.next_parent;
        if (p && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<detail::Node<T>> node_;
};

// ∂loss/∂param for each param; params not reached by the graph get zeros.
template <typename T>
std::vector<Tensor<T>> gradient(Tensor<T> loss, std::span<const Tensor<T>> params) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("gradient(): loss must be a defined scalar");
  loss.backward();
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad()) {
      out.push_back(Tensor<T>::from_vector(
          p.shape(), std::vector<T>(p.grad().begin(), p.grad().end())));
    } else {
      out.push_back(Tensor<T>::zeros(p.shape()));
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> gradient(Tensor<T> loss, const std::vector<Tensor<T>>& params) {
  return gradient(std::move(loss), std::span<const Tensor<T>>(params));
}

namespace detail {

template <typename T>
void check_same_shape(Tensor<T> a, Tensor<T> b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  std::span<const T> bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [a, b](detail::Node<T>& n) mutable {
                              if (a.requires_grad()) {
                                auto& g = a.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                              }
                              if (b.requires_grad()) {
                                auto& g = b.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  std::span<const T> bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [a, b](detail::Node<T>& n) mutable {
                              if (a.requires_grad()) {
                                auto& g = a.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                              }
                              if (b.requires_grad()) {
                                auto& g = b.grad_buffer();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  std::span<const T> ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [a, b](detail::Node<T>& n) mutable {
                              if (a.requires_grad()) {
                                auto& g = a.grad_buffer();
                                std::span<const T> bb = b.data();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bb[i];
                              }
                              if (b.requires_grad()) {
                                auto& g = b.grad_buffer();
                                std::span<const T> aa = a.data();
                                for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * aa[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul_scalar(Tensor<T> a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= s;
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [a, s](detail::Node<T>& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
                            });
}

template <typename T>
Tensor<T> add_scalar(Tensor<T> a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v += s;
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [a](detail::Node<T>& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                            });
}

template <typename T>
Tensor<T> neg(Tensor<T> a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> square(Tensor<T> a) {
  return mul(a, a);
}

template <typename T>
Tensor<T> operator+(Tensor<T> a, Tensor<T> b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(Tensor<T> a, Tensor<T> b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(Tensor<T> a, Tensor<T> b) { return mul(a, b); }
template <typename T>
Tensor<T> operator*(Tensor<T> a, T s) { return mul_scalar(a, s); }
template <typename T>
Tensor<T> operator*(T s, Tensor<T> a) { return mul_scalar(a, s); }

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sigmoid(Tensor<T> a) {
  std::vector<T> out(a.numel());
  std::span<const T> ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-ad[i]));
  // y' = y(1-y); y is recomputed in backward so the node holds no self-reference
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [a](detail::Node<T>& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              std::span<const T> ad2 = a.data();
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                T y = T(1) / (T(1) + std::exp(-ad2[i]));
                                g[i] += n.grad[i] * y * (T(1) - y);
                              }
                            });
}

// x * sigmoid(x)
template <typename T>
Tensor<T> silu(Tensor<T> a) {
  std::vector<T> out(a.numel());
  std::span<const T> ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    T s = T(1) / (T(1) + std::exp(-ad[i]));
    out[i] = ad[i] * s;
  }
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [a](detail::Node<T>& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              std::span<const T> ad2 = a.data();
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                T s = T(1) / (T(1) + std::exp(-ad2[i]));
                                g[i] += n.grad[i] * s * (T(1) + ad2[i] * (T(1) - s));
                              }
                            });
}

// ---------------------------------------------------------------------------
// reductions (row-major accumulation order, fixed by contract)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(Tensor<T> a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  return Tensor<T>::make_op(Shape{1}, std::vector<T>{acc}, {a},
                            [a](detail::Node<T>& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              T gy = n.grad[0];
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy;
                            });
}

template <typename T>
Tensor<T> mean(Tensor<T> a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Per-sample mean over all trailing dims: [N, ...] -> [N].
template <typename T>
Tensor<T> mean_per_sample(Tensor<T> a) {
  if (a.ndim() < 2)
    throw std::invalid_argument("mean_per_sample: need a batch dimension");
  std::int64_t n = a.dim(0);
  std::int64_t m = a.numel() / n;
  std::vector<T> out(static_cast<std::size_t>(n));
  std::span<const T> ad = a.data();
  for (std::int64_t i = 0; i < n; ++i) {
    T acc = T(0);
    for (std::int64_t j = 0; j < m; ++j) acc += ad[i * m + j];
    out[static_cast<std::size_t>(i)] = acc / static_cast<T>(m);
  }
  return Tensor<T>::make_op(Shape{n}, std::move(out), {a},
                            [a, n, m](detail::Node<T>& node) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::int64_t i = 0; i < n; ++i) {
                                T gy = node.grad[static_cast<std::size_t>(i)] / static_cast<T>(m);
                                for (std::int64_t j = 0; j < m; ++j) g[i * m + j] += gy;
                              }
                            });
}

// ---------------------------------------------------------------------------
// shape movement
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tensor<T> a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::make_op(std::move(new_shape), std::move(out), {a},
                            [a](detail::Node<T>& n) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                            });
}

namespace detail {

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  return st;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(Tensor<T> a, const std::vector<int>& dims) {
  const Shape& s = a.shape();
  if (dims.size() != s.size())
    throw std::invalid_argument("permute: rank mismatch");
  Shape out_shape(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i)
    out_shape[i] = s[static_cast<std::size_t>(dims[i])];
  auto in_strides = detail::row_major_strides(s);
  auto out_strides = detail::row_major_strides(out_shape);
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  std::span<const T> ad = a.data();
  std::int64_t total = a.numel();
  std::size_t rank = dims.size();
  for (std::int64_t flat = 0; flat < total; ++flat) {
    std::int64_t rem = flat, src = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      std::int64_t ix = rem / out_strides[d];
      rem %= out_strides[d];
      src += ix * in_strides[static_cast<std::size_t>(dims[d])];
    }
    out[static_cast<std::size_t>(flat)] = ad[static_cast<std::size_t>(src)];
  }
  return Tensor<T>::make_op(
      out_shape, std::move(out), {a},
      [a, out_shape, dims](detail::Node<T>& n) mutable {
        if (!a.requires_grad()) return;
        auto& g = a.grad_buffer();
        auto in_strides = detail::row_major_strides(a.shape());
        auto out_strides = detail::row_major_strides(out_shape);
        std::int64_t total = static_cast<std::int64_t>(n.grad.size());
        for (std::int64_t flat = 0; flat < total; ++flat) {
          std::int64_t rem = flat, src = 0;
          for (std::size_t d = 0; d < out_strides.size(); ++d) {
            std::int64_t ix = rem / out_strides[d];
            rem %= out_strides[d];
            src += ix * in_strides[static_cast<std::size_t>(dims[d])];
          }
          g[static_cast<std::size_t>(src)] += n.grad[static_cast<std::size_t>(flat)];
        }
      });
}

// Channel-wise concatenation of two NCHW tensors.
template <typename T>
Tensor<T> concat_channels(Tensor<T> a, Tensor<T> b) {
  if (a.ndim() != 4 || b.ndim() != 4)
    throw std::invalid_argument("concat_channels: expected NCHW inputs");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: mismatched N/H/W");
  std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::int64_t hw = a.dim(2) * a.dim(3);
  Shape out_shape{n, ca + cb, a.dim(2), a.dim(3)};
  std::vector<T> out(static_cast<std::size_t>(n * (ca + cb) * hw));
  std::span<const T> ad = a.data(), bd = b.data();
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(ad.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(bd.data() + i * cb * hw, cb * hw,
                out.data() + i * (ca + cb) * hw + ca * hw);
  }
  return Tensor<T>::make_op(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, n, ca, cb, hw](detail::Node<T>& node) mutable {
        if (a.requires_grad()) {
          auto& g = a.grad_buffer();
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < ca * hw; ++j)
              g[i * ca * hw + j] += node.grad[i * (ca + cb) * hw + j];
        }
        if (b.requires_grad()) {
          auto& g = b.grad_buffer();
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < cb * hw; ++j)
              g[i * cb * hw + j] += node.grad[i * (ca + cb) * hw + ca * hw + j];
        }
      });
}

// ---------------------------------------------------------------------------
// batch-indexed scaling (diffusion coefficients vary per sample)
// ---------------------------------------------------------------------------

// out[i, ...] = a[i, ...] * coeff[i]; coefficients are constants.
template <typename T>
Tensor<T> scale_per_sample(Tensor<T> a, const std::vector<T>& coeff) {
  if (a.ndim() < 1 || a.dim(0) != static_cast<std::int64_t>(coeff.size()))
    throw std::invalid_argument("scale_per_sample: coefficient count must match batch");
  std::int64_t n = a.dim(0), m = a.numel() / n;
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  std::span<const T> ad = a.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j)
      out[i * m + j] = ad[i * m + j] * coeff[static_cast<std::size_t>(i)];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a},
                            [a, coeff, n, m](detail::Node<T>& node) mutable {
                              if (!a.requires_grad()) return;
                              auto& g = a.grad_buffer();
                              for (std::int64_t i = 0; i < n; ++i)
                                for (std::int64_t j = 0; j < m; ++j)
                                  g[i * m + j] += node.grad[i * m + j] * coeff[static_cast<std::size_t>(i)];
                            });
}

// ---------------------------------------------------------------------------
// random tensors
// ---------------------------------------------------------------------------

// i.i.d. standard normal entries, reproducible per the Rng contract.
template <typename T>
Tensor<T> randn(Rng& rng, Shape shape) {
  if (shape.empty()) throw std::invalid_argument("randn: shape must be nonempty");
  std::int64_t n = shape_numel(shape);
  std::vector<T> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<T>(rng.normal());
  return Tensor<T>::from_vector(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> rand_uniform(Rng& rng, Shape shape, T lo, T hi) {
  std::int64_t n = shape_numel(shape);
  std::vector<T> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from_vector(std::move(shape), std::move(data));
}

}  // namespace adk
