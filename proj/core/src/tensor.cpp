#include "snapdiff/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace snapdiff {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {
std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_mac_count = 0;

std::size_t threads_from_env() {
  if (const char* env = std::getenv("SNAPDIFF_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

std::atomic<std::size_t> g_threads{threads_from_env()};

template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

template <class T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (const T x : v) {
    if (!std::isfinite(x)) throw TensorError(std::string(op) + ": non-finite result");
  }
}

// Builds the output node, attaching `backward` when any input is tracked.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<NodePtr<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  check_finite(op, values);
  auto node = std::make_shared<detail::Node<T>>();
  node->id = detail::next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(values);
  bool track = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) track = track || in->requires_grad;
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// For each flat index of `out`, the flat index into an operand of shape `in`
// broadcast to `out`.
std::vector<std::size_t> broadcast_index_map(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t pad = rank - in.size();
  const auto in_strides = contiguous_strides(in);
  std::vector<std::size_t> eff(rank, 0);
  for (std::size_t i = 0; i < in.size(); ++i) eff[pad + i] = in[i] == 1 ? 0 : in_strides[i];
  const std::size_t n = shape_size(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = off;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      off += eff[d];
      if (idx[d] < out[d]) break;
      off -= eff[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw TensorError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(axis);
}

enum class BinaryKind { add, sub, mul };

template <class T>
Tensor<T> binary(const char* op, BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = shape_size(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(n);

  const bool same_a = a.shape() == out_shape;
  const bool same_b = b.shape() == out_shape;
  auto map_a = std::make_shared<std::vector<std::size_t>>();
  auto map_b = std::make_shared<std::vector<std::size_t>>();
  if (!same_a) *map_a = broadcast_index_map(a.shape(), out_shape);
  if (!same_b) *map_b = broadcast_index_map(b.shape(), out_shape);
  auto ia = [&](std::size_t i) { return same_a ? i : (*map_a)[i]; };
  auto ib = [&](std::size_t i) { return same_b ? i : (*map_b)[i]; };

  switch (kind) {
    case BinaryKind::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ia(i)] + bv[ib(i)];
      break;
    case BinaryKind::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ia(i)] - bv[ib(i)];
      break;
    case BinaryKind::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ia(i)] * bv[ib(i)];
      break;
  }

  return make_result<T>(
      op, out_shape, std::move(out), {a.node(), b.node()},
      [kind, same_a, same_b, map_a, map_b](detail::Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        const std::size_t n = g.size();
        auto ia = [&](std::size_t i) { return same_a ? i : (*map_a)[i]; };
        auto ib = [&](std::size_t i) { return same_b ? i : (*map_b)[i]; };
        if (pa->requires_grad) {
          auto& ga = pa->grad_buffer();
          if (kind == BinaryKind::mul) {
            const auto& bv = pb->value;
            for (std::size_t i = 0; i < n; ++i) ga[ia(i)] += g[i] * bv[ib(i)];
          } else {
            for (std::size_t i = 0; i < n; ++i) ga[ia(i)] += g[i];
          }
        }
        if (pb->requires_grad) {
          auto& gb = pb->grad_buffer();
          if (kind == BinaryKind::mul) {
            const auto& av = pa->value;
            for (std::size_t i = 0; i < n; ++i) gb[ib(i)] += g[i] * av[ia(i)];
          } else if (kind == BinaryKind::sub) {
            for (std::size_t i = 0; i < n; ++i) gb[ib(i)] -= g[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) gb[ib(i)] += g[i];
          }
        }
      });
}

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMajor<T>>;
template <class T>
using MMap = Eigen::Map<RowMajor<T>>;

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

// ---------------------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }
std::size_t num_threads() { return g_threads; }

std::uint64_t mac_count() { return t_mac_count; }
void reset_mac_count() { t_mac_count = 0; }

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw TensorError("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor members

template <class T>
Tensor<T>::Tensor() : Tensor(Tensor::scalar(T(0))) {}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_size(shape);
  return from_vector(std::move(shape), std::vector<T>(n, value));
}

template <class T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values) {
  for (auto d : shape) {
    if (d == 0) throw TensorError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw TensorError("shape " + shape_str(shape) + " does not match " +
                      std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<node_type>();
  node->id = detail::next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_vector({}, {value});
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw TensorError("dim: axis out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

template <class T>
T Tensor<T>::item() const {
  if (size() != 1) throw TensorError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <class T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf()) throw TensorError("mutable_data() on a non-leaf tensor");
  return node_->value;
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw TensorError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
  return *this;
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  return node_->grad;
}

template <class T>
std::vector<T> Tensor<T>::grad_copy() const {
  if (node_->grad.empty()) return std::vector<T>(size(), T(0));
  return node_->grad;
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from_vector(shape(), values());
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  auto t = detach();
  t.node_->requires_grad = is_leaf() && requires_grad();
  return t;
}

template <class T>
void Tensor<T>::backward() const {
  if (size() != 1) throw TensorError("backward: loss must be scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) throw TensorError("backward: loss is detached from any tracked leaf");

  std::vector<node_type*> order;
  std::unordered_set<node_type*> seen;
  std::vector<node_type*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    node_type* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const node_type* a, const node_type* b) { return a->id > b->id; });

  for (node_type* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  node_->grad_buffer()[0] += T(1);
  for (node_type* n : order) {
    if (!n->is_leaf() && !n->grad.empty()) n->backward(*n);
  }
  for (node_type* n : order) {
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// Primitives

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", BinaryKind::add, a, b);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", BinaryKind::sub, a, b);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("mul", BinaryKind::mul, a, b);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a.node()},
                        [factor](detail::Node<T>& self) {
                          auto& ga = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
                        });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  std::vector<T> out(a.values());
  for (auto& v : out) v += offset;
  return make_result<T>("add_scalar", a.shape(), std::move(out), {a.node()},
                        [](detail::Node<T>& self) {
                          auto& ga = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                        });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  const auto& x = a.values();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    const T t = std::tanh(T(kGeluScale) * (v + T(kGeluCubic) * v * v * v));
    out[i] = T(0.5) * v * (T(1) + t);
  }
  return make_result<T>("gelu", a.shape(), std::move(out), {a.node()}, [](detail::Node<T>& self) {
    auto& p = self.parents[0];
    auto& ga = p->grad_buffer();
    const auto& x = p->value;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T v = x[i];
      const T t = std::tanh(T(kGeluScale) * (v + T(kGeluCubic) * v * v * v));
      const T dt = (T(1) - t * t) * T(kGeluScale) * (T(1) + T(3 * kGeluCubic) * v * v);
      ga[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
    }
  });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw TensorError("matmul: operands need rank >= 2");
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t kb = b.shape()[b.rank() - 2];
  const std::size_t n = b.shape()[b.rank() - 1];
  if (k != kb) {
    throw TensorError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shapes(batch_a, batch_b);
  const std::size_t nbatch = shape_size(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(nbatch * m * n);
  t_mac_count += static_cast<std::uint64_t>(nbatch) * m * k * n;

  // A rank-2 right operand shared by every batch: one tall GEMM.
  const bool shared_rhs = b.rank() == 2;
  auto slots_a = std::make_shared<std::vector<std::size_t>>();
  auto slots_b = std::make_shared<std::vector<std::size_t>>();
  if (shared_rhs) {
    MMap<T>(out.data(), nbatch * m, n).noalias() =
        CMap<T>(av.data(), nbatch * m, k) * CMap<T>(bv.data(), k, n);
  } else {
    *slots_a = broadcast_index_map(batch_a, batch);
    *slots_b = broadcast_index_map(batch_b, batch);
    parallel_for(nbatch, [&](std::size_t i) {
      MMap<T>(out.data() + i * m * n, m, n).noalias() =
          CMap<T>(av.data() + (*slots_a)[i] * m * k, m, k) *
          CMap<T>(bv.data() + (*slots_b)[i] * k * n, k, n);
    });
  }

  return make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {a.node(), b.node()},
      [=](detail::Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        if (shared_rhs) {
          if (pa->requires_grad) {
            auto& ga = pa->grad_buffer();
            MMap<T>(ga.data(), nbatch * m, k).noalias() +=
                CMap<T>(g.data(), nbatch * m, n) * CMap<T>(pb->value.data(), k, n).transpose();
          }
          if (pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            MMap<T>(gb.data(), k, n).noalias() +=
                CMap<T>(pa->value.data(), nbatch * m, k).transpose() * CMap<T>(g.data(), nbatch * m, n);
          }
          return;
        }
        // Slots may repeat under broadcasting; accumulate serially in batch order.
        if (pa->requires_grad) {
          auto& ga = pa->grad_buffer();
          for (std::size_t i = 0; i < nbatch; ++i) {
            MMap<T>(ga.data() + (*slots_a)[i] * m * k, m, k).noalias() +=
                CMap<T>(g.data() + i * m * n, m, n) *
                CMap<T>(pb->value.data() + (*slots_b)[i] * k * n, k, n).transpose();
          }
        }
        if (pb->requires_grad) {
          auto& gb = pb->grad_buffer();
          for (std::size_t i = 0; i < nbatch; ++i) {
            MMap<T>(gb.data() + (*slots_b)[i] * k * n, k, n).noalias() +=
                CMap<T>(pa->value.data() + (*slots_a)[i] * m * k, m, k).transpose() *
                CMap<T>(g.data() + i * m * n, m, n);
          }
        }
      });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis_arg) {
  if (x.rank() == 0) throw TensorError("softmax: rank-0 input");
  const std::size_t axis = normalize_axis(axis_arg, x.rank(), "softmax");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];

  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>("softmax", s, std::move(out), {x.node()},
                        [outer, inner, len](detail::Node<T>& self) {
                          auto& gx = self.parents[0]->grad_buffer();
                          const auto& y = self.value;
                          const auto& g = self.grad;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * len * inner + in;
                              T dot = 0;
                              for (std::size_t j = 0; j < len; ++j) {
                                dot += g[base + j * inner] * y[base + j * inner];
                              }
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t idx = base + j * inner;
                                gx[idx] += y[idx] * (g[idx] - dot);
                              }
                            }
                          }
                        });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
  if (x.rank() == 0) throw TensorError("layer_norm: rank-0 input");
  const std::size_t c = x.shape().back();
  if (gain.size() != c || bias.size() != c) {
    throw TensorError("layer_norm: gain/bias must have " + std::to_string(c) + " elements");
  }
  const std::size_t rows = x.size() / c;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();

  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(c);
    const T inv = T(1) / std::sqrt(var + T(eps));
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * inv;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [rows, c, xhat, rstd](detail::Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& g = self.grad;
        const auto& gv = pg->value;
        if (pg->requires_grad) {
          auto& gg = pg->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * (*xhat)[r * c + j];
        }
        if (pb->requires_grad) {
          auto& gb = pb->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
        if (px->requires_grad) {
          auto& gx = px->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_g = 0, mean_gh = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T gh = g[r * c + j] * gv[j];
              mean_g += gh;
              mean_gh += gh * (*xhat)[r * c + j];
            }
            mean_g /= T(c);
            mean_gh /= T(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T gh = g[r * c + j] * gv[j];
              gx[r * c + j] += (*rstd)[r] * (gh - mean_g - (*xhat)[r * c + j] * mean_gh);
            }
          }
        }
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (const T v : x.values()) total += v;
  return make_result<T>("sum", {}, {total}, {x.node()}, [](detail::Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    const T g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.size()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw TensorError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  for (auto d : shape) {
    if (d == 0) throw TensorError("reshape: zero dimension");
  }
  return make_result<T>("reshape", std::move(shape), x.values(), {x.node()},
                        [](detail::Node<T>& self) {
                          auto& gx = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                        });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) throw TensorError("permute: axes count does not match rank");
  std::vector<bool> used(rank, false);
  for (auto ax : axes) {
    if (ax >= rank || used[ax]) throw TensorError("permute: invalid axes");
    used[ax] = true;
  }
  const auto in_strides = contiguous_strides(x.shape());
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t n = x.size();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      (*src)[flat] = off;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        off += strides[d];
        if (idx[d] < out_shape[d]) break;
        off -= strides[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const auto& xv = x.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*src)[i]];
  return make_result<T>("permute", std::move(out_shape), std::move(out), {x.node()},
                        [src](detail::Node<T>& self) {
                          auto& gx = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*src)[i]] += self.grad[i];
                        });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw TensorError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw TensorError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw TensorError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  auto chunks = std::make_shared<std::vector<std::size_t>>();
  std::size_t row = 0;
  for (const auto& p : parts) {
    chunks->push_back(p.shape()[axis] * inner);
    row += chunks->back();
  }
  std::vector<T> out(outer * row);
  std::vector<std::shared_ptr<detail::Node<T>>> inputs;
  std::size_t col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].values();
    const std::size_t ch = (*chunks)[pi];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * ch, ch, out.data() + o * row + col);
    }
    col += ch;
    inputs.push_back(parts[pi].node());
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), std::move(inputs),
                        [outer, row, chunks](detail::Node<T>& self) {
                          std::size_t col = 0;
                          for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                            const std::size_t ch = (*chunks)[pi];
                            auto& p = self.parents[pi];
                            if (p->requires_grad) {
                              auto& gp = p->grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t j = 0; j < ch; ++j)
                                  gp[o * ch + j] += self.grad[o * row + col + j];
                            }
                            col += ch;
                          }
                        });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
  if (x.rank() == 0) throw TensorError("gather_rows: rank-0 input");
  if (indices.empty()) throw TensorError("gather_rows: empty index list");
  const std::size_t rows = x.shape()[0];
  const std::size_t width = x.size() / rows;
  for (auto i : indices) {
    if (i >= rows) throw TensorError("gather_rows: index out of range");
  }
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  const auto& xv = x.values();
  std::vector<T> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(xv.data() + indices[r] * width, width, out.data() + r * width);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices);
  return make_result<T>("gather_rows", std::move(out_shape), std::move(out), {x.node()},
                        [idx, width](detail::Node<T>& self) {
                          auto& gx = self.parents[0]->grad_buffer();
                          for (std::size_t r = 0; r < idx->size(); ++r)
                            for (std::size_t j = 0; j < width; ++j)
                              gx[(*idx)[r] * width + j] += self.grad[r * width + j];
                        });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin >= end || end > x.shape()[0]) {
    throw TensorError("slice_rows: invalid range");
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, idx);
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
  const auto& xv = x.values();
  std::vector<To> out(xv.begin(), xv.end());
  auto node = std::make_shared<detail::Node<To>>();
  node->id = detail::next_node_id();
  node->shape = x.shape();
  node->value = std::move(out);
  // Cross-precision edges are not tracked; cast is used at API boundaries.
  return Tensor<To>(std::move(node));
}

// ---------------------------------------------------------------------------

#define SNAPDIFF_INSTANTIATE(T)                                                            \
  template class Tensor<T>;                                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                      \
  template Tensor<T> gelu(const Tensor<T>&);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> softmax(const Tensor<T>&, std::ptrdiff_t);                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                double);                                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                \
  template Tensor<T> mean(const Tensor<T>&);                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                     \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                   \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::size_t>&);       \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);

SNAPDIFF_INSTANTIATE(float)
SNAPDIFF_INSTANTIATE(double)
#undef SNAPDIFF_INSTANTIATE

template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);

}  // namespace snapdiff
