#pragma once

// Dense n-dimensional tensors with reverse-mode differentiation.
//
// A Tensor is a cheap shared handle to an immutable node. Operations that see
// at least one input with requires_grad() (and run outside a NoGradGuard)
// record a backward closure on the result; `backward()` replays the reachable
// nodes in reverse creation order, which is a valid reverse topological order
// because a node can only be created after its inputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace snapdiff {

using Shape = std::vector<std::size_t>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <class T>
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // pushes this->grad into parents

  bool is_leaf() const { return !backward; }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

std::uint64_t next_node_id();

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using node_type = detail::Node<T>;

  Tensor();  // rank-0 zero

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from_vector(Shape shape, std::vector<T> values);
  static Tensor scalar(T value);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  // Writable storage; only legal on leaves (optimizer updates, grad checks).
  std::span<T> mutable_data();

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled span of the right size when no gradient has accumulated yet.
  std::span<const T> grad() const;
  std::vector<T> grad_copy() const;
  void zero_grad() { node_->grad.clear(); }

  bool is_leaf() const { return node_->is_leaf(); }
  Tensor detach() const;
  Tensor clone() const;

  // Populates gradients on every requires_grad leaf reachable from this
  // scalar. Gradients on leaves accumulate across calls.
  void backward() const;

  // Internal: wrap an existing node.
  explicit Tensor(std::shared_ptr<node_type> node) : node_(std::move(node)) {}
  const std::shared_ptr<node_type>& node() const { return node_; }

 private:
  std::shared_ptr<node_type> node_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// ---------------------------------------------------------------------------
// Grad mode and execution settings

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Worker count for batched matmul. 1 is the strict serial mode. Initialized
// from SNAPDIFF_THREADS (default 1). Results do not depend on the count.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Multiply-accumulate counter for matmul on the calling thread.
std::uint64_t mac_count();
void reset_mac_count();

// ---------------------------------------------------------------------------
// Primitives. Binary ops broadcast numpy-style (right-aligned, size-1 or
// missing dimensions expand).

Shape broadcast_shapes(const Shape& a, const Shape& b);

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <class T> Tensor<T> gelu(const Tensor<T>& a);

// (..., m, k) x (..., k, n) -> (..., m, n); batch dims broadcast.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis = -1);

inline constexpr double kLayerNormEps = 1e-5;
// Normalizes over the last dimension; gain and bias have that length.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = kLayerNormEps);

template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);

template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
// Selects slices along axis 0; backward scatter-adds. Indices may repeat.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& indices);
// Contiguous range [begin, end) along axis 0.
template <class T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

// Precision conversion of the values only; the result is a new untracked leaf.
template <class To, class From> Tensor<To> cast(const Tensor<From>& x);

// Operator sugar.
template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

}  // namespace snapdiff
