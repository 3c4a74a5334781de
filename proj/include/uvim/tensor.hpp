#pragma once

// Minimal reverse-mode differentiable tensor layer.
//
// A BasicTensor<T> is a shared handle to a dense row-major array. Operations
// are free functions; when a ComputationRecord is active on the current
// thread and any input requires a gradient, the operation appends a node to
// the record. backward() sweeps the record in reverse creation order, which
// is a valid topological order because every parent exists before its child.

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace uvim {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// 64-byte aligned storage. Small-matrix kernels choose code paths by pointer
// alignment, so fixed alignment keeps results bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + alignment - 1) / alignment * alignment;
    void* p = std::aligned_alloc(alignment, bytes == 0 ? alignment : bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <class T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a backward sweep reaches the tensor
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
};

std::uint64_t next_tensor_id();

}  // namespace detail

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape);
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor from_buffer(Shape shape, Buffer<T> data, bool requires_grad = false);
  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value) { return full({}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Direct writes are only valid for tensors not referenced by an active record.
  std::span<T> mutable_data() { return impl_->data; }
  std::vector<T> values() const { return {impl_->data.begin(), impl_->data.end()}; }
  T item() const;
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }
  std::uint64_t id() const { return impl_->id; }

  // Copy of the values with no gradient tracking.
  BasicTensor detach() const;

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

template <class T>
using GradMap = std::map<std::uint64_t, BasicTensor<T>>;

// Ordered record of the operations performed while it is active. Constructing
// a record makes it the active record for its element type on this thread;
// destruction restores the previously active one.
template <class T>
class ComputationRecord {
 public:
  using Impl = detail::TensorImpl<T>;
  // Receives the output gradient and the output values.
  using BackwardFn = std::function<void(const Buffer<T>& grad_out, const Buffer<T>& out_values)>;

  struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<Impl>> parents;
    std::shared_ptr<Impl> output;
    BackwardFn backward;
  };

  ComputationRecord();
  ~ComputationRecord();
  ComputationRecord(const ComputationRecord&) = delete;
  ComputationRecord& operator=(const ComputationRecord&) = delete;

  static ComputationRecord* active();

  void push(Node node);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  // Reverse sweep from a scalar loss; returns gradients of every
  // requires_grad leaf that the sweep reached, keyed by tensor id. The record
  // is cleared afterwards.
  GradMap<T> backward(const BasicTensor<T>& loss);
  void clear();

 private:
  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<Impl>> leaves_;
  ComputationRecord* previous_ = nullptr;
};

// backward() against the record active on this thread.
template <class T>
GradMap<T> backward(const BasicTensor<T>& loss);

// Suspends recording for the current thread within its scope.
template <class T>
class NoRecordScope {
 public:
  NoRecordScope();
  ~NoRecordScope();
  NoRecordScope(const NoRecordScope&) = delete;
  NoRecordScope& operator=(const NoRecordScope&) = delete;

 private:
  ComputationRecord<T>* saved_;
};

// ----------------------------------------------------------------------------
// Primitive operators. Shapes follow numpy conventions; add/sub/mul broadcast.

template <class T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

// a: [..., M, K]; b: [K, P] or [..., K, P] with the same leading extents as a.
template <class T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <class T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);
template <class T> BasicTensor<T> transpose(const BasicTensor<T>& x, int axis0, int axis1);
template <class T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);
template <class T> BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start, std::size_t length);
// table: [N, d]; returns [indices.size(), d].
template <class T> BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const int> indices);

template <class T> BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1);
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                          T eps = T(1e-6));
// tanh approximation.
template <class T> BasicTensor<T> gelu(const BasicTensor<T>& x);

template <class T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& x);
template <class T> BasicTensor<T> sum(const BasicTensor<T>& x, int axis);
template <class T> BasicTensor<T> mean(const BasicTensor<T>& x, int axis);

// Constant [indices.size(), classes].
template <class T> BasicTensor<T> one_hot(std::span<const int> indices, std::size_t classes);

// Mean over all leading positions of -log softmax(logits)[target].
template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets);
template <class T> BasicTensor<T> mean_squared_error(const BasicTensor<T>& pred, const BasicTensor<T>& target);

// Spatial resizes act on the two axes preceding the last: [..., H, W, C].
// Bilinear uses half-pixel centers without antialiasing; equal sizes are an exact copy.
template <class T> BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);
template <class T> BasicTensor<T> resize_nearest(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);

// Forward value is `value`; the gradient is passed to `source` unchanged.
template <class T> BasicTensor<T> straight_through(const BasicTensor<T>& source, const BasicTensor<T>& value);

template <class T> BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <class T> BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <class T> BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <class To, class From>
BasicTensor<To> cast(const BasicTensor<From>& x) {
  Buffer<To> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(x[i]);
  return BasicTensor<To>::from_buffer(x.shape(), std::move(out));
}

}  // namespace uvim
