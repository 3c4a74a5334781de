#include "uvim/tensor.hpp"

#include <Eigen/Core>
#include <malloc.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace uvim {

namespace {

// Large activation buffers would otherwise be fresh mmaps that fault in page by
// page on every training step.
[[maybe_unused]] const bool allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

// ----------------------------------------------------------------------------
// BasicTensor

template <class T>
BasicTensor<T>::BasicTensor(Shape shape) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(shape_numel(shape), T(0));
  impl_->shape = std::move(shape);
  impl_->id = detail::next_tensor_id();
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : BasicTensor(from_buffer(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad)) {}

template <class T>
BasicTensor<T> BasicTensor<T>::from_buffer(Shape shape, Buffer<T> data, bool requires_grad) {
  BasicTensor t;
  t.impl_ = std::make_shared<Impl>();
  auto& impl_ = t.impl_;
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " elements, got " + std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->id = detail::next_tensor_id();
  return t;
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  BasicTensor t(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

template <class T>
std::size_t BasicTensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool on) {
  if (!impl_->is_leaf) throw std::logic_error("set_requires_grad: only leaf tensors can change gradient tracking");
  impl_->requires_grad = on;
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_buffer(impl_->shape, impl_->data, false);
}

// ----------------------------------------------------------------------------
// ComputationRecord

namespace {
template <class T>
ComputationRecord<T>*& active_record() {
  thread_local ComputationRecord<T>* record = nullptr;
  return record;
}
}  // namespace

template <class T>
ComputationRecord<T>::ComputationRecord() : previous_(active_record<T>()) {
  active_record<T>() = this;
}

template <class T>
ComputationRecord<T>::~ComputationRecord() {
  clear();
  active_record<T>() = previous_;
}

template <class T>
ComputationRecord<T>* ComputationRecord<T>::active() {
  return active_record<T>();
}

template <class T>
void ComputationRecord<T>::push(Node node) {
  for (const auto& p : node.parents) {
    if (p->is_leaf && p->requires_grad &&
        std::find(leaves_.begin(), leaves_.end(), p) == leaves_.end()) {
      leaves_.push_back(p);
    }
  }
  nodes_.push_back(std::move(node));
}

template <class T>
GradMap<T> ComputationRecord<T>::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  GradMap<T> grads;
  if (!loss.requires_grad() || loss.is_leaf()) {
    clear();
    return grads;
  }
  const bool on_record = std::any_of(nodes_.rbegin(), nodes_.rend(),
                                     [&](const Node& n) { return n.output.get() == loss.impl(); });
  if (!on_record) throw std::logic_error("backward: loss was not produced on this computation record");

  loss.impl()->grad.assign(1, T(1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad, it->output->data);
  }
  for (const auto& leaf : leaves_) {
    if (leaf->grad.empty()) continue;
    grads.emplace(leaf->id, BasicTensor<T>::from_buffer(leaf->shape, std::move(leaf->grad)));
    leaf->grad.clear();
  }
  clear();
  return grads;
}

template <class T>
void ComputationRecord<T>::clear() {
  for (auto& n : nodes_) {
    n.output->grad.clear();
    n.output->grad.shrink_to_fit();
  }
  for (auto& l : leaves_) l->grad.clear();
  nodes_.clear();
  leaves_.clear();
}

template <class T>
GradMap<T> backward(const BasicTensor<T>& loss) {
  auto* record = ComputationRecord<T>::active();
  if (!record) throw std::logic_error("backward: no active computation record");
  return record->backward(loss);
}

template <class T>
NoRecordScope<T>::NoRecordScope() : saved_(active_record<T>()) {
  active_record<T>() = nullptr;
}

template <class T>
NoRecordScope<T>::~NoRecordScope() {
  active_record<T>() = saved_;
}

// ----------------------------------------------------------------------------
// Op plumbing

namespace {

template <class T>
using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

template <class T>
bool recording(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!ComputationRecord<T>::active()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Gradient buffer of an input, allocated on first touch; null when the input
// does not take gradients.
template <class T>
T* grad_buffer(const ImplPtr<T>& p) {
  if (!p->requires_grad) return nullptr;
  if (p->grad.empty()) p->grad.assign(p->data.size(), T(0));
  return p->grad.data();
}

template <class T>
BasicTensor<T> emit(Shape shape, Buffer<T> data, bool record, const char* op,
                    std::vector<ImplPtr<T>> parents, typename ComputationRecord<T>::BackwardFn fn) {
  BasicTensor<T> out = BasicTensor<T>::from_buffer(std::move(shape), std::move(data));
  if (record) {
    out.impl()->requires_grad = true;
    out.impl()->is_leaf = false;
    typename ComputationRecord<T>::Node node;
    node.op = op;
    node.parents = std::move(parents);
    node.output = out.impl_ptr();
    node.backward = std::move(fn);
    ComputationRecord<T>::active()->push(std::move(node));
  }
  return out;
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // 0 on broadcast axes
  enum class Kind { same, scalar_b, trailing_b, general } kind = Kind::general;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(pa[i], pb[i]);
  }
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    p.stride_a[i] = pa[i] == 1 ? 0 : sa;
    p.stride_b[i] = pb[i] == 1 ? 0 : sb;
    sa *= pa[i];
    sb *= pb[i];
  }
  const std::size_t na = shape_numel(a), nb = shape_numel(b), no = shape_numel(p.out);
  if (a == b) {
    p.kind = Broadcast::Kind::same;
  } else if (nb == 1 && na == no) {
    p.kind = Broadcast::Kind::scalar_b;
  } else if (na == no && b.size() <= a.size() &&
             std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    p.kind = Broadcast::Kind::trailing_b;
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <class Fn>
void for_each_broadcast(const Broadcast& p, std::size_t nb, Fn&& fn) {
  const std::size_t n = shape_numel(p.out);
  switch (p.kind) {
    case Broadcast::Kind::same:
      for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
      return;
    case Broadcast::Kind::scalar_b:
      for (std::size_t i = 0; i < n; ++i) fn(i, i, std::size_t{0});
      return;
    case Broadcast::Kind::trailing_b:
      for (std::size_t i = 0, j = 0; i < n; ++i) {
        fn(i, i, j);
        if (++j == nb) j = 0;
      }
      return;
    case Broadcast::Kind::general:
      break;
  }
  const std::size_t r = p.out.size();
  if (n == 0) return;
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t inner = p.out[r - 1];
  const std::size_t sa = p.stride_a[r - 1], sb = p.stride_b[r - 1];
  for (std::size_t i = 0; i < n;) {
    for (std::size_t k = 0; k < inner; ++k, ++i) fn(i, ia + k * sa, ib + k * sb);
    // advance the odometer over the outer axes
    std::size_t d = r - 1;
    while (d-- > 0) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

}  // namespace

// ----------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Broadcast p = plan_broadcast(a.shape(), b.shape(), "add");
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  Buffer<T> out(shape_numel(p.out));
  if (p.kind == Broadcast::Kind::same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  } else {
    for_each_broadcast(p, b.numel(), [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] + pb[ib]; });
  }
  const bool rec = recording<T>({&a, &b});
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  const std::size_t nb = b.numel();
  return emit<T>(p.out, std::move(out), rec, "add", {ia, ib}, [ia, ib, p, nb](const Buffer<T>& g, const Buffer<T>&) {
    if (T* ga = grad_buffer(ia)) {
      for_each_broadcast(p, nb, [&](std::size_t i, std::size_t x, std::size_t) { ga[x] += g[i]; });
    }
    if (T* gb = grad_buffer(ib)) {
      for_each_broadcast(p, nb, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] += g[i]; });
    }
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Broadcast p = plan_broadcast(a.shape(), b.shape(), "sub");
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  Buffer<T> out(shape_numel(p.out));
  for_each_broadcast(p, b.numel(), [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] - pb[ib]; });
  const bool rec = recording<T>({&a, &b});
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  const std::size_t nb = b.numel();
  return emit<T>(p.out, std::move(out), rec, "sub", {ia, ib}, [ia, ib, p, nb](const Buffer<T>& g, const Buffer<T>&) {
    if (T* ga = grad_buffer(ia)) {
      for_each_broadcast(p, nb, [&](std::size_t i, std::size_t x, std::size_t) { ga[x] += g[i]; });
    }
    if (T* gb = grad_buffer(ib)) {
      for_each_broadcast(p, nb, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] -= g[i]; });
    }
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Broadcast p = plan_broadcast(a.shape(), b.shape(), "mul");
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  Buffer<T> out(shape_numel(p.out));
  for_each_broadcast(p, b.numel(), [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = pa[ia] * pb[ib]; });
  const bool rec = recording<T>({&a, &b});
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  const std::size_t nb = b.numel();
  return emit<T>(p.out, std::move(out), rec, "mul", {ia, ib}, [ia, ib, p, nb](const Buffer<T>& g, const Buffer<T>&) {
    const T* va = ia->data.data();
    const T* vb = ib->data.data();
    if (T* ga = grad_buffer(ia)) {
      for_each_broadcast(p, nb, [&](std::size_t i, std::size_t x, std::size_t y) { ga[x] += g[i] * vb[y]; });
    }
    if (T* gb = grad_buffer(ib)) {
      for_each_broadcast(p, nb, [&](std::size_t i, std::size_t x, std::size_t y) { gb[y] += g[i] * va[x]; });
    }
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  Buffer<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * factor;
  auto ix = x.impl_ptr();
  return emit<T>(x.shape(), std::move(out), recording<T>({&x}), "scale", {ix}, [ix, factor](const Buffer<T>& g, const Buffer<T>&) {
    T* gx = grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

// ----------------------------------------------------------------------------
// matmul

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  const bool batched_b = b.rank() > 2;
  const bool lead_ok = !batched_b || (a.rank() == b.rank() &&
                                      std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()));
  if (k != kb || !lead_ok) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = n;
  const std::size_t batch = a.numel() / (m * k);
  Buffer<T> out(batch * m * n);
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  if (!batched_b) {
    const auto rows = static_cast<Eigen::Index>(batch * m);
    MatMap<T>(out.data(), rows, N).noalias() =
        ConstMatMap<T>(a.data().data(), rows, K) * ConstMatMap<T>(b.data().data(), K, N);
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      MatMap<T>(out.data() + s * m * n, M, N).noalias() =
          ConstMatMap<T>(a.data().data() + s * m * k, M, K) * ConstMatMap<T>(b.data().data() + s * k * n, K, N);
    }
  }
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  return emit<T>(std::move(out_shape), std::move(out), recording<T>({&a, &b}), "matmul", {ia, ib},
                 [ia, ib, batch, M, K, N, batched_b](const Buffer<T>& g, const Buffer<T>&) {
                   T* ga = grad_buffer(ia);
                   T* gb = grad_buffer(ib);
                   if (!batched_b) {
                     const auto rows = static_cast<Eigen::Index>(batch) * M;
                     ConstMatMap<T> dc(g.data(), rows, N);
                     if (ga) MatMap<T>(ga, rows, K).noalias() += dc * ConstMatMap<T>(ib->data.data(), K, N).transpose();
                     if (gb) MatMap<T>(gb, K, N).noalias() += ConstMatMap<T>(ia->data.data(), rows, K).transpose() * dc;
                     return;
                   }
                   for (std::size_t s = 0; s < batch; ++s) {
                     ConstMatMap<T> dc(g.data() + s * M * N, M, N);
                     if (ga) {
                       MatMap<T>(ga + s * M * K, M, K).noalias() +=
                           dc * ConstMatMap<T>(ib->data.data() + s * K * N, K, N).transpose();
                     }
                     if (gb) {
                       MatMap<T>(gb + s * K * N, K, N).noalias() +=
                           ConstMatMap<T>(ia->data.data() + s * M * K, M, K).transpose() * dc;
                     }
                   }
                 });
}

// ----------------------------------------------------------------------------
// Layout

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto ix = x.impl_ptr();
  return emit<T>(std::move(shape), Buffer<T>(x.data().begin(), x.data().end()), recording<T>({&x}), "reshape", {ix}, [ix](const Buffer<T>& g, const Buffer<T>&) {
    T* gx = grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

namespace {

// dst[out] = src[in] for the permutation `axes` (output axis i reads input axis axes[i]).
// When accumulate is set, src is indexed by output and dst by input instead.
template <class T>
void permute_apply(const T* src, T* dst, const Shape& in_shape, const std::vector<std::size_t>& axes, bool inverse_accumulate) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  if (n == 0) return;
  if (r == 0) {
    if (inverse_accumulate) dst[0] += src[0];
    else dst[0] = src[0];
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  const std::size_t inner = out_shape[r - 1], s_inner = stride[r - 1];
  for (std::size_t o = 0; o < n;) {
    if (inverse_accumulate) {
      for (std::size_t k = 0; k < inner; ++k, ++o) dst[off + k * s_inner] += src[o];
    } else {
      for (std::size_t k = 0; k < inner; ++k, ++o) dst[o] = src[off + k * s_inner];
    }
    std::size_t d = r - 1;
    while (d-- > 0) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <class T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw ShapeError("permute: axis list size does not match rank of " + shape_str(x.shape()));
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis permutation for " + shape_str(x.shape()));
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[axes[i]];
  Buffer<T> out(x.numel());
  permute_apply(x.data().data(), out.data(), x.shape(), axes, false);
  auto ix = x.impl_ptr();
  return emit<T>(std::move(out_shape), std::move(out), recording<T>({&x}), "permute", {ix},
                 [ix, axes](const Buffer<T>& g, const Buffer<T>&) {
                   permute_apply(g.data(), grad_buffer(ix), ix->shape, axes, true);
                 });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x, int axis0, int axis1) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[normalize_axis(axis0, x.rank(), "transpose")], axes[normalize_axis(axis1, x.rank(), "transpose")]);
  return permute(x, axes);
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == out_shape.size();
    for (std::size_t i = 0; ok && i < out_shape.size(); ++i) {
      if (i != ax && p.shape()[i] != out_shape[i]) ok = false;
    }
    if (!ok) throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(parts[0].shape()));
    out_shape[ax] += p.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t row = out_shape[ax] * inner;
  Buffer<T> out(outer * row);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk, out.data() + o * row + off);
    }
    offsets.push_back(off);
    off += chunk;
  }
  bool rec = false;
  std::vector<ImplPtr<T>> parents;
  for (const auto& p : parts) {
    rec = rec || recording<T>({&p});
    parents.push_back(p.impl_ptr());
  }
  auto captured = parents;
  return emit<T>(std::move(out_shape), std::move(out), rec, "concat", std::move(parents),
                 [captured, offsets, outer, row, inner, ax](const Buffer<T>& g, const Buffer<T>&) {
                   for (std::size_t pi = 0; pi < captured.size(); ++pi) {
                     T* gp = grad_buffer(captured[pi]);
                     if (!gp) continue;
                     const std::size_t chunk = captured[pi]->shape[ax] * inner;
                     for (std::size_t o = 0; o < outer; ++o) {
                       const T* src = g.data() + o * row + offsets[pi];
                       T* dst = gp + o * chunk;
                       for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "slice");
  if (start + length > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds axis extent of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t in_row = x.shape()[ax] * inner, out_row = length * inner, skip = start * inner;
  Buffer<T> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + skip, out_row, out.data() + o * out_row);
  }
  auto ix = x.impl_ptr();
  return emit<T>(std::move(out_shape), std::move(out), recording<T>({&x}), "slice", {ix},
                 [ix, outer, in_row, out_row, skip](const Buffer<T>& g, const Buffer<T>&) {
                   T* gx = grad_buffer(ix);
                   for (std::size_t o = 0; o < outer; ++o) {
                     for (std::size_t i = 0; i < out_row; ++i) gx[o * in_row + skip + i] += g[o * out_row + i];
                   }
                 });
}

template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const int> indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0), d = table.dim(1);
  Buffer<T> out(indices.size() * d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int ix = indices[r];
    if (ix < 0 || static_cast<std::size_t>(ix) >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ix) + " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ix) * d, d, out.data() + r * d);
  }
  auto it = table.impl_ptr();
  std::vector<int> idx(indices.begin(), indices.end());
  return emit<T>({indices.size(), d}, std::move(out), recording<T>({&table}), "gather_rows", {it},
                 [it, idx, d](const Buffer<T>& g, const Buffer<T>&) {
                   T* gt = grad_buffer(it);
                   for (std::size_t r = 0; r < idx.size(); ++r) {
                     T* dst = gt + static_cast<std::size_t>(idx[r]) * d;
                     for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
                   }
                 });
}

// ----------------------------------------------------------------------------
// Normalizations and activations

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "softmax");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.shape()[ax];
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Buffer<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(px[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] *= inv;
    }
  }
  auto ix = x.impl_ptr();
  return emit<T>(x.shape(), std::move(out), recording<T>({&x}), "softmax", {ix},
                 [ix, outer, inner, len](const Buffer<T>& g, const Buffer<T>& y) {
                   T* gx = grad_buffer(ix);
                   for (std::size_t o = 0; o < outer; ++o) {
                     for (std::size_t in = 0; in < inner; ++in) {
                       const std::size_t base = o * len * inner + in;
                       T dot = 0;
                       for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                       for (std::size_t k = 0; k < len; ++k) {
                         gx[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
                       }
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, T eps) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.dim(-1) || bias.dim(0) != x.dim(-1)) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                     " and bias " + shape_str(bias.shape()));
  }
  const std::size_t d = x.dim(-1), rows = x.numel() / d;
  Buffer<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  const T* px = x.data().data();
  const T* pg = gain.data().data();
  const T* pb = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* v = px + r * d;
    double m = 0;
    for (std::size_t j = 0; j < d; ++j) m += v[j];
    m /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (v[j] - m) * (v[j] - m);
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = static_cast<T>(v[j] - m) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * pg[j] + pb[j];
    }
  }
  auto ix = x.impl_ptr(), ig = gain.impl_ptr(), ib = bias.impl_ptr();
  const bool rec = recording<T>({&x, &gain, &bias});
  if (!rec) return BasicTensor<T>::from_buffer(x.shape(), std::move(out));
  return emit<T>(x.shape(), std::move(out), rec, "layer_norm", {ix, ig, ib},
                 [ix, ig, ib, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](const Buffer<T>& g, const Buffer<T>&) {
                   T* gx = grad_buffer(ix);
                   T* gg = grad_buffer(ig);
                   T* gb = grad_buffer(ib);
                   const T* pg = ig->data.data();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* gr = g.data() + r * d;
                     const T* hr = xhat.data() + r * d;
                     if (gg) for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
                     if (gb) for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
                     if (!gx) continue;
                     T mean_dh = 0, mean_dh_h = 0;
                     for (std::size_t j = 0; j < d; ++j) {
                       const T dh = gr[j] * pg[j];
                       mean_dh += dh;
                       mean_dh_h += dh * hr[j];
                     }
                     mean_dh /= static_cast<T>(d);
                     mean_dh_h /= static_cast<T>(d);
                     for (std::size_t j = 0; j < d; ++j) {
                       gx[r * d + j] += rstd[r] * (gr[j] * pg[j] - mean_dh - hr[j] * mean_dh_h);
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T a = T(0.044715);
  const auto n = static_cast<Eigen::Index>(x.numel());
  const Eigen::Map<const Array> v(x.data().data(), n);
  auto t = std::make_shared<Buffer<T>>(x.numel());
  Eigen::Map<Array> tanh_out(t->data(), n);
  tanh_out = (c * (v + a * v.cube())).tanh();
  Buffer<T> out(x.numel());
  Eigen::Map<Array>(out.data(), n) = T(0.5) * v * (T(1) + tanh_out);
  auto ix = x.impl_ptr();
  const bool rec = recording<T>({&x});
  if (!rec) t.reset();
  return emit<T>(x.shape(), std::move(out), rec, "gelu", {ix}, [ix, t, n](const Buffer<T>& g, const Buffer<T>&) {
    T* gx = grad_buffer(ix);
    const Eigen::Map<const Array> v(ix->data.data(), n), th(t->data(), n), gy(g.data(), n);
    Eigen::Map<Array>(gx, n) +=
        gy * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th.square()) * c * (T(1) + T(3) * a * v.square()));
  });
}

// ----------------------------------------------------------------------------
// Reductions

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto ix = x.impl_ptr();
  return emit<T>({}, {total}, recording<T>({&x}), "sum", {ix}, [ix](const Buffer<T>& g, const Buffer<T>&) {
    T* gx = grad_buffer(ix);
    for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += g[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "sum");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.shape()[ax];
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Buffer<T> out(outer * inner, T(0));
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < len; ++k) {
      for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += px[(o * len + k) * inner + in];
    }
  }
  auto ix = x.impl_ptr();
  return emit<T>(std::move(out_shape), std::move(out), recording<T>({&x}), "sum_axis", {ix},
                 [ix, outer, inner, len](const Buffer<T>& g, const Buffer<T>&) {
                   T* gx = grad_buffer(ix);
                   for (std::size_t o = 0; o < outer; ++o) {
                     for (std::size_t k = 0; k < len; ++k) {
                       for (std::size_t in = 0; in < inner; ++in) gx[(o * len + k) * inner + in] += g[o * inner + in];
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x, int axis) {
  const std::size_t len = x.dim(axis);
  return scale(sum(x, axis), T(1) / static_cast<T>(len));
}

// ----------------------------------------------------------------------------
// Encodings and losses

template <class T>
BasicTensor<T> one_hot(std::span<const int> indices, std::size_t classes) {
  Buffer<T> out(indices.size() * classes, T(0));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int c = indices[i];
    if (c < 0 || static_cast<std::size_t>(c) >= classes) {
      throw std::out_of_range("one_hot: index " + std::to_string(c) + " outside [0, " + std::to_string(classes) + ")");
    }
    out[i * classes + static_cast<std::size_t>(c)] = T(1);
  }
  return BasicTensor<T>::from_buffer({indices.size(), classes}, std::move(out));
}

template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() < 1) throw ShapeError("softmax_cross_entropy: logits need a class axis");
  const std::size_t c = logits.dim(-1), rows = logits.numel() / c;
  if (targets.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  Buffer<T> probs(logits.numel());
  const T* pl = logits.data().data();
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    }
    const T* v = pl + r * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, v[j]);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T e = std::exp(v[j] - mx);
      probs[r * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    total += static_cast<double>(std::log(z) + mx - v[static_cast<std::size_t>(t)]);
  }
  const T loss = static_cast<T>(total / static_cast<double>(rows));
  auto il = logits.impl_ptr();
  const bool rec = recording<T>({&logits});
  if (!rec) return BasicTensor<T>::from_buffer(Shape{}, Buffer<T>{loss});
  std::vector<int> tgt(targets.begin(), targets.end());
  return emit<T>({}, {loss}, rec, "softmax_cross_entropy", {il},
                 [il, probs = std::move(probs), tgt = std::move(tgt), rows, c](const Buffer<T>& g, const Buffer<T>&) {
                   T* gl = grad_buffer(il);
                   const T w = g[0] / static_cast<T>(rows);
                   for (std::size_t r = 0; r < rows; ++r) {
                     for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += w * probs[r * c + j];
                     gl[r * c + static_cast<std::size_t>(tgt[r])] -= w;
                   }
                 });
}

template <class T>
BasicTensor<T> mean_squared_error(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mean_squared_error: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  if (n == 0) throw ShapeError("mean_squared_error: empty tensors");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    total += e * e;
  }
  auto ip = pred.impl_ptr(), it = target.impl_ptr();
  return emit<T>({}, {static_cast<T>(total / static_cast<double>(n))}, recording<T>({&pred, &target}), "mse", {ip, it},
                 [ip, it, n](const Buffer<T>& g, const Buffer<T>&) {
                   const T w = T(2) * g[0] / static_cast<T>(n);
                   T* gp = grad_buffer(ip);
                   T* gt = grad_buffer(it);
                   for (std::size_t i = 0; i < n; ++i) {
                     const T e = ip->data[i] - it->data[i];
                     if (gp) gp[i] += w * e;
                     if (gt) gt[i] -= w * e;
                   }
                 });
}

// ----------------------------------------------------------------------------
// Spatial resizes

namespace {

struct SpatialDims {
  std::size_t batch, h, w, c;
};

SpatialDims spatial_dims(const Shape& s, const char* op) {
  if (s.size() < 3) throw ShapeError(std::string(op) + ": need [..., H, W, C], got " + shape_str(s));
  SpatialDims d{1, s[s.size() - 3], s[s.size() - 2], s[s.size() - 1]};
  for (std::size_t i = 0; i + 3 < s.size(); ++i) d.batch *= s[i];
  return d;
}

struct LinearTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

std::vector<std::size_t> nearest_taps(std::size_t in, std::size_t out) {
  std::vector<std::size_t> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const auto src = static_cast<std::size_t>(std::floor((static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                                                         static_cast<double>(out)));
    taps[o] = std::min(src, in - 1);
  }
  return taps;
}

}  // namespace

template <class T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const SpatialDims d = spatial_dims(x.shape(), "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: target size must be positive");
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 3] = out_h;
  out_shape[out_shape.size() - 2] = out_w;
  auto ix = x.impl_ptr();
  if (out_h == d.h && out_w == d.w) {
    return emit<T>(std::move(out_shape), Buffer<T>(x.data().begin(), x.data().end()), recording<T>({&x}), "resize_bilinear", {ix},
                   [ix](const Buffer<T>& g, const Buffer<T>&) {
                     T* gx = grad_buffer(ix);
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                   });
  }
  const auto ty = linear_taps(d.h, out_h);
  const auto tx = linear_taps(d.w, out_w);
  Buffer<T> out(d.batch * out_h * out_w * d.c);
  const T* px = x.data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    const T* src = px + b * d.h * d.w * d.c;
    T* dst = out.data() + b * out_h * out_w * d.c;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& y = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& xx = tx[ox];
        const T w00 = static_cast<T>((1 - y.w1) * (1 - xx.w1)), w01 = static_cast<T>((1 - y.w1) * xx.w1);
        const T w10 = static_cast<T>(y.w1 * (1 - xx.w1)), w11 = static_cast<T>(y.w1 * xx.w1);
        for (std::size_t ch = 0; ch < d.c; ++ch) {
          dst[(oy * out_w + ox) * d.c + ch] =
              w00 * src[(y.i0 * d.w + xx.i0) * d.c + ch] + w01 * src[(y.i0 * d.w + xx.i1) * d.c + ch] +
              w10 * src[(y.i1 * d.w + xx.i0) * d.c + ch] + w11 * src[(y.i1 * d.w + xx.i1) * d.c + ch];
        }
      }
    }
  }
  return emit<T>(std::move(out_shape), std::move(out), recording<T>({&x}), "resize_bilinear", {ix},
                 [ix, d, ty, tx, out_h, out_w](const Buffer<T>& g, const Buffer<T>&) {
                   T* gx = grad_buffer(ix);
                   for (std::size_t b = 0; b < d.batch; ++b) {
                     T* dst = gx + b * d.h * d.w * d.c;
                     const T* src = g.data() + b * out_h * out_w * d.c;
                     for (std::size_t oy = 0; oy < out_h; ++oy) {
                       const auto& y = ty[oy];
                       for (std::size_t ox = 0; ox < out_w; ++ox) {
                         const auto& xx = tx[ox];
                         const T w00 = static_cast<T>((1 - y.w1) * (1 - xx.w1)), w01 = static_cast<T>((1 - y.w1) * xx.w1);
                         const T w10 = static_cast<T>(y.w1 * (1 - xx.w1)), w11 = static_cast<T>(y.w1 * xx.w1);
                         for (std::size_t ch = 0; ch < d.c; ++ch) {
                           const T gv = src[(oy * out_w + ox) * d.c + ch];
                           dst[(y.i0 * d.w + xx.i0) * d.c + ch] += w00 * gv;
                           dst[(y.i0 * d.w + xx.i1) * d.c + ch] += w01 * gv;
                           dst[(y.i1 * d.w + xx.i0) * d.c + ch] += w10 * gv;
                           dst[(y.i1 * d.w + xx.i1) * d.c + ch] += w11 * gv;
                         }
                       }
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> resize_nearest(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const SpatialDims d = spatial_dims(x.shape(), "resize_nearest");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_nearest: target size must be positive");
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 3] = out_h;
  out_shape[out_shape.size() - 2] = out_w;
  const auto ty = nearest_taps(d.h, out_h);
  const auto tx = nearest_taps(d.w, out_w);
  Buffer<T> out(d.batch * out_h * out_w * d.c);
  const T* px = x.data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        std::copy_n(px + ((b * d.h + ty[oy]) * d.w + tx[ox]) * d.c, d.c,
                    out.data() + ((b * out_h + oy) * out_w + ox) * d.c);
      }
    }
  }
  auto ix = x.impl_ptr();
  return emit<T>(std::move(out_shape), std::move(out), recording<T>({&x}), "resize_nearest", {ix},
                 [ix, d, ty, tx, out_h, out_w](const Buffer<T>& g, const Buffer<T>&) {
                   T* gx = grad_buffer(ix);
                   for (std::size_t b = 0; b < d.batch; ++b) {
                     for (std::size_t oy = 0; oy < out_h; ++oy) {
                       for (std::size_t ox = 0; ox < out_w; ++ox) {
                         T* dst = gx + ((b * d.h + ty[oy]) * d.w + tx[ox]) * d.c;
                         const T* src = g.data() + ((b * out_h + oy) * out_w + ox) * d.c;
                         for (std::size_t ch = 0; ch < d.c; ++ch) dst[ch] += src[ch];
                       }
                     }
                   }
                 });
}

template <class T>
BasicTensor<T> straight_through(const BasicTensor<T>& source, const BasicTensor<T>& value) {
  if (source.shape() != value.shape()) {
    throw ShapeError("straight_through: " + shape_str(source.shape()) + " vs " + shape_str(value.shape()));
  }
  auto is = source.impl_ptr();
  return emit<T>(value.shape(), Buffer<T>(value.data().begin(), value.data().end()), recording<T>({&source}), "straight_through", {is},
                 [is](const Buffer<T>& g, const Buffer<T>&) {
                   T* gs = grad_buffer(is);
                   for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                 });
}

// ----------------------------------------------------------------------------

#define UVIM_INSTANTIATE(T)                                                                                   \
  template class BasicTensor<T>;                                                                             \
  template class ComputationRecord<T>;                                                                       \
  template class NoRecordScope<T>;                                                                           \
  template GradMap<T> backward(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                             \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);                   \
  template BasicTensor<T> transpose(const BasicTensor<T>&, int, int);                                        \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                   \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, std::size_t, std::size_t);                       \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const int>);                          \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int);                                               \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T); \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> sum(const BasicTensor<T>&, int);                                                   \
  template BasicTensor<T> mean(const BasicTensor<T>&, int);                                                  \
  template BasicTensor<T> one_hot(std::span<const int>, std::size_t);                                        \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);                \
  template BasicTensor<T> mean_squared_error(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> resize_bilinear(const BasicTensor<T>&, std::size_t, std::size_t);                  \
  template BasicTensor<T> resize_nearest(const BasicTensor<T>&, std::size_t, std::size_t);                   \
  template BasicTensor<T> straight_through(const BasicTensor<T>&, const BasicTensor<T>&);

UVIM_INSTANTIATE(float)
UVIM_INSTANTIATE(double)

#undef UVIM_INSTANTIATE

}  // namespace uvim
