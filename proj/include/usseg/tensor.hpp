#pragma once

#include <Eigen/Core>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "usseg/errors.hpp"

namespace usseg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

inline void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("zero-dimensional tensors are not allowed");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] < 1) {
      throw ShapeError("axis " + std::to_string(i) + " has non-positive extent in " +
                       shape_str(shape));
    }
  }
}

// Dense row-major tensor of a fixed floating scalar with an optional
// gradient buffer. Tensor is a cheap handle: copies share storage, all ops
// return fresh tensors and never mutate their inputs. Storage-level
// mutation (parameter init, optimizer updates, gradient accumulation) goes
// through the const handle on purpose.
template <typename Scalar>
class Tensor {
 public:
  using Storage = ArrayX<Scalar>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    validate_shape(shape);
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->values = Storage::Zero(shape_numel(t.impl_->shape));
    return t;
  }

  static Tensor full(Shape shape, Scalar value) {
    Tensor t = zeros(std::move(shape));
    t.array() = value;
    return t;
  }

  static Tensor from(Shape shape, const std::vector<Scalar>& values) {
    Tensor t = zeros(std::move(shape));
    if (static_cast<Index>(values.size()) != t.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(t.shape()));
    }
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = values[static_cast<std::size_t>(i)];
    return t;
  }

  static Tensor scalar(Scalar value) { return full({1}, value); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }

  int rank() const { return static_cast<int>(impl_->shape.size()); }

  // Negative indices count from the back.
  Index dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(i)];
  }

  Index size() const { return impl_->values.size(); }

  Scalar* data() const { return impl_->values.data(); }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    return impl_->values[0];
  }

  Eigen::Map<Storage> array() const { return {impl_->values.data(), impl_->values.size()}; }

  // Reshaping matrix view over the flat row-major storage.
  Eigen::Map<RowMatrix<Scalar>> matrix(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " does not cover tensor " + shape_str(shape()));
    }
    return {impl_->values.data(), rows, cols};
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) const { impl_->requires_grad = v; }

  bool has_grad() const { return impl_->grad != nullptr; }

  Storage& ensure_grad() const {
    if (!impl_->grad) impl_->grad = std::make_unique<Storage>(Storage::Zero(size()));
    return *impl_->grad;
  }

  const Storage& grad() const {
    if (!impl_->grad) throw ShapeError("tensor has no gradient buffer");
    return *impl_->grad;
  }

  void drop_grad() const { impl_->grad.reset(); }

  // Stable identity of the underlying storage (tape bookkeeping, freeze tests).
  const void* id() const { return impl_.get(); }

  Tensor clone() const {
    Tensor t = zeros(shape());
    t.array() = array();
    return t;
  }

 private:
  struct Impl {
    Shape shape;
    Storage values;
    std::unique_ptr<Storage> grad;
    bool requires_grad = false;
  };

  std::shared_ptr<Impl> impl_;
};

namespace detail {

// Every forward op funnels its output through this guard: non-finite values
// are an error at the op that produced them, they never propagate.
template <typename Scalar>
inline void check_finite(const Tensor<Scalar>& t, const char* op) {
  auto a = t.array();
  if (a.allFinite()) return;
  for (Index i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i])) {
      throw NumericsError(std::string(op) + " produced a non-finite value at flat index " +
                          std::to_string(i));
    }
  }
}

}  // namespace detail

}  // namespace usseg
