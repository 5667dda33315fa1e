#pragma once

#include <cmath>
#include <vector>

#include "usseg/tape.hpp"
#include "usseg/tensor.hpp"

// Elementwise and linear-algebra ops. Each op computes eagerly, validates
// the result is finite, and (when a tape is active and some input wants a
// gradient) records a backward closure. Gradients accumulate with +=, so a
// tensor used twice receives both contributions.

namespace usseg {
namespace ops {

namespace detail {

template <typename S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Rows covered by all leading axes, columns = last axis.
template <typename S>
inline std::pair<Index, Index> rows_cols(const Tensor<S>& t) {
  Index d = t.dim(-1);
  return {t.size() / d, d};
}

template <typename S>
inline S gelu_scalar(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <typename S>
inline S gelu_grad_scalar(S x) {
  const S phi = std::exp(S(-0.5) * x * x) * S(0.3989422804014326779);  // N(0,1) pdf
  const S Phi = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
  return Phi + x * phi;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  y.array() = a.array() + b.array();
  usseg::detail::check_finite(y, "add");
  if (auto* tape = Tape<S>::active()) {
    const bool na = tape->wants(a), nb = tape->wants(b);
    if (na || nb) {
      tape->record(y, [a, b, y, na, nb] {
        if (!y.has_grad()) return;
        if (na) a.ensure_grad() += y.grad();
        if (nb) b.ensure_grad() += y.grad();
      });
    }
  }
  return y;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  y.array() = a.array() - b.array();
  usseg::detail::check_finite(y, "sub");
  if (auto* tape = Tape<S>::active()) {
    const bool na = tape->wants(a), nb = tape->wants(b);
    if (na || nb) {
      tape->record(y, [a, b, y, na, nb] {
        if (!y.has_grad()) return;
        if (na) a.ensure_grad() += y.grad();
        if (nb) b.ensure_grad() -= y.grad();
      });
    }
  }
  return y;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  y.array() = a.array() * b.array();
  usseg::detail::check_finite(y, "mul");
  if (auto* tape = Tape<S>::active()) {
    const bool na = tape->wants(a), nb = tape->wants(b);
    if (na || nb) {
      tape->record(y, [a, b, y, na, nb] {
        if (!y.has_grad()) return;
        if (na) a.ensure_grad() += y.grad() * b.array();
        if (nb) b.ensure_grad() += y.grad() * a.array();
      });
    }
  }
  return y;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Tensor<S> y = Tensor<S>::zeros(a.shape());
  y.array() = a.array() * factor;
  usseg::detail::check_finite(y, "scale");
  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(a)) {
      tape->record(y, [a, y, factor] {
        if (!y.has_grad()) return;
        a.ensure_grad() += y.grad() * factor;
      });
    }
  }
  return y;
}

// Exact erf-form GELU: x * Phi(x).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  y.array() = x.array().unaryExpr([](S v) { return detail::gelu_scalar(v); });
  usseg::detail::check_finite(y, "gelu");
  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(x)) {
      tape->record(y, [x, y] {
        if (!y.has_grad()) return;
        x.ensure_grad() +=
            y.grad() * x.array().unaryExpr([](S v) { return detail::gelu_grad_scalar(v); });
      });
    }
  }
  return y;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> y = Tensor<S>::scalar(x.array().sum());
  usseg::detail::check_finite(y, "sum");
  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(x)) {
      tape->record(y, [x, y] {
        if (!y.has_grad()) return;
        x.ensure_grad() += y.grad()[0];
      });
    }
  }
  return y;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S inv = S(1) / static_cast<S>(x.size());
  Tensor<S> y = Tensor<S>::scalar(x.array().sum() * inv);
  usseg::detail::check_finite(y, "mean");
  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(x)) {
      tape->record(y, [x, y, inv] {
        if (!y.has_grad()) return;
        x.ensure_grad() += y.grad()[0] * inv;
      });
    }
  }
  return y;
}

// Plain 2-D matrix product.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner axes disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor<S> y = Tensor<S>::zeros({m, n});
  y.matrix(m, n).noalias() = a.matrix(m, k) * b.matrix(k, n);
  usseg::detail::check_finite(y, "matmul");
  if (auto* tape = Tape<S>::active()) {
    const bool na = tape->wants(a), nb = tape->wants(b);
    if (na || nb) {
      tape->record(y, [a, b, y, m, k, n, na, nb] {
        if (!y.has_grad()) return;
        Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), m, n);
        if (na) {
          Eigen::Map<RowMatrix<S>> ga(a.ensure_grad().data(), m, k);
          ga.noalias() += gy * b.matrix(k, n).transpose();
        }
        if (nb) {
          Eigen::Map<RowMatrix<S>> gb(b.ensure_grad().data(), k, n);
          gb.noalias() += a.matrix(m, k).transpose() * gy;
        }
      });
    }
  }
  return y;
}

// Affine map over the last axis: y[..., j] = sum_i x[..., i] w[i, j] + b[j].
// Pass an undefined bias to skip it.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias = {}) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank-2, got " + shape_str(w.shape()));
  const Index d_in = w.dim(0), d_out = w.dim(1);
  if (x.dim(-1) != d_in) {
    throw ShapeError("linear: input last axis " + std::to_string(x.dim(-1)) +
                     " != weight rows " + std::to_string(d_in));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out)) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " != (" +
                     std::to_string(d_out) + ")");
  }
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  const Index rows = x.size() / d_in;
  Tensor<S> y = Tensor<S>::zeros(out_shape);
  auto ym = y.matrix(rows, d_out);
  ym.noalias() = x.matrix(rows, d_in) * w.matrix(d_in, d_out);
  if (bias.defined()) ym.rowwise() += bias.matrix(1, d_out).row(0);
  usseg::detail::check_finite(y, "linear");
  if (auto* tape = Tape<S>::active()) {
    const bool nx = tape->wants(x), nw = tape->wants(w);
    const bool nb = bias.defined() && tape->wants(bias);
    if (nx || nw || nb) {
      tape->record(y, [x, w, bias, y, rows, d_in, d_out, nx, nw, nb] {
        if (!y.has_grad()) return;
        Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), rows, d_out);
        if (nx) {
          Eigen::Map<RowMatrix<S>> gx(x.ensure_grad().data(), rows, d_in);
          gx.noalias() += gy * w.matrix(d_in, d_out).transpose();
        }
        if (nw) {
          Eigen::Map<RowMatrix<S>> gw(w.ensure_grad().data(), d_in, d_out);
          gw.noalias() += x.matrix(rows, d_in).transpose() * gy;
        }
        if (nb) {
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(bias.ensure_grad().data(), d_out);
          gb.noalias() += gy.colwise().sum().transpose();
        }
      });
    }
  }
  return y;
}

// Numerically stable softmax over the last axis.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x) {
  auto [rows, d] = detail::rows_cols(x);
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  auto xm = x.matrix(rows, d);
  auto ym = y.matrix(rows, d);
  for (Index r = 0; r < rows; ++r) {
    const S mx = xm.row(r).maxCoeff();
    ym.row(r).array() = (xm.row(r).array() - mx).exp();
    ym.row(r) /= ym.row(r).sum();
  }
  usseg::detail::check_finite(y, "softmax");
  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(x)) {
      tape->record(y, [x, y, rows, d] {
        if (!y.has_grad()) return;
        Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), rows, d);
        auto ym = y.matrix(rows, d);
        Eigen::Map<RowMatrix<S>> gx(x.ensure_grad().data(), rows, d);
        for (Index r = 0; r < rows; ++r) {
          const S dot = gy.row(r).cwiseProduct(ym.row(r)).sum();
          gx.row(r).array() += ym.row(r).array() * (gy.row(r).array() - dot);
        }
      });
    }
  }
  return y;
}

// Layer normalization over the last axis with learnable scale/shift.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  auto [rows, d] = detail::rows_cols(x);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw ShapeError("layer_norm: gamma/beta must be rank-1 of extent " + std::to_string(d));
  }
  Tensor<S> y = Tensor<S>::zeros(x.shape());
  Tensor<S> xhat = Tensor<S>::zeros(x.shape());     // saved for backward
  Tensor<S> inv_std = Tensor<S>::zeros({rows});
  auto xm = x.matrix(rows, d);
  auto hm = xhat.matrix(rows, d);
  auto ym = y.matrix(rows, d);
  auto gv = gamma.array();
  auto bv = beta.array();
  for (Index r = 0; r < rows; ++r) {
    const S mu = xm.row(r).mean();
    const S var = (xm.row(r).array() - mu).square().mean();
    const S inv = S(1) / std::sqrt(var + eps);
    inv_std.data()[r] = inv;
    hm.row(r).array() = (xm.row(r).array() - mu) * inv;
    ym.row(r).array() = hm.row(r).array() * gv.transpose() + bv.transpose();
  }
  usseg::detail::check_finite(y, "layer_norm");
  if (auto* tape = Tape<S>::active()) {
    const bool nx = tape->wants(x), ng = tape->wants(gamma), nb = tape->wants(beta);
    if (nx || ng || nb) {
      tape->record(y, [x, gamma, beta, y, xhat, inv_std, rows, d, nx, ng, nb] {
        if (!y.has_grad()) return;
        Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), rows, d);
        auto hm = xhat.matrix(rows, d);
        if (nx) {
          Eigen::Map<RowMatrix<S>> gx(x.ensure_grad().data(), rows, d);
          auto gv = gamma.array();
          for (Index r = 0; r < rows; ++r) {
            Eigen::Array<S, Eigen::Dynamic, 1> dh =
                gy.row(r).transpose().array() * gv;
            const S m1 = dh.mean();
            const S m2 = (dh * hm.row(r).transpose().array()).mean();
            gx.row(r).array() +=
                inv_std.data()[r] * (dh - m1 - hm.row(r).transpose().array() * m2).transpose();
          }
        }
        if (ng) {
          Eigen::Map<ArrayX<S>> gg(gamma.ensure_grad().data(), d);
          gg += (gy.array() * hm.array()).colwise().sum().transpose();
        }
        if (nb) {
          Eigen::Map<ArrayX<S>> gb(beta.ensure_grad().data(), d);
          gb += gy.array().colwise().sum().transpose();
        }
      });
    }
  }
  return y;
}

// Concatenate along the last axis.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  Index d_out = 0;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    pl.pop_back();
    if (pl != lead) {
      throw ShapeError("concat: leading axes disagree, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    d_out += p.dim(-1);
  }
  Shape out_shape = parts[0].shape();
  out_shape.back() = d_out;
  Tensor<S> y = Tensor<S>::zeros(out_shape);
  const Index rows = y.size() / d_out;
  auto ym = y.matrix(rows, d_out);
  Index off = 0;
  for (const auto& p : parts) {
    const Index dp = p.dim(-1);
    ym.middleCols(off, dp) = p.matrix(rows, dp);
    off += dp;
  }
  usseg::detail::check_finite(y, "concat");
  if (auto* tape = Tape<S>::active()) {
    std::vector<bool> need(parts.size());
    bool any = false;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      need[i] = tape->wants(parts[i]);
      any = any || need[i];
    }
    if (any) {
      tape->record(y, [parts, y, need, rows, d_out] {
        if (!y.has_grad()) return;
        Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), rows, d_out);
        Index off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
          const Index dp = parts[i].dim(-1);
          if (need[i]) {
            Eigen::Map<RowMatrix<S>> gp(parts[i].ensure_grad().data(), rows, dp);
            gp += gy.middleCols(off, dp);
          }
          off += dp;
        }
      });
    }
  }
  return y;
}

// Merge two equal-shape tensors channel by channel along the last axis:
// output group 2k comes from a, group 2k+1 from b. group = 1 alternates
// single channels.
template <typename S>
Tensor<S> interleave(const Tensor<S>& a, const Tensor<S>& b, Index group = 1) {
  detail::require_same_shape(a, b, "interleave");
  const Index d = a.dim(-1);
  if (group < 1 || d % group != 0) {
    throw ShapeError("interleave: group " + std::to_string(group) +
                     " must divide channel count " + std::to_string(d));
  }
  Shape out_shape = a.shape();
  out_shape.back() = 2 * d;
  Tensor<S> y = Tensor<S>::zeros(out_shape);
  const Index rows = a.size() / d;
  auto am = a.matrix(rows, d);
  auto bm = b.matrix(rows, d);
  auto ym = y.matrix(rows, 2 * d);
  const Index ngroups = d / group;
  for (Index g = 0; g < ngroups; ++g) {
    ym.middleCols(2 * g * group, group) = am.middleCols(g * group, group);
    ym.middleCols((2 * g + 1) * group, group) = bm.middleCols(g * group, group);
  }
  usseg::detail::check_finite(y, "interleave");
  if (auto* tape = Tape<S>::active()) {
    const bool na = tape->wants(a), nb = tape->wants(b);
    if (na || nb) {
      tape->record(y, [a, b, y, rows, d, group, ngroups, na, nb] {
        if (!y.has_grad()) return;
        Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), rows, 2 * d);
        for (Index g = 0; g < ngroups; ++g) {
          if (na) {
            Eigen::Map<RowMatrix<S>> ga(a.ensure_grad().data(), rows, d);
            ga.middleCols(g * group, group) += gy.middleCols(2 * g * group, group);
          }
          if (nb) {
            Eigen::Map<RowMatrix<S>> gb(b.ensure_grad().data(), rows, d);
            gb.middleCols(g * group, group) += gy.middleCols((2 * g + 1) * group, group);
          }
        }
      });
    }
  }
  return y;
}

// Row-major reshape (copies; gradients copy straight back).
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  Tensor<S> y = Tensor<S>::zeros(std::move(shape));
  y.array() = x.array();
  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(x)) {
      tape->record(y, [x, y] {
        if (!y.has_grad()) return;
        x.ensure_grad() += y.grad();
      });
    }
  }
  return y;
}

}  // namespace ops
}  // namespace usseg
