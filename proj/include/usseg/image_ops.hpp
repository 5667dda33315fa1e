#pragma once

#include <algorithm>
#include <memory>
#include <vector>

#include "usseg/tape.hpp"
#include "usseg/tensor.hpp"

// Spatial ops on channels-last (b, h, w, c) tensors.

namespace usseg {
namespace ops {

namespace detail {

template <typename S>
inline void require_rank4(const Tensor<S>& x, const char* op) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(op) + " expects a (b, h, w, c) tensor, got " +
                     shape_str(x.shape()));
  }
}

// Gathers the receptive field of every output position of one sample into
// `col` with layout [oh*ow, k*k*ci]; out-of-bounds taps read as zero.
template <typename S>
void im2col(const S* x, Index h, Index w, Index ci, Index k, Index stride, Index pad, Index oh,
            Index ow, RowMatrix<S>& col) {
  for (Index oy = 0; oy < oh; ++oy) {
    for (Index ox = 0; ox < ow; ++ox) {
      S* crow = col.data() + (oy * ow + ox) * k * k * ci;
      for (Index ky = 0; ky < k; ++ky) {
        const Index iy = oy * stride - pad + ky;
        for (Index kx = 0; kx < k; ++kx) {
          const Index ix = ox * stride - pad + kx;
          S* dst = crow + (ky * k + kx) * ci;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            const S* src = x + (iy * w + ix) * ci;
            std::copy(src, src + ci, dst);
          } else {
            std::fill(dst, dst + ci, S(0));
          }
        }
      }
    }
  }
}

// Scatter-add of the column gradient back onto one sample.
template <typename S>
void col2im_add(const RowMatrix<S>& gcol, Index h, Index w, Index ci, Index k, Index stride,
                Index pad, Index oh, Index ow, S* gx) {
  for (Index oy = 0; oy < oh; ++oy) {
    for (Index ox = 0; ox < ow; ++ox) {
      const S* crow = gcol.data() + (oy * ow + ox) * k * k * ci;
      for (Index ky = 0; ky < k; ++ky) {
        const Index iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (Index kx = 0; kx < k; ++kx) {
          const Index ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          S* dst = gx + (iy * w + ix) * ci;
          const S* src = crow + (ky * k + kx) * ci;
          for (Index c = 0; c < ci; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

struct ResizeAxis {
  std::vector<Index> lo, hi;
  std::vector<double> frac;
};

// Half-pixel (align-corners-false) source coordinates, clamped to the
// valid range.
inline ResizeAxis resize_axis(Index in, Index out) {
  ResizeAxis a;
  a.lo.resize(static_cast<std::size_t>(out));
  a.hi.resize(static_cast<std::size_t>(out));
  a.frac.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    a.lo[static_cast<std::size_t>(i)] = lo;
    a.hi[static_cast<std::size_t>(i)] = std::min(lo + 1, in - 1);
    a.frac[static_cast<std::size_t>(i)] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace detail

// 2-D cross-correlation over channels-last tensors. Kernel layout is
// (k, k, c_in, c_out); output extent (h + 2*pad - k) / stride + 1 must be
// exact. Pass an undefined bias to skip it.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias, Index stride,
                 Index pad) {
  detail::require_rank4(x, "conv2d");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1)) {
    throw ShapeError("conv2d: kernel must be (k, k, c_in, c_out), got " +
                     shape_str(kernel.shape()));
  }
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
  const Index k = kernel.dim(0), co = kernel.dim(3);
  if (kernel.dim(2) != ci) {
    throw ShapeError("conv2d: input channels " + std::to_string(ci) + " != kernel channels " +
                     std::to_string(kernel.dim(2)));
  }
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and pad >= 0");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " != (" +
                     std::to_string(co) + ")");
  }
  const Index hn = h + 2 * pad - k;
  const Index wn = w + 2 * pad - k;
  if (hn < 0 || wn < 0 || hn % stride != 0 || wn % stride != 0) {
    throw ShapeError("conv2d: extents " + shape_str(x.shape()) + " incompatible with k=" +
                     std::to_string(k) + " stride=" + std::to_string(stride) + " pad=" +
                     std::to_string(pad) + " on axes h, w");
  }
  const Index oh = hn / stride + 1, ow = wn / stride + 1;

  Tensor<S> y = Tensor<S>::zeros({b, oh, ow, co});
  auto km = kernel.matrix(k * k * ci, co);
  RowMatrix<S> col(oh * ow, k * k * ci);
  for (Index bi = 0; bi < b; ++bi) {
    detail::im2col(x.data() + bi * h * w * ci, h, w, ci, k, stride, pad, oh, ow, col);
    Eigen::Map<RowMatrix<S>> out(y.data() + bi * oh * ow * co, oh * ow, co);
    out.noalias() = col * km;
    if (bias.defined()) out.rowwise() += bias.matrix(1, co).row(0);
  }
  usseg::detail::check_finite(y, "conv2d");

  if (auto* tape = Tape<S>::active()) {
    const bool nx = tape->wants(x), nk = tape->wants(kernel);
    const bool nb = bias.defined() && tape->wants(bias);
    if (nx || nk || nb) {
      tape->record(y, [x, kernel, bias, y, b, h, w, ci, k, co, stride, pad, oh, ow, nx, nk, nb] {
        if (!y.has_grad()) return;
        auto km = kernel.matrix(k * k * ci, co);
        RowMatrix<S> col(oh * ow, k * k * ci);
        RowMatrix<S> gcol(oh * ow, k * k * ci);
        for (Index bi = 0; bi < b; ++bi) {
          Eigen::Map<const RowMatrix<S>> gy(y.grad().data() + bi * oh * ow * co, oh * ow, co);
          if (nk) {
            detail::im2col(x.data() + bi * h * w * ci, h, w, ci, k, stride, pad, oh, ow, col);
            Eigen::Map<RowMatrix<S>> gk(kernel.ensure_grad().data(), k * k * ci, co);
            gk.noalias() += col.transpose() * gy;
          }
          if (nx) {
            gcol.noalias() = gy * km.transpose();
            detail::col2im_add(gcol, h, w, ci, k, stride, pad, oh, ow,
                               x.ensure_grad().data() + bi * h * w * ci);
          }
          if (nb) {
            Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(bias.ensure_grad().data(), co);
            gb.noalias() += gy.colwise().sum().transpose();
          }
        }
      });
    }
  }
  return y;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, Index stride, Index pad) {
  return conv2d(x, kernel, Tensor<S>{}, stride, pad);
}

// Transposed convolution restricted to kernel == stride, which makes the
// scatter blocks disjoint and the output exactly stride x larger.
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                           Index stride) {
  detail::require_rank4(x, "conv_transpose2d");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1)) {
    throw ShapeError("conv_transpose2d: kernel must be (k, k, c_in, c_out), got " +
                     shape_str(kernel.shape()));
  }
  const Index k = kernel.dim(0);
  if (k != stride) {
    throw ConfigError("conv_transpose2d: kernel extent " + std::to_string(k) +
                      " must equal stride " + std::to_string(stride));
  }
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
  const Index co = kernel.dim(3);
  if (kernel.dim(2) != ci) {
    throw ShapeError("conv_transpose2d: input channels " + std::to_string(ci) +
                     " != kernel channels " + std::to_string(kernel.dim(2)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) {
    throw ShapeError("conv_transpose2d: bias shape " + shape_str(bias.shape()) + " != (" +
                     std::to_string(co) + ")");
  }
  const Index oh = h * stride, ow = w * stride;

  // Repack kernel as [ci, k*k*co] so every input pixel expands by one GEMM.
  RowMatrix<S> kt(ci, k * k * co);
  for (Index t = 0; t < k * k; ++t)
    for (Index c = 0; c < ci; ++c)
      for (Index o = 0; o < co; ++o) kt(c, t * co + o) = kernel.data()[(t * ci + c) * co + o];

  const Index rows = b * h * w;
  RowMatrix<S> expanded(rows, k * k * co);
  expanded.noalias() = x.matrix(rows, ci) * kt;

  Tensor<S> y = Tensor<S>::zeros({b, oh, ow, co});
  for (Index bi = 0; bi < b; ++bi) {
    for (Index iy = 0; iy < h; ++iy) {
      for (Index ix = 0; ix < w; ++ix) {
        const S* src = expanded.data() + ((bi * h + iy) * w + ix) * k * k * co;
        for (Index ky = 0; ky < k; ++ky) {
          S* dst = y.data() + (((bi * oh + iy * stride + ky) * ow) + ix * stride) * co;
          std::copy(src + ky * k * co, src + (ky + 1) * k * co, dst);
        }
      }
    }
  }
  if (bias.defined()) {
    auto ym = y.matrix(b * oh * ow, co);
    ym.rowwise() += bias.matrix(1, co).row(0);
  }
  usseg::detail::check_finite(y, "conv_transpose2d");

  if (auto* tape = Tape<S>::active()) {
    const bool nx = tape->wants(x), nk = tape->wants(kernel);
    const bool nb = bias.defined() && tape->wants(bias);
    if (nx || nk || nb) {
      tape->record(y, [x, kernel, bias, y, b, h, w, ci, k, co, stride, oh, ow, rows, nx, nk, nb] {
        if (!y.has_grad()) return;
        // Gather output grads back into the expanded [rows, k*k*co] layout.
        RowMatrix<S> gexp(rows, k * k * co);
        for (Index bi = 0; bi < b; ++bi) {
          for (Index iy = 0; iy < h; ++iy) {
            for (Index ix = 0; ix < w; ++ix) {
              S* dst = gexp.data() + ((bi * h + iy) * w + ix) * k * k * co;
              for (Index ky = 0; ky < k; ++ky) {
                const S* src =
                    y.grad().data() + (((bi * oh + iy * stride + ky) * ow) + ix * stride) * co;
                std::copy(src, src + k * co, dst + ky * k * co);
              }
            }
          }
        }
        if (nx) {
          RowMatrix<S> kt(ci, k * k * co);
          for (Index t = 0; t < k * k; ++t)
            for (Index c = 0; c < ci; ++c)
              for (Index o = 0; o < co; ++o) kt(c, t * co + o) = kernel.data()[(t * ci + c) * co + o];
          Eigen::Map<RowMatrix<S>> gx(x.ensure_grad().data(), rows, ci);
          gx.noalias() += gexp * kt.transpose();
        }
        if (nk) {
          RowMatrix<S> gkt(ci, k * k * co);
          gkt.noalias() = x.matrix(rows, ci).transpose() * gexp;
          S* gk = kernel.ensure_grad().data();
          for (Index t = 0; t < k * k; ++t)
            for (Index c = 0; c < ci; ++c)
              for (Index o = 0; o < co; ++o) gk[(t * ci + c) * co + o] += gkt(c, t * co + o);
        }
        if (nb) {
          Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), b * oh * ow, co);
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(bias.ensure_grad().data(), co);
          gb.noalias() += gy.colwise().sum().transpose();
        }
      });
    }
  }
  return y;
}

template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& kernel, Index stride) {
  return conv_transpose2d(x, kernel, Tensor<S>{}, stride);
}

// Bilinear resample with half-pixel centers and edge clamping; constant
// inputs stay constant.
template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, Index out_h, Index out_w) {
  detail::require_rank4(x, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output extents must be >= 1");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const auto ay = detail::resize_axis(h, out_h);
  const auto ax = detail::resize_axis(w, out_w);

  Tensor<S> y = Tensor<S>::zeros({b, out_h, out_w, c});
  using CVec = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;
  using Vec = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
  for (Index bi = 0; bi < b; ++bi) {
    const S* xs = x.data() + bi * h * w * c;
    S* ys = y.data() + bi * out_h * out_w * c;
    for (Index oy = 0; oy < out_h; ++oy) {
      const Index y0 = ay.lo[static_cast<std::size_t>(oy)], y1 = ay.hi[static_cast<std::size_t>(oy)];
      const S fy = static_cast<S>(ay.frac[static_cast<std::size_t>(oy)]);
      for (Index ox = 0; ox < out_w; ++ox) {
        const Index x0 = ax.lo[static_cast<std::size_t>(ox)], x1 = ax.hi[static_cast<std::size_t>(ox)];
        const S fx = static_cast<S>(ax.frac[static_cast<std::size_t>(ox)]);
        CVec p00(xs + (y0 * w + x0) * c, c), p01(xs + (y0 * w + x1) * c, c);
        CVec p10(xs + (y1 * w + x0) * c, c), p11(xs + (y1 * w + x1) * c, c);
        Vec out(ys + (oy * out_w + ox) * c, c);
        out = (S(1) - fy) * ((S(1) - fx) * p00 + fx * p01) + fy * ((S(1) - fx) * p10 + fx * p11);
      }
    }
  }
  usseg::detail::check_finite(y, "bilinear_resize");

  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(x)) {
      tape->record(y, [x, y, b, h, w, c, out_h, out_w, ay, ax] {
        if (!y.has_grad()) return;
        using CVec = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;
        using Vec = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
        S* gx = x.ensure_grad().data();
        const S* gy = y.grad().data();
        for (Index bi = 0; bi < b; ++bi) {
          S* gxs = gx + bi * h * w * c;
          const S* gys = gy + bi * out_h * out_w * c;
          for (Index oy = 0; oy < out_h; ++oy) {
            const Index y0 = ay.lo[static_cast<std::size_t>(oy)], y1 = ay.hi[static_cast<std::size_t>(oy)];
            const S fy = static_cast<S>(ay.frac[static_cast<std::size_t>(oy)]);
            for (Index ox = 0; ox < out_w; ++ox) {
              const Index x0 = ax.lo[static_cast<std::size_t>(ox)], x1 = ax.hi[static_cast<std::size_t>(ox)];
              const S fx = static_cast<S>(ax.frac[static_cast<std::size_t>(ox)]);
              CVec g(gys + (oy * out_w + ox) * c, c);
              Vec(gxs + (y0 * w + x0) * c, c) += (S(1) - fy) * (S(1) - fx) * g;
              Vec(gxs + (y0 * w + x1) * c, c) += (S(1) - fy) * fx * g;
              Vec(gxs + (y1 * w + x0) * c, c) += fy * (S(1) - fx) * g;
              Vec(gxs + (y1 * w + x1) * c, c) += fy * fx * g;
            }
          }
        }
      });
    }
  }
  return y;
}

// 2x2 max pooling with stride 2; ties pick the first hit in scan order so
// backward routing is deterministic.
template <typename S>
Tensor<S> max_pool2x2(const Tensor<S>& x) {
  detail::require_rank4(x, "max_pool2x2");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("max_pool2x2: spatial extents must be even, got " + shape_str(x.shape()));
  }
  const Index oh = h / 2, ow = w / 2;
  Tensor<S> y = Tensor<S>::zeros({b, oh, ow, c});
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(y.size()));
  for (Index bi = 0; bi < b; ++bi) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        for (Index ch = 0; ch < c; ++ch) {
          const Index base = ((bi * h + 2 * oy) * w + 2 * ox) * c + ch;
          const Index cand[4] = {base, base + c, base + w * c, base + w * c + c};
          Index best = cand[0];
          S bv = x.data()[cand[0]];
          for (int t = 1; t < 4; ++t) {
            const S v = x.data()[cand[t]];
            if (v > bv) {
              bv = v;
              best = cand[t];
            }
          }
          const Index oidx = ((bi * oh + oy) * ow + ox) * c + ch;
          y.data()[oidx] = bv;
          (*argmax)[static_cast<std::size_t>(oidx)] = best;
        }
      }
    }
  }
  usseg::detail::check_finite(y, "max_pool2x2");

  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(x)) {
      tape->record(y, [x, y, argmax] {
        if (!y.has_grad()) return;
        S* gx = x.ensure_grad().data();
        const S* gy = y.grad().data();
        for (Index i = 0; i < y.size(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += gy[i];
      });
    }
  }
  return y;
}

}  // namespace ops
}  // namespace usseg
