#pragma once

#include <cmath>

#include "usseg/tape.hpp"
#include "usseg/tensor.hpp"

namespace usseg {
namespace ops {

// Standard scaled dot-product multi-head self-attention over (b, t, d)
// token tensors: softmax over keys, scale 1/sqrt(d/heads), projection
// weights wq/wk/wv/wo all (d, d), no biases. One fused tape node; the
// backward rule is written out by hand and covered by finite-difference
// checks.
template <typename S>
Tensor<S> attention(const Tensor<S>& x, Index heads, const Tensor<S>& wq, const Tensor<S>& wk,
                    const Tensor<S>& wv, const Tensor<S>& wo) {
  if (x.rank() != 3) {
    throw ShapeError("attention expects a (b, t, d) tensor, got " + shape_str(x.shape()));
  }
  const Index b = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("attention: embed dim " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(heads));
  }
  for (const Tensor<S>* wp : {&wq, &wk, &wv, &wo}) {
    if (wp->rank() != 2 || wp->dim(0) != d || wp->dim(1) != d) {
      throw ShapeError("attention: projection weights must be (" + std::to_string(d) + ", " +
                       std::to_string(d) + "), got " + shape_str(wp->shape()));
    }
  }
  const Index hd = d / heads;
  const Index m = b * t;
  const S att_scale = S(1) / std::sqrt(static_cast<S>(hd));

  Tensor<S> q = Tensor<S>::zeros({m, d}), k = Tensor<S>::zeros({m, d});
  Tensor<S> v = Tensor<S>::zeros({m, d}), o = Tensor<S>::zeros({m, d});
  q.matrix(m, d).noalias() = x.matrix(m, d) * wq.matrix(d, d);
  k.matrix(m, d).noalias() = x.matrix(m, d) * wk.matrix(d, d);
  v.matrix(m, d).noalias() = x.matrix(m, d) * wv.matrix(d, d);

  Tensor<S> probs = Tensor<S>::zeros({b, heads, t, t});
  auto qm = q.matrix(m, d), km = k.matrix(m, d), vm = v.matrix(m, d), om = o.matrix(m, d);
  for (Index bi = 0; bi < b; ++bi) {
    for (Index he = 0; he < heads; ++he) {
      auto qh = qm.block(bi * t, he * hd, t, hd);
      auto kh = km.block(bi * t, he * hd, t, hd);
      auto vh = vm.block(bi * t, he * hd, t, hd);
      Eigen::Map<RowMatrix<S>> p(probs.data() + (bi * heads + he) * t * t, t, t);
      p.noalias() = qh * kh.transpose() * att_scale;
      for (Index r = 0; r < t; ++r) {
        const S mx = p.row(r).maxCoeff();
        p.row(r).array() = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      om.block(bi * t, he * hd, t, hd).noalias() = p * vh;
    }
  }

  Tensor<S> y = Tensor<S>::zeros({b, t, d});
  y.matrix(m, d).noalias() = om * wo.matrix(d, d);
  usseg::detail::check_finite(y, "attention");

  if (auto* tape = Tape<S>::active()) {
    const bool nx = tape->wants(x);
    const bool nq = tape->wants(wq), nk = tape->wants(wk);
    const bool nv = tape->wants(wv), no = tape->wants(wo);
    if (nx || nq || nk || nv || no) {
      tape->record(y, [x, wq, wk, wv, wo, y, q, k, v, o, probs, b, t, d, heads, hd, m, att_scale,
                       nx, nq, nk, nv, no] {
        if (!y.has_grad()) return;
        Eigen::Map<const RowMatrix<S>> gy(y.grad().data(), m, d);
        if (no) {
          Eigen::Map<RowMatrix<S>> gwo(wo.ensure_grad().data(), d, d);
          gwo.noalias() += o.matrix(m, d).transpose() * gy;
        }
        RowMatrix<S> go(m, d);
        go.noalias() = gy * wo.matrix(d, d).transpose();

        RowMatrix<S> gq = RowMatrix<S>::Zero(m, d);
        RowMatrix<S> gk = RowMatrix<S>::Zero(m, d);
        RowMatrix<S> gv = RowMatrix<S>::Zero(m, d);
        auto qm = q.matrix(m, d), km = k.matrix(m, d), vm = v.matrix(m, d);
        for (Index bi = 0; bi < b; ++bi) {
          for (Index he = 0; he < heads; ++he) {
            Eigen::Map<const RowMatrix<S>> p(probs.data() + (bi * heads + he) * t * t, t, t);
            auto goh = go.block(bi * t, he * hd, t, hd);
            gv.block(bi * t, he * hd, t, hd).noalias() += p.transpose() * goh;
            RowMatrix<S> gp(t, t);
            gp.noalias() = goh * vm.block(bi * t, he * hd, t, hd).transpose();
            // softmax backward, rowwise
            RowMatrix<S> gs(t, t);
            for (Index r = 0; r < t; ++r) {
              const S dot = gp.row(r).cwiseProduct(p.row(r)).sum();
              gs.row(r).array() = p.row(r).array() * (gp.row(r).array() - dot);
            }
            gs *= att_scale;
            gq.block(bi * t, he * hd, t, hd).noalias() += gs * km.block(bi * t, he * hd, t, hd);
            gk.block(bi * t, he * hd, t, hd).noalias() +=
                gs.transpose() * qm.block(bi * t, he * hd, t, hd);
          }
        }
        if (nq) {
          Eigen::Map<RowMatrix<S>> gwq(wq.ensure_grad().data(), d, d);
          gwq.noalias() += x.matrix(m, d).transpose() * gq;
        }
        if (nk) {
          Eigen::Map<RowMatrix<S>> gwk(wk.ensure_grad().data(), d, d);
          gwk.noalias() += x.matrix(m, d).transpose() * gk;
        }
        if (nv) {
          Eigen::Map<RowMatrix<S>> gwv(wv.ensure_grad().data(), d, d);
          gwv.noalias() += x.matrix(m, d).transpose() * gv;
        }
        if (nx) {
          Eigen::Map<RowMatrix<S>> gx(x.ensure_grad().data(), m, d);
          gx.noalias() += gq * wq.matrix(d, d).transpose();
          gx.noalias() += gk * wk.matrix(d, d).transpose();
          gx.noalias() += gv * wv.matrix(d, d).transpose();
        }
      });
    }
  }
  return y;
}

}  // namespace ops
}  // namespace usseg
