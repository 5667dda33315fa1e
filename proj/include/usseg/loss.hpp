#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "usseg/tape.hpp"
#include "usseg/tensor.hpp"

namespace usseg {
namespace ops {

// Combined soft-Dice + cross-entropy segmentation loss over per-pixel
// class logits (last axis = classes). Dice is computed per class on the
// softmax probabilities with the smooth term in numerator and denominator,
// then averaged over all classes; CE is the mean pixel negative
// log-likelihood. Total = lambda_dice * (1 - mean dice) + lambda_ce * CE.
template <typename S>
Tensor<S> dice_ce_loss(const Tensor<S>& logits, std::shared_ptr<const std::vector<std::int32_t>> labels,
                       S lambda_dice = S(1), S lambda_ce = S(1), S smooth = S(1e-5)) {
  const Index c = logits.dim(-1);
  const Index n = logits.size() / c;
  if (c < 2) throw ShapeError("dice_ce_loss: needs >= 2 classes, got " + std::to_string(c));
  if (!labels || static_cast<Index>(labels->size()) != n) {
    throw ShapeError("dice_ce_loss: label count " +
                     std::to_string(labels ? labels->size() : 0) + " != pixel count " +
                     std::to_string(n));
  }
  for (Index i = 0; i < n; ++i) {
    const std::int32_t v = (*labels)[static_cast<std::size_t>(i)];
    if (v < 0 || v >= c) {
      throw ConfigError("dice_ce_loss: label " + std::to_string(v) + " out of range [0, " +
                        std::to_string(c) + ") at pixel " + std::to_string(i));
    }
  }

  Tensor<S> probs = Tensor<S>::zeros(logits.shape());
  auto zm = logits.matrix(n, c);
  auto pm = probs.matrix(n, c);
  double ce_acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    const S mx = zm.row(i).maxCoeff();
    pm.row(i).array() = (zm.row(i).array() - mx).exp();
    const S denom = pm.row(i).sum();
    pm.row(i) /= denom;
    const Index y = (*labels)[static_cast<std::size_t>(i)];
    // log p_y = z_y - (mx + log sum exp(z - mx))
    ce_acc -= static_cast<double>(zm(i, y) - (mx + std::log(denom)));
  }
  const S ce = static_cast<S>(ce_acc / static_cast<double>(n));

  // Per-class overlap sums for the soft-Dice term.
  ArrayX<S> num(c), den(c);
  for (Index cl = 0; cl < c; ++cl) {
    S inter = S(0), psum = S(0);
    Index gt_count = 0;
    for (Index i = 0; i < n; ++i) {
      const S p = pm(i, cl);
      psum += p;
      if ((*labels)[static_cast<std::size_t>(i)] == cl) {
        inter += p;
        ++gt_count;
      }
    }
    num[cl] = S(2) * inter + smooth;
    den[cl] = psum + static_cast<S>(gt_count) + smooth;
  }
  const S dice_mean = (num / den).mean();
  Tensor<S> loss = Tensor<S>::scalar(lambda_dice * (S(1) - dice_mean) + lambda_ce * ce);
  usseg::detail::check_finite(loss, "dice_ce_loss");

  if (auto* tape = Tape<S>::active()) {
    if (tape->wants(logits)) {
      tape->record(loss, [logits, probs, labels, loss, num, den, n, c, lambda_dice, lambda_ce] {
        if (!loss.has_grad()) return;
        const S upstream = loss.grad()[0];
        Eigen::Map<RowMatrix<S>> gz(logits.ensure_grad().data(), n, c);
        auto pm = probs.matrix(n, c);
        const S inv_n = S(1) / static_cast<S>(n);
        const S dice_w = -lambda_dice / static_cast<S>(c);
        Eigen::Matrix<S, Eigen::Dynamic, 1> dp(c);
        for (Index i = 0; i < n; ++i) {
          const Index y = (*labels)[static_cast<std::size_t>(i)];
          // d(dice_c)/dp_ic = (2*[y==c]*D_c - N_c) / D_c^2, weighted by -lambda/C
          for (Index cl = 0; cl < c; ++cl) {
            const S d = den[cl];
            dp[cl] = dice_w * ((cl == y ? S(2) * d : S(0)) - num[cl]) / (d * d);
          }
          const S dot = pm.row(i).dot(dp);
          // softmax jacobian for the dice part; CE part in closed form
          gz.row(i).array() += upstream * (pm.row(i).array() * (dp.transpose().array() - dot));
          gz.row(i).array() += upstream * lambda_ce * inv_n * pm.row(i).array();
          gz(i, y) -= upstream * lambda_ce * inv_n;
        }
      });
    }
  }
  return loss;
}

template <typename S>
Tensor<S> dice_ce_loss(const Tensor<S>& logits, const std::vector<std::int32_t>& labels,
                       S lambda_dice = S(1), S lambda_ce = S(1), S smooth = S(1e-5)) {
  return dice_ce_loss(logits, std::make_shared<const std::vector<std::int32_t>>(labels),
                      lambda_dice, lambda_ce, smooth);
}

}  // namespace ops
}  // namespace usseg
