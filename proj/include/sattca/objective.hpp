#pragma once

// Losses on probability maps. Every reduction is a voxel mean (Dice is a
// ratio of sums). Values are accumulated in double regardless of the map's
// scalar type; gradients come back in the map's scalar type.

#include <sattca/volgrid.hpp>

#include <cmath>
#include <stdexcept>

namespace sattca {

struct LossWeights {
  double sigma = 0.5;        // Dice weight
  double gamma = 1.0;        // entropy weight
  double smooth_eps = 1e-5;  // Dice smoothing
  double prob_clamp = 1e-7;  // log-safety clamp on probabilities
};

struct TtLossTerms {
  double bce = 0.0;
  double dice = 0.0;
  double entropy = 0.0;
};

namespace detail {

template <typename S>
void require_same(const Volume<S>& p, const BinaryMask3D& m, const char* who) {
  if (p.dims() != m.dims())
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + to_string(p.dims()) +
                                " vs " + to_string(m.dims()));
}

inline double clamp_p(double p, double c) { return std::min(std::max(p, c), 1.0 - c); }
inline bool in_clamp(double p, double c) { return p > c && p < 1.0 - c; }

}  // namespace detail

template <typename S>
double bce(const Volume<S>& probs, const BinaryMask3D& target, const LossWeights& w = {}) {
  detail::require_same(probs, target, "bce");
  double acc = 0.0;
  const auto& p = probs.voxels();
  const auto& t = target.bits();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pc = detail::clamp_p(static_cast<double>(p[i]), w.prob_clamp);
    acc -= t[i] ? std::log(pc) : std::log1p(-pc);
  }
  return acc / static_cast<double>(p.size());
}

template <typename S>
double soft_dice(const Volume<S>& probs, const BinaryMask3D& target, const LossWeights& w = {}) {
  detail::require_same(probs, target, "soft_dice");
  const Eigen::ArrayXd p = probs.voxels().template cast<double>();
  const Eigen::ArrayXd t = target.template indicator<double>();
  const double inter = (p * t).sum();
  return 1.0 - (2.0 * inter + w.smooth_eps) / (p.sum() + t.sum() + w.smooth_eps);
}

template <typename S>
double entropy(const Volume<S>& probs, const LossWeights& w = {}) {
  double acc = 0.0;
  const auto& p = probs.voxels();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pc = detail::clamp_p(static_cast<double>(p[i]), w.prob_clamp);
    acc -= pc * std::log(pc) + (1.0 - pc) * std::log1p(-pc);
  }
  return acc / static_cast<double>(p.size());
}

/// probs * 1[M]: the prediction restricted to the click mask's support.
template <typename S>
Volume<S> masked_prediction(const Volume<S>& probs, const BinaryMask3D& mask) {
  detail::require_same(probs, mask, "masked_prediction");
  Volume<S> out = probs;
  out.voxels() *= mask.template indicator<S>();
  return out;
}

inline double combine_tt(const TtLossTerms& t, const LossWeights& w) {
  return t.bce + w.sigma * t.dice + w.gamma * t.entropy;
}

template <typename S>
TtLossTerms tt_loss_terms(const Volume<S>& probs, const BinaryMask3D& mask,
                          const LossWeights& w = {}) {
  const Volume<S> masked = masked_prediction(probs, mask);
  return {bce(masked, mask, w), soft_dice(masked, mask, w), entropy(probs, w)};
}

template <typename S>
double click_loss(const Volume<S>& probs, const BinaryMask3D& mask, const LossWeights& w = {}) {
  const Volume<S> masked = masked_prediction(probs, mask);
  return bce(masked, mask, w) + w.sigma * soft_dice(masked, mask, w);
}

/// L_BCE + sigma * L_Dice on the masked prediction against M, plus
/// gamma * entropy of the full prediction.
template <typename S>
double tt_loss(const Volume<S>& probs, const BinaryMask3D& mask, const LossWeights& w = {}) {
  return combine_tt(tt_loss_terms(probs, mask, w), w);
}

template <typename S>
double train_loss(const Volume<S>& probs, const BinaryMask3D& gt, const LossWeights& w = {}) {
  return bce(probs, gt, w) + soft_dice(probs, gt, w);
}

// ---------------------------------------------------------------------------
// Gradients with respect to the probability map. Clamped voxels have zero
// derivative, matching the piecewise definition above.

namespace detail {

/// d bce / dp, scaled by `scale`, accumulated into g.
template <typename S>
void add_bce_grad(const Eigen::ArrayXd& p, const BinaryMask3D& t, double clamp, double scale,
                  Eigen::ArrayXd& g) {
  const double inv_n = scale / static_cast<double>(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!in_clamp(p[i], clamp)) continue;
    g[i] += t.bits()[i] ? -inv_n / p[i] : inv_n / (1.0 - p[i]);
  }
}

inline void add_dice_grad(const Eigen::ArrayXd& p, const Eigen::ArrayXd& t, double eps,
                          double scale, Eigen::ArrayXd& g) {
  const double inter = 2.0 * (p * t).sum() + eps;
  const double uni = p.sum() + t.sum() + eps;
  g -= scale * (2.0 * t * uni - inter) / (uni * uni);
}

inline void add_entropy_grad(const Eigen::ArrayXd& p, double clamp, double scale,
                             Eigen::ArrayXd& g) {
  const double inv_n = scale / static_cast<double>(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (in_clamp(p[i], clamp)) g[i] += inv_n * std::log((1.0 - p[i]) / p[i]);
}

}  // namespace detail

template <typename S>
Volume<S> tt_loss_grad(const Volume<S>& probs, const BinaryMask3D& mask,
                       const LossWeights& w = {}) {
  detail::require_same(probs, mask, "tt_loss_grad");
  const Eigen::ArrayXd p = probs.voxels().template cast<double>();
  const Eigen::ArrayXd m = mask.template indicator<double>();
  const Eigen::ArrayXd q = p * m;
  Eigen::ArrayXd gq = Eigen::ArrayXd::Zero(p.size());
  detail::add_bce_grad<S>(q, mask, w.prob_clamp, 1.0, gq);
  if (w.sigma != 0.0) detail::add_dice_grad(q, m, w.smooth_eps, w.sigma, gq);
  Eigen::ArrayXd g = gq * m;
  if (w.gamma != 0.0) detail::add_entropy_grad(p, w.prob_clamp, w.gamma, g);
  return Volume<S>(probs.dims(), probs.spacing(), g.cast<S>().eval());
}

template <typename S>
Volume<S> train_loss_grad(const Volume<S>& probs, const BinaryMask3D& gt,
                          const LossWeights& w = {}) {
  detail::require_same(probs, gt, "train_loss_grad");
  const Eigen::ArrayXd p = probs.voxels().template cast<double>();
  Eigen::ArrayXd g = Eigen::ArrayXd::Zero(p.size());
  detail::add_bce_grad<S>(p, gt, w.prob_clamp, 1.0, g);
  detail::add_dice_grad(p, gt.template indicator<double>(), w.smooth_eps, 1.0, g);
  return Volume<S>(probs.dims(), probs.spacing(), g.cast<S>().eval());
}

/// Chains d/dprobs through the logistic: d/dz = d/dp * p * (1 - p).
template <typename S>
Volume<S> chain_sigmoid(const Volume<S>& dprobs, const Volume<S>& probs) {
  Volume<S> out = dprobs;
  out.voxels() *= probs.voxels() * (S(1) - probs.voxels());
  return out;
}

}  // namespace sattca
