#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "voxseg/error.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg::loss {

// Class-weighted focal loss over per-voxel class probabilities.
// gamma = 0 with unit alphas reduces to plain cross-entropy.
template <typename T>
struct FocalConfig {
  T gamma = T(2);
  std::vector<T> alpha = {T(0.25), T(0.75)};

  void validate(int num_classes) const {
    if (!(gamma >= T(0))) throw ValidationError("focal gamma must be >= 0");
    if (static_cast<int>(alpha.size()) != num_classes)
      throw ValidationError("focal alpha has " + std::to_string(alpha.size()) + " entries for " +
                            std::to_string(num_classes) + " classes");
    for (const T a : alpha)
      if (!(a > T(0))) throw ValidationError("focal alpha entries must be > 0");
  }
};

inline constexpr double kProbClamp = 1e-7;

// Mean over voxels of -alpha_t * (1 - p_t)^gamma * log(p_t), with t the
// target class. Probabilities are clamped to [1e-7, 1 - 1e-7].
template <typename T>
T focal_loss(const Tensor4<T>& prob, const Tensor4<T>& target, const FocalConfig<T>& cfg) {
  if (prob.shape() != target.shape())
    throw ValidationError("focal loss probability and target shapes differ");
  cfg.validate(prob.channels());
  const int C = prob.channels();
  const std::size_t V = prob.voxels();
  const double g = static_cast<double>(cfg.gamma);
  double acc = 0.0;
  for (int c = 0; c < C; ++c) {
    const T* pc = prob.channel(c);
    const T* tc = target.channel(c);
    const double a = static_cast<double>(cfg.alpha[static_cast<std::size_t>(c)]);
    for (std::size_t v = 0; v < V; ++v) {
      const double y = static_cast<double>(tc[v]);
      if (y == 0.0) continue;
      double p = static_cast<double>(pc[v]);
      p = std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
      acc += y * (-a * std::pow(1.0 - p, g) * std::log(p));
    }
  }
  return static_cast<T>(acc / static_cast<double>(V));
}

// d(focal_loss)/d(prob). Zero for non-target classes and for probabilities
// outside the clamp range, where the loss is flat.
template <typename T>
void focal_loss_grad(const Tensor4<T>& prob, const Tensor4<T>& target, const FocalConfig<T>& cfg,
                     Tensor4<T>& dprob) {
  if (prob.shape() != target.shape())
    throw ValidationError("focal loss probability and target shapes differ");
  cfg.validate(prob.channels());
  if (dprob.shape() != prob.shape()) dprob = Tensor4<T>(prob.channels(), prob.spatial());
  else dprob.fill(T(0));
  const int C = prob.channels();
  const std::size_t V = prob.voxels();
  const double g = static_cast<double>(cfg.gamma);
  const double inv_v = 1.0 / static_cast<double>(V);
  for (int c = 0; c < C; ++c) {
    const T* pc = prob.channel(c);
    const T* tc = target.channel(c);
    T* dc = dprob.channel(c);
    const double a = static_cast<double>(cfg.alpha[static_cast<std::size_t>(c)]);
    for (std::size_t v = 0; v < V; ++v) {
      const double y = static_cast<double>(tc[v]);
      if (y == 0.0) continue;
      const double p = static_cast<double>(pc[v]);
      if (p <= kProbClamp || p >= 1.0 - kProbClamp) continue;
      const double focus = (g == 0.0) ? 0.0 : g * std::pow(1.0 - p, g - 1.0) * std::log(p);
      const double d = a * focus - a * std::pow(1.0 - p, g) / p;
      dc[v] += static_cast<T>(y * d * inv_v);
    }
  }
}

}  // namespace voxseg::loss
