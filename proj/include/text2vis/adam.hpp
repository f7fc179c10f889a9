#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "text2vis/error.hpp"

namespace text2vis {

struct AdamHyper {
  double alpha = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(alpha > 0.0) || !(epsilon > 0.0)) throw Error("adam: alpha and epsilon must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw Error("adam: beta1 and beta2 must lie in (0, 1)");
    }
  }
};

// Adam over an ordered group of parameter tensors. Moments are kept per
// tensor; the tensor list passed to step() must keep the same order and sizes.
//
//   m <- b1 m + (1 - b1) g
//   v <- b2 v + (1 - b2) g^2
//   p <- p - alpha * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<std::size_t> tensor_sizes, AdamHyper hyper = {}) : hyper_(hyper) {
    hyper_.validate();
    first_.reserve(tensor_sizes.size());
    second_.reserve(tensor_sizes.size());
    for (auto n : tensor_sizes) {
      first_.emplace_back(n, T{0});
      second_.emplace_back(n, T{0});
    }
  }

  std::uint64_t step_count() const noexcept { return t_; }
  const AdamHyper& hyper() const noexcept { return hyper_; }
  std::span<const T> first_moment(std::size_t tensor) const { return first_.at(tensor); }
  std::span<const T> second_moment(std::size_t tensor) const { return second_.at(tensor); }

  void step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads) {
    if (params.size() != first_.size() || grads.size() != first_.size()) {
      throw Error("adam: expected " + std::to_string(first_.size()) + " tensors");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k].size() != first_[k].size() || grads[k].size() != first_[k].size()) {
        throw Error("adam: shape mismatch in tensor " + std::to_string(k));
      }
      for (T g : grads[k]) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw Error("adam: non-finite gradient in tensor " + std::to_string(k));
        }
      }
    }
    ++t_;
    const double b1 = hyper_.beta1;
    const double b2 = hyper_.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k];
      auto g = grads[k];
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double m_hat = mi / correction1;
        const double v_hat = vi / correction2;
        p[i] = static_cast<T>(static_cast<double>(p[i]) - hyper_.alpha * m_hat / (std::sqrt(v_hat) + hyper_.epsilon));
      }
    }
  }

 private:
  AdamHyper hyper_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
};

}  // namespace text2vis
