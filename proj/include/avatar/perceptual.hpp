#pragma once

#include <memory>
#include <string>

#include "avatar/common.hpp"

namespace avatar {

// Image distance used in the perceptual loss slot. Inputs are [B,]H×W×C
// images in [0,1]; the result is a differentiable scalar (mean over batch).
class PerceptualMetric {
 public:
  virtual ~PerceptualMetric() = default;
  virtual torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const = 0;
  virtual std::string name() const = 0;
};

// Pretrained-free proxy: L1 between gradient-magnitude maps at several
// average-pooled scales, averaged over scales.
class GradientPerceptual final : public PerceptualMetric {
 public:
  explicit GradientPerceptual(int scales = 3) : scales_(scales) {}
  torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const override;
  std::string name() const override { return "gradient_l1"; }

 private:
  int scales_;
};

// "gradient_l1" is the only built-in; other names raise a Config error so an
// external implementation can be registered by the caller instead.
std::unique_ptr<PerceptualMetric> make_perceptual(const std::string& name);

}  // namespace avatar
