#pragma once

#include "avatar/common.hpp"
#include "avatar/geometry.hpp"

namespace avatar {

// Images are H×W×C in [0,1].
double psnr(const torch::Tensor& a, const torch::Tensor& b, double data_range = 1.0);
// Gaussian-window SSIM (11×11, σ = 1.5), averaged over channels and pixels.
double ssim(const torch::Tensor& a, const torch::Tensor& b, double data_range = 1.0);

// Closed-form ridge regression with an intercept: Y ≈ X W + b.
class RidgeProbe {
 public:
  void fit(const torch::Tensor& x, const torch::Tensor& y, double lambda);
  torch::Tensor predict(const torch::Tensor& x) const;
  bool fitted() const { return weights_.defined(); }
  json to_json() const;
  static RidgeProbe from_json(const json& j);

 private:
  torch::Tensor mean_, weights_, bias_;
};

// Probe input features: area-downsampled image flattened to a vector.
torch::Tensor probe_features(const torch::Tensor& hwc, int size = 16);

// Angle between the viewing directions of two cameras, radians.
double pose_angular_error(const CameraPose& a, const CameraPose& b);

struct MetricsReport {
  double psnr = 0, ssim = 0, pose_consistency = 0, expression_error = 0;
  json to_json() const;
};

}  // namespace avatar
