#include "avatar/metrics.hpp"

#include <cmath>

namespace avatar {

namespace F = torch::nn::functional;

double psnr(const torch::Tensor& a, const torch::Tensor& b, double data_range) {
  if (a.sizes() != b.sizes()) fail(ErrorKind::Shape, "psnr: image shapes differ");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

double ssim(const torch::Tensor& a, const torch::Tensor& b, double data_range) {
  if (a.sizes() != b.sizes() || a.dim() != 3) fail(ErrorKind::Shape, "ssim: expected equal H×W×C images");
  const int k = 11;
  const double sigma = 1.5;
  auto g = torch::arange(k, torch::kFloat64) - (k - 1) / 2.0;
  g = torch::exp(-g * g / (2 * sigma * sigma));
  g = g / g.sum();
  const auto C = a.size(2);
  auto win = (g.view({k, 1}) * g.view({1, k})).expand({C, 1, k, k}).contiguous();
  auto x = a.to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(0);
  auto y = b.to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(0);
  auto conv = [&](const torch::Tensor& t) {
    return F::conv2d(F::pad(t, F::PadFuncOptions({k / 2, k / 2, k / 2, k / 2}).mode(torch::kReflect)), win,
                     F::Conv2dFuncOptions().groups(C));
  };
  const double c1 = std::pow(0.01 * data_range, 2), c2 = std::pow(0.03 * data_range, 2);
  auto mx = conv(x), my = conv(y);
  auto sxx = conv(x * x) - mx * mx, syy = conv(y * y) - my * my, sxy = conv(x * y) - mx * my;
  auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

void RidgeProbe::fit(const torch::Tensor& x, const torch::Tensor& y, double lambda) {
  if (x.dim() != 2 || y.dim() != 2 || x.size(0) != y.size(0) || x.size(0) < 2)
    fail(ErrorKind::Shape, "probe: expected N×D inputs and N×K targets with N >= 2");
  auto X = x.to(torch::kFloat64), Y = y.to(torch::kFloat64);
  mean_ = X.mean(0);
  auto ym = Y.mean(0);
  auto Xc = X - mean_;
  // Dual form keeps the solve N×N when D ≫ N.
  auto gram = Xc.matmul(Xc.t()) + lambda * torch::eye(X.size(0), torch::kFloat64);
  auto alpha = torch::linalg_solve(gram, Y - ym);
  weights_ = Xc.t().matmul(alpha);
  bias_ = ym;
}

torch::Tensor RidgeProbe::predict(const torch::Tensor& x) const {
  if (!fitted()) fail(ErrorKind::Validation, "probe: not fitted");
  return (x.to(torch::kFloat64) - mean_).matmul(weights_) + bias_;
}

namespace {
json tensor_json(const torch::Tensor& t) {
  auto c = t.contiguous();
  return json{{"shape", c.sizes().vec()},
              {"data", std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel())}};
}
torch::Tensor tensor_from(const json& j) {
  auto v = j.at("data").get<std::vector<double>>();
  return torch::tensor(v, torch::kFloat64).view(j.at("shape").get<std::vector<std::int64_t>>()).clone();
}
}  // namespace

json RidgeProbe::to_json() const {
  if (!fitted()) return nullptr;
  return json{{"mean", tensor_json(mean_)}, {"weights", tensor_json(weights_)}, {"bias", tensor_json(bias_)}};
}

RidgeProbe RidgeProbe::from_json(const json& j) {
  RidgeProbe p;
  p.mean_ = tensor_from(j.at("mean"));
  p.weights_ = tensor_from(j.at("weights"));
  p.bias_ = tensor_from(j.at("bias"));
  return p;
}

torch::Tensor probe_features(const torch::Tensor& hwc, int size) {
  auto x = hwc.to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(0);
  x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({size, size}));
  return x.flatten();
}

double pose_angular_error(const CameraPose& a, const CameraPose& b) {
  auto da = normalized(a.position() - a.look_at), db = normalized(b.position() - b.look_at);
  return std::acos(std::clamp(dot(da, db), -1.0, 1.0));
}

json MetricsReport::to_json() const {
  return json{{"psnr", psnr}, {"ssim", ssim}, {"pose_consistency", pose_consistency},
              {"expression_error", expression_error}};
}

}  // namespace avatar
