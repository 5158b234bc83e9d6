#include "avatar/perceptual.hpp"

namespace avatar {

namespace {

namespace F = torch::nn::functional;

torch::Tensor to_nchw(const torch::Tensor& img) {
  if (img.dim() == 3) return img.permute({2, 0, 1}).unsqueeze(0);
  if (img.dim() == 4) return img.permute({0, 3, 1, 2});
  fail(ErrorKind::Shape, "perceptual: expected [B,]H×W×C image, got " + shape_string(img));
}

torch::Tensor grad_magnitude(const torch::Tensor& x) {
  auto dx = x.narrow(3, 1, x.size(3) - 1) - x.narrow(3, 0, x.size(3) - 1);
  auto dy = x.narrow(2, 1, x.size(2) - 1) - x.narrow(2, 0, x.size(2) - 1);
  dx = dx.narrow(2, 0, x.size(2) - 1);
  dy = dy.narrow(3, 0, x.size(3) - 1);
  return (dx * dx + dy * dy + 1e-12).sqrt();
}

}  // namespace

torch::Tensor GradientPerceptual::distance(const torch::Tensor& a, const torch::Tensor& b) const {
  if (a.sizes() != b.sizes()) fail(ErrorKind::Shape, "perceptual: image shapes differ");
  auto x = to_nchw(a), y = to_nchw(b);
  torch::Tensor total = torch::zeros({}, a.options());
  int used = 0;
  for (int s = 0; s < scales_; ++s) {
    if (x.size(2) < 2 || x.size(3) < 2) break;
    total = total + (grad_magnitude(x) - grad_magnitude(y)).abs().mean();
    ++used;
    if (x.size(2) < 4 || x.size(3) < 4) break;
    x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
    y = F::avg_pool2d(y, F::AvgPool2dFuncOptions(2));
  }
  return used ? total / used : total;
}

std::unique_ptr<PerceptualMetric> make_perceptual(const std::string& name) {
  if (name == "gradient_l1") return std::make_unique<GradientPerceptual>();
  fail(ErrorKind::Config, "perceptual: unknown metric '" + name + "'");
}

}  // namespace avatar
