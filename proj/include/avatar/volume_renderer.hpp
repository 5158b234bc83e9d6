#pragma once

#include <span>
#include <vector>

#include "avatar/common.hpp"
#include "avatar/geometry.hpp"
#include "avatar/triplane.hpp"

namespace avatar {

// C → hidden → hidden → (1 density + F features), softplus activations.
struct FeatureDecoderImpl : torch::nn::Module {
  FeatureDecoderImpl(std::int64_t in_channels, std::int64_t out_features, std::int64_t hidden = 64);

  // Returns {density ≥ 0 with shape [...], features [..., F]}.
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& feats);

  static std::int64_t parameter_count(std::int64_t in_channels, std::int64_t out_features, std::int64_t hidden = 64);

  std::int64_t in_channels, out_features, hidden;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, out{nullptr};
};
TORCH_MODULE(FeatureDecoder);

// Geometry readout used by the synthetic "oracle" decoder: density is high
// where the mean channel-0 feature falls below `threshold`. Remaining weights
// keep their random initialisation.
struct DensityReadout {
  double threshold = 0.12;
  double gain = 40.0;
  double output_gain = 1.0;
  double bias = 8.0;
};
void install_density_readout(FeatureDecoder& decoder, const DensityReadout& readout);

// Learnable 2× upsampler: bilinear upsampling plus a zero-initialised 3×3
// residual convolution, so it is exactly bilinear at initialisation.
struct UpsamplerImpl : torch::nn::Module {
  explicit UpsamplerImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& nchw);
  torch::nn::Conv2d refine{nullptr};
};
TORCH_MODULE(Upsampler);

// R×R×F → 2R×2R×F.
torch::Tensor upsample(Upsampler& up, const torch::Tensor& hwc);

struct SamplingConfig {
  int n_coarse = 48;
  int n_fine = 48;
  bool stratified = true;
  int render_resolution = 64;
  double bound = 1.1;             // cube half-extent used for near/far
  double background = 0.0;        // constant background feature value
  double depth_epsilon = 1e-8;

  void validate() const;
};

struct CompositeResult {
  std::vector<double> feature;  // F
  std::vector<double> weights;  // N
  double residual = 1.0;        // transmittance past the last sample
};

// Emission-absorption compositing. `features` is N×F row-major.
CompositeResult composite(std::span<const double> densities, std::span<const double> features,
                          std::span<const double> deltas);

// Inverse-CDF sampling of the piecewise-constant density ∝ weights over the
// bins given by `edges` (N+1 increasing values). All-zero weights fall back to
// the uniform distribution. Output is sorted ascending.
std::vector<double> importance_sample(std::span<const double> weights, std::span<const double> edges, int n_fine,
                                      Rng& rng);

struct RenderOutput {
  torch::Tensor feature_image;  // R×R×F, composited over the background
  torch::Tensor rgb;            // 2R×2R×3, after the upsampler
  torch::Tensor depth;          // R×R
  torch::Tensor opacity;        // R×R
  torch::Tensor residual;       // R×R transmittance past the far bound
  torch::Tensor depths;         // R²×M sample depths used by the final pass
  CameraPose camera;
};

// Network pieces a render needs; the volume renderer owns no weights itself.
struct RenderHead {
  FeatureDecoder decoder{nullptr};
  Upsampler upsampler{nullptr};
};

// `planes` is a 3×H×W×C renderable plane stack (any float dtype, may require
// grad). Per-ray random streams are derived from `seed` and the ray index.
RenderOutput render(const torch::Tensor& planes, RenderHead& head, const CameraPose& pose, const SamplingConfig& cfg,
                    std::uint64_t seed);
RenderOutput render(const RenderableTriplane& tri, RenderHead& head, const CameraPose& pose, const SamplingConfig& cfg,
                    std::uint64_t seed);

// Single compositing pass at fixed per-ray sample depths (R²×M, sorted). This
// is the differentiable core of render; exposed for gradient checks.
RenderOutput render_at_depths(const torch::Tensor& planes, RenderHead& head, const CameraPose& pose,
                              const SamplingConfig& cfg, int resolution, const torch::Tensor& depths);

// Bin edges for sorted sample depths: midpoints, closed by the near/far bounds.
torch::Tensor depth_edges(const torch::Tensor& depths, const torch::Tensor& near, const torch::Tensor& far);

}  // namespace avatar
