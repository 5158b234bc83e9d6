#include "avatar/volume_renderer.hpp"

#include <algorithm>
#include <cmath>

namespace avatar {

namespace F = torch::nn::functional;

FeatureDecoderImpl::FeatureDecoderImpl(std::int64_t in_channels_, std::int64_t out_features_, std::int64_t hidden_)
    : in_channels(in_channels_), out_features(out_features_), hidden(hidden_) {
  fc1 = register_module("fc1", torch::nn::Linear(in_channels, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, hidden));
  out = register_module("out", torch::nn::Linear(hidden, 1 + out_features));
}

std::pair<torch::Tensor, torch::Tensor> FeatureDecoderImpl::forward(const torch::Tensor& feats) {
  auto h = F::softplus(fc1(feats));
  h = F::softplus(fc2(h));
  auto raw = out(h);
  return {F::softplus(raw.select(-1, 0)), raw.narrow(-1, 1, out_features)};
}

std::int64_t FeatureDecoderImpl::parameter_count(std::int64_t c, std::int64_t f, std::int64_t hidden) {
  return (c * hidden + hidden) + (hidden * hidden + hidden) + (hidden * (1 + f) + 1 + f);
}

void install_density_readout(FeatureDecoder& decoder, const DensityReadout& r) {
  torch::NoGradGuard ng;
  auto& d = *decoder;
  d.fc1->weight[0].zero_();
  d.fc1->weight[0][0] = -r.gain;
  d.fc1->bias[0] = r.gain * r.threshold;
  d.fc2->weight[0].zero_();
  d.fc2->weight[0][0] = 1.0;
  d.fc2->bias[0] = 0.0;
  d.out->weight[0].zero_();
  d.out->weight[0][0] = r.output_gain;
  d.out->bias[0] = -r.bias;
}

UpsamplerImpl::UpsamplerImpl(std::int64_t channels) {
  refine = register_module("refine", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
  torch::NoGradGuard ng;
  refine->weight.zero_();
  refine->bias.zero_();
}

torch::Tensor UpsamplerImpl::forward(const torch::Tensor& nchw) {
  auto up = F::interpolate(nchw, F::InterpolateFuncOptions()
                                     .scale_factor(std::vector<double>{2.0, 2.0})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
  return up + refine(up);
}

torch::Tensor upsample(Upsampler& up, const torch::Tensor& hwc) {
  return up->forward(hwc.permute({2, 0, 1}).unsqueeze(0)).squeeze(0).permute({1, 2, 0});
}

void SamplingConfig::validate() const {
  if (n_coarse < 1 || n_fine < 1) fail(ErrorKind::Config, "sampling: sample counts must be >= 1");
  if (render_resolution < 2) fail(ErrorKind::Config, "sampling: render resolution must be >= 2");
  if (!(bound > 0)) fail(ErrorKind::Config, "sampling: bound must be positive");
}

CompositeResult composite(std::span<const double> densities, std::span<const double> features,
                          std::span<const double> deltas) {
  const std::size_t n = densities.size();
  if (deltas.size() != n) fail(ErrorKind::Shape, "composite: densities and deltas differ in length");
  if (n == 0 ? !features.empty() : features.size() % n != 0)
    fail(ErrorKind::Shape, "composite: feature count is not a multiple of the sample count");
  const std::size_t f = n == 0 ? 0 : features.size() / n;
  CompositeResult r;
  r.feature.assign(f, 0.0);
  r.weights.assign(n, 0.0);
  double optical = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(densities[i] >= 0.0) || !std::isfinite(densities[i])) fail(ErrorKind::Numeric, "composite: negative or non-finite density");
    if (!(deltas[i] > 0.0)) fail(ErrorKind::Numeric, "composite: non-positive delta");
    const double sd = densities[i] * deltas[i];
    const double trans = std::exp(-optical);
    const double alpha = -std::expm1(-sd);
    r.weights[i] = alpha * trans;
    for (std::size_t k = 0; k < f; ++k) r.feature[k] += r.weights[i] * features[i * f + k];
    optical += sd;
  }
  r.residual = std::exp(-optical);
  return r;
}

std::vector<double> importance_sample(std::span<const double> weights, std::span<const double> edges, int n_fine,
                                      Rng& rng) {
  const std::size_t n = weights.size();
  if (edges.size() != n + 1 || n == 0) fail(ErrorKind::Shape, "importance_sample: need N weights and N+1 edges");
  std::vector<double> cdf(n + 1, 0.0);
  double total = 0.0;
  for (double w : weights) total += std::max(w, 0.0);
  const bool uniform = !(total > 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = uniform ? 1.0 : std::max(weights[i], 0.0);
    cdf[i + 1] = cdf[i] + w;
  }
  const double norm = cdf[n];
  for (auto& c : cdf) c /= norm;
  cdf[n] = 1.0;

  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(std::max(n_fine, 0)));
  for (int s = 0; s < n_fine; ++s) {
    const double u = rng.uniform();
    // First bin whose upper CDF exceeds u; zero-mass bins are skipped.
    auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
    std::size_t bin = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()) - 1, n - 1);
    const double mass = cdf[bin + 1] - cdf[bin];
    const double frac = mass > 0 ? std::clamp((u - cdf[bin]) / mass, 0.0, 1.0) : 0.5;
    out.push_back(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

torch::Tensor depth_edges(const torch::Tensor& depths, const torch::Tensor& near, const torch::Tensor& far) {
  auto mid = 0.5 * (depths.narrow(1, 1, depths.size(1) - 1) + depths.narrow(1, 0, depths.size(1) - 1));
  return torch::cat({near.unsqueeze(1), mid, far.unsqueeze(1)}, 1);
}

namespace {

struct RayTensors {
  torch::Tensor origins, dirs, near, far;  // N×3, N×3, N, N (float64)
};

RayTensors ray_tensors(const CameraPose& pose, int resolution, double bound) {
  const auto grid = generate_rays(pose, resolution, bound);
  const auto n = static_cast<std::int64_t>(grid.rays.size());
  RayTensors t{torch::empty({n, 3}, torch::kFloat64), torch::empty({n, 3}, torch::kFloat64),
               torch::empty({n}, torch::kFloat64), torch::empty({n}, torch::kFloat64)};
  auto* o = t.origins.data_ptr<double>();
  auto* d = t.dirs.data_ptr<double>();
  auto* nr = t.near.data_ptr<double>();
  auto* fr = t.far.data_ptr<double>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& r = grid.rays[static_cast<std::size_t>(i)];
    o[3 * i] = r.origin.x, o[3 * i + 1] = r.origin.y, o[3 * i + 2] = r.origin.z;
    d[3 * i] = r.direction.x, d[3 * i + 1] = r.direction.y, d[3 * i + 2] = r.direction.z;
    nr[i] = r.t_near;
    fr[i] = r.t_far;
  }
  return t;
}

struct Composited {
  torch::Tensor feature, weights, residual;
};

// Batched emission-absorption over rays: density N×M, feats N×M×F, deltas N×M.
Composited composite_rays(const torch::Tensor& density, const torch::Tensor& feats, const torch::Tensor& deltas) {
  auto sd = density * deltas;
  auto optical = torch::cumsum(sd, 1);
  auto trans = torch::exp(-(optical - sd));
  auto alpha = -torch::expm1(-sd);
  auto w = alpha * trans;
  return {(w.unsqueeze(-1) * feats).sum(1), w, torch::exp(-optical.select(1, optical.size(1) - 1))};
}

}  // namespace

RenderOutput render_at_depths(const torch::Tensor& planes, RenderHead& head, const CameraPose& pose,
                              const SamplingConfig& cfg, int resolution, const torch::Tensor& depths) {
  const auto dtype = planes.scalar_type();
  const auto rays = ray_tensors(pose, resolution, cfg.bound);
  const auto n = rays.origins.size(0), m = depths.size(1);
  if (depths.size(0) != n) fail(ErrorKind::Shape, "render: depth table does not match ray count");

  auto t = depths.to(torch::kFloat64);
  auto edges = depth_edges(t, rays.near, rays.far);
  auto deltas = (edges.narrow(1, 1, m) - edges.narrow(1, 0, m)).clamp_min(1e-10).to(dtype);
  auto pts = (rays.origins.unsqueeze(1) + t.unsqueeze(-1) * rays.dirs.unsqueeze(1)).to(dtype);

  auto feats = sample_planes(planes, pts.reshape({n * m, 3}));
  auto [density, color] = head.decoder->forward(feats);
  const auto f = head.decoder->out_features;
  auto c = composite_rays(density.reshape({n, m}), color.reshape({n, m, f}), deltas);

  RenderOutput out;
  out.camera = pose;
  out.depths = t;
  out.residual = c.residual.reshape({resolution, resolution});
  auto acc = c.weights.sum(1);
  out.opacity = acc.reshape({resolution, resolution});
  auto feature = c.feature + c.residual.unsqueeze(-1) * cfg.background;
  out.feature_image = feature.reshape({resolution, resolution, f});
  out.depth = ((c.weights * t.to(dtype)).sum(1) / acc.clamp_min(cfg.depth_epsilon)).reshape({resolution, resolution});
  auto up = upsample(head.upsampler, out.feature_image);
  out.rgb = torch::sigmoid(up.narrow(-1, 0, 3));
  return out;
}

RenderOutput render(const torch::Tensor& planes, RenderHead& head, const CameraPose& pose, const SamplingConfig& cfg,
                    std::uint64_t seed) {
  cfg.validate();
  if (planes.dim() != 4 || planes.size(0) != 3 || planes.size(3) != head.decoder->in_channels)
    fail(ErrorKind::Shape, "render: planes " + shape_string(planes) + " do not match decoder input width " +
                               std::to_string(head.decoder->in_channels));
  const int R = cfg.render_resolution;
  const auto rays = ray_tensors(pose, R, cfg.bound);
  const auto n = rays.origins.size(0);
  const int nc = cfg.n_coarse, nf = cfg.n_fine;

  // Coarse depths: stratified per ray from an independent stream.
  std::vector<Rng> streams;
  streams.reserve(static_cast<std::size_t>(n));
  auto coarse = torch::empty({n, nc}, torch::kFloat64);
  {
    auto* cp = coarse.data_ptr<double>();
    const auto* nr = rays.near.data_ptr<double>();
    const auto* fr = rays.far.data_ptr<double>();
    for (std::int64_t r = 0; r < n; ++r) {
      streams.emplace_back(stream_seed(seed, static_cast<std::uint64_t>(r)));
      const double step = (fr[r] - nr[r]) / nc;
      for (int i = 0; i < nc; ++i) {
        const double jitter = cfg.stratified ? streams.back().uniform() : 0.5;
        cp[r * nc + i] = nr[r] + (i + jitter) * step;
      }
    }
  }

  torch::Tensor coarse_weights;
  {
    torch::NoGradGuard ng;
    auto t = coarse;
    auto edges = depth_edges(t, rays.near, rays.far);
    auto deltas = (edges.narrow(1, 1, nc) - edges.narrow(1, 0, nc)).clamp_min(1e-10);
    auto pts = rays.origins.unsqueeze(1) + t.unsqueeze(-1) * rays.dirs.unsqueeze(1);
    auto feats = sample_planes(planes.detach(), pts.reshape({n * nc, 3}).to(planes.scalar_type()));
    auto density = head.decoder->forward(feats).first.reshape({n, nc}).to(torch::kFloat64);
    coarse_weights = composite_rays(density, torch::zeros({n, nc, 1}, torch::kFloat64), deltas).weights.contiguous();
  }

  auto merged = torch::empty({n, nc + nf}, torch::kFloat64);
  {
    const auto* cw = coarse_weights.data_ptr<double>();
    const auto* cp = coarse.data_ptr<double>();
    const auto* nr = rays.near.data_ptr<double>();
    const auto* fr = rays.far.data_ptr<double>();
    auto* mp = merged.data_ptr<double>();
    std::vector<double> edges(static_cast<std::size_t>(nc) + 1);
    for (std::int64_t r = 0; r < n; ++r) {
      edges[0] = nr[r];
      for (int i = 1; i < nc; ++i) edges[i] = 0.5 * (cp[r * nc + i - 1] + cp[r * nc + i]);
      edges[nc] = fr[r];
      auto fine = importance_sample({cw + r * nc, static_cast<std::size_t>(nc)}, edges, nf, streams[r]);
      double* row = mp + r * (nc + nf);
      std::merge(cp + r * nc, cp + (r + 1) * nc, fine.begin(), fine.end(), row);
    }
  }
  return render_at_depths(planes, head, pose, cfg, R, merged);
}

RenderOutput render(const RenderableTriplane& tri, RenderHead& head, const CameraPose& pose, const SamplingConfig& cfg,
                    std::uint64_t seed) {
  return render(tri.planes, head, pose, cfg, seed);
}

}  // namespace avatar
