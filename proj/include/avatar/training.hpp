#pragma once

#include <chrono>
#include <fstream>
#include <functional>

#include "avatar/common.hpp"
#include "avatar/checkpoint.hpp"
#include "avatar/config.hpp"
#include "avatar/dit.hpp"
#include "avatar/motion_renderer.hpp"
#include "avatar/synthetic_data.hpp"
#include "avatar/triplane_vae.hpp"

namespace avatar {

// Line-delimited JSON training log: {step, losses, lr, wall_ms} per record.
class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path);
  void step(int step, const json& losses, double lr);
  void event(const json& record);

 private:
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
};

using StepHook = std::function<void(int step, const json& losses)>;

struct TrainResult {
  fs::path checkpoint;
  int steps = 0;
  json final_losses;
};

// Dataset root holds pairs/, dynamic/ and static/ as written by the
// generators. Each trainer writes <out>/<stage>.ckpt and <out>/<stage>_log.jsonl.
fs::path pairs_dir(const fs::path& data_root);

TrainResult train_vae(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& out,
                      const StepHook& hook = {});
TriplaneVae load_vae(const fs::path& ckpt_path, const ExperimentConfig& cfg);

// Differentiable fuse of a batch of B×P×H×W×C parametric planes with cached
// rasters (B×3×H×W×2 grid, B×3×H×W mask) → B×3×H×W×C.
torch::Tensor fuse_batch(const torch::Tensor& planes, const torch::Tensor& grid, const torch::Tensor& mask);

// Mean per-element L1 of deterministic reconstructions, in batches.
double vae_reconstruction_l1(TriplaneVae& vae, const std::vector<fs::path>& triplanes);

// Training identities of the pairs split (train partition, optional limit).
std::vector<const DatasetRecord*> vae_training_records(const DatasetManifest& m, const ExperimentConfig& cfg);

// DiT on VAE-mean latents of the pairs training identities, conditioned on
// their rendered images. Latents are multiplied by `latent_scale` (the
// reciprocal of their standard deviation), stored in the checkpoint.
TrainResult train_dit(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& vae_ckpt,
                      const fs::path& out, const StepHook& hook = {});

struct LoadedDit {
  Dit model{nullptr};
  double latent_scale = 1.0;
};
LoadedDit load_dit(const fs::path& ckpt_path, const ExperimentConfig& cfg);

// Images resized (area) to the condition resolution: B×H×W×3 → B×R×R×3.
torch::Tensor condition_images(const torch::Tensor& images, int resolution);

// Guided DPM-Solver sample for one condition image; returns an unscaled
// P×h×w×c latent. Initial noise comes from `seed`.
torch::Tensor sample_latent(LoadedDit& dit, const ExperimentConfig& cfg, const torch::Tensor& image, int steps,
                            double guidance, std::uint64_t seed);

// Motion renderer on the dynamic and static splits. Inputs per record: a
// source image of the same identity from another record, the VAE
// reconstruction of the identity triplane and the target expression; targets
// are the stored renders and fused planes. The render head is the dataset's
// frozen oracle and is copied into the checkpoint.
TrainResult train_renderer(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& vae_ckpt,
                           const fs::path& out, const StepHook& hook = {});

struct LoadedRenderer {
  MotionRenderer model{nullptr};
  RenderHead head;
};
LoadedRenderer load_renderer(const fs::path& ckpt_path, const ExperimentConfig& cfg);

// One renderer example resolved from a views manifest.
struct RendererExample {
  const DatasetRecord* record = nullptr;
  const DatasetRecord* source = nullptr;
  torch::Tensor source_image;  // S×S×3
  torch::Tensor recon;         // P×H×W×C VAE reconstruction of the identity
  torch::Tensor fused_recon;   // 3×H×W×C recon fused with the target expression mesh
};

// Source pairing: another record of the same identity, preferring a
// different expression; deterministic in (seed, record index).
const DatasetRecord& source_record(const DatasetManifest& m, const DatasetRecord& r, std::uint64_t seed);

class RendererExamples {
 public:
  RendererExamples(const ExperimentConfig& cfg, const DatasetManifest& m, TriplaneVae& vae);
  RendererExample get(const DatasetRecord& r);
  const DatasetManifest& manifest() const { return m_; }

 private:
  const ExperimentConfig& cfg_;
  const DatasetManifest& m_;
  TriplaneVae& vae_;
  std::map<int, torch::Tensor> recon_;
  std::map<std::pair<int, int>, MeshRaster> rasters_;
};

// Runs the renderer on one example (refined undefined when `ablate`).
RenderOutput render_example(LoadedRenderer& r, const ExperimentConfig& cfg, const RendererExample& ex,
                            const SamplingConfig& sampling, bool ablate);

// Fails with a Validation error when a checkpoint was produced by another config.
void check_config_hash(const CheckpointFile& ck, const ExperimentConfig& cfg, const fs::path& path);

}  // namespace avatar
