#pragma once

#include <string>
#include <vector>

#include "avatar/common.hpp"
#include "avatar/diffusion.hpp"
#include "avatar/geometry.hpp"
#include "avatar/triplane.hpp"
#include "avatar/volume_renderer.hpp"

namespace avatar {

struct GeometrySection {
  int rings = 20;
  int segments = 25;
  int expression_dim = 8;
  double expression_amplitude = 0.2;
  double region_width = 0.45;
  double pitch_min = -0.25, pitch_max = 0.65;
  double yaw_min = -0.78, yaw_max = 0.78;
  double roll_min = -0.25, roll_max = 0.25;
  double radius = 2.7;
  double fov = 0.6;
  double bound = 1.1;
};

struct TriplaneSection {
  int planes = 4;
  int resolution = 64;
  int channels = 16;
};

struct RendererSection {
  int decoder_hidden = 64;
  int features = 8;
  int n_coarse = 48;
  int n_fine = 48;
  bool stratified = true;
  int render_resolution = 32;
  double background = 0.0;
  double readout_threshold = 0.12;
  double readout_gain = 40.0;
  double readout_output_gain = 4.0;
  double readout_bias = 8.0;
};

struct DataSection {
  int domains = 4;
  int pairs_per_domain = 200;
  int n_dynamic = 64;
  int n_static = 64;
  int exprs_per_id = 3;
  int views_per_expr = 2;
  int static_views = 2;
  int val_every = 20;            // identity index % val_every == val_every - 1 → validation
  double expression_scale = 1.0; // palette: neutral plus scale·e_k
  int field_frequencies = 3;     // band limit of the identity fields
  int field_bases = 3;           // base fields mixed into the feature channels
};

struct VaeSection {
  int latent_resolution = 16;
  int latent_channels = 4;
  int hidden_channels = 32;
  double kl_weight = 1e-5;
  double lr = 1e-3;
  double weight_decay = 0.0;
  int batch = 4;
  int steps = 2000;
  int train_limit = 0;  // 0 = all training identities
  int render_resolution = 16;
  int render_coarse = 16;
  int render_fine = 16;
};

struct DiffusionSection {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double lambda_vlb = 0.001;
  int sample_steps = 19;
  double guidance = 4.5;
};

struct DitSection {
  int width = 128;
  int depth = 4;
  int heads = 4;
  int patch = 2;
  int mlp_ratio = 4;
  int semantic_tokens = 4;
  int condition_resolution = 64;
  std::string condition_encoder = "toy";
  double drop_prob = 0.1;
  double lr = 1e-4;
  double weight_decay = 0.0;
  int batch = 8;
  int steps = 1000;
};

struct MotionRendererSection {
  int motion_dim = 32;
  int width = 64;
  int depth = 2;
  int heads = 4;
  int grid = 8;
  int source_resolution = 64;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int batch = 2;
  int steps = 600;
  int adv_start_step = 450;
  int res_start = 16;
  int res_final = 32;
  double res_switch_fraction = 0.5;
  double w_re = 1.0, w_f = 1.0, w_tri = 0.1, w_depth = 1.0, w_opa = 1.0, w_adv = 0.01;
};

struct RunSection {
  int log_every = 1;
  int checkpoint_every = 0;  // 0 = only at the end
  int eval_identities = 8;
};

struct ExperimentConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  GeometrySection geometry;
  TriplaneSection triplane;
  RendererSection renderer;
  DataSection data;
  VaeSection vae;
  DiffusionSection diffusion;
  DitSection dit;
  MotionRendererSection motion_renderer;
  RunSection run;

  static ExperimentConfig desk();
  static ExperimentConfig paper();
  static ExperimentConfig preset_named(const std::string& name);

  // Structural checks; throws ErrorKind::Config.
  void validate() const;

  // Derived views used by the modules.
  MeshConfig mesh() const;
  PoseRanges pose_ranges() const;
  TriplaneLayout layout() const;
  SamplingConfig sampling() const;
  DensityReadout readout() const;
  DiffusionSchedule schedule() const;

  json to_json() const;
  static ExperimentConfig from_json(const json& j);  // rejects unknown keys
  std::string to_yaml() const;
  static ExperimentConfig from_yaml(const std::string& text);
  static ExperimentConfig load(const fs::path& path);
  void save(const fs::path& path) const;

  // BLAKE2b over the canonical JSON form; the run section is excluded because
  // it only controls logging cadence.
  std::string hash() const;
  // Hash of the sections that determine generated data (seed, geometry,
  // triplane, renderer, data); stamped into dataset manifests.
  std::string data_hash() const;

  // Applies "section.key=value" (value parsed as YAML scalar). Last wins.
  void set(const std::string& assignment);
};

struct PresetDifference {
  std::string key;
  json desk, paper;
};
std::vector<PresetDifference> preset_diff(const ExperimentConfig& a, const ExperimentConfig& b);
std::string preset_diff_report(const ExperimentConfig& a, const ExperimentConfig& b);

// YAML ↔ JSON conversion for the plain-data subset configs use.
json yaml_to_json(const std::string& text);
std::string json_to_yaml(const json& j);

}  // namespace avatar
