#pragma once

#include <map>
#include <string>
#include <vector>

#include "avatar/common.hpp"
#include "avatar/config.hpp"
#include "avatar/geometry.hpp"
#include "avatar/triplane.hpp"
#include "avatar/volume_renderer.hpp"

namespace avatar {

// Identity fields are band-limited Fourier series on [-1,1]²: integer
// frequencies (kx, ky) with max(|kx|,|ky|) ≤ F, excluding DC, Gaussian
// coefficients with amplitude ∝ exp(-(kx² + ky²) / 8), scaled to a field
// standard deviation of 0.5. Each plane group draws `bases` such fields;
// feature channels 1..C-1 are a fixed global mixture of them plus the domain
// offset 0.5·(d - (D-1)/2). Channel 0 carries geometry: a² + b² on the static
// planes (plus a small identity-specific perturbation) and 0 in the texture,
// so the oracle density readout turns mesh-covered regions solid.
struct SyntheticIdentity {
  std::uint64_t identity_seed = 0;
  int domain_tag = 0;
  NeuralTexture base_texture;  // U×U×C
  torch::Tensor static_planes;  // 3×H×W×C

  ParametricTriplane triplane() const;
};

SyntheticIdentity make_identity(std::uint64_t identity_seed, int domain_tag, const ExperimentConfig& cfg);

// Expression palette: index 0 is neutral, index k ≥ 1 is scale·e_{k-1}.
std::vector<double> palette_expression(int index, const ExperimentConfig& cfg);
int palette_size(const ExperimentConfig& cfg);

// Frozen randomly initialised decoder with the geometry readout installed,
// plus an identity upsampler. Deterministic in (cfg, seed).
RenderHead make_oracle_head(const ExperimentConfig& cfg, std::uint64_t seed);
void save_oracle(const fs::path& path, RenderHead& head, const ExperimentConfig& cfg, std::uint64_t seed);
RenderHead load_oracle(const fs::path& path, const ExperimentConfig& cfg);

struct IdentityEntry {
  int index = 0;
  std::uint64_t identity_seed = 0;
  int domain_tag = 0;
  std::string partition;  // "train" | "val"
  std::string triplane;   // relative path of the parametric triplane
};

struct DatasetRecord {
  int index = 0;
  int identity = 0;  // index into DatasetManifest::identities
  std::uint64_t identity_seed = 0;
  int domain_tag = 0;
  std::string partition;
  int expression_index = 0;
  std::vector<double> expression;
  int view = 0;
  CameraPose pose;
  std::map<std::string, std::string> files;   // role → relative path
  std::map<std::string, std::string> hashes;  // role → BLAKE2b of the file
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;
  fs::path root;       // directory holding manifest.json
  std::string split;   // pairs | dynamic | static
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<IdentityEntry> identities;
  std::vector<DatasetRecord> records;

  json to_json() const;
  static DatasetManifest from_json(const json& j, const fs::path& root);
  static DatasetManifest load(const fs::path& dir);
  fs::path path(const std::string& relative) const { return root / relative; }
};

// Every referenced file exists, re-hashes to the recorded digest and parses;
// the config hash matches `expected_hash` when given.
void validate_manifest(const DatasetManifest& m, const std::string& expected_hash = "");

// Partition rule: identity index % val_every == val_every - 1 is validation.
std::string partition_of(int identity_index, const ExperimentConfig& cfg);

// One triplane, one random expression mesh, one pose and one oracle render
// per identity; n_identities = domains × per_domain. Writes <out>/pairs.
DatasetManifest generate_pairs_split(const ExperimentConfig& cfg, const fs::path& out);

// Dynamic: exprs_per_id distinct expressions × views_per_expr poses per
// identity; static: one expression × static_views poses. Each record stores
// the rendered image, depth, opacity and feature maps plus the fused
// triplane. Writes <out>/dynamic and <out>/static.
std::pair<DatasetManifest, DatasetManifest> generate_dynamic_static_split(const ExperimentConfig& cfg,
                                                                          const fs::path& out);

// Identity seeds per split are drawn from disjoint counter ranges.
std::uint64_t identity_seed_for(const ExperimentConfig& cfg, const std::string& split, int index);

}  // namespace avatar
