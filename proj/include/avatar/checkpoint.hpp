#pragma once

#include <map>
#include <string>
#include <vector>

#include "avatar/common.hpp"

namespace avatar {

// CKPT1 container: magic, u32 header length, JSON header, then f32 tensor
// payloads in header order. The header lists {name, shape} per tensor plus
// arbitrary metadata (module name, config, config hash, step, RNG state).
struct CheckpointFile {
  json header;
  std::map<std::string, torch::Tensor> tensors;

  const torch::Tensor& at(const std::string& name) const;
  std::string module() const { return header.value("module", std::string()); }
  std::string config_hash() const { return header.value("config_hash", std::string()); }
};

using NamedModules = std::vector<std::pair<std::string, const torch::nn::Module*>>;

// Parameters and buffers of each module are stored as "<prefix>.<name>".
void save_checkpoint(const fs::path& path, const std::string& module, const NamedModules& modules, json meta,
                     const std::vector<std::pair<std::string, torch::Tensor>>& extra = {});
CheckpointFile load_checkpoint(const fs::path& path);

// Copies stored tensors into the module; every parameter and buffer must be
// present with a matching shape.
void load_module(const CheckpointFile& ckpt, const std::string& prefix, torch::nn::Module& module);

}  // namespace avatar
