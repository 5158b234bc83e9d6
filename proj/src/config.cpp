#include "avatar/config.hpp"

#include <charconv>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace avatar {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeometrySection, rings, segments, expression_dim, expression_amplitude,
                                                region_width, pitch_min, pitch_max, yaw_min, yaw_max, roll_min,
                                                roll_max, radius, fov, bound)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TriplaneSection, planes, resolution, channels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RendererSection, decoder_hidden, features, n_coarse, n_fine,
                                                stratified, render_resolution, background, readout_threshold,
                                                readout_gain, readout_output_gain, readout_bias)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSection, domains, pairs_per_domain, n_dynamic, n_static,
                                                exprs_per_id, views_per_expr, static_views, val_every,
                                                expression_scale, field_frequencies, field_bases)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VaeSection, latent_resolution, latent_channels, hidden_channels,
                                                kl_weight, lr, weight_decay, batch, steps, train_limit,
                                                render_resolution, render_coarse, render_fine)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiffusionSection, steps, beta_start, beta_end, lambda_vlb,
                                                sample_steps, guidance)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DitSection, width, depth, heads, patch, mlp_ratio, semantic_tokens,
                                                condition_resolution, condition_encoder, drop_prob, lr, weight_decay,
                                                batch, steps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MotionRendererSection, motion_dim, width, depth, heads, grid,
                                                source_resolution, lr, beta1, beta2, batch, steps, adv_start_step,
                                                res_start, res_final, res_switch_fraction, w_re, w_f, w_tri, w_depth,
                                                w_opa, w_adv)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunSection, log_every, checkpoint_every, eval_identities)

ExperimentConfig ExperimentConfig::desk() { return ExperimentConfig{}; }

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig c;
  c.preset = "paper";
  c.triplane.resolution = 256;
  c.triplane.channels = 32;
  c.renderer.render_resolution = 64;
  c.data.domains = 28;
  c.data.pairs_per_domain = 20000;
  c.vae.latent_resolution = 64;
  c.vae.latent_channels = 8;
  c.vae.hidden_channels = 128;
  c.vae.lr = 1e-4;
  c.vae.batch = 32;
  c.vae.steps = 100000;
  c.vae.render_resolution = 64;
  c.vae.render_coarse = 48;
  c.vae.render_fine = 48;
  c.dit.width = 1152;
  c.dit.depth = 28;
  c.dit.heads = 16;
  c.dit.condition_resolution = 512;
  c.dit.condition_encoder = "external";
  c.dit.batch = 1536;
  c.dit.steps = 800000;
  c.motion_renderer.width = 512;
  c.motion_renderer.depth = 8;
  c.motion_renderer.heads = 8;
  c.motion_renderer.grid = 32;
  c.motion_renderer.source_resolution = 512;
  c.motion_renderer.batch = 96;
  // 8M images at batch 96; adversarial term and 128² after the first 1M.
  c.motion_renderer.steps = 8000000 / 96;
  c.motion_renderer.adv_start_step = 1000000 / 96;
  c.motion_renderer.res_start = 64;
  c.motion_renderer.res_final = 128;
  c.motion_renderer.res_switch_fraction = 0.125;
  return c;
}

ExperimentConfig ExperimentConfig::preset_named(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  fail(ErrorKind::Config, "config: unknown preset '" + name + "'");
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::Config, "config: " + what);
  };
  need(preset == "desk" || preset == "paper", "preset must be desk or paper");
  need(geometry.rings >= 3 && geometry.segments >= 3, "geometry.rings/segments too small");
  need(geometry.expression_dim >= 1, "geometry.expression_dim must be >= 1");
  need(geometry.pitch_min <= geometry.pitch_max && geometry.yaw_min <= geometry.yaw_max &&
           geometry.roll_min <= geometry.roll_max,
       "pose ranges inverted");
  need(geometry.radius > 0 && geometry.fov > 0 && geometry.fov < 3.14159, "camera radius/fov out of range");
  need(triplane.planes == 4, "triplane.planes must be 4 (three static planes + texture)");
  need(triplane.resolution >= 4 && triplane.channels >= 4, "triplane too small");
  need(renderer.features >= 3, "renderer.features must be >= 3 (RGB)");
  need(renderer.n_coarse >= 1 && renderer.n_fine >= 1, "sample counts must be >= 1");
  need(renderer.render_resolution >= 2, "renderer.render_resolution must be >= 2");
  need(data.domains >= 1 && data.pairs_per_domain >= 1, "data counts must be positive");
  need(data.exprs_per_id >= 2, "data.exprs_per_id must be >= 2 for the dynamic split");
  need(data.exprs_per_id <= geometry.expression_dim + 1, "data.exprs_per_id exceeds the expression palette");
  need(data.views_per_expr >= 1 && data.static_views >= 1, "view counts must be >= 1");
  need(data.val_every >= 2, "data.val_every must be >= 2");
  need(triplane.resolution % vae.latent_resolution == 0, "vae.latent_resolution must divide triplane.resolution");
  const int factor = triplane.resolution / vae.latent_resolution;
  need(factor >= 1 && (factor & (factor - 1)) == 0, "vae downsampling factor must be a power of two");
  need(vae.batch >= 1 && vae.steps >= 0 && vae.lr > 0, "vae optimiser settings");
  need(diffusion.steps >= 2 && diffusion.beta_start > 0 && diffusion.beta_start < diffusion.beta_end &&
           diffusion.beta_end < 1,
       "diffusion schedule");
  need(diffusion.sample_steps >= 1, "diffusion.sample_steps must be >= 1");
  need(dit.patch >= 1 && vae.latent_resolution % dit.patch == 0, "dit.patch must divide the latent resolution");
  need(dit.width % dit.heads == 0, "dit.width must be divisible by dit.heads");
  need(dit.drop_prob >= 0 && dit.drop_prob < 1, "dit.drop_prob in [0,1)");
  need(dit.condition_encoder == "toy" || dit.condition_encoder == "external", "dit.condition_encoder is toy|external");
  need(motion_renderer.width % motion_renderer.heads == 0, "motion_renderer.width divisible by heads");
  need(motion_renderer.source_resolution % motion_renderer.grid == 0, "motion_renderer.grid must divide source size");
  need(triplane.resolution % motion_renderer.grid == 0, "motion_renderer.grid must divide the triplane resolution");
  need(motion_renderer.res_start >= 2 && motion_renderer.res_final >= motion_renderer.res_start,
       "motion_renderer resolution schedule");
  need(run.log_every >= 1, "run.log_every must be >= 1");
}

MeshConfig ExperimentConfig::mesh() const {
  MeshConfig m;
  m.rings = geometry.rings;
  m.segments = geometry.segments;
  m.expression_dim = geometry.expression_dim;
  m.expression_amplitude = geometry.expression_amplitude;
  m.region_width = geometry.region_width;
  return m;
}

PoseRanges ExperimentConfig::pose_ranges() const {
  PoseRanges r;
  r.pitch_min = geometry.pitch_min, r.pitch_max = geometry.pitch_max;
  r.yaw_min = geometry.yaw_min, r.yaw_max = geometry.yaw_max;
  r.roll_min = geometry.roll_min, r.roll_max = geometry.roll_max;
  r.radius = geometry.radius;
  r.fov = geometry.fov;
  return r;
}

TriplaneLayout ExperimentConfig::layout() const {
  return {triplane.planes, triplane.resolution, triplane.resolution, triplane.channels};
}

SamplingConfig ExperimentConfig::sampling() const {
  SamplingConfig s;
  s.n_coarse = renderer.n_coarse;
  s.n_fine = renderer.n_fine;
  s.stratified = renderer.stratified;
  s.render_resolution = renderer.render_resolution;
  s.bound = geometry.bound;
  s.background = renderer.background;
  return s;
}

DensityReadout ExperimentConfig::readout() const {
  return {renderer.readout_threshold, renderer.readout_gain, renderer.readout_output_gain, renderer.readout_bias};
}

DiffusionSchedule ExperimentConfig::schedule() const {
  return DiffusionSchedule::linear(diffusion.steps, diffusion.beta_start, diffusion.beta_end);
}

json ExperimentConfig::to_json() const {
  return json{{"preset", preset},
              {"seed", seed},
              {"geometry", geometry},
              {"triplane", triplane},
              {"renderer", renderer},
              {"data", data},
              {"vae", vae},
              {"diffusion", diffusion},
              {"dit", dit},
              {"motion_renderer", motion_renderer},
              {"run", run}};
}

namespace {

void reject_unknown(const json& given, const json& known, const std::string& prefix) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) fail(ErrorKind::Config, "config: unknown key '" + key + "'");
    if (known.at(it.key()).is_object()) {
      if (!it.value().is_object()) fail(ErrorKind::Config, "config: '" + key + "' must be a section");
      reject_unknown(it.value(), known.at(it.key()), key);
    }
  }
}

template <class T>
void read_section(const json& j, const char* name, T& out) {
  if (!j.contains(name)) return;
  try {
    out = j.at(name).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config: section '") + name + "': " + e.what());
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) fail(ErrorKind::Config, "config: top level must be a mapping");
  const std::string preset = j.value("preset", std::string("desk"));
  ExperimentConfig c = preset_named(preset);
  reject_unknown(j, c.to_json(), "");
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config: seed: ") + e.what());
  }
  read_section(j, "geometry", c.geometry);
  read_section(j, "triplane", c.triplane);
  read_section(j, "renderer", c.renderer);
  read_section(j, "data", c.data);
  read_section(j, "vae", c.vae);
  read_section(j, "diffusion", c.diffusion);
  read_section(j, "dit", c.dit);
  read_section(j, "motion_renderer", c.motion_renderer);
  read_section(j, "run", c.run);
  c.validate();
  return c;
}

namespace {

json scalar_from_yaml(const YAML::Node& n) {
  const std::string& s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  if (s == "~" || s == "null" || s.empty()) return nullptr;
  {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec == std::errc() && p == s.data() + s.size()) return v;
  }
  {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec == std::errc() && p == s.data() + s.size()) return v;
  }
  {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec == std::errc() && p == s.data() + s.size()) return v;
  }
  return s;
}

json node_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar:
      return scalar_from_yaml(n);
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& e : n) a.push_back(node_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = node_to_json(kv.second);
      return o;
    }
  }
  return nullptr;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, p);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

void emit(YAML::Emitter& out, const json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (auto it = j.begin(); it != j.end(); ++it) {
      out << YAML::Key << it.key() << YAML::Value;
      emit(out, it.value());
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& e : j) emit(out, e);
    out << YAML::EndSeq;
  } else if (j.is_boolean()) {
    out << (j.get<bool>() ? "true" : "false");
  } else if (j.is_number_float()) {
    out << format_double(j.get<double>());
  } else if (j.is_number_unsigned()) {
    out << std::to_string(j.get<std::uint64_t>());
  } else if (j.is_number_integer()) {
    out << std::to_string(j.get<std::int64_t>());
  } else if (j.is_string()) {
    out << YAML::DoubleQuoted << j.get<std::string>();
  } else {
    out << YAML::Null;
  }
}

}  // namespace

json yaml_to_json(const std::string& text) {
  try {
    return node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    fail(ErrorKind::Config, std::string("config: YAML parse error: ") + e.what());
  }
}

std::string json_to_yaml(const json& j) {
  YAML::Emitter out;
  emit(out, j);
  return std::string(out.c_str()) + "\n";
}

std::string ExperimentConfig::to_yaml() const { return json_to_yaml(to_json()); }

ExperimentConfig ExperimentConfig::from_yaml(const std::string& text) {
  auto j = yaml_to_json(text);
  if (j.is_null()) j = json::object();
  return from_json(j);
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    fail(ErrorKind::Config, "config: cannot read " + path.string());
  }
  return from_yaml(text);
}

void ExperimentConfig::save(const fs::path& path) const { write_atomic(path, to_yaml()); }

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("run");
  return hash_bytes(j.dump());
}

std::string ExperimentConfig::data_hash() const {
  const auto j = to_json();
  json d;
  for (const char* k : {"seed", "geometry", "triplane", "renderer", "data"}) d[k] = j.at(k);
  return hash_bytes(d.dump());
}

void ExperimentConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorKind::Config, "config: override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  json value = yaml_to_json(assignment.substr(eq + 1));
  auto j = to_json();
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) fail(ErrorKind::Config, "config: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) fail(ErrorKind::Config, "config: '" + key + "' is a section");
  if (node->is_number_float() && value.is_number()) value = value.get<double>();
  *node = value;
  *this = from_json(j);
}

namespace {

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object())
      flatten(it.value(), key, out);
    else
      out.emplace_back(key, it.value());
  }
}

}  // namespace

std::vector<PresetDifference> preset_diff(const ExperimentConfig& a, const ExperimentConfig& b) {
  std::vector<std::pair<std::string, json>> fa, fb;
  flatten(a.to_json(), "", fa);
  flatten(b.to_json(), "", fb);
  std::vector<PresetDifference> out;
  for (std::size_t i = 0; i < fa.size(); ++i)
    if (fa[i].second != fb[i].second) out.push_back({fa[i].first, fa[i].second, fb[i].second});
  return out;
}

std::string preset_diff_report(const ExperimentConfig& a, const ExperimentConfig& b) {
  std::ostringstream os;
  os << "# Preset differences (" << a.preset << " vs " << b.preset << ")\n\n";
  os << "| key | " << a.preset << " | " << b.preset << " |\n|---|---|---|\n";
  for (const auto& d : preset_diff(a, b)) os << "| " << d.key << " | " << d.desk.dump() << " | " << d.paper.dump() << " |\n";
  return os.str();
}

}  // namespace avatar
