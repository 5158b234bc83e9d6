#include "avatar/synthetic_data.hpp"

#include <cstdio>
#include <numeric>

#include "avatar/checkpoint.hpp"

namespace avatar {

namespace {

constexpr std::uint64_t kMixingSeed = 0x6d6978696e67ULL;

// res×res grid of pixel-centre coordinates, a along columns, b along rows.
std::pair<torch::Tensor, torch::Tensor> plane_coords(std::int64_t res) {
  auto c = (torch::arange(res, torch::kFloat64) + 0.5) * (2.0 / static_cast<double>(res)) - 1.0;
  return {c.view({1, res}).expand({res, res}), c.view({res, 1}).expand({res, res})};
}

torch::Tensor band_limited_field(Rng& rng, std::int64_t res, int max_freq) {
  auto [a, b] = plane_coords(res);
  auto field = torch::zeros({res, res}, torch::kFloat64);
  double power = 0.0;
  for (int kx = 0; kx <= max_freq; ++kx) {
    for (int ky = -max_freq; ky <= max_freq; ++ky) {
      if (kx == 0 && ky <= 0) continue;  // DC excluded, conjugate half-plane
      const double amp = std::exp(-(kx * kx + ky * ky) / 8.0);
      const double ca = rng.normal() * amp, cb = rng.normal() * amp;
      auto phase = std::numbers::pi * (kx * a + ky * b);
      field += ca * torch::cos(phase) + cb * torch::sin(phase);
      power += amp * amp;
    }
  }
  return field * (0.5 / std::sqrt(power));
}

torch::Tensor mixing_matrix(std::int64_t channels, int bases) {
  Rng rng(kMixingSeed);
  auto m = torch::empty({channels - 1, bases}, torch::kFloat64);
  auto acc = m.accessor<double, 2>();
  for (std::int64_t c = 0; c + 1 < channels; ++c)
    for (int k = 0; k < bases; ++k) acc[c][k] = rng.normal() / std::sqrt(static_cast<double>(bases));
  return m;
}

// One plane group: res×res×C from `bases` fields, domain offset, geometry channel.
torch::Tensor identity_group(std::uint64_t identity_seed, int group, int domain_tag, const ExperimentConfig& cfg,
                             const torch::Tensor& mix, bool texture) {
  const std::int64_t res = cfg.triplane.resolution;
  const int K = cfg.data.field_bases;
  std::vector<torch::Tensor> fields;
  for (int k = 0; k < K; ++k) {
    Rng rng(stream_seed(identity_seed, static_cast<std::uint64_t>(group * 64 + k)));
    fields.push_back(band_limited_field(rng, res, cfg.data.field_frequencies));
  }
  auto stack = torch::stack(fields, -1);  // res×res×K
  const double offset = 0.5 * (domain_tag - (cfg.data.domains - 1) / 2.0);
  auto colour = torch::matmul(stack, mix.t()) + offset;  // res×res×(C-1)
  torch::Tensor geom;
  if (texture) {
    geom = torch::zeros({res, res, 1}, torch::kFloat64);
  } else {
    auto [a, b] = plane_coords(res);
    geom = (a * a + b * b + 0.05 * fields[0]).unsqueeze(-1);
  }
  return torch::cat({geom, colour}, -1).to(torch::kFloat32).contiguous();
}

std::string id_dir(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id%05d", index);
  return buf;
}

std::string hash_prefix(const std::string& h) { return h.substr(0, 16); }

struct SplitWriter {
  fs::path final_dir, tmp_dir;
  bool committed = false;

  SplitWriter(const fs::path& out, const std::string& split) : final_dir(out / split), tmp_dir(out / (split + ".partial")) {
    std::error_code ec;
    fs::remove_all(tmp_dir, ec);
    fs::create_directories(tmp_dir, ec);
    if (ec) fail(ErrorKind::Io, "data: cannot create " + tmp_dir.string() + ": " + ec.message());
  }
  ~SplitWriter() {
    if (!committed) {
      std::error_code ec;
      fs::remove_all(tmp_dir, ec);
    }
  }
  void commit() {
    std::error_code ec;
    fs::remove_all(final_dir, ec);
    fs::rename(tmp_dir, final_dir, ec);
    if (ec) fail(ErrorKind::Io, "data: cannot move split into place: " + ec.message());
    committed = true;
  }
};

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail(ErrorKind::Io, "data: cannot create " + p.string() + ": " + ec.message());
}

// Writes the render products of one record and fills files/hashes.
void write_render(const fs::path& split_dir, const std::string& stem, const RenderOutput& out, DatasetRecord& rec,
                  const std::string& config_hash, bool full) {
  const json meta{{"config_hash", config_hash}, {"record", rec.index}};
  auto put = [&](const std::string& role, const std::string& rel) {
    rec.files[role] = rel;
    rec.hashes[role] = hash_file(split_dir / rel);
  };
  const std::string png = stem + "image.png";
  save_png(split_dir / png, out.rgb.detach().clamp(0, 1),
           {{"config_hash", config_hash}, {"record", std::to_string(rec.index)}});
  put("image", png);
  if (!full) return;
  save_imgf(split_dir / (stem + "rgb.imgf"), out.rgb.detach(), meta);
  put("rgb", stem + "rgb.imgf");
  save_imgf(split_dir / (stem + "depth.imgf"), out.depth.detach().unsqueeze(-1), meta);
  put("depth", stem + "depth.imgf");
  save_imgf(split_dir / (stem + "opacity.imgf"), out.opacity.detach().unsqueeze(-1), meta);
  put("opacity", stem + "opacity.imgf");
  save_imgf(split_dir / (stem + "feature.imgf"), out.feature_image.detach(), meta);
  put("feature", stem + "feature.imgf");
}

void write_manifest(const fs::path& dir, const DatasetManifest& m) {
  write_atomic(dir / "manifest.json", m.to_json().dump(1) + "\n");
}

std::vector<int> shuffled_palette(Rng& rng, int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

}  // namespace

ParametricTriplane SyntheticIdentity::triplane() const {
  auto planes = torch::cat({static_planes, base_texture.texels.unsqueeze(0)}, 0);
  return make_triplane(planes, json{{"identity_seed", identity_seed}, {"domain_tag", domain_tag},
                                    {"id", "identity-" + std::to_string(identity_seed)}});
}

SyntheticIdentity make_identity(std::uint64_t identity_seed, int domain_tag, const ExperimentConfig& cfg) {
  if (domain_tag < 0 || domain_tag >= cfg.data.domains)
    fail(ErrorKind::Validation, "make_identity: domain_tag " + std::to_string(domain_tag) + " outside [0, " +
                                    std::to_string(cfg.data.domains) + ")");
  const auto mix = mixing_matrix(cfg.triplane.channels, cfg.data.field_bases);
  SyntheticIdentity id;
  id.identity_seed = identity_seed;
  id.domain_tag = domain_tag;
  std::vector<torch::Tensor> planes;
  for (int g = 0; g < 3; ++g) planes.push_back(identity_group(identity_seed, g, domain_tag, cfg, mix, false));
  id.static_planes = torch::stack(planes);
  id.base_texture.texels = identity_group(identity_seed, 3, domain_tag, cfg, mix, true);
  return id;
}

int palette_size(const ExperimentConfig& cfg) { return cfg.geometry.expression_dim + 1; }

std::vector<double> palette_expression(int index, const ExperimentConfig& cfg) {
  if (index < 0 || index >= palette_size(cfg)) fail(ErrorKind::Validation, "palette index out of range");
  std::vector<double> e(static_cast<std::size_t>(cfg.geometry.expression_dim), 0.0);
  if (index > 0) e[static_cast<std::size_t>(index - 1)] = cfg.data.expression_scale;
  return e;
}

RenderHead make_oracle_head(const ExperimentConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(static_cast<std::int64_t>(stream_seed(seed, 0x6f7261636c65ULL) >> 1));
  RenderHead head{FeatureDecoder(cfg.triplane.channels, cfg.renderer.features, cfg.renderer.decoder_hidden),
                  Upsampler(cfg.renderer.features)};
  install_density_readout(head.decoder, cfg.readout());
  head.decoder->eval();
  head.upsampler->eval();
  for (auto& p : head.decoder->parameters()) p.set_requires_grad(false);
  for (auto& p : head.upsampler->parameters()) p.set_requires_grad(false);
  return head;
}

void save_oracle(const fs::path& path, RenderHead& head, const ExperimentConfig& cfg, std::uint64_t seed) {
  save_checkpoint(path, "oracle", {{"decoder", head.decoder.get()}, {"upsampler", head.upsampler.get()}},
                  json{{"config_hash", cfg.data_hash()}, {"seed", seed}});
}

RenderHead load_oracle(const fs::path& path, const ExperimentConfig& cfg) {
  auto ck = load_checkpoint(path);
  RenderHead head{FeatureDecoder(cfg.triplane.channels, cfg.renderer.features, cfg.renderer.decoder_hidden),
                  Upsampler(cfg.renderer.features)};
  load_module(ck, "decoder", *head.decoder);
  load_module(ck, "upsampler", *head.upsampler);
  for (auto& p : head.decoder->parameters()) p.set_requires_grad(false);
  for (auto& p : head.upsampler->parameters()) p.set_requires_grad(false);
  return head;
}

std::string partition_of(int identity_index, const ExperimentConfig& cfg) {
  return identity_index % cfg.data.val_every == cfg.data.val_every - 1 ? "val" : "train";
}

std::uint64_t identity_seed_for(const ExperimentConfig& cfg, const std::string& split, int index) {
  std::uint64_t base = 0;
  if (split == "pairs")
    base = 1ULL << 32;
  else if (split == "dynamic")
    base = 2ULL << 32;
  else if (split == "static")
    base = 3ULL << 32;
  else
    fail(ErrorKind::Validation, "unknown split '" + split + "'");
  return stream_seed(cfg.seed, base + static_cast<std::uint64_t>(index));
}

json DatasetManifest::to_json() const {
  json ids = json::array();
  for (const auto& e : identities)
    ids.push_back({{"index", e.index}, {"identity_seed", e.identity_seed}, {"domain_tag", e.domain_tag},
                   {"partition", e.partition}, {"triplane", e.triplane}});
  json recs = json::array();
  for (const auto& r : records)
    recs.push_back({{"index", r.index},
                    {"identity", r.identity},
                    {"identity_seed", r.identity_seed},
                    {"domain_tag", r.domain_tag},
                    {"partition", r.partition},
                    {"expression_index", r.expression_index},
                    {"expression", r.expression},
                    {"view", r.view},
                    {"pose", r.pose.to_json()},
                    {"files", r.files},
                    {"hashes", r.hashes}});
  return json{{"schema_version", kSchemaVersion}, {"split", split}, {"config_hash", config_hash},
              {"seed", seed},  {"identities", ids},   {"records", recs}};
}

DatasetManifest DatasetManifest::from_json(const json& j, const fs::path& root) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      fail(ErrorKind::Validation, "manifest: unsupported schema version");
    DatasetManifest m;
    m.root = root;
    m.split = j.at("split").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("identities"))
      m.identities.push_back({e.at("index").get<int>(), e.at("identity_seed").get<std::uint64_t>(),
                              e.at("domain_tag").get<int>(), e.at("partition").get<std::string>(),
                              e.at("triplane").get<std::string>()});
    for (const auto& r : j.at("records")) {
      DatasetRecord d;
      d.index = r.at("index").get<int>();
      d.identity = r.at("identity").get<int>();
      d.identity_seed = r.at("identity_seed").get<std::uint64_t>();
      d.domain_tag = r.at("domain_tag").get<int>();
      d.partition = r.at("partition").get<std::string>();
      d.expression_index = r.at("expression_index").get<int>();
      d.expression = r.at("expression").get<std::vector<double>>();
      d.view = r.at("view").get<int>();
      d.pose = CameraPose::from_json(r.at("pose"));
      d.files = r.at("files").get<std::map<std::string, std::string>>();
      d.hashes = r.at("hashes").get<std::map<std::string, std::string>>();
      m.records.push_back(std::move(d));
    }
    return m;
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, std::string("manifest: malformed: ") + e.what());
  }
}

DatasetManifest DatasetManifest::load(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) fail(ErrorKind::Io, "manifest not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, "manifest: invalid JSON in " + path.string());
  }
  return from_json(j, dir);
}

void validate_manifest(const DatasetManifest& m, const std::string& expected_hash) {
  if (!expected_hash.empty() && m.config_hash != expected_hash)
    fail(ErrorKind::Validation, "manifest: config hash " + hash_prefix(m.config_hash) + " does not match " +
                                    hash_prefix(expected_hash));
  for (const auto& id : m.identities) (void)load_triplane(m.path(id.triplane));
  for (const auto& r : m.records) {
    for (const auto& [role, rel] : r.files) {
      const auto p = m.path(rel);
      if (!fs::exists(p)) fail(ErrorKind::Io, "manifest: missing file " + p.string());
      auto it = r.hashes.find(role);
      if (it != r.hashes.end() && hash_file(p) != it->second)
        fail(ErrorKind::Validation, "manifest: hash mismatch for " + p.string());
      const auto ext = p.extension().string();
      if (ext == ".png")
        (void)load_png(p);
      else if (ext == ".imgf")
        (void)load_imgf(p);
      else if (ext == ".trip")
        (void)load_triplane(p);
    }
  }
}

DatasetManifest generate_pairs_split(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  torch::NoGradGuard ng;
  SplitWriter writer(out, "pairs");
  auto head = make_oracle_head(cfg, cfg.seed);
  const auto sampling = cfg.sampling();
  const auto hash = cfg.data_hash();

  DatasetManifest m;
  m.root = writer.final_dir;
  m.split = "pairs";
  m.config_hash = hash;
  m.seed = cfg.seed;
  const int n = cfg.data.domains * cfg.data.pairs_per_domain;
  for (int i = 0; i < n; ++i) {
    const int domain = i / cfg.data.pairs_per_domain;
    const auto seed = identity_seed_for(cfg, "pairs", i);
    auto ident = make_identity(seed, domain, cfg);
    auto tri = ident.triplane();
    tri.meta["config_hash"] = hash;
    tri.meta["identity_seed"] = seed;
    const std::string dir = id_dir(i);
    ensure_dir(writer.tmp_dir / dir);
    save_triplane(writer.tmp_dir / dir / "triplane.trip", tri);
    m.identities.push_back({i, seed, domain, partition_of(i, cfg), dir + "/triplane.trip"});

    Rng rng(stream_seed(seed, 0x70616972ULL));
    DatasetRecord rec;
    rec.index = i;
    rec.identity = i;
    rec.identity_seed = seed;
    rec.domain_tag = domain;
    rec.partition = partition_of(i, cfg);
    rec.expression_index = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(palette_size(cfg)));
    rec.expression = palette_expression(rec.expression_index, cfg);
    rec.pose = sample_camera_pose(rng, cfg.pose_ranges());
    auto fused = fuse(tri, mesh_from_params(seed, rec.expression, cfg.mesh()));
    auto r = render(fused, head, rec.pose, sampling, stream_seed(seed, 1));
    rec.files["triplane"] = dir + "/triplane.trip";
    rec.hashes["triplane"] = hash_file(writer.tmp_dir / dir / "triplane.trip");
    write_render(writer.tmp_dir, dir + "/", r, rec, hash, false);
    m.records.push_back(std::move(rec));
  }
  save_oracle(writer.tmp_dir / "oracle.ckpt", head, cfg, cfg.seed);
  write_manifest(writer.tmp_dir, m);
  writer.commit();
  return m;
}

namespace {

DatasetManifest generate_views_split(const ExperimentConfig& cfg, const fs::path& out, const std::string& split,
                                     int n_ids, int exprs, int views) {
  torch::NoGradGuard ng;
  SplitWriter writer(out, split);
  auto head = make_oracle_head(cfg, cfg.seed);
  const auto sampling = cfg.sampling();
  const auto hash = cfg.data_hash();

  DatasetManifest m;
  m.root = writer.final_dir;
  m.split = split;
  m.config_hash = hash;
  m.seed = cfg.seed;
  int rec_index = 0;
  for (int i = 0; i < n_ids; ++i) {
    const int domain = i % cfg.data.domains;
    const auto seed = identity_seed_for(cfg, split, i);
    auto ident = make_identity(seed, domain, cfg);
    auto tri = ident.triplane();
    tri.meta["config_hash"] = hash;
    tri.meta["identity_seed"] = seed;
    const std::string dir = id_dir(i);
    ensure_dir(writer.tmp_dir / dir);
    save_triplane(writer.tmp_dir / dir / "triplane.trip", tri);
    m.identities.push_back({i, seed, domain, partition_of(i, cfg), dir + "/triplane.trip"});

    Rng rng(stream_seed(seed, 0x76696577ULL));
    const auto order = shuffled_palette(rng, palette_size(cfg));
    for (int e = 0; e < exprs; ++e) {
      const int pal = order[static_cast<std::size_t>(e)];
      const auto expr = palette_expression(pal, cfg);
      auto fused = fuse(tri, mesh_from_params(seed, expr, cfg.mesh()));
      const std::string fused_rel = dir + "/e" + std::to_string(e) + "_fused.trip";
      save_planes(writer.tmp_dir / fused_rel, fused.planes,
                  json{{"config_hash", hash}, {"source_id", fused.source_id}, {"expression", expr}});
      const auto fused_hash = hash_file(writer.tmp_dir / fused_rel);
      for (int v = 0; v < views; ++v) {
        DatasetRecord rec;
        rec.index = rec_index++;
        rec.identity = i;
        rec.identity_seed = seed;
        rec.domain_tag = domain;
        rec.partition = partition_of(i, cfg);
        rec.expression_index = pal;
        rec.expression = expr;
        rec.view = v;
        rec.pose = sample_camera_pose(rng, cfg.pose_ranges());
        auto r = render(fused, head, rec.pose, sampling, stream_seed(seed, static_cast<std::uint64_t>(e * 64 + v)));
        rec.files["fused"] = fused_rel;
        rec.hashes["fused"] = fused_hash;
        write_render(writer.tmp_dir, dir + "/e" + std::to_string(e) + "_v" + std::to_string(v) + "_", r, rec, hash,
                     true);
        m.records.push_back(std::move(rec));
      }
    }
  }
  save_oracle(writer.tmp_dir / "oracle.ckpt", head, cfg, cfg.seed);
  write_manifest(writer.tmp_dir, m);
  writer.commit();
  return m;
}

}  // namespace

std::pair<DatasetManifest, DatasetManifest> generate_dynamic_static_split(const ExperimentConfig& cfg,
                                                                          const fs::path& out) {
  cfg.validate();
  if (cfg.data.exprs_per_id < 2)
    fail(ErrorKind::Validation, "dynamic split needs at least 2 expressions per identity");
  auto dyn = generate_views_split(cfg, out, "dynamic", cfg.data.n_dynamic, cfg.data.exprs_per_id,
                                  cfg.data.views_per_expr);
  auto sta = generate_views_split(cfg, out, "static", cfg.data.n_static, 1, cfg.data.static_views);
  return {std::move(dyn), std::move(sta)};
}

}  // namespace avatar
