#include "avatar/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "avatar/geometry.hpp"
#include "avatar/triplane.hpp"

namespace avatar {

CheckpointSet CheckpointSet::in(const fs::path& dir) {
  return {dir / "vae.ckpt", dir / "dit.ckpt", dir / "renderer.ckpt"};
}

namespace {

// Header only: magic, u32 length, JSON.
json read_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path.string());
  char magic[5];
  std::uint8_t len[4];
  if (!in.read(magic, 5) || std::string(magic, 5) != "CKPT1" || !in.read(reinterpret_cast<char*>(len), 4))
    fail(ErrorKind::Io, path.string() + ": not a checkpoint");
  const std::uint32_t n = len[0] | (len[1] << 8) | (len[2] << 16) | (static_cast<std::uint32_t>(len[3]) << 24);
  std::string text(n, '\0');
  if (!in.read(text.data(), n)) fail(ErrorKind::Io, path.string() + ": truncated header");
  return json::parse(text);
}

json file_link(const fs::path& p) {
  return {{"path", fs::absolute(p).lexically_normal().string()}, {"hash", hash_file(p)}};
}

}  // namespace

void CheckpointSet::verify(const ExperimentConfig& cfg) const {
  for (const auto* p : {&vae, &dit, &renderer})
    if (!fs::exists(*p)) fail(ErrorKind::Io, "missing checkpoint " + p->string());
  const auto want = cfg.hash();
  const auto vae_hash = hash_file(vae);
  for (const auto* p : {&vae, &dit, &renderer}) {
    const auto h = read_header(*p);
    if (h.value("config_hash", std::string()) != want)
      fail(ErrorKind::Validation, p->string() + ": config hash " + h.value("config_hash", std::string()).substr(0, 16) +
                                      " does not match the active config " + want.substr(0, 16));
    if (p != &vae && h.contains("parent") && h["parent"].value("hash", std::string()) != vae_hash)
      fail(ErrorKind::Validation, p->string() + ": was trained on a different VAE checkpoint");
  }
}

void default_track(const ExperimentConfig& cfg, int frames, InferRequest& req) {
  if (frames < 1) fail(ErrorKind::Usage, "infer: need at least one frame");
  req.expressions.clear();
  req.cameras.clear();
  const auto ranges = cfg.pose_ranges();
  for (int f = 0; f < frames; ++f) {
    req.expressions.push_back(palette_expression(f % palette_size(cfg), cfg));
    CameraPose pose;
    pose.radius = ranges.radius;
    pose.fov = ranges.fov;
    const double u = frames == 1 ? 0.5 : static_cast<double>(f) / (frames - 1);
    pose.yaw = 0.5 * (ranges.yaw_min + u * (ranges.yaw_max - ranges.yaw_min));
    pose.pitch = 0.5 * (ranges.pitch_min + ranges.pitch_max);
    req.cameras.push_back(pose);
  }
}

std::vector<std::vector<double>> load_expression_track(const fs::path& path) {
  try {
    return json::parse(read_file(path)).get<std::vector<std::vector<double>>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, path.string() + ": expression track must be a list of vectors (" + e.what() + ")");
  }
}

std::vector<CameraPose> load_camera_track(const fs::path& path) {
  std::vector<CameraPose> out;
  try {
    for (const auto& j : json::parse(read_file(path))) out.push_back(CameraPose::from_json(j));
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, path.string() + ": camera track must be a list of poses (" + e.what() + ")");
  }
  return out;
}

std::optional<std::uint64_t> identity_seed_of_image(const fs::path& image) {
  const auto target = fs::weakly_canonical(image);
  for (auto dir = target.parent_path(); !dir.empty(); dir = dir.parent_path()) {
    if (fs::exists(dir / "manifest.json")) {
      auto m = DatasetManifest::load(dir);
      for (const auto& r : m.records) {
        auto it = r.files.find("image");
        if (it != r.files.end() && fs::weakly_canonical(m.path(it->second)) == target) return r.identity_seed;
      }
      return std::nullopt;
    }
    if (dir == dir.parent_path()) break;
  }
  return std::nullopt;
}

json pipeline_infer(const ExperimentConfig& cfg, const CheckpointSet& ckpts, const InferRequest& req) {
  cfg.validate();
  ckpts.verify(cfg);
  if (!fs::exists(req.source_image)) fail(ErrorKind::Io, "missing source image " + req.source_image.string());
  if (req.expressions.size() != req.cameras.size() || req.expressions.empty())
    fail(ErrorKind::Usage, "infer: expression and camera tracks must be non-empty and of equal length");
  for (const auto& e : req.expressions)
    if (static_cast<int>(e.size()) != cfg.geometry.expression_dim)
      fail(ErrorKind::Config, "infer: expression vectors must have " + std::to_string(cfg.geometry.expression_dim) +
                                  " entries");
  std::uint64_t identity_seed = 0;
  std::string identity_source = "flag";
  if (req.identity_seed) {
    identity_seed = *req.identity_seed;
  } else if (auto s = identity_seed_of_image(req.source_image)) {
    identity_seed = *s;
    identity_source = "dataset";
  } else {
    identity_source = "default";
  }

  torch::NoGradGuard ng;
  auto vae = load_vae(ckpts.vae, cfg);
  auto dit = load_dit(ckpts.dit, cfg);
  auto renderer = load_renderer(ckpts.renderer, cfg);

  const auto source = load_png(req.source_image);
  const auto run_seed = stream_seed(cfg.seed, 0x696e666572ULL);
  auto latent = sample_latent(dit, cfg, source, req.steps, req.guidance, run_seed);
  auto planes = vae->decode(latent);
  auto src = condition_images(source.unsqueeze(0), cfg.motion_renderer.source_resolution);

  json run{{"config_hash", cfg.hash()},
           {"config", cfg.to_json()},
           {"seed", cfg.seed},
           {"steps", req.steps},
           {"guidance", req.guidance},
           {"guidance_text", req.guidance_text},
           {"identity_seed", identity_seed},
           {"identity_seed_source", identity_source},
           {"source_image", file_link(req.source_image)},
           {"checkpoints", {{"vae", file_link(ckpts.vae)}, {"dit", file_link(ckpts.dit)},
                            {"renderer", file_link(ckpts.renderer)}}}};
  run["run_id"] = hash_bytes(run.dump());

  std::error_code ec;
  fs::create_directories(req.out, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + req.out.string() + ": " + ec.message());
  const auto sampling = cfg.sampling();
  json frames = json::array();
  for (std::size_t f = 0; f < req.expressions.size(); ++f) {
    const auto& expr = req.expressions[f];
    auto ras = rasterize_mesh(mesh_from_params(identity_seed, expr, cfg.mesh()), cfg.triplane.resolution);
    auto fused = fuse_batch(planes.unsqueeze(0), ras.grid.unsqueeze(0), ras.mask.unsqueeze(0))[0];
    auto refined = renderer.model->refine(src, planes.unsqueeze(0), torch::tensor(expr, torch::kFloat32).unsqueeze(0))[0];
    auto out = fuse_and_render(refined, fused, renderer.head, req.cameras[f], sampling,
                               stream_seed(run_seed, static_cast<std::uint64_t>(f)));
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.png", f);
    const auto path = req.out / name;
    save_png(path, out.rgb.clamp(0, 1),
             {{"config_hash", cfg.hash()}, {"frame", std::to_string(f)}, {"run_id", run["run_id"]}});
    frames.push_back({{"file", name},
                      {"hash", hash_file(path)},
                      {"expression", expr},
                      {"pose", req.cameras[f].to_json()}});
  }
  run["frames"] = frames;
  write_atomic(req.out / "run.json", run.dump(1) + "\n");
  return run;
}

namespace {

std::vector<double> pose_vector(const CameraPose& p) { return {p.yaw, p.pitch, p.roll}; }

CameraPose pose_from_vector(const torch::Tensor& v, const ExperimentConfig& cfg) {
  CameraPose p;
  p.yaw = v[0].item<double>();
  p.pitch = v[1].item<double>();
  p.roll = v[2].item<double>();
  p.radius = cfg.geometry.radius;
  p.fov = cfg.geometry.fov;
  return p;
}

constexpr double kPoseLambda = 1.0;

// Expression probes look at output planes from one fixed frontal camera, so
// pose does not confound the regression: rgb and depth at 16².
CameraPose probe_camera(const ExperimentConfig& cfg) {
  CameraPose p;
  p.pitch = 0.5 * (cfg.geometry.pitch_min + cfg.geometry.pitch_max);
  p.radius = cfg.geometry.radius;
  p.fov = cfg.geometry.fov;
  return p;
}

torch::Tensor expression_features(const torch::Tensor& planes, RenderHead& head, const ExperimentConfig& cfg) {
  auto o = render(planes, head, probe_camera(cfg), cfg.sampling(), stream_seed(cfg.seed, 0x70726f6265ULL));
  return torch::cat({probe_features(o.rgb.to(torch::kFloat32)), probe_features(o.depth.to(torch::kFloat32).unsqueeze(-1))});
}

// Ridge strength by 5-fold cross-validation with identities held out.
double select_lambda(const torch::Tensor& x, const torch::Tensor& y, const std::vector<int>& groups) {
  double best = 1.0, best_err = std::numeric_limits<double>::infinity();
  for (double lam : {1e-3, 1e-2, 1e-1, 1.0, 10.0}) {
    double err = 0;
    for (int fold = 0; fold < 5; ++fold) {
      std::vector<std::int64_t> tr, te;
      for (std::size_t i = 0; i < groups.size(); ++i) (groups[i] % 5 == fold ? te : tr).push_back(static_cast<std::int64_t>(i));
      if (te.empty() || tr.size() < 2) continue;
      auto ti = torch::tensor(tr), vi = torch::tensor(te);
      RidgeProbe p;
      p.fit(x.index_select(0, ti), y.index_select(0, ti), lam);
      err += (p.predict(x.index_select(0, vi)) - y.index_select(0, vi)).norm(2, 1).sum().item<double>();
    }
    if (err < best_err) best_err = err, best = lam;
  }
  return best;
}

}  // namespace

json evaluate_renderer(const ExperimentConfig& cfg, const fs::path& data_root, const CheckpointSet& ckpts) {
  cfg.validate();
  for (const auto* p : {&ckpts.vae, &ckpts.renderer})
    if (!fs::exists(*p)) fail(ErrorKind::Io, "missing checkpoint " + p->string());
  auto dyn = DatasetManifest::load(data_root / "dynamic");
  validate_manifest(dyn, cfg.data_hash());
  torch::NoGradGuard ng;
  auto vae = load_vae(ckpts.vae, cfg);
  auto renderer = load_renderer(ckpts.renderer, cfg);

  std::vector<torch::Tensor> feats, poses, efeats, exprs;
  std::vector<int> groups;
  std::set<std::pair<int, int>> seen;
  for (const auto& r : dyn.records) {
    if (r.partition != "train") continue;
    feats.push_back(probe_features(load_imgf(dyn.path(r.files.at("rgb")))));
    poses.push_back(torch::tensor(pose_vector(r.pose), torch::kFloat64));
    if (!seen.insert({r.identity, r.expression_index}).second) continue;
    efeats.push_back(expression_features(load_triplane(dyn.path(r.files.at("fused"))).planes, renderer.head, cfg));
    exprs.push_back(torch::tensor(r.expression, torch::kFloat64));
    groups.push_back(r.identity);
  }
  RidgeProbe expr_probe, pose_probe;
  const auto ex_x = torch::stack(efeats), ex_y = torch::stack(exprs);
  const double expr_lambda = select_lambda(ex_x, ex_y, groups);
  expr_probe.fit(ex_x, ex_y, expr_lambda);
  pose_probe.fit(torch::stack(feats), torch::stack(poses), kPoseLambda);

  RendererExamples examples(cfg, dyn, vae);
  const auto sampling = cfg.sampling();
  std::set<int> ids;
  double psnr_full = 0, psnr_abl = 0, ssim_full = 0, ssim_abl = 0;
  double expr_full = 0, expr_abl = 0, expr_gt = 0, pose_err = 0;
  int n = 0;
  for (const auto& r : dyn.records) {
    if (r.partition != "val") continue;
    if (!ids.count(r.identity)) {
      if (static_cast<int>(ids.size()) >= cfg.run.eval_identities) continue;
      ids.insert(r.identity);
    }
    auto ex = examples.get(r);
    auto gt = load_imgf(dyn.path(r.files.at("rgb")));
    auto refined = renderer.model->refine(ex.source_image.unsqueeze(0), ex.recon.unsqueeze(0),
                                          torch::tensor(r.expression, torch::kFloat32).unsqueeze(0))[0];
    auto full = render_example(renderer, cfg, ex, sampling, false).rgb.to(torch::kFloat32).clamp(0, 1);
    auto abl = render_example(renderer, cfg, ex, sampling, true).rgb.to(torch::kFloat32).clamp(0, 1);
    psnr_full += psnr(full, gt);
    psnr_abl += psnr(abl, gt);
    ssim_full += ssim(full, gt);
    ssim_abl += ssim(abl, gt);
    const auto target = torch::tensor(r.expression, torch::kFloat64);
    auto l2 = [&](const torch::Tensor& planes) {
      return (expr_probe.predict(expression_features(planes, renderer.head, cfg).unsqueeze(0))[0] - target)
          .norm()
          .item<double>();
    };
    expr_full += l2(ex.fused_recon + refined);
    expr_abl += l2(ex.fused_recon);
    expr_gt += l2(load_triplane(dyn.path(r.files.at("fused"))).planes);
    pose_err += pose_angular_error(r.pose, pose_from_vector(pose_probe.predict(probe_features(full).unsqueeze(0))[0], cfg));
    ++n;
  }
  if (n == 0) fail(ErrorKind::Validation, "eval: no validation records in " + dyn.root.string());
  MetricsReport rep{psnr_full / n, ssim_full / n, pose_err / n, expr_full / n};
  auto j = rep.to_json();
  j["stage"] = "renderer";
  j["split"] = "val";
  j["records"] = n;
  j["identities"] = static_cast<int>(ids.size());
  j["psnr_ablation"] = psnr_abl / n;
  j["ssim_ablation"] = ssim_abl / n;
  j["expression_error_ablation"] = expr_abl / n;
  j["expression_error_ground_truth"] = expr_gt / n;
  j["expression_spacing"] = cfg.data.expression_scale;
  j["expression_probe_lambda"] = expr_lambda;
  return j;
}

json evaluate_vae(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& vae_ckpt) {
  cfg.validate();
  auto m = DatasetManifest::load(pairs_dir(data_root));
  validate_manifest(m, cfg.data_hash());
  torch::NoGradGuard ng;
  auto vae = load_vae(vae_ckpt, cfg);
  auto head = load_oracle(m.path("oracle.ckpt"), cfg);
  auto records = vae_training_records(m, cfg);
  if (cfg.vae.train_limit <= 0 && static_cast<int>(records.size()) > cfg.run.eval_identities)
    records.resize(static_cast<std::size_t>(cfg.run.eval_identities));
  const auto sampling = cfg.sampling();
  double p = 0, s = 0, l1 = 0;
  for (const auto* r : records) {
    auto x = load_triplane(m.path(r->files.at("triplane"))).planes;
    auto recon = vae->decode(vae->encode(x).mean)[0];
    auto ras = rasterize_mesh(mesh_from_params(r->identity_seed, r->expression, cfg.mesh()), cfg.triplane.resolution);
    auto g = ras.grid.unsqueeze(0), mk = ras.mask.unsqueeze(0);
    const auto seed = stream_seed(cfg.seed, 0x6576616c000000ULL + static_cast<std::uint64_t>(r->index));
    auto a = render(fuse_batch(x.unsqueeze(0), g, mk)[0], head, r->pose, sampling, seed).rgb.to(torch::kFloat32);
    auto b = render(fuse_batch(recon.unsqueeze(0), g, mk)[0], head, r->pose, sampling, seed).rgb.to(torch::kFloat32);
    p += psnr(b.clamp(0, 1), a.clamp(0, 1));
    s += ssim(b.clamp(0, 1), a.clamp(0, 1));
    l1 += (recon - x).abs().mean().item<double>();
  }
  const double n = static_cast<double>(records.size());
  return {{"stage", "vae"}, {"split", "train"}, {"records", records.size()}, {"psnr", p / n},
          {"ssim", s / n}, {"l1_triplane", l1 / n}};
}

namespace {

struct Checks {
  json list = json::array();
  bool ok = true;
  void add(const std::string& what, bool pass, const std::string& detail = "") {
    list.push_back({{"check", what}, {"pass", pass}, {"detail", detail}});
    ok = ok && pass;
  }
};

void inspect_dataset(const json& link, const std::string& data_hash, Checks& c, json& chain) {
  const fs::path dir = link.at("path").get<std::string>();
  const bool exists = fs::exists(dir / "manifest.json");
  c.add("dataset " + dir.string() + " exists", exists);
  if (!exists) return;
  c.add("dataset manifest hash", hash_file(dir / "manifest.json") == link.value("manifest_hash", std::string()));
  auto m = DatasetManifest::load(dir);
  c.add("dataset config hash matches checkpoint", m.config_hash == data_hash);
  try {
    validate_manifest(m, data_hash);
    c.add("dataset files rehash", true);
  } catch (const Error& e) {
    c.add("dataset files rehash", false, e.what());
  }
  chain.push_back({{"dataset", dir.string()}, {"split", m.split}, {"seed", m.seed}, {"data_hash", m.config_hash}});
}

void inspect_checkpoint(const fs::path& path, const std::string& expected_hash, Checks& c, json& chain, int depth) {
  const bool exists = fs::exists(path);
  c.add("checkpoint " + path.string() + " exists", exists);
  if (!exists) return;
  const auto h = read_header(path);
  if (!expected_hash.empty()) c.add("checkpoint " + path.filename().string() + " hash", hash_file(path) == expected_hash);
  json node{{"checkpoint", path.string()}, {"module", h.value("module", std::string())},
            {"config_hash", h.value("config_hash", std::string())}, {"step", h.value("step", 0)}};
  if (h.contains("config")) {
    try {
      auto cfg = ExperimentConfig::from_json(h["config"]);
      c.add(path.filename().string() + " embedded config reproduces its hash", cfg.hash() == h.value("config_hash", ""));
      c.add(path.filename().string() + " data hash", cfg.data_hash() == h.value("data_hash", ""));
      node["seed"] = cfg.seed;
    } catch (const Error& e) {
      c.add(path.filename().string() + " embedded config parses", false, e.what());
    }
  }
  chain.push_back(node);
  if (h.contains("datasets"))
    for (const auto& d : h["datasets"]) inspect_dataset(d, h.value("data_hash", std::string()), c, chain);
  if (h.contains("parent") && depth < 4)
    inspect_checkpoint(h["parent"].at("path").get<std::string>(), h["parent"].value("hash", std::string()), c, chain,
                       depth + 1);
}

void inspect_run(const fs::path& dir, const std::string& frame, Checks& c, json& chain) {
  const auto run_path = dir / "run.json";
  c.add("run.json present", fs::exists(run_path));
  if (!fs::exists(run_path)) return;
  const auto run = json::parse(read_file(run_path));
  auto stripped = run;
  stripped.erase("frames");
  stripped.erase("run_id");
  c.add("run id reproduces", hash_bytes(stripped.dump()) == run.value("run_id", std::string()));
  auto cfg = ExperimentConfig::from_json(run.at("config"));
  c.add("run config reproduces its hash", cfg.hash() == run.value("config_hash", std::string()));
  chain.push_back({{"run", dir.string()}, {"run_id", run.value("run_id", std::string())}, {"seed", run.at("seed")},
                   {"guidance", run.at("guidance")}});
  for (const auto& f : run.at("frames")) {
    const auto name = f.at("file").get<std::string>();
    if (!frame.empty() && name != frame) continue;
    const auto p = dir / name;
    const bool ok = fs::exists(p) && hash_file(p) == f.value("hash", std::string());
    c.add("frame " + name + " hash", ok);
    if (fs::exists(p)) {
      std::vector<std::pair<std::string, std::string>> text;
      (void)load_png(p, &text);
      std::string ch, rid;
      for (const auto& [k, v] : text) {
        if (k == "config_hash") ch = v;
        if (k == "run_id") rid = v;
      }
      c.add("frame " + name + " embeds the run config hash", ch == run.value("config_hash", std::string()));
      c.add("frame " + name + " embeds the run id", rid == run.value("run_id", std::string()));
    }
  }
  const auto& src = run.at("source_image");
  const fs::path sp = src.at("path").get<std::string>();
  c.add("source image hash", fs::exists(sp) && hash_file(sp) == src.value("hash", std::string()));
  for (const auto& [stage, link] : run.at("checkpoints").items()) {
    const fs::path cp = link.at("path").get<std::string>();
    inspect_checkpoint(cp, link.value("hash", std::string()), c, chain, 0);
    if (fs::exists(cp))
      c.add(stage + " checkpoint config hash equals run", read_header(cp).value("config_hash", "") == run.value("config_hash", ""));
  }
}

}  // namespace

json inspect_artifact(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::Io, "no such artifact " + path.string());
  Checks c;
  json chain = json::array();
  std::string kind;
  if (fs::is_directory(path)) {
    if (fs::exists(path / "run.json")) {
      kind = "run";
      inspect_run(path, "", c, chain);
    } else if (fs::exists(path / "manifest.json")) {
      kind = "dataset";
      auto m = DatasetManifest::load(path);
      inspect_dataset({{"path", fs::absolute(path).lexically_normal().string()},
                       {"manifest_hash", hash_file(path / "manifest.json")}},
                      m.config_hash, c, chain);
    } else {
      fail(ErrorKind::Validation, path.string() + ": neither a run nor a dataset directory");
    }
  } else if (path.extension() == ".png") {
    kind = "frame";
    std::vector<std::pair<std::string, std::string>> text;
    (void)load_png(path, &text);
    bool has_hash = false;
    for (const auto& [k, v] : text) has_hash = has_hash || k == "config_hash";
    c.add("frame embeds a config hash", has_hash);
    if (fs::exists(path.parent_path() / "run.json"))
      inspect_run(path.parent_path(), path.filename().string(), c, chain);
    else if (fs::exists(path.parent_path().parent_path() / "manifest.json")) {
      kind = "dataset image";
      auto m = DatasetManifest::load(path.parent_path().parent_path());
      inspect_dataset({{"path", fs::absolute(m.root).lexically_normal().string()},
                       {"manifest_hash", hash_file(m.root / "manifest.json")}},
                      m.config_hash, c, chain);
    } else {
      c.add("provenance record found", false);
    }
  } else if (path.extension() == ".ckpt") {
    kind = "checkpoint";
    inspect_checkpoint(path, "", c, chain, 0);
  } else {
    fail(ErrorKind::Validation, path.string() + ": unknown artifact type");
  }
  return {{"artifact", path.string()}, {"kind", kind}, {"verified", c.ok}, {"checks", c.list}, {"chain", chain}};
}

}  // namespace avatar
