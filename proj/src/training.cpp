#include "avatar/training.hpp"

#include <map>

#include "avatar/geometry.hpp"
#include "avatar/triplane.hpp"
#include "avatar/volume_renderer.hpp"

namespace avatar {

JsonlLog::JsonlLog(const fs::path& path) : start_(std::chrono::steady_clock::now()) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  out_.open(path, std::ios::trunc);
  if (!out_) fail(ErrorKind::Io, "cannot open log " + path.string());
}

void JsonlLog::step(int step, const json& losses, double lr) {
  const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  out_ << json{{"step", step}, {"losses", losses}, {"lr", lr}, {"wall_ms", std::round(ms)}}.dump() << '\n';
  out_.flush();
}

void JsonlLog::event(const json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
}

fs::path pairs_dir(const fs::path& data_root) { return data_root / "pairs"; }

void check_config_hash(const CheckpointFile& ck, const ExperimentConfig& cfg, const fs::path& path) {
  if (ck.config_hash() != cfg.hash())
    fail(ErrorKind::Validation, path.string() + ": checkpoint config hash " + ck.config_hash().substr(0, 16) +
                                    " does not match the active config " + cfg.hash().substr(0, 16));
}

torch::Tensor fuse_batch(const torch::Tensor& planes, const torch::Tensor& grid, const torch::Tensor& mask) {
  return fuse_planes(planes.slice(1, 0, 3), planes.select(1, kTextureGroup), grid, mask);
}

std::vector<const DatasetRecord*> vae_training_records(const DatasetManifest& m, const ExperimentConfig& cfg) {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : m.records)
    if (r.partition == "train") out.push_back(&r);
  if (cfg.vae.train_limit > 0 && static_cast<int>(out.size()) > cfg.vae.train_limit)
    out.resize(static_cast<std::size_t>(cfg.vae.train_limit));
  if (out.empty()) fail(ErrorKind::Validation, "vae: no training records in " + m.root.string());
  return out;
}

namespace {

SamplingConfig vae_sampling(const ExperimentConfig& cfg) {
  auto s = cfg.sampling();
  s.render_resolution = cfg.vae.render_resolution;
  s.n_coarse = cfg.vae.render_coarse;
  s.n_fine = cfg.vae.render_fine;
  return s;
}

json meta_for(const ExperimentConfig& cfg, const std::string& stage, int step) {
  return json{{"config_hash", cfg.hash()}, {"data_hash", cfg.data_hash()}, {"config", cfg.to_json()},
              {"stage", stage}, {"step", step}};
}

json dataset_link(const DatasetManifest& m) {
  return {{"split", m.split},
          {"path", fs::absolute(m.root).lexically_normal().string()},
          {"manifest_hash", hash_file(m.root / "manifest.json")},
          {"seed", m.seed}};
}

}  // namespace

TriplaneVae load_vae(const fs::path& path, const ExperimentConfig& cfg) {
  auto ck = load_checkpoint(path);
  check_config_hash(ck, cfg, path);
  TriplaneVae vae(cfg);
  load_module(ck, "vae", *vae);
  vae->eval();
  return vae;
}

TrainResult train_vae(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& out,
                      const StepHook& hook) {
  cfg.validate();
  auto manifest = DatasetManifest::load(pairs_dir(data_root));
  validate_manifest(manifest, cfg.data_hash());
  const auto records = vae_training_records(manifest, cfg);
  auto head = load_oracle(manifest.path("oracle.ckpt"), cfg);
  const auto sampling = vae_sampling(cfg);
  const auto mesh_cfg = cfg.mesh();
  auto perceptual = make_perceptual("gradient_l1");

  torch::manual_seed(static_cast<std::int64_t>(stream_seed(cfg.seed, 0x766165ULL) >> 1));
  TriplaneVae vae(cfg);
  vae->train();
  torch::optim::AdamW opt(vae->parameters(),
                          torch::optim::AdamWOptions(cfg.vae.lr).weight_decay(cfg.vae.weight_decay));

  std::map<int, MeshRaster> rasters;
  auto raster_for = [&](const DatasetRecord& r) -> const MeshRaster& {
    auto it = rasters.find(r.index);
    if (it == rasters.end())
      it = rasters.emplace(r.index, rasterize_mesh(mesh_from_params(r.identity_seed, r.expression, mesh_cfg),
                                                   cfg.triplane.resolution))
               .first;
    return it->second;
  };

  JsonlLog log(out / "vae_log.jsonl");
  Rng rng(stream_seed(cfg.seed, 0x7661652d62617463ULL));
  json last;
  const int B = cfg.vae.batch;
  for (int step = 1; step <= cfg.vae.steps; ++step) {
    std::vector<torch::Tensor> xs, grids, masks;
    std::vector<CameraPose> poses;
    for (int b = 0; b < B; ++b) {
      const auto& rec = *records[rng.next_u64() % records.size()];
      xs.push_back(load_triplane(manifest.path(rec.files.at("triplane"))).planes);
      const auto& ras = raster_for(rec);
      grids.push_back(ras.grid);
      masks.push_back(ras.mask);
      poses.push_back(sample_camera_pose(rng, cfg.pose_ranges()));
    }
    auto x = torch::stack(xs);
    auto grid = torch::stack(grids), mask = torch::stack(masks);

    auto lat = vae->encode(x, torch_generator(stream_seed(cfg.seed, 0x65707300ULL + static_cast<std::uint64_t>(step))));
    auto recon = vae->decode(lat.sample);
    auto fused_gt = fuse_batch(x, grid, mask);
    auto fused_rc = fuse_batch(recon, grid, mask);

    std::vector<torch::Tensor> img_gt, img_rc, dep_gt, dep_rc;
    for (int b = 0; b < B; ++b) {
      const auto seed = stream_seed(cfg.seed, static_cast<std::uint64_t>(step) * 64 + static_cast<std::uint64_t>(b));
      RenderOutput gt;
      {
        torch::NoGradGuard ng;
        gt = render(fused_gt[b], head, poses[b], sampling, seed);
      }
      auto rc = render(fused_rc[b], head, poses[b], sampling, seed);
      img_gt.push_back(gt.rgb);
      dep_gt.push_back(gt.depth);
      img_rc.push_back(rc.rgb);
      dep_rc.push_back(rc.depth);
    }
    VaeRenderPairs pairs{torch::stack(img_gt).to(torch::kFloat32), torch::stack(img_rc).to(torch::kFloat32),
                         torch::stack(dep_gt).to(torch::kFloat32), torch::stack(dep_rc).to(torch::kFloat32)};
    auto rep = vae_loss(x, recon, pairs, lat, *perceptual, VaeLossWeights{1, 1, 1, cfg.vae.kl_weight});
    if (!std::isfinite(rep.total.item<double>()))
      fail(ErrorKind::Numeric, "vae: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    rep.total.backward();
    opt.step();

    last = rep.to_json();
    if (step % cfg.run.log_every == 0 || step == cfg.vae.steps) log.step(step, last, cfg.vae.lr);
    if (hook) hook(step, last);
    if (cfg.run.checkpoint_every > 0 && step % cfg.run.checkpoint_every == 0 && step != cfg.vae.steps)
      save_checkpoint(out / ("vae_step" + std::to_string(step) + ".ckpt"), "vae", {{"vae", vae.get()}},
                      meta_for(cfg, "vae", step));
  }
  TrainResult res;
  res.checkpoint = out / "vae.ckpt";
  res.steps = cfg.vae.steps;
  res.final_losses = last;
  auto meta = meta_for(cfg, "vae", cfg.vae.steps);
  meta["datasets"] = json::array({dataset_link(manifest)});
  save_checkpoint(res.checkpoint, "vae", {{"vae", vae.get()}}, meta);
  return res;
}

torch::Tensor condition_images(const torch::Tensor& images, int resolution) {
  auto x = images.permute({0, 3, 1, 2}).to(torch::kFloat32);
  if (x.size(2) != resolution || x.size(3) != resolution)
    x = torch::nn::functional::adaptive_avg_pool2d(
        x, torch::nn::functional::AdaptiveAvgPool2dFuncOptions({resolution, resolution}));
  return x.permute({0, 2, 3, 1}).contiguous();
}

namespace {

torch::Tensor load_condition(const fs::path& png, int resolution) {
  return condition_images(load_png(png).unsqueeze(0), resolution)[0];
}

json meta_with_parent(const ExperimentConfig& cfg, const std::string& stage, int step, const fs::path& parent) {
  auto m = meta_for(cfg, stage, step);
  m["parent"] = {{"path", fs::absolute(parent).lexically_normal().string()}, {"hash", hash_file(parent)}};
  return m;
}

}  // namespace

TrainResult train_dit(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& vae_ckpt,
                      const fs::path& out, const StepHook& hook) {
  cfg.validate();
  auto manifest = DatasetManifest::load(pairs_dir(data_root));
  validate_manifest(manifest, cfg.data_hash());
  auto vae = load_vae(vae_ckpt, cfg);
  std::vector<const DatasetRecord*> records;
  for (const auto& r : manifest.records)
    if (r.partition == "train") records.push_back(&r);
  if (records.empty()) fail(ErrorKind::Validation, "dit: no training records in " + manifest.root.string());

  std::vector<torch::Tensor> latents, images;
  {
    torch::NoGradGuard ng;
    for (const auto* r : records) {
      latents.push_back(vae->encode(load_triplane(manifest.path(r->files.at("triplane"))).planes).mean[0]);
      images.push_back(load_condition(manifest.path(r->files.at("image")), cfg.dit.condition_resolution));
    }
  }
  auto all = torch::stack(latents);
  const double scale = 1.0 / std::max(all.std().item<double>(), 1e-6);
  const auto schedule = cfg.schedule();

  torch::manual_seed(static_cast<std::int64_t>(stream_seed(cfg.seed, 0x646974ULL) >> 1));
  Dit dit(cfg);
  dit->train();
  torch::optim::AdamW opt(dit->parameters(),
                          torch::optim::AdamWOptions(cfg.dit.lr).weight_decay(cfg.dit.weight_decay));
  JsonlLog log(out / "dit_log.jsonl");
  Rng rng(stream_seed(cfg.seed, 0x6469742d62617463ULL));
  json last;
  const int B = cfg.dit.batch, T = schedule.steps();
  std::int64_t dropped = 0, seen = 0;
  for (int step = 1; step <= cfg.dit.steps; ++step) {
    std::vector<torch::Tensor> xs, cs;
    std::vector<std::int64_t> ts;
    for (int b = 0; b < B; ++b) {
      const auto i = rng.next_u64() % records.size();
      xs.push_back(latents[i]);
      cs.push_back(images[i]);
      ts.push_back(1 + static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(T)));
    }
    auto drop = sample_drop_mask(rng, B, cfg.dit.drop_prob);
    dropped += drop.sum().item<std::int64_t>();
    seen += B;
    auto x0 = torch::stack(xs) * scale;
    auto t = torch::tensor(ts, torch::kInt64);
    auto noise = torch::randn(x0.sizes(), torch_generator(stream_seed(cfg.seed, 0x6e6f697365000000ULL + static_cast<std::uint64_t>(step))),
                              x0.options());
    auto x_t = q_sample(schedule, x0, t, noise);
    auto cond = dit->apply_drop(dit->encode_condition(torch::stack(cs)), drop);
    auto pred = dit->forward(x_t, t.to(torch::kFloat32), cond);
    auto loss = iddpm_loss(schedule, pred, x0, x_t, t, noise, cfg.diffusion.lambda_vlb);
    if (!std::isfinite(loss.total.item<double>()))
      fail(ErrorKind::Numeric, "dit: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    loss.total.backward();
    opt.step();
    last = {{"l_simple", loss.l_simple.item<double>()},
            {"l_vlb", loss.l_vlb.item<double>()},
            {"total", loss.total.item<double>()},
            {"null_fraction", static_cast<double>(dropped) / static_cast<double>(seen)}};
    if (step % cfg.run.log_every == 0 || step == cfg.dit.steps) log.step(step, last, cfg.dit.lr);
    if (hook) hook(step, last);
  }
  TrainResult res;
  res.checkpoint = out / "dit.ckpt";
  res.steps = cfg.dit.steps;
  res.final_losses = last;
  auto meta = meta_with_parent(cfg, "dit", cfg.dit.steps, vae_ckpt);
  meta["latent_scale"] = scale;
  meta["datasets"] = json::array({dataset_link(manifest)});
  meta["schedule"] = schedule.to_json();
  save_checkpoint(res.checkpoint, "dit", {{"dit", dit.get()}}, meta);
  return res;
}

LoadedDit load_dit(const fs::path& path, const ExperimentConfig& cfg) {
  auto ck = load_checkpoint(path);
  check_config_hash(ck, cfg, path);
  LoadedDit d;
  d.model = Dit(cfg);
  load_module(ck, "dit", *d.model);
  d.model->eval();
  d.latent_scale = ck.header.at("latent_scale").get<double>();
  return d;
}

torch::Tensor sample_latent(LoadedDit& dit, const ExperimentConfig& cfg, const torch::Tensor& image, int steps,
                            double guidance, std::uint64_t seed) {
  torch::NoGradGuard ng;
  const auto schedule = cfg.schedule();
  auto cond = dit.model->encode_condition(condition_images(image.unsqueeze(0), cfg.dit.condition_resolution));
  auto null = dit.model->null_condition(1);
  const auto& L = dit.model->layout;
  auto x_T = torch::randn({1, L.planes, L.height, L.width, L.channels}, torch_generator(seed), torch::kFloat32);
  EpsModel model = [&](const torch::Tensor& x, double t, bool conditional) {
    auto tt = torch::full({x.size(0)}, t, torch::kFloat32);
    return dit.model->forward(x, tt, conditional ? cond : null).eps;
  };
  auto z = dpm_solver_sample(model, schedule, steps, guidance, x_T);
  return (z / dit.latent_scale)[0];
}

const DatasetRecord& source_record(const DatasetManifest& m, const DatasetRecord& r, std::uint64_t seed) {
  std::vector<const DatasetRecord*> other_expr, other_view;
  for (const auto& c : m.records) {
    if (c.identity != r.identity || c.index == r.index) continue;
    (c.expression_index != r.expression_index ? other_expr : other_view).push_back(&c);
  }
  const auto& pool = other_expr.empty() ? other_view : other_expr;
  if (pool.empty()) fail(ErrorKind::Validation, "renderer: identity " + std::to_string(r.identity) + " has one record");
  Rng rng(stream_seed(seed, 0x737263000000ULL + static_cast<std::uint64_t>(r.index)));
  return *pool[rng.next_u64() % pool.size()];
}

RendererExamples::RendererExamples(const ExperimentConfig& cfg, const DatasetManifest& m, TriplaneVae& vae)
    : cfg_(cfg), m_(m), vae_(vae) {}

RendererExample RendererExamples::get(const DatasetRecord& r) {
  torch::NoGradGuard ng;
  RendererExample ex;
  ex.record = &r;
  ex.source = &source_record(m_, r, cfg_.seed);
  ex.source_image = condition_images(load_png(m_.path(ex.source->files.at("image"))).unsqueeze(0),
                                     cfg_.motion_renderer.source_resolution)[0];
  auto it = recon_.find(r.identity);
  if (it == recon_.end()) {
    const auto& id = m_.identities.at(static_cast<std::size_t>(r.identity));
    auto planes = load_triplane(m_.path(id.triplane)).planes;
    it = recon_.emplace(r.identity, vae_->decode(vae_->encode(planes).mean)[0]).first;
  }
  ex.recon = it->second;
  const auto key = std::make_pair(r.identity, r.expression_index);
  auto rit = rasters_.find(key);
  if (rit == rasters_.end())
    rit = rasters_.emplace(key, rasterize_mesh(mesh_from_params(r.identity_seed, r.expression, cfg_.mesh()),
                                               cfg_.triplane.resolution))
              .first;
  ex.fused_recon = fuse_batch(ex.recon.unsqueeze(0), rit->second.grid.unsqueeze(0), rit->second.mask.unsqueeze(0))[0];
  return ex;
}

RenderOutput render_example(LoadedRenderer& r, const ExperimentConfig& cfg, const RendererExample& ex,
                            const SamplingConfig& sampling, bool ablate) {
  torch::Tensor refined;
  if (!ablate)
    refined = r.model->refine(ex.source_image.unsqueeze(0), ex.recon.unsqueeze(0),
                              torch::tensor(ex.record->expression, torch::kFloat32).unsqueeze(0))[0];
  return fuse_and_render(refined, ex.fused_recon, r.head, ex.record->pose, sampling,
                         stream_seed(cfg.seed, 0x72656e6465720000ULL + static_cast<std::uint64_t>(ex.record->index)));
}

namespace {

torch::Tensor area_resize(const torch::Tensor& hwc, std::int64_t size) {
  if (hwc.size(0) == size) return hwc;
  auto x = hwc.permute({2, 0, 1}).unsqueeze(0);
  x = torch::nn::functional::adaptive_avg_pool2d(x, torch::nn::functional::AdaptiveAvgPool2dFuncOptions({size, size}));
  return x[0].permute({1, 2, 0}).contiguous();
}

struct RendererTarget {
  torch::Tensor image, feature, planes, depth, opacity;
};

RendererTarget load_target(const DatasetManifest& m, const DatasetRecord& r, int res) {
  RendererTarget t;
  t.image = area_resize(load_imgf(m.path(r.files.at("rgb"))), 2 * res);
  t.feature = area_resize(load_imgf(m.path(r.files.at("feature"))), res);
  t.depth = area_resize(load_imgf(m.path(r.files.at("depth"))), res).squeeze(-1);
  t.opacity = area_resize(load_imgf(m.path(r.files.at("opacity"))), res).squeeze(-1);
  t.planes = load_triplane(m.path(r.files.at("fused"))).planes;
  return t;
}

}  // namespace

TrainResult train_renderer(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& vae_ckpt,
                           const fs::path& out, const StepHook& hook) {
  cfg.validate();
  auto dyn = DatasetManifest::load(data_root / "dynamic");
  auto sta = DatasetManifest::load(data_root / "static");
  validate_manifest(dyn, cfg.data_hash());
  validate_manifest(sta, cfg.data_hash());
  auto vae = load_vae(vae_ckpt, cfg);
  LoadedRenderer lr;
  lr.head = load_oracle(dyn.path("oracle.ckpt"), cfg);

  // Batches alternate dynamic and static records.
  RendererExamples dyn_ex(cfg, dyn, vae), sta_ex(cfg, sta, vae);
  std::vector<const DatasetRecord*> dyn_pool, sta_pool;
  for (const auto& r : dyn.records)
    if (r.partition == "train") dyn_pool.push_back(&r);
  for (const auto& r : sta.records)
    if (r.partition == "train") sta_pool.push_back(&r);
  if (dyn_pool.empty() || sta_pool.empty()) fail(ErrorKind::Validation, "renderer: no training records");

  torch::manual_seed(static_cast<std::int64_t>(stream_seed(cfg.seed, 0x6d6f74696f6eULL) >> 1));
  lr.model = MotionRenderer(cfg);
  lr.model->train();
  PatchDiscriminator disc;
  const auto& mc = cfg.motion_renderer;
  auto adam = torch::optim::AdamOptions(mc.lr).betas({mc.beta1, mc.beta2});
  torch::optim::Adam opt(lr.model->parameters(), adam);
  torch::optim::Adam opt_d(disc->parameters(), adam);
  // Decoder and upsampler stay fixed until the adversarial phase.
  auto head_params = lr.head.decoder->parameters();
  for (auto& p : lr.head.upsampler->parameters()) head_params.push_back(p);
  torch::optim::Adam opt_head(head_params, adam);
  const auto weights = RendererLossWeights::from_config(cfg);
  auto perceptual = make_perceptual("gradient_l1");

  JsonlLog log(out / "renderer_log.jsonl");
  Rng rng(stream_seed(cfg.seed, 0x72656e2d62617463ULL));
  json last;
  for (int step = 1; step <= mc.steps; ++step) {
    const int res = renderer_resolution(cfg, step, mc.steps);
    auto sampling = cfg.sampling();
    sampling.render_resolution = res;
    const bool adv = adversarial_active(step, mc.adv_start_step);
    for (auto& p : head_params) p.set_requires_grad(adv);
    std::vector<torch::Tensor> o_img, o_feat, o_pl, o_dep, o_opa, t_img, t_feat, t_pl, t_dep, t_opa;
    for (int b = 0; b < mc.batch; ++b) {
      const auto& pool = b % 2 == 0 ? dyn_pool : sta_pool;
      auto* src = b % 2 == 0 ? &dyn_ex : &sta_ex;
      const auto* rec = pool[rng.next_u64() % pool.size()];
      auto ex = src->get(*rec);
      auto tgt = load_target(src->manifest(), *rec, res);
      auto refined = lr.model->refine(ex.source_image.unsqueeze(0), ex.recon.unsqueeze(0),
                                      torch::tensor(rec->expression, torch::kFloat32).unsqueeze(0))[0];
      auto planes = ex.fused_recon + refined;
      auto o = render(planes, lr.head, rec->pose, sampling,
                      stream_seed(cfg.seed, static_cast<std::uint64_t>(step) * 64 + static_cast<std::uint64_t>(b)));
      o_img.push_back(o.rgb.to(torch::kFloat32));
      o_feat.push_back(o.feature_image.to(torch::kFloat32));
      o_pl.push_back(planes);
      o_dep.push_back(o.depth.to(torch::kFloat32));
      o_opa.push_back(o.opacity.to(torch::kFloat32));
      t_img.push_back(tgt.image);
      t_feat.push_back(tgt.feature);
      t_pl.push_back(tgt.planes);
      t_dep.push_back(tgt.depth);
      t_opa.push_back(tgt.opacity);
    }
    RendererOutputs outs{torch::stack(o_img), torch::stack(o_feat), torch::stack(o_pl), torch::stack(o_dep),
                         torch::stack(o_opa)};
    RendererOutputs tgts{torch::stack(t_img), torch::stack(t_feat), torch::stack(t_pl), torch::stack(t_dep),
                         torch::stack(t_opa)};
    torch::Tensor fake_logits;
    if (adv) {
      for (auto& p : disc->parameters()) p.set_requires_grad(false);
      fake_logits = disc->forward(outs.image);
    }
    auto rep = renderer_loss(outs, tgts, step, mc.adv_start_step, fake_logits, *perceptual, weights);
    if (!std::isfinite(rep.total.item<double>()))
      fail(ErrorKind::Numeric, "renderer: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    opt_head.zero_grad();
    rep.total.backward();
    opt.step();
    if (adv) opt_head.step();
    last = rep.to_json();
    last["resolution"] = res;
    if (adv) {
      for (auto& p : disc->parameters()) p.set_requires_grad(true);
      auto d_loss = torch::softplus(-disc->forward(tgts.image)).mean() +
                    torch::softplus(disc->forward(outs.image.detach())).mean();
      opt_d.zero_grad();
      d_loss.backward();
      opt_d.step();
      last["l_disc"] = d_loss.item<double>();
    }
    if (step % cfg.run.log_every == 0 || step == mc.steps) log.step(step, last, mc.lr);
    if (hook) hook(step, last);
  }
  TrainResult res;
  res.checkpoint = out / "renderer.ckpt";
  res.steps = mc.steps;
  res.final_losses = last;
  save_checkpoint(res.checkpoint, "renderer",
                  {{"motion_renderer", lr.model.get()},
                   {"decoder", lr.head.decoder.get()},
                   {"upsampler", lr.head.upsampler.get()},
                   {"discriminator", disc.get()}},
                  [&] {
                    auto m = meta_with_parent(cfg, "renderer", mc.steps, vae_ckpt);
                    m["datasets"] = json::array({dataset_link(dyn), dataset_link(sta)});
                    return m;
                  }());
  return res;
}

LoadedRenderer load_renderer(const fs::path& path, const ExperimentConfig& cfg) {
  auto ck = load_checkpoint(path);
  check_config_hash(ck, cfg, path);
  LoadedRenderer r;
  r.model = MotionRenderer(cfg);
  load_module(ck, "motion_renderer", *r.model);
  r.model->eval();
  r.head.decoder = FeatureDecoder(cfg.triplane.channels, cfg.renderer.features, cfg.renderer.decoder_hidden);
  r.head.upsampler = Upsampler(cfg.renderer.features);
  load_module(ck, "decoder", *r.head.decoder);
  load_module(ck, "upsampler", *r.head.upsampler);
  return r;
}

double vae_reconstruction_l1(TriplaneVae& vae, const std::vector<fs::path>& triplanes) {
  torch::NoGradGuard ng;
  double total = 0.0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < triplanes.size(); i += 8) {
    std::vector<torch::Tensor> xs;
    for (std::size_t j = i; j < std::min(triplanes.size(), i + 8); ++j) xs.push_back(load_triplane(triplanes[j]).planes);
    auto x = torch::stack(xs);
    auto recon = vae->decode(vae->encode(x).sample);
    total += (recon - x).abs().sum().item<double>();
    count += x.numel();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace avatar
