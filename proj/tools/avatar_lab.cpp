#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iostream>

#include "avatar/pipeline.hpp"

using namespace avatar;

namespace {

constexpr int kExitUsage = 64;
constexpr int kExitConfig = 65;
constexpr int kExitIo = 66;
constexpr int kExitNumeric = 70;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return kExitUsage;
    case ErrorKind::Config: return kExitConfig;
    case ErrorKind::Io: return kExitIo;
    case ErrorKind::Numeric: return kExitNumeric;
    case ErrorKind::Shape:
    case ErrorKind::Validation: return kExitConfig;
  }
  return kExitNumeric;
}

void emit(const json& record) { std::cout << record.dump() << std::endl; }

void emit_error(const std::string& command, ErrorKind kind, const std::string& message) {
  std::cerr << json{{"event", "error"}, {"command", command}, {"kind", to_string(kind)},
                    {"exit_code", exit_code(kind)}, {"message", message}}
                   .dump()
            << std::endl;
}

fs::path default_data_root() {
  if (const char* env = std::getenv("AVATAR_LAB_CACHE"); env && *env) return env;
  return "avatar_cache";
}

struct Common {
  std::string config, preset = "desk";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string out, data;

  ExperimentConfig load() const {
    auto cfg = config.empty() ? ExperimentConfig::preset_named(preset) : ExperimentConfig::load(config);
    if (seed) cfg.seed = *seed;
    for (const auto& s : sets) cfg.set(s);
    cfg.validate();
    return cfg;
  }
  fs::path data_root() const { return data.empty() ? default_data_root() : fs::path(data); }
};

void add_common(CLI::App* sub, Common& c, bool with_data) {
  sub->add_option("--config", c.config, "YAML config file");
  sub->add_option("--preset", c.preset, "preset used when no config file is given (desk|paper)");
  sub->add_option("--seed", c.seed, "master seed (overrides the config)");
  sub->add_option("--set", c.sets, "section.key=value override, repeatable, last wins");
  sub->add_option("--out", c.out, "output location");
  if (with_data) sub->add_option("--data", c.data, "dataset root (default $AVATAR_LAB_CACHE)");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path need_out(const Common& c, const std::string& fallback) {
  return c.out.empty() ? fs::path(fallback) : fs::path(c.out);
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"avatar_lab: synthetic 4D avatar pipeline"};
  app.require_subcommand(1);
  app.allow_extras(false);

  Common common;
  std::string split = "all";
  auto* gen = app.add_subcommand("generate-data", "generate the pairs, dynamic and static splits");
  add_common(gen, common, false);
  gen->add_option("--split", split, "pairs|views|all")->check(CLI::IsMember({"pairs", "views", "all"}));

  std::optional<int> steps_override;
  std::string ckpt_dir;
  auto* tvae = app.add_subcommand("train-vae", "train the triplane VAE");
  add_common(tvae, common, true);
  tvae->add_option("--steps", steps_override, "override vae.steps");
  auto* tdit = app.add_subcommand("train-dit", "train the diffusion transformer");
  add_common(tdit, common, true);
  tdit->add_option("--steps", steps_override, "override dit.steps");
  tdit->add_option("--checkpoints", ckpt_dir, "directory holding vae.ckpt (default --out)");
  auto* tren = app.add_subcommand("train-renderer", "train the motion-aware renderer");
  add_common(tren, common, true);
  tren->add_option("--steps", steps_override, "override motion_renderer.steps");
  tren->add_option("--checkpoints", ckpt_dir, "directory holding vae.ckpt (default --out)");

  InferRequest req;
  std::string source, expr_track, cam_track, guidance_text;
  int frames = 8;
  std::optional<int> sample_steps;
  std::optional<std::uint64_t> identity_seed;
  auto* inf = app.add_subcommand("infer", "image → triplane → animated frames");
  add_common(inf, common, false);
  inf->add_option("--checkpoints", ckpt_dir, "directory holding vae/dit/renderer checkpoints")->required();
  inf->add_option("--source", source, "source image (PNG)")->required();
  inf->add_option("--expressions", expr_track, "JSON list of expression vectors");
  inf->add_option("--cameras", cam_track, "JSON list of camera poses");
  inf->add_option("--frames", frames, "frames of the default track when no tracks are given");
  inf->add_option("--steps", sample_steps, "solver steps (default diffusion.sample_steps)");
  inf->add_option("--guidance", guidance_text, "guidance scale (default diffusion.guidance)");
  inf->add_option("--identity-seed", identity_seed, "mesh identity seed");

  std::string triplane_path, head_path;
  int expression_index = 0;
  double yaw = 0, pitch = 0.2, roll = 0;
  auto* ren = app.add_subcommand("render", "render a parametric triplane with a render head");
  add_common(ren, common, true);
  ren->add_option("--triplane", triplane_path, "TRIP1 parametric triplane")->required();
  ren->add_option("--head", head_path, "oracle or renderer checkpoint (default: dataset oracle)");
  ren->add_option("--expression-index", expression_index, "palette expression");
  ren->add_option("--identity-seed", identity_seed, "mesh identity seed");
  ren->add_option("--yaw", yaw);
  ren->add_option("--pitch", pitch);
  ren->add_option("--roll", roll);

  std::string stage = "auto";
  auto* ev = app.add_subcommand("eval", "metrics on the synthetic splits");
  add_common(ev, common, true);
  ev->add_option("--checkpoints", ckpt_dir, "directory holding the checkpoints")->required();
  ev->add_option("--stage", stage, "auto|vae|renderer")->check(CLI::IsMember({"auto", "vae", "renderer"}));

  std::string artifact;
  bool preset_diff_flag = false, print_config = false;
  auto* ins = app.add_subcommand("inspect", "verify provenance or diff the presets");
  add_common(ins, common, false);
  ins->add_flag("--print-config", print_config, "print the effective config as YAML");
  ins->add_option("artifact", artifact, "frame, run directory, checkpoint or dataset directory");
  ins->add_flag("--preset-diff", preset_diff_flag, "list every desk value that differs from the paper preset");

  std::string command = argc > 1 ? argv[1] : "";
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    const bool unknown = argc > 1 && !app.get_subcommand_no_throw(argv[1]) && argv[1][0] != '-';
    emit_error(command, ErrorKind::Usage, unknown ? "unknown command '" + command + "'" : e.what());
    return kExitUsage;
  }
  command = app.get_subcommands().front()->get_name();

  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (command == "inspect") {
      if (preset_diff_flag) {
        std::cout << preset_diff_report(ExperimentConfig::desk(), ExperimentConfig::paper());
        return 0;
      }
      if (print_config) {
        std::cout << common.load().to_yaml();
        return 0;
      }
      if (artifact.empty()) fail(ErrorKind::Usage, "inspect: artifact path required");
      auto rep = inspect_artifact(artifact);
      emit(rep);
      return rep.at("verified").get<bool>() ? 0 : kExitConfig;
    }

    auto cfg = common.load();
    auto hook = [&](const std::string& stage_name, int every) {
      return [&, stage_name, every](int step, const json& losses) {
        if (every > 0 && step % every == 0)
          emit({{"event", "step"}, {"stage", stage_name}, {"step", step}, {"losses", losses}});
      };
    };

    if (command == "generate-data") {
      const auto root = common.out.empty() ? default_data_root() : fs::path(common.out);
      emit({{"event", "start"}, {"command", command}, {"config_hash", cfg.hash()}, {"out", root.string()}});
      json res{{"event", "done"}, {"command", command}};
      if (split != "views") {
        auto m = generate_pairs_split(cfg, root);
        res["pairs"] = m.records.size();
      }
      if (split != "pairs") {
        auto [d, s] = generate_dynamic_static_split(cfg, root);
        res["dynamic"] = d.records.size();
        res["static"] = s.records.size();
      }
      res["data_hash"] = cfg.data_hash();
      res["seconds"] = seconds_since(t0);
      emit(res);
      return 0;
    }

    if (command == "train-vae" || command == "train-dit" || command == "train-renderer") {
      const auto out = need_out(common, "runs/desk");
      const fs::path parents = ckpt_dir.empty() ? out : fs::path(ckpt_dir);
      emit({{"event", "start"}, {"command", command}, {"config_hash", cfg.hash()}, {"out", out.string()}});
      TrainResult r;
      if (command == "train-vae") {
        if (steps_override) cfg.vae.steps = *steps_override;
        r = train_vae(cfg, common.data_root(), out, hook("vae", 50));
      } else if (command == "train-dit") {
        if (steps_override) cfg.dit.steps = *steps_override;
        r = train_dit(cfg, common.data_root(), parents / "vae.ckpt", out, hook("dit", 50));
      } else {
        if (steps_override) cfg.motion_renderer.steps = *steps_override;
        r = train_renderer(cfg, common.data_root(), parents / "vae.ckpt", out, hook("renderer", 25));
      }
      emit({{"event", "done"}, {"command", command}, {"checkpoint", r.checkpoint.string()}, {"steps", r.steps},
            {"losses", r.final_losses}, {"seconds", seconds_since(t0)}});
      return 0;
    }

    if (command == "infer") {
      req.source_image = source;
      req.out = need_out(common, "frames");
      req.steps = sample_steps.value_or(cfg.diffusion.sample_steps);
      if (guidance_text.empty()) {
        req.guidance = cfg.diffusion.guidance;
        req.guidance_text = json(cfg.diffusion.guidance).dump();
      } else {
        try {
          std::size_t used = 0;
          req.guidance = std::stod(guidance_text, &used);
          if (used != guidance_text.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
          fail(ErrorKind::Usage, "infer: --guidance must be a number, got '" + guidance_text + "'");
        }
        req.guidance_text = guidance_text;
      }
      req.identity_seed = identity_seed;
      std::vector<std::vector<double>> exprs;
      std::vector<CameraPose> cams;
      if (!expr_track.empty()) exprs = load_expression_track(expr_track);
      if (!cam_track.empty()) cams = load_camera_track(cam_track);
      const auto n = !exprs.empty() ? exprs.size() : !cams.empty() ? cams.size() : static_cast<std::size_t>(frames);
      default_track(cfg, static_cast<int>(n), req);
      if (!exprs.empty()) req.expressions = exprs;
      if (!cams.empty()) req.cameras = cams;
      emit({{"event", "start"}, {"command", command}, {"config_hash", cfg.hash()}, {"out", req.out.string()}});
      auto run = pipeline_infer(cfg, CheckpointSet::in(ckpt_dir), req);
      emit({{"event", "done"}, {"command", command}, {"frames", run.at("frames").size()},
            {"run_id", run.at("run_id")}, {"seconds", seconds_since(t0)}});
      return 0;
    }

    if (command == "render") {
      torch::NoGradGuard ng;
      auto tri = load_triplane(triplane_path);
      RenderHead head;
      if (head_path.empty()) {
        head = load_oracle(common.data_root() / "pairs" / "oracle.ckpt", cfg);
      } else {
        auto ck = load_checkpoint(head_path);
        if (ck.module() == "renderer") {
          head = load_renderer(head_path, cfg).head;
        } else {
          head = load_oracle(head_path, cfg);
        }
      }
      CameraPose pose;
      pose.yaw = yaw;
      pose.pitch = pitch;
      pose.roll = roll;
      pose.radius = cfg.geometry.radius;
      pose.fov = cfg.geometry.fov;
      const auto mesh_seed = identity_seed.value_or(tri.meta.value("identity_seed", std::uint64_t{0}));
      auto fused = fuse(tri, mesh_from_params(mesh_seed, palette_expression(expression_index, cfg), cfg.mesh()));
      auto out = render(fused, head, pose, cfg.sampling(), stream_seed(cfg.seed, 0x72656e646572ULL));
      const auto path = need_out(common, "render.png");
      save_png(path, out.rgb.clamp(0, 1), {{"config_hash", cfg.hash()}, {"triplane", hash_file(triplane_path)}});
      emit({{"event", "done"}, {"command", command}, {"out", path.string()}, {"hash", hash_file(path)}});
      return 0;
    }

    if (command == "eval") {
      const auto set = CheckpointSet::in(ckpt_dir);
      json rep;
      const bool renderer = stage == "renderer" || (stage == "auto" && fs::exists(set.renderer));
      rep = renderer ? evaluate_renderer(cfg, common.data_root(), set) : evaluate_vae(cfg, common.data_root(), set.vae);
      rep["config_hash"] = cfg.hash();
      if (!common.out.empty()) write_atomic(common.out, rep.dump(1) + "\n");
      json line{{"event", "metrics"}, {"command", command}};
      line.update(rep);
      emit(line);
      return 0;
    }
    fail(ErrorKind::Usage, "unknown command '" + command + "'");
  } catch (const Error& e) {
    emit_error(command, e.kind(), e.what());
    return exit_code(e.kind());
  } catch (const c10::Error& e) {
    emit_error(command, ErrorKind::Numeric, e.what_without_backtrace());
    return kExitNumeric;
  } catch (const std::exception& e) {
    emit_error(command, ErrorKind::Io, e.what());
    return kExitIo;
  }
}
