#include "avatar/checkpoint.hpp"

namespace avatar {

namespace {

constexpr std::string_view kMagic = "CKPT1";

void collect(const std::string& prefix, const torch::nn::Module& m,
             std::vector<std::pair<std::string, torch::Tensor>>& out) {
  for (const auto& p : m.named_parameters(true)) out.emplace_back(prefix + "." + p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) out.emplace_back(prefix + "." + b.key(), b.value());
}

}  // namespace

const torch::Tensor& CheckpointFile::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorKind::Io, "checkpoint: missing tensor '" + name + "'");
  return it->second;
}

void save_checkpoint(const fs::path& path, const std::string& module, const NamedModules& modules, json meta,
                     const std::vector<std::pair<std::string, torch::Tensor>>& extra) {
  std::vector<std::pair<std::string, torch::Tensor>> all;
  for (const auto& [prefix, m] : modules) collect(prefix, *m, all);
  for (const auto& e : extra) all.push_back(e);

  json list = json::array();
  for (const auto& [name, t] : all) list.push_back({{"name", name}, {"shape", t.sizes().vec()}});
  meta["module"] = module;
  meta["tensors"] = list;
  const std::string header = meta.dump();

  ByteWriter w;
  w.raw(kMagic);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header);
  for (const auto& [name, t] : all) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    w.f32s({c.data_ptr<float>(), static_cast<std::size_t>(c.numel())});
  }
  write_atomic(path, w.bytes());
}

CheckpointFile load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::Io, "checkpoint: not found: " + path.string());
  const std::string bytes = read_file(path);
  ByteReader r(bytes, "checkpoint " + path.string());
  if (r.raw(kMagic.size()) != kMagic) fail(ErrorKind::Io, "checkpoint: bad magic in " + path.string());
  const auto len = r.u32();
  CheckpointFile f;
  try {
    f.header = json::parse(r.raw(len));
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "checkpoint: corrupt header in " + path.string());
  }
  for (const auto& entry : f.header.at("tensors")) {
    auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    auto t = torch::empty(shape, torch::kFloat32);
    r.f32s({t.data_ptr<float>(), static_cast<std::size_t>(t.numel())});
    f.tensors.emplace(entry.at("name").get<std::string>(), t);
  }
  if (!r.done()) fail(ErrorKind::Io, "checkpoint: trailing bytes in " + path.string());
  return f;
}

void load_module(const CheckpointFile& ckpt, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard ng;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    const auto& src = ckpt.at(prefix + "." + name);
    if (src.sizes() != dst.sizes())
      fail(ErrorKind::Shape, "checkpoint: '" + prefix + "." + name + "' has shape " + shape_string(src) +
                                 ", module expects " + shape_string(dst));
    dst.copy_(src);
  };
  for (auto& p : module.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy(b.key(), b.value());
}

}  // namespace avatar
