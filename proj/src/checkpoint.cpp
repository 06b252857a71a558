#include "refcut/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace refcut {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams<float>& params, const nlohmann::json& metadata) {
  const auto refs = param_refs(params);
  nlohmann::json header = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  meta["format"] = "refcut";
  meta["config"] = nlohmann::json(config).dump();
  if (!metadata.empty()) meta["extra"] = metadata.dump();
  header["__metadata__"] = meta;
  std::size_t offset = 0;
  for (const auto& r : refs) {
    const std::size_t bytes = r.values.size() * sizeof(float);
    header[r.name] = {{"dtype", "F32"}, {"shape", r.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text += ' ';

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::uint64_t n = text.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& r : refs) {
      out.write(reinterpret_cast<const char*>(r.values.data()),
                static_cast<std::streamsize>(r.values.size() * sizeof(float)));
    }
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n == 0 || n > (64u << 20)) {
    throw CheckpointError(path.string() + ": invalid header length");
  }
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw CheckpointError(path.string() + ": truncated header");
  const std::vector<char> blob{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": header is not JSON: " + e.what());
  }
  const auto& meta = header.value("__metadata__", nlohmann::json::object());
  if (meta.value("format", "") != "refcut" || !meta.contains("config")) {
    throw CheckpointError(path.string() + ": missing refcut metadata");
  }

  Checkpoint ckpt;
  try {
    ckpt.config = nlohmann::json::parse(meta["config"].get<std::string>()).get<ModelConfig>();
    ckpt.config.validate();
    if (meta.contains("extra")) ckpt.metadata = nlohmann::json::parse(meta["extra"].get<std::string>());
  } catch (const std::exception& e) {
    throw CheckpointError(path.string() + ": bad config: " + e.what());
  }

  ckpt.params = zero_params<float>(ckpt.config);
  std::set<std::string> expected;
  for (auto& ref : param_refs(ckpt.params)) {
    expected.insert(ref.name);
    if (!header.contains(ref.name)) {
      throw CheckpointError(path.string() + ": missing tensor '" + ref.name + "'");
    }
    const auto& entry = header[ref.name];
    if (entry.value("dtype", "") != "F32") {
      throw CheckpointError(path.string() + ": tensor '" + ref.name + "' is not F32");
    }
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape != ref.shape) {
      throw CheckpointError(path.string() + ": tensor '" + ref.name + "' has shape " +
                            nlohmann::json(shape).dump() + ", config implies " +
                            nlohmann::json(ref.shape).dump());
    }
    const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
    const std::size_t bytes = ref.values.size() * sizeof(float);
    if (offsets.size() != 2 || offsets[1] - offsets[0] != bytes || offsets[1] > blob.size()) {
      throw CheckpointError(path.string() + ": tensor '" + ref.name + "' has a bad byte range");
    }
    std::memcpy(ref.values.data(), blob.data() + offsets[0], bytes);
  }
  for (const auto& [name, _] : header.items()) {
    if (name != "__metadata__" && !expected.contains(name)) {
      throw CheckpointError(path.string() + ": unexpected tensor '" + name + "'");
    }
  }
  return ckpt;
}

}  // namespace refcut
