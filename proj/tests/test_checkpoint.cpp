#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "refcut/checkpoint.hpp"

using namespace refcut;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 4;
  return c;
}

struct Raw {
  nlohmann::json header;
  std::string blob;
};

Raw read_raw(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  Raw r{nlohmann::json::parse(text), std::string(std::istreambuf_iterator<char>(in), {})};
  return r;
}

void write_raw(const fs::path& p, const Raw& r) {
  const std::string text = r.header.dump();
  const std::uint64_t n = text.size();
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(&n), 8);
  out << text << r.blob;
}

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("refcut_ckpt_" + std::to_string(::getpid()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("checkpoint round trip") {
  TempDir dir;
  const ModelConfig cfg = tiny();
  const auto params = init_params<float>(cfg, 3);
  const fs::path file = dir.path / "a.safetensors";
  save_checkpoint(file, cfg, params, {{"step", 42}});
  const Checkpoint ck = load_checkpoint(file);
  CHECK(ck.config == cfg);
  CHECK(ck.metadata["step"] == 42);
  const auto a = param_refs(params);
  const auto b = param_refs(std::as_const(ck.params));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(std::memcmp(a[i].values.data(), b[i].values.data(), a[i].values.size() * sizeof(float)) == 0);
  }

  // the header is plain safetensors
  const Raw raw = read_raw(file);
  CHECK(raw.header["pos_embed"]["dtype"] == "F32");
  CHECK(raw.header["pos_embed"]["shape"] == nlohmann::json::array({16, 8}));
}

TEST_CASE("checkpoint rejections") {
  TempDir dir;
  const ModelConfig cfg = tiny();
  const fs::path good = dir.path / "good.safetensors";
  save_checkpoint(good, cfg, init_params<float>(cfg, 4));
  const fs::path bad = dir.path / "bad.safetensors";

  CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.safetensors"), CheckpointError);

  {
    std::ofstream out(bad, std::ios::binary);
    out << "xy";
  }
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);

  {
    std::ifstream in(good, std::ios::binary);
    std::string all(std::istreambuf_iterator<char>(in), {});
    std::ofstream out(bad, std::ios::binary);
    out << all.substr(0, all.size() / 2);
  }
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);

  Raw shape = read_raw(good);
  shape.header["decoder.head.weight"]["shape"] = {2, 2};
  write_raw(bad, shape);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("decoder.head.weight"), CheckpointError);

  Raw missing = read_raw(good);
  missing.header.erase("prompt.negative.fc2.bias");
  write_raw(bad, missing);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("missing tensor"), CheckpointError);

  Raw extra = read_raw(good);
  extra.header["stray"] = extra.header["pos_embed"];
  write_raw(bad, extra);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("unexpected"), CheckpointError);

  Raw config = read_raw(good);
  auto c = nlohmann::json::parse(config.header["__metadata__"]["config"].get<std::string>());
  c["embed_dim"] = 12;
  config.header["__metadata__"]["config"] = c.dump();
  write_raw(bad, config);
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);

  Raw dtype = read_raw(good);
  dtype.header["pos_embed"]["dtype"] = "F16";
  write_raw(bad, dtype);
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);

  Raw foreign = read_raw(good);
  foreign.header.erase("__metadata__");
  write_raw(bad, foreign);
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
}
