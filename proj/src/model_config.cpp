#include "refcut/model_config.hpp"

#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>

namespace refcut {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (patch_size < 4 || patch_size % 4 != 0) fail("patch_size must be a positive multiple of 4");
  if (input_size <= 0 || input_size % patch_size != 0)
    fail("input_size " + std::to_string(input_size) + " not divisible by patch_size " +
         std::to_string(patch_size));
  if (grid() < 2) fail("token grid must be at least 2x2");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
         std::to_string(heads));
  if (embed_dim % 4 != 0) fail("embed_dim must be a multiple of 4 for the decoder pyramid");
  if (depth < 1) fail("depth must be >= 1");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (decoder_dim < 1) fail("decoder_dim must be >= 1");
  if (click_radius < 0) fail("click_radius must be >= 0");
  if (!(layer_norm_eps > 0)) fail("layer_norm_eps must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::compact() {
  ModelConfig c;
  c.input_size = 64;
  c.patch_size = 8;
  c.embed_dim = 64;
  c.depth = 4;
  c.heads = 4;
  c.decoder_dim = 32;
  c.click_radius = 3;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_size", c.input_size},     {"patch_size", c.patch_size},
                     {"embed_dim", c.embed_dim},       {"depth", c.depth},
                     {"heads", c.heads},               {"mlp_ratio", c.mlp_ratio},
                     {"decoder_dim", c.decoder_dim},   {"click_radius", c.click_radius},
                     {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.decoder_dim = j.value("decoder_dim", d.decoder_dim);
  c.click_radius = j.value("click_radius", d.click_radius);
  c.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
}

}  // namespace refcut
