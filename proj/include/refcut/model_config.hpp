#pragma once

#include <nlohmann/json_fwd.hpp>

namespace refcut {

/// Network hyper-parameters. Token grids are input_size / patch_size on a side.
struct ModelConfig {
  int input_size = 224;
  int patch_size = 16;
  int embed_dim = 96;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int decoder_dim = 32;
  int click_radius = 5;  // disk radius in input pixels
  double layer_norm_eps = 1e-6;

  int grid() const { return input_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return 3 * patch_size * patch_size; }

  /// Throws std::invalid_argument when the configuration is inconsistent.
  void validate() const;

  /// Default desk-scale network.
  static ModelConfig desk();
  /// Smaller variant used for CPU-only training runs and the test suite.
  static ModelConfig compact();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace refcut
