#include "refcut/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace refcut {

namespace k = nn::kernels;
using nn::require;

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::ImageEmbed: return "image_embed";
    case ParamGroup::ExtraEmbed: return "extra_embed";
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Decoder: return "decoder";
    case ParamGroup::PositiveMlp: return "positive_mlp";
    case ParamGroup::NegativeMlp: return "negative_mlp";
  }
  return "?";
}

ParamGroup group_of(std::string_view name) {
  auto starts = [&](std::string_view p) { return name.substr(0, p.size()) == p; };
  if (starts("image_embed") || starts("pos_embed")) return ParamGroup::ImageEmbed;
  if (starts("extra_embed")) return ParamGroup::ExtraEmbed;
  if (starts("blocks.")) return ParamGroup::Backbone;
  if (starts("decoder.")) return ParamGroup::Decoder;
  if (starts("prompt.positive")) return ParamGroup::PositiveMlp;
  if (starts("prompt.negative")) return ParamGroup::NegativeMlp;
  throw std::invalid_argument("unknown parameter '" + std::string(name) + "'");
}

namespace {

template <typename T>
LinearParams<T> zero_linear(int out, int in) {
  return LinearParams<T>{Matrix<T>(out, in), std::vector<T>(static_cast<std::size_t>(out), T(0))};
}

template <typename T>
LayerNormParams<T> zero_norm(int n) {
  return LayerNormParams<T>{std::vector<T>(static_cast<std::size_t>(n), T(0)),
                            std::vector<T>(static_cast<std::size_t>(n), T(0))};
}

template <typename T, typename Visit>
void visit_linear(LinearParams<T>& p, const std::string& name, Visit&& visit) {
  visit(name + ".weight", std::vector<int>{p.weight.rows, p.weight.cols},
        std::span<T>(p.weight.data));
  visit(name + ".bias", std::vector<int>{static_cast<int>(p.bias.size())}, std::span<T>(p.bias));
}

template <typename T, typename Visit>
void visit_norm(LayerNormParams<T>& p, const std::string& name, Visit&& visit) {
  visit(name + ".gamma", std::vector<int>{static_cast<int>(p.gamma.size())},
        std::span<T>(p.gamma));
  visit(name + ".beta", std::vector<int>{static_cast<int>(p.beta.size())}, std::span<T>(p.beta));
}

template <typename T, typename Visit>
void visit_params(ModelParams<T>& p, Visit&& v) {
  visit_linear(p.image_embed, "image_embed", v);
  v("pos_embed", std::vector<int>{p.pos_embed.rows, p.pos_embed.cols},
    std::span<T>(p.pos_embed.data));
  visit_linear(p.extra_embed, "extra_embed", v);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string b = "blocks." + std::to_string(i);
    auto& blk = p.blocks[i];
    visit_norm(blk.norm1, b + ".norm1", v);
    visit_linear(blk.qkv, b + ".attn.qkv", v);
    visit_linear(blk.proj, b + ".attn.proj", v);
    visit_norm(blk.norm2, b + ".norm2", v);
    visit_linear(blk.fc1, b + ".mlp.fc1", v);
    visit_linear(blk.fc2, b + ".mlp.fc2", v);
  }
  auto& d = p.decoder;
  visit_norm(d.norm, "decoder.norm", v);
  visit_linear(d.up4_a, "decoder.up4_a", v);
  visit_linear(d.up4_b, "decoder.up4_b", v);
  visit_linear(d.up2, "decoder.up2", v);
  visit_linear(d.lateral4, "decoder.lateral4", v);
  visit_linear(d.lateral2, "decoder.lateral2", v);
  visit_linear(d.lateral1, "decoder.lateral1", v);
  visit_linear(d.lateral_half, "decoder.lateral_half", v);
  visit_linear(d.fuse, "decoder.fuse", v);
  visit_linear(d.head, "decoder.head", v);
  visit_linear(p.positive_mlp.fc1, "prompt.positive.fc1", v);
  visit_linear(p.positive_mlp.fc2, "prompt.positive.fc2", v);
  visit_linear(p.negative_mlp.fc1, "prompt.negative.fc1", v);
  visit_linear(p.negative_mlp.fc2, "prompt.negative.fc2", v);
}

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

}  // namespace

template <typename T>
ModelParams<T> zero_params(const ModelConfig& cfg) {
  cfg.validate();
  const int c = cfg.embed_dim, d = cfg.decoder_dim;
  ModelParams<T> p;
  p.image_embed = zero_linear<T>(c, cfg.patch_dim());
  p.pos_embed = Matrix<T>(cfg.tokens(), c);
  p.extra_embed = zero_linear<T>(c, cfg.patch_dim());
  for (int i = 0; i < cfg.depth; ++i) {
    BlockParams<T> b;
    b.norm1 = zero_norm<T>(c);
    b.qkv = zero_linear<T>(3 * c, c);
    b.proj = zero_linear<T>(c, c);
    b.norm2 = zero_norm<T>(c);
    b.fc1 = zero_linear<T>(cfg.mlp_ratio * c, c);
    b.fc2 = zero_linear<T>(c, cfg.mlp_ratio * c);
    p.blocks.push_back(std::move(b));
  }
  auto& dec = p.decoder;
  dec.norm = zero_norm<T>(c);
  dec.up4_a = zero_linear<T>(4 * (c / 2), c);
  dec.up4_b = zero_linear<T>(4 * (c / 4), c / 2);
  dec.up2 = zero_linear<T>(4 * (c / 2), c);
  dec.lateral4 = zero_linear<T>(d, c / 4);
  dec.lateral2 = zero_linear<T>(d, c / 2);
  dec.lateral1 = zero_linear<T>(d, c);
  dec.lateral_half = zero_linear<T>(d, c);
  dec.fuse = zero_linear<T>(d, 9 * d);
  dec.head = zero_linear<T>(1, d);
  p.positive_mlp = {zero_linear<T>(c, c), zero_linear<T>(c, c)};
  p.negative_mlp = {zero_linear<T>(c, c), zero_linear<T>(c, c)};
  return p;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<T> p = zero_params<T>(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto trunc_normal = [&](std::span<T> values, double std) {
    for (T& v : values) {
      double x;
      do {
        x = normal(rng);
      } while (std::abs(x) > 2.0);
      v = static_cast<T>(x * std);
    }
  };
  for (auto& ref : param_refs(p)) {
    if (ref.name.ends_with(".gamma")) std::fill(ref.values.begin(), ref.values.end(), T(1));
    const bool is_weight = ref.name.ends_with(".weight") || ref.name == "pos_embed";
    if (!is_weight) continue;
    double std = 0.02;
    if (ref.name.starts_with("decoder.")) {
      const int fan_in = ref.shape[1];
      std = std::sqrt(2.0 / fan_in);
    }
    trunc_normal(ref.values, std);
  }
  return p;
}

template <typename T>
std::vector<ParamRef<T>> param_refs(ModelParams<T>& p) {
  std::vector<ParamRef<T>> refs;
  visit_params(p, [&](std::string name, std::vector<int> shape, std::span<T> values) {
    refs.push_back(ParamRef<T>{std::move(name), std::move(shape), values});
  });
  return refs;
}

template <typename T>
std::vector<ParamRef<const T>> param_refs(const ModelParams<T>& p) {
  auto& mp = const_cast<ModelParams<T>&>(p);
  std::vector<ParamRef<const T>> refs;
  visit_params(mp, [&](std::string name, std::vector<int> shape, std::span<T> values) {
    refs.push_back(ParamRef<const T>{std::move(name), std::move(shape),
                                     std::span<const T>(values.data(), values.size())});
  });
  return refs;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p, const ModelConfig& config) {
  ModelParams<To> out = zero_params<To>(config);
  auto src = param_refs(p);
  auto dst = param_refs(out);
  require(src.size() == dst.size(), "cast_params: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    require(src[i].values.size() == dst[i].values.size(), "cast_params: size mismatch");
    std::transform(src[i].values.begin(), src[i].values.end(), dst[i].values.begin(),
                   [](From v) { return static_cast<To>(v); });
  }
  return out;
}

template <typename T>
Matrix<T> resize_position_table(const Matrix<T>& table, int grid, int new_grid) {
  return k::resize_bilinear(table, grid, grid, new_grid, new_grid);
}

template <typename T>
RefCutNet<T>::RefCutNet(ModelConfig config, ModelParams<T> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  require(static_cast<int>(params_.blocks.size()) == config_.depth,
          "RefCutNet: block count does not match config depth");
  require(params_.pos_embed.rows == config_.tokens() && params_.pos_embed.cols == config_.embed_dim,
          "RefCutNet: positional table does not match config");
}

template <typename T>
Matrix<T> RefCutNet<T>::patchify(const Image& image) const {
  const int s = config_.input_size, p = config_.patch_size, g = config_.grid();
  if (image.height != s || image.width != s) {
    throw std::invalid_argument("image is " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + ", model expects " +
                                std::to_string(s) + "x" + std::to_string(s));
  }
  Matrix<T> out(g * g, config_.patch_dim());
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      T* row = out.row(gy * g + gx);
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < 3; ++ch)
            row[(py * p + px) * 3 + ch] =
                static_cast<T>(image.at(gy * p + py, gx * p + px, ch)) - T(0.5);
    }
  return out;
}

template <typename T>
Matrix<T> RefCutNet<T>::patchify(const ExtraMaps& maps) const {
  const int s = config_.input_size, p = config_.patch_size, g = config_.grid();
  if (maps.height() != s || maps.width() != s || maps.negative.height() != s ||
      maps.previous.height() != s || maps.negative.width() != s || maps.previous.width() != s) {
    throw std::invalid_argument("extra maps do not match model input size " + std::to_string(s));
  }
  Matrix<T> out(g * g, config_.patch_dim());
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      T* row = out.row(gy * g + gx);
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px) {
          const int r = gy * p + py, c = gx * p + px;
          T* cell = row + (py * p + px) * 3;
          cell[0] = maps.positive.at(r, c) ? T(1) : T(0);
          cell[1] = maps.negative.at(r, c) ? T(1) : T(0);
          cell[2] = static_cast<T>(maps.previous.at(r, c));
        }
    }
  return out;
}

template <typename T>
TokenFeature<T> RefCutNet<T>::embed_image_patches(const Matrix<T>& patches) const {
  TokenFeature<T> f{config_.grid(), config_.grid(),
                    k::linear(patches, params_.image_embed.weight, params_.image_embed.bias)};
  f.tokens += params_.pos_embed;
  return f;
}

template <typename T>
TokenFeature<T> RefCutNet<T>::embed_image(const Image& image) const {
  return embed_image_patches(patchify(image));
}

template <typename T>
TokenFeature<T> RefCutNet<T>::embed_extras(const ExtraMaps& maps) const {
  return TokenFeature<T>{config_.grid(), config_.grid(),
                         k::linear(patchify(maps), params_.extra_embed.weight,
                                   params_.extra_embed.bias)};
}

template <typename T>
TokenFeature<T> RefCutNet<T>::fuse(const TokenFeature<T>& image_tokens,
                                   const TokenFeature<T>& extra_tokens,
                                   const PromptPair<T>& prompts) {
  require(image_tokens.grid_h == extra_tokens.grid_h && image_tokens.grid_w == extra_tokens.grid_w &&
              image_tokens.tokens.same_shape(extra_tokens.tokens),
          "fuse: token grids differ");
  TokenFeature<T> out = image_tokens;
  out.tokens += extra_tokens.tokens;
  for (const auto* prompt : {&prompts.positive, &prompts.negative}) {
    if (prompt->empty()) continue;
    require(static_cast<int>(prompt->size()) == out.tokens.cols,
            "fuse: prompt length " + std::to_string(prompt->size()) + " != embed dim " +
                std::to_string(out.tokens.cols));
    if (std::all_of(prompt->begin(), prompt->end(), [](T v) { return v == T(0); })) continue;
    k::add_row_broadcast(out.tokens, *prompt);
  }
  return out;
}

template <typename T>
Matrix<T> RefCutNet<T>::block_forward(const BlockParams<T>& p, const Matrix<T>& x,
                                      BlockTrace<T>* t) const {
  const T eps = static_cast<T>(config_.layer_norm_eps);
  k::LayerNormStats<T> s1, s2;
  Matrix<T> n1 = k::layer_norm(x, p.norm1.gamma, p.norm1.beta, eps, t ? &s1 : nullptr);
  Matrix<T> qkv = k::linear(n1, p.qkv.weight, p.qkv.bias);
  std::vector<Matrix<T>> probs;
  Matrix<T> attn = k::attention(qkv, config_.heads, t ? &probs : nullptr);
  Matrix<T> mid = k::linear(attn, p.proj.weight, p.proj.bias);
  mid += x;
  Matrix<T> n2 = k::layer_norm(mid, p.norm2.gamma, p.norm2.beta, eps, t ? &s2 : nullptr);
  Matrix<T> hidden = k::linear(n2, p.fc1.weight, p.fc1.bias);
  Matrix<T> act = k::gelu(hidden);
  Matrix<T> out = k::linear(act, p.fc2.weight, p.fc2.bias);
  out += mid;
  if (t) {
    t->input = x;
    t->norm1 = std::move(s1);
    t->normed1 = std::move(n1);
    t->qkv = std::move(qkv);
    t->attn_probs = std::move(probs);
    t->attn_out = std::move(attn);
    t->mid = std::move(mid);
    t->norm2 = std::move(s2);
    t->normed2 = std::move(n2);
    t->hidden = std::move(hidden);
    t->activated = std::move(act);
  }
  return out;
}

template <typename T>
Matrix<T> RefCutNet<T>::block_backward(const BlockParams<T>& p, const BlockTrace<T>& t,
                                       const Matrix<T>& dy, BlockParams<T>& g) const {
  Matrix<T> dact = k::linear_backward(t.activated, p.fc2.weight, dy, g.fc2.weight, g.fc2.bias);
  Matrix<T> dhidden = k::gelu_backward(t.hidden, dact);
  Matrix<T> dn2 = k::linear_backward(t.normed2, p.fc1.weight, dhidden, g.fc1.weight, g.fc1.bias);
  Matrix<T> dmid = k::layer_norm_backward(t.mid, t.norm2, p.norm2.gamma, dn2, g.norm2.gamma,
                                          g.norm2.beta);
  dmid += dy;
  Matrix<T> dattn = k::linear_backward(t.attn_out, p.proj.weight, dmid, g.proj.weight, g.proj.bias);
  Matrix<T> dqkv = k::attention_backward(t.qkv, t.attn_probs, dattn, config_.heads);
  Matrix<T> dn1 = k::linear_backward(t.normed1, p.qkv.weight, dqkv, g.qkv.weight, g.qkv.bias);
  Matrix<T> dx = k::layer_norm_backward(t.input, t.norm1, p.norm1.gamma, dn1, g.norm1.gamma,
                                        g.norm1.beta);
  dx += dmid;
  return dx;
}

template <typename T>
TokenFeature<T> RefCutNet<T>::backbone(const TokenFeature<T>& tokens, BackboneTrace<T>* trace) const {
  require(tokens.tokens.rows == tokens.grid_h * tokens.grid_w &&
              tokens.tokens.cols == config_.embed_dim,
          "backbone: token feature shape mismatch");
  if (trace) trace->blocks.assign(params_.blocks.size(), BlockTrace<T>{});
  Matrix<T> x = tokens.tokens;
  for (std::size_t i = 0; i < params_.blocks.size(); ++i) {
    x = block_forward(params_.blocks[i], x, trace ? &trace->blocks[i] : nullptr);
  }
  return TokenFeature<T>{tokens.grid_h, tokens.grid_w, std::move(x)};
}

template <typename T>
Matrix<T> RefCutNet<T>::backbone_backward(const BackboneTrace<T>& trace, const Matrix<T>& doutput,
                                          ModelParams<T>& grads) const {
  Matrix<T> d = doutput;
  for (std::size_t i = params_.blocks.size(); i-- > 0;) {
    d = block_backward(params_.blocks[i], trace.blocks[i], d, grads.blocks[i]);
  }
  return d;
}

template <typename T>
Matrix<T> RefCutNet<T>::decode_logits(const TokenFeature<T>& tokens, DecoderTrace<T>* trace) const {
  const auto& d = params_.decoder;
  const int g = tokens.grid_h;
  require(tokens.grid_h == tokens.grid_w, "decode: square token grids only");
  require(tokens.tokens.rows == g * g && tokens.tokens.cols == config_.embed_dim,
          "decode: token feature shape mismatch");
  const int g2 = 2 * g, g4 = 4 * g, gh = (g + 1) / 2;
  const T eps = static_cast<T>(config_.layer_norm_eps);

  k::LayerNormStats<T> stats;
  Matrix<T> normed = k::layer_norm(tokens.tokens, d.norm.gamma, d.norm.beta, eps,
                                   trace ? &stats : nullptr);
  // x4 branch: two 2x2 stride-2 transposed convolutions.
  Matrix<T> up4_a = k::pixel_shuffle2(k::linear(normed, d.up4_a.weight, d.up4_a.bias), g, g);
  Matrix<T> up4_a_act = k::gelu(up4_a);
  Matrix<T> up4_b = k::pixel_shuffle2(k::linear(up4_a_act, d.up4_b.weight, d.up4_b.bias), g2, g2);
  // x2, x1 and x0.5 branches.
  Matrix<T> up2 = k::pixel_shuffle2(k::linear(normed, d.up2.weight, d.up2.bias), g, g);
  Matrix<T> pooled = k::avg_pool2(normed, g, g);

  Matrix<T> summed = k::linear(up4_b, d.lateral4.weight, d.lateral4.bias);
  summed += k::resize_bilinear(k::linear(up2, d.lateral2.weight, d.lateral2.bias), g2, g2, g4, g4);
  summed += k::resize_bilinear(k::linear(normed, d.lateral1.weight, d.lateral1.bias), g, g, g4, g4);
  summed += k::resize_bilinear(k::linear(pooled, d.lateral_half.weight, d.lateral_half.bias), gh,
                               gh, g4, g4);
  Matrix<T> summed_act = k::gelu(summed);
  Matrix<T> cols = k::im2col3x3(summed_act, g4, g4);
  Matrix<T> fused = k::linear(cols, d.fuse.weight, d.fuse.bias);
  Matrix<T> fused_act = k::gelu(fused);
  Matrix<T> low = k::linear(fused_act, d.head.weight, d.head.bias);
  const int s = config_.input_size;
  Matrix<T> full = k::resize_bilinear(low, g4, g4, s, s);

  if (trace) {
    trace->input = tokens.tokens;
    trace->norm = std::move(stats);
    trace->normed = std::move(normed);
    trace->up4_a = std::move(up4_a);
    trace->up4_a_act = std::move(up4_a_act);
    trace->up4_b = std::move(up4_b);
    trace->up2 = std::move(up2);
    trace->pooled = std::move(pooled);
    trace->summed = std::move(summed);
    trace->summed_act = std::move(summed_act);
    trace->fuse_cols = std::move(cols);
    trace->fused = std::move(fused);
    trace->fused_act = std::move(fused_act);
  }
  // (s*s) x 1 column -> s x s grid.
  full.rows = s;
  full.cols = s;
  return full;
}

template <typename T>
Matrix<T> RefCutNet<T>::decoder_backward(const DecoderTrace<T>& t, const Matrix<T>& dlogits,
                                         ModelParams<T>& grads) const {
  const auto& d = params_.decoder;
  auto& gd = grads.decoder;
  const int s = config_.input_size;
  const int g = config_.grid(), g2 = 2 * g, g4 = 4 * g, gh = (g + 1) / 2;
  require(dlogits.rows == s && dlogits.cols == s, "decoder_backward: gradient shape mismatch");

  Matrix<T> dfull = dlogits;
  dfull.rows = s * s;
  dfull.cols = 1;
  Matrix<T> dlow = k::resize_bilinear_backward(dfull, g4, g4, s, s);
  Matrix<T> dfused_act = k::linear_backward(t.fused_act, d.head.weight, dlow, gd.head.weight,
                                            gd.head.bias);
  Matrix<T> dfused = k::gelu_backward(t.fused, dfused_act);
  Matrix<T> dcols = k::linear_backward(t.fuse_cols, d.fuse.weight, dfused, gd.fuse.weight,
                                       gd.fuse.bias);
  Matrix<T> dsummed_act = k::col2im3x3(dcols, g4, g4, config_.decoder_dim);
  Matrix<T> dsummed = k::gelu_backward(t.summed, dsummed_act);

  Matrix<T> dup4_b = k::linear_backward(t.up4_b, d.lateral4.weight, dsummed, gd.lateral4.weight,
                                        gd.lateral4.bias);
  Matrix<T> dl2 = k::resize_bilinear_backward(dsummed, g2, g2, g4, g4);
  Matrix<T> dup2 = k::linear_backward(t.up2, d.lateral2.weight, dl2, gd.lateral2.weight,
                                      gd.lateral2.bias);
  Matrix<T> dl1 = k::resize_bilinear_backward(dsummed, g, g, g4, g4);
  Matrix<T> dnormed = k::linear_backward(t.normed, d.lateral1.weight, dl1, gd.lateral1.weight,
                                         gd.lateral1.bias);
  Matrix<T> dlh = k::resize_bilinear_backward(dsummed, gh, gh, g4, g4);
  Matrix<T> dpooled = k::linear_backward(t.pooled, d.lateral_half.weight, dlh,
                                         gd.lateral_half.weight, gd.lateral_half.bias);
  dnormed += k::avg_pool2_backward(dpooled, g, g);
  dnormed += k::linear_backward(t.normed, d.up2.weight, k::pixel_unshuffle2(dup2, g, g),
                                gd.up2.weight, gd.up2.bias);
  Matrix<T> dup4_a_act = k::linear_backward(t.up4_a_act, d.up4_b.weight,
                                            k::pixel_unshuffle2(dup4_b, g2, g2), gd.up4_b.weight,
                                            gd.up4_b.bias);
  Matrix<T> dup4_a = k::gelu_backward(t.up4_a, dup4_a_act);
  dnormed += k::linear_backward(t.normed, d.up4_a.weight, k::pixel_unshuffle2(dup4_a, g, g),
                                gd.up4_a.weight, gd.up4_a.bias);
  return k::layer_norm_backward(t.input, t.norm, d.norm.gamma, dnormed, gd.norm.gamma,
                                gd.norm.beta);
}

template <typename T>
SoftMask RefCutNet<T>::decode(const TokenFeature<T>& tokens) const {
  const Matrix<T> logits = decode_logits(tokens);
  SoftMask out(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.data()[i] = static_cast<double>(sigmoid(logits.data[i]));
  }
  return out;
}

template <typename T>
std::vector<T> RefCutNet<T>::prompt_mlp(const std::vector<T>& representation, Polarity polarity,
                                        PromptMlpTrace<T>* trace) const {
  require(static_cast<int>(representation.size()) == config_.embed_dim,
          "prompt_mlp: representation length " + std::to_string(representation.size()) +
              " != embed dim " + std::to_string(config_.embed_dim));
  const auto& mlp = polarity == Polarity::Positive ? params_.positive_mlp : params_.negative_mlp;
  Matrix<T> in(1, config_.embed_dim);
  std::copy(representation.begin(), representation.end(), in.data.begin());
  Matrix<T> hidden = k::linear(in, mlp.fc1.weight, mlp.fc1.bias);
  Matrix<T> act = k::gelu(hidden);
  Matrix<T> out = k::linear(act, mlp.fc2.weight, mlp.fc2.bias);
  if (trace) {
    trace->input = std::move(in);
    trace->hidden = std::move(hidden);
    trace->activated = std::move(act);
  }
  return std::move(out.data);
}

template <typename T>
std::vector<T> RefCutNet<T>::prompt_mlp_backward(const PromptMlpTrace<T>& t,
                                                 const std::vector<T>& dout, Polarity polarity,
                                                 ModelParams<T>& grads) const {
  const auto& mlp = polarity == Polarity::Positive ? params_.positive_mlp : params_.negative_mlp;
  auto& gm = polarity == Polarity::Positive ? grads.positive_mlp : grads.negative_mlp;
  Matrix<T> dy(1, config_.embed_dim);
  std::copy(dout.begin(), dout.end(), dy.data.begin());
  Matrix<T> dact = k::linear_backward(t.activated, mlp.fc2.weight, dy, gm.fc2.weight, gm.fc2.bias);
  Matrix<T> dhidden = k::gelu_backward(t.hidden, dact);
  Matrix<T> din = k::linear_backward(t.input, mlp.fc1.weight, dhidden, gm.fc1.weight, gm.fc1.bias);
  return std::move(din.data);
}

template <typename T>
void RefCutNet<T>::image_embed_backward(const Matrix<T>& patches, const Matrix<T>& dtokens,
                                        ModelParams<T>& grads) const {
  k::linear_backward(patches, params_.image_embed.weight, dtokens, grads.image_embed.weight,
                     grads.image_embed.bias, /*need_dx=*/false);
  grads.pos_embed += dtokens;
}

template <typename T>
void RefCutNet<T>::extra_embed_backward(const Matrix<T>& patches, const Matrix<T>& dtokens,
                                        ModelParams<T>& grads) const {
  k::linear_backward(patches, params_.extra_embed.weight, dtokens, grads.extra_embed.weight,
                     grads.extra_embed.bias, /*need_dx=*/false);
}

template <typename T>
SoftMask RefCutNet<T>::predict(const Image& image, std::span<const Click> clicks,
                               const SoftMask& prev, const PromptPair<T>& prompts) const {
  const ExtraMaps maps = assemble_extra_maps(clicks, prev, config_.click_radius);
  const TokenFeature<T> fused = fuse(embed_image(image), embed_extras(maps), prompts);
  return decode(backbone(fused));
}

template class RefCutNet<float>;
template class RefCutNet<double>;
template ModelParams<float> zero_params<float>(const ModelConfig&);
template ModelParams<double> zero_params<double>(const ModelConfig&);
template ModelParams<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ModelParams<double> init_params<double>(const ModelConfig&, std::uint64_t);
template std::vector<ParamRef<float>> param_refs<float>(ModelParams<float>&);
template std::vector<ParamRef<double>> param_refs<double>(ModelParams<double>&);
template std::vector<ParamRef<const float>> param_refs<float>(const ModelParams<float>&);
template std::vector<ParamRef<const double>> param_refs<double>(const ModelParams<double>&);
template ModelParams<double> cast_params<double, float>(const ModelParams<float>&,
                                                        const ModelConfig&);
template ModelParams<float> cast_params<float, double>(const ModelParams<double>&,
                                                       const ModelConfig&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&,
                                                      const ModelConfig&);
template Matrix<float> resize_position_table<float>(const Matrix<float>&, int, int);
template Matrix<double> resize_position_table<double>(const Matrix<double>&, int, int);

}  // namespace refcut
