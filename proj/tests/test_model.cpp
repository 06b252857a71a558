#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "refcut/model.hpp"
#include "refcut/reference_prompt.hpp"
#include "refcut/training.hpp"

using namespace refcut;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 4;
  c.click_radius = 2;
  return c;
}

Image random_image(int h, int w, std::mt19937_64& rng) {
  Image im(h, w);
  std::uniform_real_distribution<float> u(0, 1);
  for (float& v : im.data) v = u(rng);
  return im;
}

BitMask box(int h, int w, int r0, int c0, int r1, int c1) {
  BitMask m(h, w);
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) m.set(r, c);
  return m;
}

TrainingSample tiny_sample(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TrainingSample s;
  s.image = random_image(16, 16, rng);
  s.gt = box(16, 16, 3, 4, 11, 12);
  s.guidance.image = random_image(16, 16, rng);
  s.guidance.positive = box(16, 16, 2, 2, 9, 10);
  s.guidance.negative = box(16, 16, 10, 1, 15, 15);
  s.clicks = {{7, 8, Polarity::Positive, 1}, {1, 1, Polarity::Negative, 2}};
  s.prev = SoftMask(16, 16);
  std::uniform_real_distribution<double> u(0, 1);
  for (double& v : s.prev.data()) v = u(rng);
  return s;
}

// Forward-only loss, assembled from the public pieces rather than the
// training code path.
double forward_loss(const RefCutNet<double>& net, const TrainingSample& s) {
  const PromptPair<double> prompts = generate_prompts(net, s.guidance);
  const ExtraMaps maps = assemble_extra_maps(s.clicks, s.prev, net.config().click_radius);
  const auto fused = RefCutNet<double>::fuse(net.embed_image(s.image), net.embed_extras(maps), prompts);
  const auto logits = net.decode_logits(net.backbone(fused));
  return normalized_focal_loss_logits<double>(logits, s.gt, 2.0, nullptr);
}

}  // namespace

TEST_CASE("config validation and presets") {
  CHECK_NOTHROW(ModelConfig::desk().validate());
  CHECK_NOTHROW(ModelConfig::compact().validate());
  CHECK(ModelConfig::desk().grid() == 14);
  ModelConfig bad = tiny();
  bad.input_size = 18;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny();
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("shapes") {
  const ModelConfig cfg = tiny();
  RefCutNet<float> net(cfg, init_params<float>(cfg, 1));
  std::mt19937_64 rng(1);
  const Image im = random_image(16, 16, rng);
  const auto tokens = net.embed_image(im);
  CHECK(tokens.tokens.rows == 16);
  CHECK(tokens.tokens.cols == 8);
  const auto out = net.backbone(tokens);
  CHECK(out.tokens.same_shape(tokens.tokens));
  const SoftMask pred = net.decode(out);
  CHECK(pred.height() == 16);
  CHECK(pred.width() == 16);
  for (double v : pred.data()) CHECK((v > 0.0 && v < 1.0));
  CHECK_THROWS_AS(net.embed_image(Image(15, 16)), std::invalid_argument);
  const std::vector<float> rep(8, 0.5f);
  CHECK(net.prompt_mlp(rep, Polarity::Positive).size() == 8);
}

TEST_CASE("embedding identities") {
  const ModelConfig cfg = tiny();
  RefCutNet<double> net(cfg, init_params<double>(cfg, 2));
  const auto& p = net.params();

  const auto zero = net.embed_image_patches(Matrix<double>(cfg.tokens(), cfg.patch_dim()));
  for (int t = 0; t < cfg.tokens(); ++t)
    for (int c = 0; c < cfg.embed_dim; ++c)
      CHECK(zero.tokens(t, c) == doctest::Approx(p.pos_embed(t, c) + p.image_embed.bias[c]));

  const std::vector<Click> none;
  const auto extras = net.embed_extras(assemble_extra_maps(none, SoftMask(16, 16), cfg.click_radius));
  for (int t = 0; t < cfg.tokens(); ++t)
    for (int c = 0; c < cfg.embed_dim; ++c) CHECK(extras.tokens(t, c) == p.extra_embed.bias[c]);

  std::mt19937_64 rng(3);
  const auto a = net.embed_image(random_image(16, 16, rng));
  const auto base = RefCutNet<double>::fuse(a, extras, {});
  std::vector<double> v(8);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.25 * static_cast<double>(i) - 0.7;
  const auto shifted = RefCutNet<double>::fuse(a, extras, {v, {}});
  const auto neg = RefCutNet<double>::fuse(a, extras, {{}, v});
  for (int t = 0; t < cfg.tokens(); ++t)
    for (int c = 0; c < cfg.embed_dim; ++c) {
      CHECK(shifted.tokens(t, c) - base.tokens(t, c) == doctest::Approx(v[c]));
      CHECK(neg.tokens(t, c) == shifted.tokens(t, c));
    }
  CHECK_THROWS(RefCutNet<double>::fuse(a, extras, {std::vector<double>(5, 1.0), {}}));
}

TEST_CASE("zero residual branches make the backbone the identity") {
  const ModelConfig cfg = tiny();
  ModelParams<double> params = init_params<double>(cfg, 4);
  for (auto& b : params.blocks) {
    b.proj.weight.fill(0);
    std::fill(b.proj.bias.begin(), b.proj.bias.end(), 0.0);
    b.fc2.weight.fill(0);
    std::fill(b.fc2.bias.begin(), b.fc2.bias.end(), 0.0);
  }
  RefCutNet<double> net(cfg, params);
  std::mt19937_64 rng(5);
  const auto in = net.embed_image(random_image(16, 16, rng));
  CHECK(net.backbone(in).tokens == in.tokens);
}

TEST_CASE("zero guidance is bit-identical to no guidance") {
  const ModelConfig cfg = tiny();
  RefCutNet<float> net(cfg, init_params<float>(cfg, 6));
  std::mt19937_64 rng(7);
  const Image im = random_image(16, 16, rng);
  const std::vector<Click> clicks{{5, 5, Polarity::Positive, 1}};
  const SoftMask base = net.predict(im, clicks, SoftMask(16, 16), {});
  const PromptPair<float> zeros{std::vector<float>(8, 0.0f), std::vector<float>(8, 0.0f)};
  CHECK(net.predict(im, clicks, SoftMask(16, 16), zeros) == base);

  ReferenceGuidance g;
  g.image = random_image(16, 16, rng);
  const PromptPair<float> absent = generate_prompts(net, g);
  CHECK(net.predict(im, clicks, SoftMask(16, 16), absent) == base);

  g.positive = box(16, 16, 2, 2, 8, 8);
  CHECK(net.predict(im, clicks, SoftMask(16, 16), generate_prompts(net, g)) != base);
}

TEST_CASE("parameter table") {
  const ModelConfig cfg = tiny();
  ModelParams<float> p = init_params<float>(cfg, 8);
  const auto refs = param_refs(p);
  std::map<std::string, int> seen;
  for (const auto& r : refs) {
    ++seen[r.name];
    std::size_t n = 1;
    for (int d : r.shape) n *= static_cast<std::size_t>(d);
    CHECK(n == r.values.size());
    CHECK_NOTHROW(group_of(r.name));
  }
  for (const auto& [name, count] : seen) CHECK(count == 1);
  CHECK(init_params<float>(cfg, 8).pos_embed == p.pos_embed);
  CHECK(init_params<float>(cfg, 9).pos_embed != p.pos_embed);
  const auto d = cast_params<double>(p, cfg);
  CHECK(d.pos_embed(3, 2) == static_cast<double>(p.pos_embed(3, 2)));
}

TEST_CASE("position table resampling") {
  Matrix<double> table(4, 2);
  for (int i = 0; i < 4; ++i) table(i, 0) = table(i, 1) = 1.5;
  const auto big = resize_position_table(table, 2, 4);
  CHECK(big.rows == 16);
  for (double v : big.data) CHECK(v == doctest::Approx(1.5));
  CHECK(resize_position_table(table, 2, 2) == table);
}

TEST_CASE("full gradient matches finite differences in double") {
  const ModelConfig cfg = tiny();
  RefCutNet<double> net(cfg, init_params<double>(cfg, 10));
  const TrainingSample sample = tiny_sample(11);

  ModelParams<double> grads = zero_params<double>(cfg);
  const double loss = loss_and_gradients(net, sample, 2.0, grads);
  CHECK(loss == doctest::Approx(forward_loss(net, sample)).epsilon(1e-12));

  auto values = param_refs(net.mutable_params());
  const auto analytic = param_refs(grads);
  const double h = 1e-6;
  std::map<ParamGroup, double> group_norm;
  int checked = 0, bad = 0;
  for (std::size_t r = 0; r < values.size(); ++r) {
    const auto group = group_of(values[r].name);
    for (std::size_t i = 0; i < values[r].values.size(); ++i) {
      double& w = values[r].values[i];
      const double keep = w;
      w = keep + h;
      const double up = forward_loss(net, sample);
      w = keep - h;
      const double down = forward_loss(net, sample);
      w = keep;
      const double fd = (up - down) / (2 * h);
      const double an = analytic[r].values[i];
      group_norm[group] += an * an;
      ++checked;
      if (std::abs(fd - an) > 1e-6 + 1e-4 * std::abs(fd)) {
        ++bad;
        MESSAGE(values[r].name << "[" << i << "] fd=" << fd << " analytic=" << an);
      }
    }
  }
  CHECK(checked > 1000);
  CHECK(bad == 0);
  for (auto g : {ParamGroup::ImageEmbed, ParamGroup::ExtraEmbed, ParamGroup::Backbone,
                 ParamGroup::Decoder, ParamGroup::PositiveMlp, ParamGroup::NegativeMlp}) {
    INFO(to_string(g));
    CHECK(group_norm[g] > 0.0);
  }
}

TEST_CASE("float gradients reach every group") {
  const ModelConfig cfg = tiny();
  RefCutNet<float> net(cfg, init_params<float>(cfg, 12));
  ModelParams<float> grads = zero_params<float>(cfg);
  const double loss = loss_and_gradients(net, tiny_sample(13), 2.0, grads);
  CHECK(std::isfinite(loss));
  std::map<ParamGroup, double> norm;
  for (const auto& r : param_refs(std::as_const(grads)))
    for (float v : r.values) norm[group_of(r.name)] += static_cast<double>(v) * v;
  CHECK(norm.size() == 6);
  for (const auto& [g, n] : norm) {
    INFO(to_string(g));
    CHECK(n > 0.0);
  }
}

TEST_CASE("prompt vector gradients match finite differences") {
  const ModelConfig cfg = tiny();
  RefCutNet<double> net(cfg, init_params<double>(cfg, 14));
  const TrainingSample s = tiny_sample(15);
  const ExtraMaps maps = assemble_extra_maps(s.clicks, s.prev, cfg.click_radius);
  const auto image = net.embed_image(s.image);
  const auto extra = net.embed_extras(maps);
  PromptPair<double> prompts = generate_prompts(net, s.guidance);

  auto loss = [&] {
    const auto logits = net.decode_logits(net.backbone(RefCutNet<double>::fuse(image, extra, prompts)));
    return normalized_focal_loss_logits<double>(logits, s.gt, 2.0, nullptr);
  };
  BackboneTrace<double> trace;
  DecoderTrace<double> dtrace;
  const auto logits = net.decode_logits(net.backbone(RefCutNet<double>::fuse(image, extra, prompts), &trace), &dtrace);
  Matrix<double> dlogits;
  normalized_focal_loss_logits<double>(logits, s.gt, 2.0, &dlogits);
  ModelParams<double> grads = zero_params<double>(cfg);
  const auto dfused = net.backbone_backward(trace, net.decoder_backward(dtrace, dlogits, grads), grads);
  const auto analytic = nn::kernels::column_sums(dfused);

  double norm = 0;
  for (auto* p : {&prompts.positive, &prompts.negative})
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double keep = (*p)[i];
      (*p)[i] = keep + 1e-3;
      const double up = loss();
      (*p)[i] = keep - 1e-3;
      const double down = loss();
      (*p)[i] = keep;
      const double fd = (up - down) / 2e-3;
      norm += analytic[i] * analytic[i];
      CHECK(std::abs(fd - analytic[i]) <= 1e-3 * std::max(std::abs(fd), 1e-6));
    }
  CHECK(norm > 0);
}

TEST_CASE("a click only changes the extra tokens of patches its disk touches") {
  const ModelConfig cfg = tiny();
  RefCutNet<double> net(cfg, init_params<double>(cfg, 16));
  const std::vector<Click> a{{2, 2, Polarity::Positive, 1}};
  const std::vector<Click> b{{2, 2, Polarity::Positive, 1}, {13, 9, Polarity::Negative, 2}};
  const auto ta = net.embed_extras(assemble_extra_maps(a, SoftMask(16, 16), cfg.click_radius));
  const auto tb = net.embed_extras(assemble_extra_maps(b, SoftMask(16, 16), cfg.click_radius));
  const std::vector<Click> added{b[1]};
  const BitMask disk = rasterize_disks(added, Polarity::Negative, 16, 16, cfg.click_radius);
  for (int gy = 0; gy < 4; ++gy)
    for (int gx = 0; gx < 4; ++gx) {
      bool touched = false;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) touched = touched || disk.at(gy * 4 + r, gx * 4 + c);
      bool same = true;
      for (int c = 0; c < cfg.embed_dim; ++c) same = same && ta.tokens(gy * 4 + gx, c) == tb.tokens(gy * 4 + gx, c);
      CHECK(same != touched);
    }
}
