#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <numbers>
#include <random>

#include <fmt/format.h>

#include "refcut/data_io.hpp"
#include "refcut/sampling.hpp"

namespace refcut {

namespace {

struct Vec2 {
  double x, y;
};
using Polygon = std::vector<Vec2>;

struct PaintOp {
  int part;
  Polygon shape;
};

Polygon rect(double x0, double y0, double x1, double y1) {
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

Polygon ellipse(double cx, double cy, double rx, double ry, double a0 = 0.0,
                double a1 = 2 * std::numbers::pi) {
  Polygon p;
  constexpr int kSegments = 32;
  for (int i = 0; i <= kSegments; ++i) {
    const double t = a0 + (a1 - a0) * i / kSegments;
    p.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
  }
  return p;
}

// Upper half (y grows downwards).
Polygon dome(double cx, double cy, double rx, double ry) {
  return ellipse(cx, cy, rx, ry, std::numbers::pi, 2 * std::numbers::pi);
}

bool inside(const Polygon& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2 a = poly[i], b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

struct CategorySpec {
  std::string name;
  std::vector<std::string> tags;
  std::vector<PaintOp> ops;  // in object frame [-1, 1]^2, painted in order
};

std::vector<CategorySpec> library() {
  using V = std::vector<PaintOp>;
  return {
      {"lollipop", {"stick", "candy"}, V{{0, rect(-0.07, -0.1, 0.07, 1.0)}, {1, ellipse(0, -0.45, 0.5, 0.5)}}},
      {"mushroom", {"stem", "cap"}, V{{0, rect(-0.2, -0.3, 0.2, 0.9)}, {1, dome(0, -0.2, 0.85, 0.65)}}},
      {"barbell",
       {"bar", "left_plate", "right_plate"},
       V{{0, rect(-0.95, -0.07, 0.95, 0.07)},
         {1, rect(-0.75, -0.5, -0.52, 0.5)},
         {2, rect(0.52, -0.5, 0.75, 0.5)}}},
      {"balloon", {"string", "balloon"}, V{{0, rect(-0.05, 0.1, 0.05, 1.0)}, {1, ellipse(0, -0.3, 0.5, 0.62)}}},
      {"hammer", {"handle", "head"}, V{{0, rect(-0.09, -0.6, 0.09, 1.0)}, {1, rect(-0.6, -0.88, 0.6, -0.5)}}},
      {"snowman",
       {"bottom", "middle", "head"},
       V{{0, ellipse(0, 0.55, 0.45, 0.45)}, {1, ellipse(0, -0.05, 0.34, 0.34)}, {2, ellipse(0, -0.55, 0.25, 0.25)}}},
      {"tree",
       {"trunk", "crown"},
       V{{0, rect(-0.15, 0.3, 0.15, 1.0)}, {1, Polygon{{0, -1.0}, {-0.7, 0.45}, {0.7, 0.45}}}}},
      {"traffic_light",
       {"pole", "housing", "red_lamp", "green_lamp"},
       V{{0, rect(-0.08, 0.3, 0.08, 1.0)},
         {1, rect(-0.35, -0.95, 0.35, 0.4)},
         {2, ellipse(0, -0.55, 0.2, 0.2)},
         {3, ellipse(0, 0.0, 0.2, 0.2)}}},
      {"house",
       {"walls", "roof", "door"},
       V{{0, rect(-0.6, -0.1, 0.6, 0.9)},
         {1, Polygon{{0, -0.9}, {-0.8, -0.02}, {0.8, -0.02}}},
         {2, rect(-0.15, 0.4, 0.15, 0.9)}}},
      {"key",
       {"bow", "shaft", "bit"},
       V{{0, ellipse(-0.6, 0, 0.35, 0.35)}, {1, rect(-0.32, -0.08, 0.9, 0.08)}, {2, rect(0.55, 0.05, 0.8, 0.38)}}},
      {"spoon", {"handle", "bowl"}, V{{0, rect(-0.07, -0.1, 0.07, 1.0)}, {1, ellipse(0, -0.5, 0.3, 0.45)}}},
      {"umbrella",
       {"canopy", "shaft", "handle"},
       V{{0, dome(0, -0.2, 0.9, 0.7)}, {1, rect(-0.05, -0.3, 0.05, 0.8)}, {2, rect(-0.32, 0.72, 0.05, 0.88)}}},
      {"table",
       {"top", "left_leg", "right_leg"},
       V{{0, rect(-0.9, -0.4, 0.9, -0.18)}, {1, rect(-0.8, -0.25, -0.62, 0.7)}, {2, rect(0.62, -0.25, 0.8, 0.7)}}},
      {"rocket",
       {"body", "nose", "left_fin", "right_fin", "flame"},
       V{{0, rect(-0.25, -0.4, 0.25, 0.6)},
         {1, Polygon{{0, -1.0}, {-0.25, -0.36}, {0.25, -0.36}}},
         {2, Polygon{{-0.22, 0.15}, {-0.6, 0.75}, {-0.22, 0.6}}},
         {3, Polygon{{0.22, 0.15}, {0.6, 0.75}, {0.22, 0.6}}},
         {4, Polygon{{-0.18, 0.56}, {0.18, 0.56}, {0, 1.0}}}}},
      {"ice_cream",
       {"cone", "scoop"},
       V{{0, Polygon{{-0.45, -0.15}, {0.45, -0.15}, {0, 1.0}}}, {1, ellipse(0, -0.42, 0.5, 0.45)}}},
      {"flower",
       {"stem", "petals", "center"},
       V{{0, rect(-0.06, 0.0, 0.06, 1.0)}, {1, ellipse(0, -0.35, 0.58, 0.58)}, {2, ellipse(0, -0.35, 0.22, 0.22)}}},
      {"car",
       {"body", "cabin", "front_wheel", "rear_wheel"},
       V{{0, rect(-1.0, -0.1, 1.0, 0.45)},
         {1, Polygon{{-0.55, -0.05}, {-0.35, -0.6}, {0.35, -0.6}, {0.55, -0.05}}},
         {2, ellipse(0.55, 0.45, 0.24, 0.24)},
         {3, ellipse(-0.55, 0.45, 0.24, 0.24)}}},
      {"bottle",
       {"body", "neck", "cap"},
       V{{0, rect(-0.4, -0.2, 0.4, 1.0)}, {1, rect(-0.15, -0.72, 0.15, -0.15)}, {2, rect(-0.21, -0.97, 0.21, -0.65)}}},
      {"lamp",
       {"base", "pole", "shade"},
       V{{0, rect(-0.45, 0.78, 0.45, 1.0)},
         {1, rect(-0.06, -0.3, 0.06, 0.85)},
         {2, Polygon{{-0.25, -0.95}, {0.25, -0.95}, {0.55, -0.22}, {-0.55, -0.22}}}}},
      {"pencil",
       {"body", "tip", "eraser"},
       V{{0, rect(-0.78, -0.15, 0.55, 0.15)},
         {1, Polygon{{0.5, -0.15}, {0.5, 0.15}, {1.0, 0.0}}},
         {2, rect(-1.0, -0.15, -0.74, 0.15)}}},
      {"sword",
       {"blade", "guard", "grip"},
       V{{0, Polygon{{0, -1.0}, {0.11, -0.85}, {0.11, 0.35}, {-0.11, 0.35}, {-0.11, -0.85}}},
         {1, rect(-0.42, 0.28, 0.42, 0.42)},
         {2, rect(-0.08, 0.38, 0.08, 0.97)}}},
      {"cup_saucer",
       {"saucer", "cup"},
       V{{0, ellipse(0, 0.75, 0.95, 0.2)}, {1, Polygon{{-0.5, -0.4}, {0.5, -0.4}, {0.35, 0.68}, {-0.35, 0.68}}}}},
      {"ball_on_box", {"box", "ball"}, V{{0, rect(-0.7, 0.0, 0.7, 0.95)}, {1, ellipse(0, -0.4, 0.44, 0.44)}}},
      {"book_stack",
       {"bottom_book", "middle_book", "top_book"},
       V{{0, rect(-0.9, 0.45, 0.85, 0.95)}, {1, rect(-0.75, -0.05, 0.8, 0.5)}, {2, rect(-0.6, -0.55, 0.7, 0.0)}}},
      {"sign", {"post", "board"}, V{{0, rect(-0.07, -0.2, 0.07, 1.0)}, {1, rect(-0.8, -0.9, 0.8, -0.1)}}},
  };
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Rgb {
  double r, g, b;
};

Rgb hsv(double h, double s, double v) {
  const double i = std::floor(h * 6), f = h * 6 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Rgb tag_color(int global_index) {
  const auto frac = [](double x) { return x - std::floor(x); };
  return hsv(frac(global_index * 0.618033988749895), 0.5 + 0.4 * frac(global_index * 0.37),
             0.55 + 0.4 * frac(global_index * 0.73 + 0.2));
}

/// Placement of an object frame in the image.
struct Placement {
  double cx, cy, half, angle, sx, sy;
};

using Uniform = std::uniform_real_distribution<double>;

std::vector<Polygon> jitter_parts(const CategorySpec& spec, double jitter, std::mt19937_64& rng) {
  std::vector<Polygon> out;
  for (const auto& op : spec.ops) {
    Vec2 c{0, 0};
    for (const auto& v : op.shape) c = {c.x + v.x, c.y + v.y};
    c = {c.x / op.shape.size(), c.y / op.shape.size()};
    const double s = 1.0 + Uniform(-jitter / 2, jitter / 2)(rng);
    Polygon p;
    for (const auto& v : op.shape) p.push_back({c.x + (v.x - c.x) * s, c.y + (v.y - c.y) * s});
    out.push_back(std::move(p));
  }
  return out;
}

/// Paints the object into `image` and (optionally) its part indices into `index`.
void render(const CategorySpec& spec, const std::vector<Polygon>& shapes, const Placement& at,
            const std::vector<Rgb>& colors, double noise, std::mt19937_64& rng, Image& image,
            std::vector<int>* index) {
  const int h = image.height, w = image.width;
  const double ca = std::cos(at.angle), sa = std::sin(at.angle);
  Uniform n(-noise, noise);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double dx = c + 0.5 - at.cx, dy = r + 0.5 - at.cy;
      const double u = (ca * dx + sa * dy) / (at.half * at.sx);
      const double v = (-sa * dx + ca * dy) / (at.half * at.sy);
      if (std::abs(u) > 1.2 || std::abs(v) > 1.2) continue;
      int hit = -1;
      for (std::size_t k = 0; k < shapes.size(); ++k)
        if (inside(shapes[k], u, v)) hit = spec.ops[k].part;
      if (hit < 0) continue;
      const Rgb col = colors[static_cast<std::size_t>(hit)];
      const double shade = 1.0 - 0.12 * v;
      image.at(r, c, 0) = static_cast<float>(std::clamp(col.r * shade + n(rng), 0.0, 1.0));
      image.at(r, c, 1) = static_cast<float>(std::clamp(col.g * shade + n(rng), 0.0, 1.0));
      image.at(r, c, 2) = static_cast<float>(std::clamp(col.b * shade + n(rng), 0.0, 1.0));
      if (index) (*index)[static_cast<std::size_t>(r) * w + c] = hit + 1;
    }
}

std::vector<Rgb> instance_colors(const std::vector<int>& base_index, double jitter,
                                 std::mt19937_64& rng) {
  std::vector<Rgb> out;
  Uniform j(-jitter, jitter);
  for (int idx : base_index) {
    const Rgb b = tag_color(idx);
    out.push_back({std::clamp(b.r + j(rng), 0.0, 1.0), std::clamp(b.g + j(rng), 0.0, 1.0),
                   std::clamp(b.b + j(rng), 0.0, 1.0)});
  }
  return out;
}

void paint_background(Image& image, std::mt19937_64& rng) {
  Uniform u(0.0, 1.0);
  const Rgb a{u(rng), u(rng), u(rng)}, b{u(rng), u(rng), u(rng)};
  const double angle = u(rng) * 2 * std::numbers::pi;
  const double ca = std::cos(angle), sa = std::sin(angle);
  Uniform n(-0.04, 0.04);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) {
      const double t = 0.5 + 0.5 * (ca * (c / double(image.width) - 0.5) + sa * (r / double(image.height) - 0.5));
      image.at(r, c, 0) = static_cast<float>(std::clamp(a.r + (b.r - a.r) * t + n(rng), 0.0, 1.0));
      image.at(r, c, 1) = static_cast<float>(std::clamp(a.g + (b.g - a.g) * t + n(rng), 0.0, 1.0));
      image.at(r, c, 2) = static_cast<float>(std::clamp(a.b + (b.b - a.b) * t + n(rng), 0.0, 1.0));
    }
}

bool acceptable(const PartObject& obj) {
  for (const auto& p : obj.parts)
    if (p.mask.count() < 4) return false;
  if (maskops::connected_components(obj.whole(), Connectivity::Eight).count != 1) return false;
  if (obj.parts.size() == 2 && !parts_connected(obj.parts[0].mask, obj.parts[1].mask)) return false;
  return true;
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
  if (n_categories < 1) fail("n_categories must be >= 1");
  if (instances_per_category < 0) fail("instances_per_category must be >= 0");
  if (image_size < 16) fail("image_size must be >= 16");
  if (min_parts < 1 || max_parts > 5 || min_parts > max_parts) fail("part range must lie in [1, 5]");
  if (color_jitter < 0 || geometry_jitter < 0 || geometry_jitter > 0.8) fail("jitter out of range");
  if (distractors < 0) fail("distractors must be >= 0");
}

std::vector<std::pair<std::string, std::vector<std::string>>> synthetic_categories() {
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  for (const auto& c : library()) out.emplace_back(c.name, c.tags);
  return out;
}

Dataset generate_synthetic(const SynthConfig& config) {
  config.validate();
  const std::vector<CategorySpec> all = library();
  std::vector<int> color_base;  // first global tag index of each library category
  {
    int next = 0;
    for (const auto& c : all) {
      color_base.push_back(next);
      next += static_cast<int>(c.tags.size());
    }
  }
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int n = static_cast<int>(all[i].tags.size());
    if (n >= config.min_parts && n <= config.max_parts) chosen.push_back(i);
  }
  if (static_cast<int>(chosen.size()) < config.n_categories) {
    throw std::invalid_argument(fmt::format("synth config: only {} library categories have {}..{} parts",
                                            chosen.size(), config.min_parts, config.max_parts));
  }
  chosen.resize(static_cast<std::size_t>(config.n_categories));

  const int per = config.instances_per_category;
  const int s = config.image_size;
  Dataset out(chosen.size() * static_cast<std::size_t>(per));
  const long total = static_cast<long>(out.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
#pragma omp parallel for schedule(dynamic)
  for (long job = 0; job < total; ++job) {
    try {
    const std::size_t cat = chosen[static_cast<std::size_t>(job / per)];
    const int instance = static_cast<int>(job % per);
    const CategorySpec& spec = all[cat];
    std::mt19937_64 rng(splitmix(config.seed ^ splitmix(cat * 100003ULL + instance)));
    std::vector<int> base;
    for (std::size_t t = 0; t < spec.tags.size(); ++t) base.push_back(color_base[cat] + static_cast<int>(t));

    PartObject obj;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 200) throw std::logic_error("synthetic generator cannot place " + spec.name);
      Image image(s, s);
      paint_background(image, rng);
      for (int d = 0; d < config.distractors; ++d) {
        std::size_t other = std::uniform_int_distribution<std::size_t>(0, all.size() - 2)(rng);
        if (other >= cat) ++other;
        std::vector<int> obase;
        for (std::size_t t = 0; t < all[other].tags.size(); ++t)
          obase.push_back(color_base[other] + static_cast<int>(t));
        const Placement at{Uniform(0, s)(rng), Uniform(0, s)(rng), s * Uniform(0.12, 0.25)(rng),
                           Uniform(-0.6, 0.6)(rng), 1.0, 1.0};
        render(all[other], jitter_parts(all[other], config.geometry_jitter, rng), at,
               instance_colors(obase, config.color_jitter, rng), 0.03, rng, image, nullptr);
      }
      const double half = s * Uniform(0.3, 0.42)(rng);
      const double sx = 1.0 + Uniform(-config.geometry_jitter, config.geometry_jitter)(rng);
      const double sy = 1.0 + Uniform(-config.geometry_jitter, config.geometry_jitter)(rng);
      const double margin = half * std::max(sx, sy);
      const Placement at{Uniform(std::min(margin, s / 2.0), std::max(s - margin, s / 2.0))(rng),
                         Uniform(std::min(margin, s / 2.0), std::max(s - margin, s / 2.0))(rng),
                         half, Uniform(-0.3, 0.3)(rng), sx, sy};
      std::vector<int> index(static_cast<std::size_t>(s) * s, 0);
      render(spec, jitter_parts(spec, config.geometry_jitter, rng), at,
             instance_colors(base, config.color_jitter, rng), 0.04, rng, image, &index);
      quantize_8bit(image);

      obj = PartObject{};
      obj.object_id = fmt::format("{}{}_{:04d}", config.id_prefix, spec.name, instance);
      obj.category = spec.name;
      obj.image = std::move(image);
      for (std::size_t t = 0; t < spec.tags.size(); ++t) {
        BitMask m(s, s);
        for (std::size_t i = 0; i < index.size(); ++i)
          if (index[i] == static_cast<int>(t) + 1) m.set_flat(i, true);
        obj.parts.push_back({spec.tags[t], std::move(m)});
      }
      if (acceptable(obj)) break;
    }
    out[static_cast<std::size_t>(job)] = std::move(obj);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  sort_by_object_id(out);
  return out;
}

}  // namespace refcut
