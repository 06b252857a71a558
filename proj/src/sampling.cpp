#include "refcut/sampling.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace refcut {

PairSampler::PairSampler(const Dataset& dataset, ReferenceDropout dropout)
    : dataset_(&dataset), dropout_(dropout) {
  dropout_.validate();
  for (std::size_t i = 0; i < dataset.size(); ++i) by_category_[dataset[i].category].push_back(i);
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (by_category_[dataset[i].category].size() >= 2) eligible_.push_back(i);
  if (eligible_.empty()) {
    throw SamplingError("no category has at least two objects; cannot form reference pairs");
  }
}

TrainingPair PairSampler::sample(std::mt19937_64& rng) const {
  const Dataset& ds = *dataset_;
  const std::size_t target_index =
      eligible_[std::uniform_int_distribution<std::size_t>(0, eligible_.size() - 1)(rng)];
  const PartObject& target = ds[target_index];

  const int n = target.part_count();
  const int k = std::uniform_int_distribution<int>(1, n)(rng);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());

  const auto& peers = by_category_.at(target.category);
  std::size_t ref_index = target_index;
  {
    // Uniform over the other members of the category.
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, peers.size() - 2)(rng);
    std::size_t seen = 0;
    for (std::size_t idx : peers) {
      if (idx == target_index) continue;
      if (seen++ == pick) {
        ref_index = idx;
        break;
      }
    }
  }
  const PartObject& reference = ds[ref_index];

  TrainingPair pair;
  pair.target_id = target.object_id;
  pair.reference_id = reference.object_id;
  pair.image = target.image;
  pair.gt = target.union_of(order);
  for (int i : order) pair.selected_tags.push_back(target.parts[static_cast<std::size_t>(i)].tag);

  ReferenceGuidance guidance;
  guidance.image = reference.image;
  guidance.positive = BitMask(reference.image.height, reference.image.width);
  guidance.negative = BitMask(reference.image.height, reference.image.width);
  for (const auto& part : reference.parts) {
    const bool selected = std::find(pair.selected_tags.begin(), pair.selected_tags.end(),
                                    part.tag) != pair.selected_tags.end();
    (selected ? guidance.positive : guidance.negative) |= part.mask;
  }
  pair.guidance = reference_dropout(std::move(guidance), rng, dropout_);
  return pair;
}

TrainingPair sample_training_pair(const Dataset& dataset, std::mt19937_64& rng,
                                  const ReferenceDropout& dropout) {
  return PairSampler(dataset, dropout).sample(rng);
}

bool parts_connected(const BitMask& a, const BitMask& b) {
  const BitMask u = a | b;
  if (!u.any()) return false;
  return maskops::connected_components(u, Connectivity::Eight).count == 1;
}

std::string_view to_string(ComboKind k) {
  switch (k) {
    case ComboKind::Single: return "single";
    case ComboKind::Pair: return "pair";
    case ComboKind::Whole: return "whole";
  }
  return "?";
}

ComboKind combo_kind_from_string(std::string_view s) {
  if (s == "single") return ComboKind::Single;
  if (s == "pair") return ComboKind::Pair;
  if (s == "whole") return ComboKind::Whole;
  throw std::invalid_argument("unknown combination kind '" + std::string(s) + "'");
}

std::vector<Combination> enumerate_eval_combinations(const PartObject& object) {
  const int n = object.part_count();
  std::vector<Combination> out;
  if (n == 1) {
    out.push_back({{0}, ComboKind::Whole});
    return out;
  }
  for (int i = 0; i < n; ++i) out.push_back({{i}, ComboKind::Single});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (parts_connected(object.parts[static_cast<std::size_t>(i)].mask,
                          object.parts[static_cast<std::size_t>(j)].mask))
        out.push_back({{i, j}, ComboKind::Pair});
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  out.push_back({all, ComboKind::Whole});
  return out;
}

const PartObject& select_reference(const Dataset& eval_set, const PartObject& current) {
  const PartObject* successor = nullptr;
  const PartObject* first = nullptr;
  bool found_current = false;
  for (const auto& obj : eval_set) {
    if (obj.category != current.category) continue;
    if (obj.object_id == current.object_id) {
      found_current = true;
      continue;
    }
    if (first == nullptr || obj.object_id.compare(first->object_id) < 0) first = &obj;
    if (obj.object_id.compare(current.object_id) > 0 &&
        (successor == nullptr || obj.object_id.compare(successor->object_id) < 0)) {
      successor = &obj;
    }
  }
  if (!found_current) {
    throw SamplingError("object '" + current.object_id + "' is not in the evaluation set");
  }
  if (first == nullptr) {
    throw SamplingError("category '" + current.category + "' has a single object ('" +
                        current.object_id + "'); no reference available");
  }
  return successor ? *successor : *first;
}

std::string_view to_string(GuidanceRegime r) {
  switch (r) {
    case GuidanceRegime::None: return "none";
    case GuidanceRegime::PositiveOnly: return "pos";
    case GuidanceRegime::NegativeOnly: return "neg";
    case GuidanceRegime::Both: return "both";
  }
  return "?";
}

GuidanceRegime guidance_regime_from_string(std::string_view s) {
  if (s == "none") return GuidanceRegime::None;
  if (s == "pos" || s == "positive") return GuidanceRegime::PositiveOnly;
  if (s == "neg" || s == "negative") return GuidanceRegime::NegativeOnly;
  if (s == "both") return GuidanceRegime::Both;
  throw std::invalid_argument("unknown guidance regime '" + std::string(s) + "'");
}

ReferenceGuidance EvalSample::guidance(GuidanceRegime regime) const {
  ReferenceGuidance g;
  g.image = reference->image;
  const int h = reference->image.height, w = reference->image.width;
  g.positive = BitMask(h, w);
  g.negative = BitMask(h, w);
  if (regime == GuidanceRegime::None) return g;
  for (const auto& part : reference->parts) {
    const bool selected = std::find(tags.begin(), tags.end(), part.tag) != tags.end();
    if (selected && regime != GuidanceRegime::NegativeOnly) g.positive |= part.mask;
    if (!selected && regime != GuidanceRegime::PositiveOnly) g.negative |= part.mask;
  }
  return g;
}

namespace {

std::string make_sample_id(const PartObject& obj, const std::vector<std::string>& tags,
                           ComboKind kind) {
  std::string id = obj.object_id + "/";
  for (std::size_t i = 0; i < tags.size(); ++i) id += (i ? "+" : "") + tags[i];
  id += "/";
  id += to_string(kind);
  return id;
}

}  // namespace

std::vector<EvalSample> build_eval_samples(const Dataset& eval_set) {
  std::map<std::string, int> category_sizes;
  for (const auto& obj : eval_set) ++category_sizes[obj.category];
  std::vector<EvalSample> samples;
  for (const auto& obj : eval_set) {
    if (category_sizes[obj.category] < 2) continue;
    const PartObject& ref = select_reference(eval_set, obj);
    for (const auto& combo : enumerate_eval_combinations(obj)) {
      EvalSample s;
      s.target = &obj;
      s.reference = &ref;
      s.kind = combo.kind;
      for (int i : combo.parts) s.tags.push_back(obj.parts[static_cast<std::size_t>(i)].tag);
      s.gt = obj.union_of(combo.parts);
      s.sample_id = make_sample_id(obj, s.tags, s.kind);
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

void write_eval_manifest(const std::filesystem::path& path, const std::vector<EvalSample>& samples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& s : samples) {
    nlohmann::json j = {{"sample_id", s.sample_id},
                        {"target_id", s.target->object_id},
                        {"combo", s.tags},
                        {"kind", to_string(s.kind)},
                        {"reference_id", s.reference->object_id}};
    out << j.dump() << '\n';
  }
}

std::vector<EvalSample> read_eval_manifest(const std::filesystem::path& path,
                                           const Dataset& eval_set) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  std::map<std::string, const PartObject*> by_id;
  for (const auto& obj : eval_set) by_id[obj.object_id] = &obj;
  auto lookup = [&](const std::string& id) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw SamplingError("manifest references unknown object '" + id + "'");
    return it->second;
  };
  std::vector<EvalSample> samples;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    EvalSample s;
    s.sample_id = j.at("sample_id").get<std::string>();
    s.target = lookup(j.at("target_id").get<std::string>());
    s.reference = lookup(j.at("reference_id").get<std::string>());
    s.tags = j.at("combo").get<std::vector<std::string>>();
    s.kind = combo_kind_from_string(j.at("kind").get<std::string>());
    for (const auto& t : s.tags) {
      if (s.target->find(t) < 0) {
        throw SamplingError("manifest tag '" + t + "' not found on '" + s.target->object_id + "'");
      }
    }
    s.gt = s.target->union_of_tags(s.tags);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace refcut
