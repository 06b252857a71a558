#include "refcut/reference_prompt.hpp"

#include <cstring>
#include <mutex>

namespace refcut {

void ReferenceGuidance::validate() const {
  if (image.empty()) throw MaskError("reference guidance requires a reference image");
  for (const BitMask* m : {&positive, &negative}) {
    if (m->empty()) continue;
    if (m->height() != image.height || m->width() != image.width) {
      throw MaskError("reference mask is " + std::to_string(m->height()) + "x" +
                      std::to_string(m->width()) + " but the reference image is " +
                      std::to_string(image.height) + "x" + std::to_string(image.width));
    }
  }
}

ReferenceGuidance resize_guidance(const ReferenceGuidance& g, int size) {
  g.validate();
  ReferenceGuidance out;
  out.image = resize_bilinear(g.image, size, size);
  if (!g.positive.empty()) out.positive = maskops::resize_nearest(g.positive, size, size);
  if (!g.negative.empty()) out.negative = maskops::resize_nearest(g.negative, size, size);
  return out;
}

template <typename T>
GridFeature<T> extract_reference_feature(const RefCutNet<T>& net, const Image& ref_image,
                                         BackboneTrace<T>* trace) {
  return net.backbone(net.embed_image(ref_image), trace);
}

template <typename T>
std::vector<T> masked_representation(const GridFeature<T>& feature, const SoftMask& weights) {
  if (weights.height() != feature.grid_h || weights.width() != feature.grid_w) {
    throw MaskError("masked_representation: weights are " + std::to_string(weights.height()) + "x" +
                    std::to_string(weights.width()) + " but the feature grid is " +
                    std::to_string(feature.grid_h) + "x" + std::to_string(feature.grid_w));
  }
  const int channels = feature.tokens.cols;
  std::vector<T> out(static_cast<std::size_t>(channels), T(0));
  const double total = weights.sum();
  if (total == 0.0) return out;
  const auto& w = weights.data();
  const int n = feature.tokens.rows;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += w[static_cast<std::size_t>(i)] * feature.tokens(i, c);
    out[static_cast<std::size_t>(c)] = static_cast<T>(acc / total);
  }
  return out;
}

template <typename T>
Matrix<T> masked_representation_backward(const GridFeature<T>& feature, const SoftMask& weights,
                                         const std::vector<T>& grad) {
  Matrix<T> d(feature.tokens.rows, feature.tokens.cols);
  const double total = weights.sum();
  if (total == 0.0) return d;
  for (int i = 0; i < d.rows; ++i) {
    const T scale = static_cast<T>(weights.data()[static_cast<std::size_t>(i)] / total);
    if (scale == T(0)) continue;
    T* row = d.row(i);
    for (int c = 0; c < d.cols; ++c) row[c] = scale * grad[static_cast<std::size_t>(c)];
  }
  return d;
}

template <typename T>
PromptVector<T> encode_prompt(const RefCutNet<T>& net, const std::vector<T>& representation,
                              Polarity polarity) {
  return PromptVector<T>{polarity, net.prompt_mlp(representation, polarity)};
}

SoftMask token_weights(const BitMask& mask, int patch_size) {
  return maskops::downsample_area(mask, patch_size);
}

template <typename T>
PromptPair<T> generate_prompts(const RefCutNet<T>& net, const GridFeature<T>& feature,
                               const ReferenceGuidance& guidance) {
  guidance.validate();
  const int c = net.config().embed_dim;
  PromptPair<T> out{std::vector<T>(static_cast<std::size_t>(c), T(0)),
                    std::vector<T>(static_cast<std::size_t>(c), T(0))};
  const int patch = net.config().patch_size;
  if (guidance.has_positive()) {
    const auto rep = masked_representation(feature, token_weights(guidance.positive, patch));
    out.positive = encode_prompt(net, rep, Polarity::Positive).values;
  }
  if (guidance.has_negative()) {
    const auto rep = masked_representation(feature, token_weights(guidance.negative, patch));
    out.negative = encode_prompt(net, rep, Polarity::Negative).values;
  }
  return out;
}

template <typename T>
PromptPair<T> generate_prompts(const RefCutNet<T>& net, const ReferenceGuidance& guidance) {
  guidance.validate();
  if (!guidance.has_positive() && !guidance.has_negative()) {
    const auto c = static_cast<std::size_t>(net.config().embed_dim);
    return PromptPair<T>{std::vector<T>(c, T(0)), std::vector<T>(c, T(0))};
  }
  return generate_prompts(net, extract_reference_feature(net, guidance.image), guidance);
}

template <typename T>
std::uint64_t ReferenceFeatureCache<T>::fingerprint(const Image& image) {
  // FNV-1a over the dimensions and raw float bits.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  mix(&image.height, sizeof image.height);
  mix(&image.width, sizeof image.width);
  mix(image.data.data(), image.data.size() * sizeof(float));
  return h;
}

template <typename T>
std::shared_ptr<const GridFeature<T>> ReferenceFeatureCache<T>::get_or_compute(
    const RefCutNet<T>& net, const Image& image) {
  const std::uint64_t key = fingerprint(image);
  {
    std::shared_lock lock(mutex_);
    if (auto it = entries_.find(key); it != entries_.end()) {
      ++hits_;
      return it->second;
    }
  }
  auto feature = std::make_shared<const GridFeature<T>>(extract_reference_feature(net, image));
  std::unique_lock lock(mutex_);
  auto [it, inserted] = entries_.emplace(key, feature);
  if (inserted) {
    insertion_order_.push_back(key);
    if (entries_.size() > capacity_) {
      entries_.erase(insertion_order_.front());
      insertion_order_.erase(insertion_order_.begin());
    }
  }
  return it->second;
}

template <typename T>
std::size_t ReferenceFeatureCache<T>::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

#define REFCUT_INSTANTIATE_PROMPT(T)                                                            \
  template GridFeature<T> extract_reference_feature<T>(const RefCutNet<T>&, const Image&,       \
                                                       BackboneTrace<T>*);                      \
  template std::vector<T> masked_representation<T>(const GridFeature<T>&, const SoftMask&);     \
  template Matrix<T> masked_representation_backward<T>(const GridFeature<T>&, const SoftMask&,  \
                                                       const std::vector<T>&);                  \
  template PromptVector<T> encode_prompt<T>(const RefCutNet<T>&, const std::vector<T>&,         \
                                            Polarity);                                           \
  template PromptPair<T> generate_prompts<T>(const RefCutNet<T>&, const ReferenceGuidance&);    \
  template PromptPair<T> generate_prompts<T>(const RefCutNet<T>&, const GridFeature<T>&,        \
                                             const ReferenceGuidance&);                         \
  template class ReferenceFeatureCache<T>;

REFCUT_INSTANTIATE_PROMPT(float)
REFCUT_INSTANTIATE_PROMPT(double)

}  // namespace refcut
