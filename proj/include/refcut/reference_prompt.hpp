#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <vector>

#include "refcut/image.hpp"
#include "refcut/maskops.hpp"
#include "refcut/model.hpp"

namespace refcut {

/// Reference image plus optional positive / negative masks. A mask that is
/// default-constructed (no pixels at all) or has no foreground is "absent".
struct ReferenceGuidance {
  Image image;
  BitMask positive;
  BitMask negative;

  bool has_positive() const { return !positive.empty() && positive.any(); }
  bool has_negative() const { return !negative.empty() && negative.any(); }
  /// Throws MaskError if a present mask does not match the image size.
  void validate() const;
};

/// Resizes the image (bilinear) and masks (nearest) to size x size.
ReferenceGuidance resize_guidance(const ReferenceGuidance& g, int size);

template <typename T>
using GridFeature = TokenFeature<T>;

template <typename T>
struct PromptVector {
  Polarity polarity = Polarity::Positive;
  std::vector<T> values;

  bool is_zero() const {
    for (T v : values)
      if (v != T(0)) return false;
    return true;
  }
};

/// Backbone features of the reference image alone (no extra-map embedding).
template <typename T>
GridFeature<T> extract_reference_feature(const RefCutNet<T>& net, const Image& ref_image,
                                         BackboneTrace<T>* trace = nullptr);

/// Mask-weighted channel mean sum(f * m) / sum(m); the zero vector when sum(m) == 0.
template <typename T>
std::vector<T> masked_representation(const GridFeature<T>& feature, const SoftMask& weights);

/// Gradient of masked_representation with respect to the feature grid.
template <typename T>
Matrix<T> masked_representation_backward(const GridFeature<T>& feature, const SoftMask& weights,
                                         const std::vector<T>& grad);

template <typename T>
PromptVector<T> encode_prompt(const RefCutNet<T>& net, const std::vector<T>& representation,
                              Polarity polarity);

/// Reference masks area-averaged down to the token grid.
SoftMask token_weights(const BitMask& mask, int patch_size);

/// Prompts for both polarities. Absent masks give zero vectors without
/// running their MLP.
template <typename T>
PromptPair<T> generate_prompts(const RefCutNet<T>& net, const ReferenceGuidance& guidance);

template <typename T>
PromptPair<T> generate_prompts(const RefCutNet<T>& net, const GridFeature<T>& reference_feature,
                               const ReferenceGuidance& guidance);

/// Reference features keyed by the reference image's content. Readers share
/// the lock; insertion takes it exclusively.
template <typename T>
class ReferenceFeatureCache {
 public:
  explicit ReferenceFeatureCache(std::size_t capacity = 64) : capacity_(capacity) {}

  std::shared_ptr<const GridFeature<T>> get_or_compute(const RefCutNet<T>& net, const Image& image);
  std::size_t size() const;
  std::size_t hits() const { return hits_; }

  static std::uint64_t fingerprint(const Image& image);

 private:
  std::size_t capacity_;
  mutable std::shared_mutex mutex_;
  std::map<std::uint64_t, std::shared_ptr<const GridFeature<T>>> entries_;
  std::vector<std::uint64_t> insertion_order_;
  std::atomic<std::size_t> hits_{0};
};

}  // namespace refcut
