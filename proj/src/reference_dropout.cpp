#include "refcut/reference_dropout.hpp"

#include <stdexcept>

namespace refcut {

void ReferenceDropout::validate() const {
  if (positive_only < 0 || negative_only < 0 || positive_only + negative_only > 1.0 + 1e-12) {
    throw std::invalid_argument("reference dropout probabilities must be >= 0 and sum to <= 1");
  }
}

ReferenceGuidance reference_dropout(ReferenceGuidance guidance, std::mt19937_64& rng,
                                    const ReferenceDropout& cfg, DropoutOutcome* outcome) {
  cfg.validate();
  if (!guidance.has_positive() || !guidance.has_negative()) {
    if (outcome) *outcome = DropoutOutcome::Unchanged;
    return guidance;
  }
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  DropoutOutcome result = DropoutOutcome::KeptBoth;
  if (u < cfg.positive_only) {
    guidance.negative = BitMask(guidance.negative.height(), guidance.negative.width());
    result = DropoutOutcome::PositiveOnly;
  } else if (u < cfg.positive_only + cfg.negative_only) {
    guidance.positive = BitMask(guidance.positive.height(), guidance.positive.width());
    result = DropoutOutcome::NegativeOnly;
  }
  if (outcome) *outcome = result;
  return guidance;
}

}  // namespace refcut
