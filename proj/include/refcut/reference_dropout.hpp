#pragma once

#include <random>

#include "refcut/reference_prompt.hpp"

namespace refcut {

/// Probabilities of keeping only one reference mask. The default splits a 25%
/// single-mask chance evenly between the two polarities.
struct ReferenceDropout {
  double positive_only = 0.125;
  double negative_only = 0.125;

  static ReferenceDropout with_total(double p) { return {p / 2, p / 2}; }
  void validate() const;
};

enum class DropoutOutcome { KeptBoth, PositiveOnly, NegativeOnly, Unchanged };

/// Applies the dropout to guidance that carries both masks; guidance already
/// missing a mask passes through untouched.
ReferenceGuidance reference_dropout(ReferenceGuidance guidance, std::mt19937_64& rng,
                                    const ReferenceDropout& cfg, DropoutOutcome* outcome = nullptr);

}  // namespace refcut
