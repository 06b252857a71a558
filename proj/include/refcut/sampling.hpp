#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "refcut/part_object.hpp"
#include "refcut/reference_dropout.hpp"
#include "refcut/reference_prompt.hpp"

namespace refcut {

struct TrainingPair {
  std::string target_id;
  std::string reference_id;
  Image image;
  BitMask gt;
  ReferenceGuidance guidance;
  std::vector<std::string> selected_tags;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Draws training pairs: a random object, a uniform number of its parts as
/// the target, and another instance of the same category as the reference.
class PairSampler {
 public:
  explicit PairSampler(const Dataset& dataset, ReferenceDropout dropout = {});

  TrainingPair sample(std::mt19937_64& rng) const;

 private:
  const Dataset* dataset_;
  ReferenceDropout dropout_;
  std::vector<std::size_t> eligible_;                            // objects with a same-category peer
  std::map<std::string, std::vector<std::size_t>> by_category_;  // category -> object indices
};

TrainingPair sample_training_pair(const Dataset& dataset, std::mt19937_64& rng,
                                  const ReferenceDropout& dropout = {});

/// True iff the union of both masks is one 8-connected region.
bool parts_connected(const BitMask& a, const BitMask& b);

enum class ComboKind { Single, Pair, Whole };
std::string_view to_string(ComboKind k);
ComboKind combo_kind_from_string(std::string_view s);

struct Combination {
  std::vector<int> parts;  // indices into PartObject::parts, ascending
  ComboKind kind = ComboKind::Single;
  friend bool operator==(const Combination&, const Combination&) = default;
};

/// Singles in part order, connected pairs in lexicographic index order, then
/// the whole object. A one-part object yields a single entry.
std::vector<Combination> enumerate_eval_combinations(const PartObject& object);

/// Next same-category object by object_id, wrapping to the first. `eval_set`
/// must be sorted by object_id.
const PartObject& select_reference(const Dataset& eval_set, const PartObject& current);

enum class GuidanceRegime { None, PositiveOnly, NegativeOnly, Both };
std::string_view to_string(GuidanceRegime r);
GuidanceRegime guidance_regime_from_string(std::string_view s);

/// One combination-evaluation case. Points into the evaluation dataset, which
/// must outlive it.
struct EvalSample {
  std::string sample_id;
  const PartObject* target = nullptr;
  const PartObject* reference = nullptr;
  std::vector<std::string> tags;
  ComboKind kind = ComboKind::Single;
  BitMask gt;

  /// Reference masks for the requested regime (positive = same tags on the
  /// reference, negative = its remaining parts).
  ReferenceGuidance guidance(GuidanceRegime regime) const;
};

/// All combinations of every object whose category has at least two members.
std::vector<EvalSample> build_eval_samples(const Dataset& eval_set);

/// JSON lines, one {sample_id, target_id, combo, kind, reference_id} per sample.
void write_eval_manifest(const std::filesystem::path& path, const std::vector<EvalSample>& samples);
std::vector<EvalSample> read_eval_manifest(const std::filesystem::path& path,
                                           const Dataset& eval_set);

}  // namespace refcut
