#include <doctest.h>

#include <filesystem>
#include <map>
#include <random>
#include <unistd.h>

#include "fixtures.hpp"
#include "refcut/sampling.hpp"

using namespace refcut;
using fixture::rect;

namespace {

std::vector<std::vector<int>> part_sets(const std::vector<Combination>& combos) {
  std::vector<std::vector<int>> out;
  for (const auto& c : combos) out.push_back(c.parts);
  return out;
}

Dataset chain_dataset() {
  Dataset d{fixture::chain3("chain_000"), fixture::chain3("chain_001"), fixture::chain3("chain_002")};
  sort_by_object_id(d);
  return d;
}

}  // namespace

TEST_CASE("parts_connected") {
  CHECK(parts_connected(rect(6, 6, 0, 0, 3, 2), rect(6, 6, 0, 2, 3, 4)));
  CHECK(!parts_connected(rect(6, 6, 0, 0, 3, 2), rect(6, 6, 0, 3, 3, 5)));
  CHECK(parts_connected(rect(6, 6, 0, 0, 2, 2), rect(6, 6, 2, 2, 4, 4)));
  CHECK(!parts_connected(BitMask(6, 6), BitMask(6, 6)));
  CHECK(parts_connected(rect(6, 6, 0, 0, 2, 2), BitMask(6, 6)));
}

TEST_CASE("combination enumeration fixtures") {
  const auto three = enumerate_eval_combinations(fixture::chain3("x"));
  CHECK(part_sets(three) == std::vector<std::vector<int>>{{0}, {1}, {2}, {0, 1}, {1, 2}, {0, 1, 2}});
  CHECK(three[3].kind == ComboKind::Pair);
  CHECK(three.back().kind == ComboKind::Whole);

  const auto one = enumerate_eval_combinations(fixture::object("o", "c", {{"a", rect(8, 8, 0, 0, 3, 3)}}));
  CHECK(one.size() == 1);

  const auto apart = enumerate_eval_combinations(
      fixture::object("o", "c", {{"a", rect(8, 8, 0, 0, 3, 3)}, {"b", rect(8, 8, 5, 5, 8, 8)}}));
  CHECK(part_sets(apart) == std::vector<std::vector<int>>{{0}, {1}, {0, 1}});

  const auto touching = enumerate_eval_combinations(
      fixture::object("o", "c", {{"a", rect(8, 8, 0, 0, 3, 3)}, {"b", rect(8, 8, 3, 0, 6, 3)}}));
  CHECK(touching.size() == 4);
  CHECK(touching[2].kind == ComboKind::Pair);
  CHECK(touching[3].kind == ComboKind::Whole);
}

TEST_CASE("combination count invariant on random objects") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 5);
    std::vector<Part> parts;
    for (int i = 0; i < n; ++i) {
      const int r = static_cast<int>(rng() % 10), c = static_cast<int>(rng() % 10);
      BitMask m(12, 12);
      for (int y = r; y < r + 2; ++y)
        for (int x = c; x < c + 2; ++x) m.set(y, x);
      // keep parts disjoint
      for (const auto& p : parts)
        for (int y = 0; y < 12; ++y)
          for (int x = 0; x < 12; ++x)
            if (p.mask.at(y, x)) m.set(y, x, false);
      if (!m.any()) continue;
      parts.push_back({"t" + std::to_string(i), m});
    }
    if (parts.empty()) continue;
    const auto obj = fixture::object("o", "c", parts, 12, 12);
    const int big_n = obj.part_count();
    int connected = 0;
    for (int i = 0; i < big_n; ++i)
      for (int j = i + 1; j < big_n; ++j) connected += parts_connected(obj.parts[i].mask, obj.parts[j].mask);
    CHECK(static_cast<int>(enumerate_eval_combinations(obj).size()) == big_n + connected + (big_n > 1));
  }
}

TEST_CASE("select_reference") {
  Dataset d;
  for (const char* id : {"a1", "b1", "a2", "a3", "b2"})
    d.push_back(fixture::object(id, std::string(1, id[0]), {{"x", rect(8, 8, 0, 0, 4, 4)}}));
  sort_by_object_id(d);
  auto by_id = [&](const std::string& id) -> const PartObject& {
    for (const auto& o : d)
      if (o.object_id == id) return o;
    FAIL("no object " << id);
    return d.front();
  };
  CHECK(select_reference(d, by_id("a2")).object_id == "a3");
  CHECK(select_reference(d, by_id("a3")).object_id == "a1");
  CHECK(select_reference(d, by_id("a1")).object_id == "a2");
  CHECK(select_reference(d, by_id("b1")).object_id == "b2");
  CHECK(select_reference(d, by_id("b2")).object_id == "b1");

  Dataset lone{fixture::object("z1", "z", {{"x", rect(8, 8, 0, 0, 4, 4)}})};
  CHECK_THROWS(select_reference(lone, lone[0]));
  const auto stranger = fixture::object("q9", "a", {{"x", rect(8, 8, 0, 0, 4, 4)}});
  CHECK_THROWS(select_reference(d, stranger));
}

TEST_CASE("training pairs: invariants and uniform k") {
  const Dataset d = chain_dataset();
  std::mt19937_64 rng(7);
  const PairSampler sampler(d, ReferenceDropout{0.0, 0.0});
  std::map<std::size_t, int> k_count;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const TrainingPair p = sampler.sample(rng);
    ++k_count[p.selected_tags.size()];
    REQUIRE(p.target_id != p.reference_id);
    const PartObject* target = nullptr;
    const PartObject* ref = nullptr;
    for (const auto& o : d) {
      if (o.object_id == p.target_id) target = &o;
      if (o.object_id == p.reference_id) ref = &o;
    }
    REQUIRE(target);
    REQUIRE(ref);
    REQUIRE(p.gt == target->union_of_tags(p.selected_tags));
    REQUIRE(p.guidance.positive == ref->union_of_tags(p.selected_tags));
    REQUIRE(!(p.guidance.positive & p.guidance.negative).any());
    REQUIRE((p.guidance.positive | p.guidance.negative) == ref->whole());
    if (p.selected_tags.size() == 3) REQUIRE(!p.guidance.negative.any());
  }
  for (std::size_t k = 1; k <= 3; ++k) {
    INFO("k = " << k);
    CHECK(std::abs(k_count[k] / double(draws) - 1.0 / 3.0) < 0.02);
  }
}

TEST_CASE("training pairs need a category with two objects") {
  Dataset d{fixture::chain3("solo_1", "x"), fixture::chain3("solo_2", "y")};
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(sample_training_pair(d, rng), SamplingError);

  // single-part object: whole object target, empty negative
  Dataset one{fixture::object("p1", "p", {{"a", rect(8, 8, 0, 0, 4, 4)}}),
              fixture::object("p2", "p", {{"a", rect(8, 8, 2, 2, 6, 6)}})};
  const TrainingPair p = sample_training_pair(one, rng, ReferenceDropout{0.0, 0.0});
  CHECK(p.selected_tags == std::vector<std::string>{"a"});
  CHECK(!p.guidance.negative.any());
}

TEST_CASE("reference dropout frequencies") {
  ReferenceGuidance g;
  g.image = Image(4, 4);
  g.positive = rect(4, 4, 0, 0, 2, 2);
  g.negative = rect(4, 4, 2, 2, 4, 4);
  std::mt19937_64 rng(11);

  for (int i = 0; i < 100; ++i) {
    const auto same = reference_dropout(g, rng, ReferenceDropout{0.0, 0.0});
    REQUIRE((same.positive == g.positive && same.negative == g.negative));
    const auto forced = reference_dropout(g, rng, ReferenceDropout::with_total(1.0));
    REQUIRE(forced.has_positive() != forced.has_negative());
  }

  const int draws = 20000;
  std::map<DropoutOutcome, int> seen;
  for (int i = 0; i < draws; ++i) {
    DropoutOutcome o;
    const auto out = reference_dropout(g, rng, ReferenceDropout{}, &o);
    ++seen[o];
    if (o == DropoutOutcome::PositiveOnly) REQUIRE((out.has_positive() && !out.has_negative()));
    if (o == DropoutOutcome::NegativeOnly) REQUIRE((!out.has_positive() && out.has_negative()));
    if (o == DropoutOutcome::KeptBoth) REQUIRE((out.has_positive() && out.has_negative()));
  }
  const double expect[] = {0.75, 0.125, 0.125};
  const int got[] = {seen[DropoutOutcome::KeptBoth], seen[DropoutOutcome::PositiveOnly],
                     seen[DropoutOutcome::NegativeOnly]};
  double chi2 = 0;
  for (int i = 0; i < 3; ++i) {
    const double e = expect[i] * draws;
    chi2 += (got[i] - e) * (got[i] - e) / e;
    CHECK(std::abs(got[i] / double(draws) - expect[i]) < 0.01);
  }
  // chi-square, 2 degrees of freedom, 1% level
  CHECK(chi2 < 9.21);

  ReferenceGuidance half = g;
  half.negative = BitMask();
  DropoutOutcome o;
  const auto passed = reference_dropout(half, rng, ReferenceDropout::with_total(1.0), &o);
  CHECK(o == DropoutOutcome::Unchanged);
  CHECK(passed.positive == half.positive);
  CHECK_THROWS(ReferenceDropout{0.7, 0.7}.validate());
}

TEST_CASE("eval samples, regimes and manifest round trip") {
  const Dataset d = chain_dataset();
  const auto samples = build_eval_samples(d);
  CHECK(samples.size() == 3 * 6);
  CHECK(samples[0].sample_id == "chain_000/a/single");
  CHECK(samples[0].reference->object_id == "chain_001");
  CHECK(samples[5].sample_id == "chain_000/a+b+c/whole");

  const EvalSample& s = samples[3];  // {a, b}
  CHECK(s.gt == s.target->union_of_tags(s.tags));
  const auto both = s.guidance(GuidanceRegime::Both);
  CHECK(both.positive == s.reference->union_of_tags(s.tags));
  CHECK(both.negative == rect(8, 8, 1, 4, 7, 6));
  CHECK(!s.guidance(GuidanceRegime::None).has_positive());
  CHECK(!s.guidance(GuidanceRegime::None).has_negative());
  CHECK(!s.guidance(GuidanceRegime::PositiveOnly).has_negative());
  CHECK(!s.guidance(GuidanceRegime::NegativeOnly).has_positive());
  for (auto r : {GuidanceRegime::None, GuidanceRegime::PositiveOnly, GuidanceRegime::NegativeOnly, GuidanceRegime::Both})
    CHECK(guidance_regime_from_string(to_string(r)) == r);

  const auto dir = std::filesystem::temp_directory_path() / ("refcut_manifest_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  write_eval_manifest(dir / "m.jsonl", samples);
  const auto back = read_eval_manifest(dir / "m.jsonl", d);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].sample_id == samples[i].sample_id);
    CHECK(back[i].reference == samples[i].reference);
    CHECK(back[i].gt == samples[i].gt);
    CHECK(back[i].kind == samples[i].kind);
  }
  std::filesystem::remove_all(dir);

  // deterministic
  const auto again = build_eval_samples(d);
  for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].sample_id == samples[i].sample_id);
}
