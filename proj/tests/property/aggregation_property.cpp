#include <doctest.h>

#include <cmath>

#include "ctxsens/aggregation.hpp"
#include "ctxsens/analysis.hpp"
#include "property.hpp"

using namespace ctxsens;
using testing::for_all_cases;

namespace {

std::vector<RaterJudgment> random_judgments(Rng& rng, bool allow_unsure) {
  static const Label labels[] = {Label::NonToxic, Label::Toxic, Label::VeryToxic, Label::Unsure};
  std::vector<RaterJudgment> out(1 + rng.below(9));
  for (auto& j : out) j.label = labels[rng.below(allow_unsure ? 4 : 3)];
  return out;
}

}  // namespace

TEST_CASE("scores are toxic fractions with the binary standard error") {
  for_all_cases(201, [](Rng& rng, int) {
    const auto js = random_judgments(rng, true);
    const auto s = aggregate_score(js);
    const bool any_unsure =
        std::any_of(js.begin(), js.end(), [](const RaterJudgment& j) { return j.label == Label::Unsure; });
    REQUIRE(s.has_value() == !any_unsure);
    if (!s) return;
    const auto toxic = std::count_if(js.begin(), js.end(), [](const RaterJudgment& j) {
      return j.label == Label::Toxic || j.label == Label::VeryToxic;
    });
    const double n = static_cast<double>(js.size());
    CHECK(s->value == static_cast<double>(toxic) / n);
    const double expect = js.size() > 1 ? std::sqrt(s->value * (1 - s->value) / (n - 1)) : 0.0;
    CHECK(std::abs(s->sem - expect) <= 1e-15);
  });
}

TEST_CASE("delta is bounded and antisymmetric in the conditions") {
  for_all_cases(202, [](Rng& rng, int) {
    const auto oc = *aggregate_score(random_judgments(rng, false));
    const auto ic = *aggregate_score(random_judgments(rng, false));
    const auto r = sensitivity(oc, ic);
    const auto flipped = sensitivity(ic, oc);
    CHECK(r.delta >= -1.0);
    CHECK(r.delta <= 1.0);
    CHECK(r.threshold >= 0.0);
    CHECK(flipped.delta == -r.delta);
    CHECK(flipped.threshold == r.threshold);
    CHECK(flipped.is_sensitive == r.is_sensitive);
    CHECK(r.is_sensitive == (std::abs(r.delta) > r.threshold));
  });
}

TEST_CASE("histograms conserve counts and sensitive counts shrink with t") {
  for_all_cases(203, [](Rng& rng, int) {
    std::vector<SensitivityRecord> rs(1 + rng.below(60));
    for (auto& r : rs) r = sensitivity({rng.below(6) / 5.0, 5, 0.0}, {rng.below(6) / 5.0, 5, 0.0});
    const auto h = sensitivity_histogram(rs, 1 + rng.below(20));
    std::size_t total = 0;
    for (auto c : h.counts) total += c;
    CHECK(total == rs.size());
    std::size_t prev = rs.size();
    for (double t = 0.0; t <= 1.0; t += 0.1) {
      const auto c = count_sensitive(rs, t);
      CHECK(c <= prev);
      prev = c;
    }
    const auto s = summarize_deltas(rs);
    CHECK(s.unchanged + s.positive + s.negative == rs.size());
    const double ratio = class_ratio(rs);
    CHECK(ratio >= 0.0);
    CHECK(ratio <= 1.0);
  });
}

TEST_CASE("kappa and pairwise agreement bounds") {
  for_all_cases(204, [](Rng& rng, int) {
    const int k = 2 + static_cast<int>(rng.below(4));
    std::vector<std::vector<int>> items(1 + rng.below(20));
    for (auto& item : items) {
      item.resize(2 + rng.below(5));
      for (auto& c : item) c = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    }
    const auto a = agreement(items, k);
    CHECK(a.mean_pairwise_agreement >= 0.0);
    CHECK(a.mean_pairwise_agreement <= 1.0);
    CHECK(a.free_marginal_kappa <= 1.0);
    CHECK(a.free_marginal_kappa >= -1.0 / (k - 1) - 1e-12);
    const double chance = 1.0 / k;
    CHECK(std::abs(a.free_marginal_kappa - (a.mean_pairwise_agreement - chance) / (1 - chance)) <= 1e-12);
  });
}
