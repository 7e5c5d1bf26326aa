#include <doctest.h>

#include <cmath>

#include "ctxsens/aggregation.hpp"

using namespace ctxsens;

namespace {

std::vector<RaterJudgment> labels(std::initializer_list<Label> ls) {
  std::vector<RaterJudgment> out;
  for (Label l : ls) out.push_back({l, std::nullopt});
  return out;
}

constexpr Label N = Label::NonToxic;
constexpr Label T = Label::Toxic;
constexpr Label V = Label::VeryToxic;
constexpr Label U = Label::Unsure;

}  // namespace

TEST_CASE("score is the toxic fraction with its standard error") {
  const auto s = aggregate_score(labels({T, V, N, N, N}));
  REQUIRE(s);
  CHECK(s->value == doctest::Approx(0.4));
  CHECK(s->n_raters == 5);
  CHECK(s->sem == doctest::Approx(std::sqrt(0.4 * 0.6 / 4)));
  CHECK(aggregate_score(labels({N, N}))->sem == 0.0);
  CHECK(aggregate_score(labels({T}))->sem == 0.0);
}

TEST_CASE("unsure excludes the record") {
  CHECK_FALSE(aggregate_score(labels({T, U, N})).has_value());
}

TEST_CASE("sensitivity compares delta to the summed standard errors") {
  const auto oc = *aggregate_score(labels({T, T, N, N, N}));
  const auto ic = *aggregate_score(labels({N, N, N, N, N}));
  const auto r = sensitivity(oc, ic, "p");
  CHECK(r.delta == doctest::Approx(0.4));
  CHECK(r.threshold == doctest::Approx(std::sqrt(0.24 / 4)));
  CHECK(r.is_sensitive);

  const auto oc2 = *aggregate_score(labels({T, N, N, N, N}));
  const auto ic2 = *aggregate_score(labels({T, T, N, N, N}));
  const auto r2 = sensitivity(oc2, ic2);
  CHECK(r2.delta == doctest::Approx(-0.2));
  CHECK_FALSE(r2.is_sensitive);
}

TEST_CASE("equal delta and threshold is not sensitive") {
  const auto r = sensitivity({0.5, 0, 0.25}, {0.0, 0, 0.25});
  CHECK(r.delta == r.threshold);
  CHECK_FALSE(r.is_sensitive);
}

TEST_CASE("compute_sensitivities reports exclusions and missing conditions") {
  std::vector<Post> posts = {{"a", "x", std::nullopt}, {"b", "y", std::nullopt}, {"c", "z", std::nullopt}};
  std::vector<AnnotationRecord> ic = {{"a", Condition::InContext, labels({N, N})},
                                      {"b", Condition::InContext, labels({U, N})},
                                      {"c", Condition::InContext, labels({T})}};
  std::vector<AnnotationRecord> oc = {{"a", Condition::OutOfContext, labels({T, T})},
                                      {"b", Condition::OutOfContext, labels({N, N})}};
  const auto t = compute_sensitivities(DatasetBundle(posts, ic, oc));
  REQUIRE(t.records.size() == 1);
  CHECK(t.records[0].post_id == "a");
  CHECK(t.records[0].delta == 1.0);
  CHECK(t.excluded_unsure == std::vector<std::string>{"b"});
  CHECK(t.missing_condition == std::vector<std::string>{"c"});
}

TEST_CASE("score-only import") {
  CccImport imp;
  imp.post_ids = {"1", "2"};
  imp.oc_scores = {0.6, 0.3};
  imp.ic_scores = {0.2, 0.3};
  const auto t = compute_sensitivities(imp);
  REQUIRE(t.records.size() == 2);
  CHECK(t.records[0].delta == doctest::Approx(0.4));
  CHECK(t.records[0].is_sensitive);
  CHECK_FALSE(t.records[1].is_sensitive);
  imp.oc_scores[1] = 1.5;
  CHECK_THROWS_AS(compute_sensitivities(imp), ValidationError);
}

TEST_CASE("histogram places the upper edge in the last bin") {
  const std::vector<double> v = {-1.0, -0.5, 0.0, 0.0, 0.99, 1.0};
  const auto h = histogram(v, 4, -1.0, 1.0);
  CHECK(h.counts == std::vector<std::size_t>{1, 1, 2, 2});
  CHECK(h.centers() == std::vector<double>{-0.75, -0.25, 0.25, 0.75});
  CHECK_THROWS(histogram(v, 0, 0.0, 1.0));
}

TEST_CASE("counts and delta buckets") {
  std::vector<SensitivityRecord> rs;
  for (double d : {0.0, 0.0, 0.2, -0.4, 0.6}) rs.push_back(sensitivity({std::max(d, 0.0), 0, 0}, {std::max(-d, 0.0), 0, 0}));
  CHECK(count_sensitive(rs, 0.0) == 5);
  CHECK(count_sensitive(rs, 0.4) == 2);
  const auto s = summarize_deltas(rs);
  CHECK(s.unchanged == 2);
  CHECK(s.positive == 2);
  CHECK(s.negative == 1);
  CHECK(s.fraction_unchanged() == doctest::Approx(0.4));
}

TEST_CASE("binarization rules differ at one half") {
  CHECK_FALSE(binarize_toxicity(0.5));
  CHECK(binarize_toxicity(0.5, BinarizeRule::AtLeastHalf));
  std::vector<SensitivityRecord> rs = {sensitivity({0.5, 0, 0}, {0.4, 0, 0}), sensitivity({0.8, 0, 0}, {0.6, 0, 0})};
  CHECK(binarized_unchanged_fraction(rs) == 1.0);
  CHECK(binarized_unchanged_fraction(rs, BinarizeRule::AtLeastHalf) == 0.5);
}

TEST_CASE("free-marginal kappa") {
  // Two categories, half the pairs agree: observed equals chance.
  const std::vector<std::vector<int>> half = {{0, 0}, {0, 1}};
  const auto r = agreement(half, 2);
  CHECK(r.mean_pairwise_agreement == doctest::Approx(0.5));
  CHECK(r.free_marginal_kappa == doctest::Approx(0.0));

  const std::vector<std::vector<int>> full = {{1, 1, 1}, {0, 0, 0}};
  CHECK(agreement(full, 4).free_marginal_kappa == doctest::Approx(1.0));

  // Three raters, one dissent: P_o = 1/3; k = 4 gives (1/3 - 1/4) / (3/4).
  const std::vector<std::vector<int>> one = {{0, 0, 1}};
  CHECK(agreement(one, 4).free_marginal_kappa == doctest::Approx((1.0 / 3 - 0.25) / 0.75));
}

TEST_CASE("agreement over annotation records") {
  std::vector<AnnotationRecord> rs = {{"a", Condition::InContext, labels({T, V})},
                                      {"b", Condition::InContext, labels({N, N})}};
  CHECK(agreement(rs, CategoryScheme::Binary).free_marginal_kappa == doctest::Approx(1.0));
  CHECK(agreement(rs, CategoryScheme::FourLabel).mean_pairwise_agreement == doctest::Approx(0.5));
}
