#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ctxsens/augmentation.hpp"
#include "ctxsens/evaluation.hpp"
#include "property.hpp"

using namespace ctxsens;
using testing::for_all_cases;

TEST_CASE("splits are disjoint, exhaustive and reproducible") {
  for_all_cases(601, [](Rng& rng, int) {
    const std::size_t n = 10 + rng.below(500);
    SplitSpec spec;
    spec.test = 0.05 + 0.3 * rng.uniform01();
    spec.validation = 0.3 * rng.uniform01();
    spec.train = 1.0 - spec.test - spec.validation;
    spec.seed = rng.next();
    const std::size_t repeat = rng.below(5);
    const Split s = make_split(n, spec, repeat);
    CHECK(s.test.size() == static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.test)));
    CHECK(s.validation.size() == static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.validation)));
    std::vector<int> seen(n, 0);
    for (const auto* part : {&s.train, &s.validation, &s.test}) {
      for (auto i : *part) seen[i]++;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
    const Split again = make_split(n, spec, repeat);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);
  });
}

TEST_CASE("select_top_k agrees with a full sort") {
  for_all_cases(602, [](Rng& rng, int) {
    std::vector<std::pair<std::string, double>> scored(1 + rng.below(60));
    for (std::size_t i = 0; i < scored.size(); ++i) {
      scored[i] = {"p" + std::to_string(rng.next() % 100000) + "_" + std::to_string(i),
                   static_cast<double>(rng.below(6)) / 5.0};
    }
    const std::size_t k = rng.below(scored.size() + 1);
    auto sorted = scored;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> expect;
    for (std::size_t i = 0; i < k; ++i) expect.push_back(sorted[i].first);
    CHECK(select_top_k(scored, k) == expect);
  });
}

TEST_CASE("metric summaries") {
  for_all_cases(603, [](Rng& rng, int) {
    std::vector<std::optional<double>> v(1 + rng.below(10));
    std::vector<double> present;
    for (auto& x : v) {
      if (rng.below(4) == 0) continue;
      x = rng.uniform01();
      present.push_back(*x);
    }
    const auto s = summarize_metric(v);
    CHECK(s.n_folds == present.size());
    if (present.empty()) {
      CHECK_FALSE(s.mean.has_value());
      return;
    }
    const double mean = std::accumulate(present.begin(), present.end(), 0.0) / static_cast<double>(present.size());
    CHECK(std::abs(*s.mean - mean) <= 1e-12);
    CHECK(s.sem >= 0.0);
  });
}
