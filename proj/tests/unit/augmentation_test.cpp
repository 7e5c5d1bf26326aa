#include <doctest.h>

#include <algorithm>
#include <set>

#include "ctxsens/augmentation.hpp"
#include "synthetic.hpp"

using namespace ctxsens;

namespace {

struct Loop {
  std::vector<Example> train, validation, test;
  std::vector<Post> pool;
};

Loop small_loop(std::size_t n_pool = 300) {
  testing::LinearSpec spec;
  spec.n_gold = 200;
  spec.n_pool = n_pool;
  const auto w = testing::linear_world(spec);
  Loop l;
  for (std::size_t i = 0; i < w.gold.size(); ++i) (i < 140 ? l.train : i < 160 ? l.validation : l.test).push_back(w.gold[i]);
  l.pool = w.pool;
  return l;
}

AugmentationConfig small_config() {
  AugmentationConfig c;
  c.k_per_cycle = 20;
  c.n_cycles = 3;
  c.seed = 4;
  return c;
}

}  // namespace

TEST_CASE("select_top_k orders by score then id") {
  const std::vector<std::pair<std::string, double>> s = {{"d", 0.5}, {"b", 0.9}, {"a", 0.5}, {"c", 0.1}};
  CHECK(select_top_k(s, 3) == std::vector<std::string>{"b", "a", "d"});
  CHECK(select_top_k(s, 0).empty());
  CHECK_THROWS_AS(select_top_k(s, 5), ValidationError);
}

TEST_CASE("names") {
  CHECK(parse_selection("teacher_top_k") == Selection::TeacherTopK);
  CHECK(parse_selection("random") == Selection::RandomK);
  CHECK(parse_score_transform("abs") == ScoreTransform::Abs);
  CHECK_THROWS_AS(parse_selection("best"), ValidationError);
}

TEST_CASE("each cycle moves k posts and logs what it did") {
  const Loop l = small_loop();
  std::vector<std::size_t> seen_cycles;
  const auto run = run_augmentation(l.train, l.validation, l.test, l.pool, small_config(),
                                    [&](const CycleLog& c) { seen_cycles.push_back(c.cycle); });
  CHECK(seen_cycles == std::vector<std::size_t>{1, 2, 3});
  REQUIRE(run.cycles.size() == 3);
  std::set<std::string> ids;
  for (const auto& c : run.cycles) {
    CHECK(c.selected_ids.size() == 20);
    CHECK(c.silver_scores.size() == 20);
    CHECK(c.silver_min <= c.silver_mean);
    CHECK(c.silver_mean <= c.silver_max);
    CHECK(c.train_size == 140 + 20 * c.cycle);
    CHECK(c.pool_size == 300 - 20 * c.cycle);
    for (const auto& id : c.selected_ids) CHECK(ids.insert(id).second);
    CHECK(std::is_sorted(c.silver_scores.rbegin(), c.silver_scores.rend()));
    CHECK(c.to_json()["selected_ids"].size() == 20);
  }
  CHECK(run.baseline.n_test == l.test.size());
}

TEST_CASE("single shot is one cycle of the full budget") {
  const Loop l = small_loop();
  auto cfg = small_config();
  cfg.single_shot = true;
  const auto run = run_augmentation(l.train, l.validation, l.test, l.pool, cfg);
  REQUIRE(run.cycles.size() == 1);
  CHECK(run.cycles[0].selected_ids.size() == 60);
}

TEST_CASE("abs transform selects by magnitude") {
  const Loop l = small_loop();
  auto cfg = small_config();
  cfg.n_cycles = 1;
  cfg.score_transform = ScoreTransform::Abs;
  const auto run = run_augmentation(l.train, l.validation, l.test, l.pool, cfg);
  const auto& s = run.cycles[0].silver_scores;
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(std::abs(s[i - 1]) >= std::abs(s[i]));
}

TEST_CASE("random selection depends on the seed only") {
  const Loop l = small_loop();
  auto cfg = small_config();
  cfg.selection = Selection::RandomK;
  const auto a = run_augmentation(l.train, l.validation, l.test, l.pool, cfg);
  const auto b = run_augmentation(l.train, l.validation, l.test, l.pool, cfg);
  CHECK(a.cycles[2].selected_ids == b.cycles[2].selected_ids);
  cfg.seed = 5;
  const auto c = run_augmentation(l.train, l.validation, l.test, l.pool, cfg);
  CHECK(a.cycles[0].selected_ids != c.cycles[0].selected_ids);
}

TEST_CASE("invalid loops are rejected before training") {
  Loop l = small_loop(50);
  auto cfg = small_config();
  CHECK_THROWS_AS(run_augmentation(l.train, l.validation, l.test, l.pool, cfg), ValidationError);
  l = small_loop();
  l.pool.push_back({l.train[0].id, "dup", std::nullopt});
  CHECK_THROWS_AS(run_augmentation(l.train, l.validation, l.test, l.pool, cfg), ValidationError);
  l = small_loop();
  l.pool.push_back(l.pool[0]);
  CHECK_THROWS_AS(run_augmentation(l.train, l.validation, l.test, l.pool, cfg), ValidationError);
  l = small_loop();
  l.test.push_back(l.train[0]);
  CHECK_THROWS_AS(run_augmentation(l.train, l.validation, l.test, l.pool, cfg), ValidationError);
  l = small_loop();
  cfg.k_per_cycle = 0;
  CHECK_THROWS_AS(run_augmentation(l.train, l.validation, l.test, l.pool, cfg), ValidationError);
}

TEST_CASE("cross-validated loop averages each cycle over repeats") {
  testing::LinearSpec spec;
  spec.n_gold = 200;
  spec.n_pool = 400;
  const auto w = testing::linear_world(spec);
  SplitSpec split;
  split.seed = 1;
  const auto res = run_augmentation_cv(w.gold, w.pool, small_config(), split);
  CHECK(res.repeats.size() == 3);
  REQUIRE(res.per_cycle.size() == 4);
  for (const auto& r : res.per_cycle) CHECK(r.mse.n_folds == 3);
  double mean = 0;
  for (const auto& r : res.repeats) mean += r.cycles[1].student.mse;
  CHECK(*res.per_cycle[2].mse.mean == doctest::Approx(mean / 3));
  CHECK(res.repeats[0].cycles[0].test_fingerprint != res.repeats[1].cycles[0].test_fingerprint);
}
