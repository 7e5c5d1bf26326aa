#include "ctxsens/augmentation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>
#include <unordered_map>
#include <unordered_set>

namespace ctxsens {

using nlohmann::json;

std::string_view to_string(Selection selection) {
  return selection == Selection::TeacherTopK ? "teacher_top_k" : "random_k";
}

Selection parse_selection(std::string_view text) {
  if (text == "teacher_top_k" || text == "teacher") return Selection::TeacherTopK;
  if (text == "random_k" || text == "random") return Selection::RandomK;
  throw ValidationError("unknown selection '" + std::string(text) + "' (teacher|random)");
}

std::string_view to_string(ScoreTransform transform) {
  return transform == ScoreTransform::Identity ? "identity" : "abs";
}

ScoreTransform parse_score_transform(std::string_view text) {
  if (text == "identity") return ScoreTransform::Identity;
  if (text == "abs") return ScoreTransform::Abs;
  throw ValidationError("unknown score transform '" + std::string(text) + "' (identity|abs)");
}

json AugmentationConfig::to_json() const {
  return {{"selection", to_string(selection)},
          {"k_per_cycle", k_per_cycle},
          {"n_cycles", n_cycles},
          {"single_shot", single_shot},
          {"score_transform", to_string(score_transform)},
          {"family", to_string(family)},
          {"hyperparameters", train.hyperparameters(family)},
          {"train_seed", train.seed},
          {"silver_weight", silver_weight},
          {"label_rule", ctxsens::to_string(label_rule)},
          {"seed", seed}};
}

namespace {

json fold_json(const FoldResult& f) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"mse", f.mse},
          {"mae", f.mae},
          {"auc", opt(f.auc)},
          {"aupr", opt(f.aupr)},
          {"missing_reason", f.missing_reason.empty() ? json(nullptr) : json(f.missing_reason)},
          {"n_train", f.n_train},
          {"n_validation", f.n_validation},
          {"n_test", f.n_test}};
}

std::string id_fingerprint(std::span<const Example> examples) {
  std::vector<std::string_view> ids;
  for (const auto& ex : examples) ids.push_back(ex.id);
  std::sort(ids.begin(), ids.end());
  Fingerprint fp;
  fp.update_u64(ids.size());
  for (auto id : ids) fp.update(id);
  return fp.hex();
}

// Same values as model.predict_examples, split across threads for the
// in-process families.
std::vector<double> score_pool(const RegressorModel& model, std::span<const Example> pool) {
  if (model.family() == Family::External || pool.size() < 256) return model.predict_examples(pool);
  std::vector<double> out(pool.size());
  const auto& vocab = model.vocabulary();
  const std::size_t workers = std::min<std::size_t>(max_threads(), pool.size() / 128);
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < pool.size(); i += workers) {
      const FeatureVector x = vocab ? vocab->transform(pool[i].text) : FeatureVector{};
      out[i] = model.predict(x, i);
    }
  };
  if (workers <= 1) {
    work(0);
    return out;
  }
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work, w);
  for (auto& t : threads) t.join();
  return out;
}

}  // namespace

json CycleLog::to_json() const {
  return {{"repeat", repeat},
          {"cycle", cycle},
          {"selected_ids", selected_ids},
          {"silver_scores", silver_scores},
          {"silver_summary", {{"min", silver_min}, {"mean", silver_mean}, {"max", silver_max}}},
          {"student", fold_json(student)},
          {"train_size", train_size},
          {"pool_size", pool_size},
          {"test_fingerprint", test_fingerprint},
          {"seconds", seconds}};
}

std::vector<std::string> select_top_k(std::span<const std::pair<std::string, double>> scored, std::size_t k) {
  if (k > scored.size()) {
    throw ValidationError("select_top_k: k=" + std::to_string(k) + " exceeds pool size " +
                          std::to_string(scored.size()));
  }
  std::vector<std::size_t> order(scored.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto better = [&](std::size_t a, std::size_t b) {
    if (scored[a].second != scored[b].second) return scored[a].second > scored[b].second;
    return scored[a].first < scored[b].first;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(scored[order[i]].first);
  return out;
}

AugmentationRun run_augmentation(std::span<const Example> gold_train, std::span<const Example> gold_validation,
                                 std::span<const Example> gold_test, std::span<const Post> pool,
                                 const AugmentationConfig& config, const CycleCallback& on_cycle) {
  if (config.k_per_cycle == 0) throw ValidationError("augment: k must be >= 1");
  if (config.cycles() == 0) throw ValidationError("augment: cycles must be >= 1");
  if (gold_test.empty()) throw ValidationError("augment: empty test split");
  if (!(config.silver_weight > 0.0)) throw ValidationError("augment: silver weight must be positive");
  const std::size_t needed = config.k() * config.cycles();
  if (needed > pool.size()) {
    throw ValidationError("augment: pool exhaustion, need " + std::to_string(needed) + " posts but the pool has " +
                          std::to_string(pool.size()));
  }

  std::unordered_set<std::string> gold_ids;
  for (auto part : {gold_train, gold_validation, gold_test}) {
    for (const auto& ex : part) gold_ids.insert(ex.id);
  }
  std::unordered_set<std::string> test_ids;
  for (const auto& ex : gold_test) test_ids.insert(ex.id);
  for (const auto& ex : gold_train) {
    if (test_ids.count(ex.id)) throw ValidationError("augment: post " + ex.id + " is in both train and test");
  }
  std::vector<Example> remaining;
  remaining.reserve(pool.size());
  {
    std::unordered_set<std::string> pool_ids;
    for (const auto& p : pool) {
      if (gold_ids.count(p.post_id)) throw ValidationError("augment: pool post " + p.post_id + " is also gold");
      if (!pool_ids.insert(p.post_id).second) throw ValidationError("augment: duplicate pool post " + p.post_id);
      Example ex;
      ex.id = p.post_id;
      ex.text = p.target_text;
      ex.parent = p.parent_text;
      ex.silver = true;
      ex.weight = config.silver_weight;
      remaining.push_back(std::move(ex));
    }
  }
  const std::string test_fp = id_fingerprint(gold_test);

  std::vector<Example> train_set(gold_train.begin(), gold_train.end());
  TrainConfig cfg = config.train;
  cfg.seed = derive_seed(config.train.seed, 0);
  AugmentationRun run;
  RegressorModel teacher = train(config.family, train_set, gold_validation, cfg);
  run.baseline = evaluate_fold(teacher, gold_test, config.label_rule);
  run.baseline.n_train = train_set.size();
  run.baseline.n_validation = gold_validation.size();

  const std::size_t k = config.k();
  for (std::size_t cycle = 1; cycle <= config.cycles(); ++cycle) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<double> silver = score_pool(teacher, remaining);

    std::vector<std::size_t> chosen;
    if (config.selection == Selection::TeacherTopK) {
      std::vector<std::pair<std::string, double>> scored(remaining.size());
      for (std::size_t i = 0; i < remaining.size(); ++i) {
        const double s = config.score_transform == ScoreTransform::Abs ? std::abs(silver[i]) : silver[i];
        scored[i] = {remaining[i].id, s};
      }
      std::unordered_map<std::string_view, std::size_t> position;
      for (std::size_t i = 0; i < remaining.size(); ++i) position[remaining[i].id] = i;
      for (const auto& id : select_top_k(scored, k)) chosen.push_back(position.at(id));
    } else {
      std::vector<std::size_t> idx(remaining.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      Rng rng(derive_seed(config.seed, cycle));
      for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      chosen.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }

    CycleLog log;
    log.cycle = cycle;
    std::vector<bool> taken(remaining.size(), false);
    double sum = 0.0;
    log.silver_min = silver[chosen.front()];
    log.silver_max = silver[chosen.front()];
    for (auto i : chosen) {
      taken[i] = true;
      Example ex = remaining[i];
      ex.target = silver[i];
      log.selected_ids.push_back(ex.id);
      log.silver_scores.push_back(silver[i]);
      sum += silver[i];
      log.silver_min = std::min(log.silver_min, silver[i]);
      log.silver_max = std::max(log.silver_max, silver[i]);
      train_set.push_back(std::move(ex));
    }
    log.silver_mean = sum / static_cast<double>(chosen.size());
    std::vector<Example> rest;
    rest.reserve(remaining.size() - chosen.size());
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      if (!taken[i]) rest.push_back(std::move(remaining[i]));
    }
    remaining = std::move(rest);

    for (const auto& ex : train_set) {
      if (test_ids.count(ex.id)) throw std::logic_error("augment: train set leaked test post " + ex.id);
    }
    if (id_fingerprint(gold_test) != test_fp) throw std::logic_error("augment: test split changed");

    cfg.seed = derive_seed(config.train.seed, cycle);
    RegressorModel student = train(config.family, train_set, gold_validation, cfg);
    log.student = evaluate_fold(student, gold_test, config.label_rule);
    log.student.n_train = train_set.size();
    log.student.n_validation = gold_validation.size();
    log.student.split_fingerprint = test_fp;
    log.train_size = train_set.size();
    log.pool_size = remaining.size();
    log.test_fingerprint = test_fp;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_cycle) on_cycle(log);
    run.cycles.push_back(std::move(log));
    teacher = std::move(student);
  }
  return run;
}

AugmentationCvResult run_augmentation_cv(std::span<const Example> gold, std::span<const Post> pool,
                                         const AugmentationConfig& config, const SplitSpec& split,
                                         const CycleCallback& on_cycle) {
  validate(split);
  AugmentationCvResult out;
  for (std::size_t repeat = 0; repeat < split.n_repeats; ++repeat) {
    const Split s = make_split(gold.size(), split, repeat);
    auto gather = [&](const std::vector<std::size_t>& idx) {
      std::vector<Example> v;
      v.reserve(idx.size());
      for (auto i : idx) v.push_back(gold[i]);
      return v;
    };
    const auto tr = gather(s.train);
    const auto va = gather(s.validation);
    const auto te = gather(s.test);
    AugmentationConfig cfg = config;
    cfg.seed = derive_seed(config.seed, repeat);
    cfg.train.seed = derive_seed(config.train.seed, repeat);
    const std::string fp = split_fingerprint(gold, s);
    AugmentationRun run = run_augmentation(tr, va, te, pool, cfg, [&](const CycleLog& log) {
      if (!on_cycle) return;
      CycleLog copy = log;
      copy.repeat = repeat;
      on_cycle(copy);
    });
    run.baseline.repeat = repeat;
    run.baseline.split_fingerprint = fp;
    for (auto& c : run.cycles) {
      c.repeat = repeat;
      c.student.repeat = repeat;
      c.student.split_fingerprint = fp;
    }
    out.repeats.push_back(std::move(run));
  }
  const std::size_t n_cycles = config.cycles();
  const std::string family(to_string(config.family));
  for (std::size_t c = 0; c <= n_cycles; ++c) {
    std::vector<FoldResult> folds;
    for (const auto& r : out.repeats) folds.push_back(c == 0 ? r.baseline : r.cycles[c - 1].student);
    out.per_cycle.push_back(summarize_folds(family, std::move(folds)));
  }
  return out;
}

}  // namespace ctxsens
