#include "ctxsens/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "ctxsens/csv.hpp"

namespace ctxsens {

using nlohmann::json;

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw MetricError(std::string(what) + ": length mismatch");
  if (a == 0) throw MetricError(std::string(what) + ": empty input");
}

}  // namespace

double mse(std::span<const double> pred, std::span<const double> gold) {
  check_lengths(pred.size(), gold.size(), "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - gold[i]) * (pred[i] - gold[i]);
  return s / static_cast<double>(pred.size());
}

double mae(std::span<const double> pred, std::span<const double> gold) {
  check_lengths(pred.size(), gold.size(), "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gold[i]);
  return s / static_cast<double>(pred.size());
}

double roc_auc(std::span<const double> scores, const std::vector<bool>& labels) {
  check_lengths(scores.size(), labels.size(), "roc_auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Ranks are 1-based; tied runs get their average rank. Twice the rank
  // keeps everything integral.
  double twice_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double twice_avg = static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        twice_rank_sum += twice_avg;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("roc_auc: undefined with a single class");
  const double p = static_cast<double>(n_pos);
  const double u = 0.5 * twice_rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(n_neg));
}

double aupr(std::span<const double> scores, const std::vector<bool>& labels) {
  check_lengths(scores.size(), labels.size(), "aupr");
  const std::size_t n = scores.size();
  const auto total_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (total_pos == 0) throw MetricError("aupr: undefined without positives");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t group_pos = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]]) ++group_pos;
      ++j;
    }
    tp += group_pos;
    seen = j;
    if (group_pos > 0) {
      ap += (static_cast<double>(group_pos) / static_cast<double>(total_pos)) *
            (static_cast<double>(tp) / static_cast<double>(seen));
    }
    i = j;
  }
  return ap;
}

std::string_view to_string(LabelRule rule) { return rule == LabelRule::Absolute ? "absolute" : "positive_only"; }

LabelRule parse_label_rule(std::string_view text) {
  if (text == "absolute") return LabelRule::Absolute;
  if (text == "positive_only" || text == "positive") return LabelRule::PositiveOnly;
  throw ValidationError("unknown label rule '" + std::string(text) + "' (absolute|positive_only)");
}

bool sensitivity_label(const SensitivityRecord& record, LabelRule rule) {
  return rule == LabelRule::Absolute ? record.is_sensitive : record.delta > record.threshold;
}

double ranking_score(double prediction, LabelRule rule) {
  return rule == LabelRule::Absolute ? std::abs(prediction) : prediction;
}

std::vector<Example> make_examples(const DatasetBundle& bundle, const SensitivityTable& table, LabelRule rule) {
  std::vector<Example> out;
  out.reserve(table.records.size());
  for (const auto& r : table.records) {
    const Post* post = bundle.find_post(r.post_id);
    if (post == nullptr) throw ValidationError("sensitivity record for unknown post " + r.post_id);
    Example ex;
    ex.id = r.post_id;
    ex.text = post->target_text;
    ex.parent = post->parent_text;
    ex.target = r.delta;
    ex.sensitive = sensitivity_label(r, rule);
    out.push_back(std::move(ex));
  }
  return out;
}

std::string sensitivity_to_jsonl(const DatasetBundle& bundle, const SensitivityTable& table) {
  std::string out;
  for (const auto& r : table.records) {
    const Post* post = bundle.find_post(r.post_id);
    json j = {{"post_id", r.post_id},
              {"target_text", post ? json(post->target_text) : json(nullptr)},
              {"parent_text", post && post->parent_text ? json(*post->parent_text) : json(nullptr)},
              {"s_oc", r.s_oc.value},
              {"s_ic", r.s_ic.value},
              {"n_oc", r.s_oc.n_raters},
              {"n_ic", r.s_ic.n_raters},
              {"sem_oc", r.s_oc.sem},
              {"sem_ic", r.s_ic.sem},
              {"delta", r.delta},
              {"threshold", r.threshold},
              {"is_sensitive", r.is_sensitive}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<Example> load_sensitivity_examples(const std::filesystem::path& path, LabelRule rule) {
  const std::string text = read_file(path);
  std::vector<Example> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const json j = json::parse(line);
      Example ex;
      ex.id = j.at("post_id").get<std::string>();
      ex.text = j.at("target_text").get<std::string>();
      if (j.contains("parent_text") && !j["parent_text"].is_null()) ex.parent = j["parent_text"].get<std::string>();
      ex.target = j.at("delta").get<double>();
      if (!(ex.target >= -1.0 && ex.target <= 1.0)) throw ValidationError("delta outside [-1, 1]");
      if (rule == LabelRule::Absolute && j.contains("is_sensitive")) {
        ex.sensitive = j["is_sensitive"].get<bool>();
      } else if (j.contains("threshold")) {
        const double t = j["threshold"].get<double>();
        ex.sensitive = rule == LabelRule::Absolute ? std::abs(ex.target) > t : ex.target > t;
      }
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw ValidationError(where + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  return out;
}

void validate(const SplitSpec& spec) {
  if (spec.train < 0 || spec.validation < 0 || spec.test < 0) throw ValidationError("split fractions must be >= 0");
  if (std::abs(spec.train + spec.validation + spec.test - 1.0) > 1e-9) {
    throw ValidationError("split fractions must sum to 1");
  }
  if (spec.n_repeats == 0) throw ValidationError("n_repeats must be >= 1");
}

Split make_split(std::size_t n, const SplitSpec& spec, std::size_t repeat) {
  validate(spec);
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.test));
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.validation));
  if (n_test + n_val >= n) throw ValidationError("split leaves no training examples (n=" + std::to_string(n) + ")");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(spec.seed, repeat));
  rng.shuffle(std::span(order));
  Split s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                      order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
  return s;
}

std::string split_fingerprint(std::span<const Example> examples, const Split& split) {
  Fingerprint fp;
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    std::vector<std::string_view> ids;
    ids.reserve(part->size());
    for (auto i : *part) ids.push_back(examples[i].id);
    std::sort(ids.begin(), ids.end());
    fp.update_u64(ids.size());
    for (auto id : ids) fp.update(id);
  }
  return fp.hex();
}

MetricSummary summarize_metric(std::span<const std::optional<double>> values) {
  MetricSummary s;
  double sum = 0.0;
  for (const auto& v : values) {
    if (!v) continue;
    sum += *v;
    ++s.n_folds;
  }
  if (s.n_folds == 0) return s;
  const double mean = sum / static_cast<double>(s.n_folds);
  s.mean = mean;
  if (s.n_folds > 1) {
    double ss = 0.0;
    for (const auto& v : values) {
      if (v) ss += (*v - mean) * (*v - mean);
    }
    const double k = static_cast<double>(s.n_folds);
    s.sem = std::sqrt(ss / (k - 1.0) / k);
  }
  return s;
}

EvalReport summarize_folds(std::string family, std::vector<FoldResult> folds) {
  EvalReport r;
  r.family = std::move(family);
  r.folds = std::move(folds);
  std::vector<std::optional<double>> m, a, u, p;
  for (const auto& f : r.folds) {
    m.emplace_back(f.mse);
    a.emplace_back(f.mae);
    u.push_back(f.auc);
    p.push_back(f.aupr);
    r.has_missing = r.has_missing || !f.auc || !f.aupr;
  }
  r.mse = summarize_metric(m);
  r.mae = summarize_metric(a);
  r.auc = summarize_metric(u);
  r.aupr = summarize_metric(p);
  return r;
}

namespace {

json opt(const std::optional<double>& v, double scale = 1.0) { return v ? json(*v * scale) : json(nullptr); }

json summary_json(const MetricSummary& s, double scale) {
  return {{"mean", opt(s.mean, scale)}, {"sem", s.sem * scale}, {"n_folds", s.n_folds}};
}

}  // namespace

json EvalReport::to_json() const {
  json j;
  j["family"] = family;
  j["n_folds"] = folds.size();
  j["has_missing"] = has_missing;
  json folds_json = json::array();
  for (const auto& f : folds) {
    folds_json.push_back({{"repeat", f.repeat},
                          {"mse", f.mse},
                          {"mae", f.mae},
                          {"auc", opt(f.auc)},
                          {"aupr", opt(f.aupr)},
                          {"missing_reason", f.missing_reason.empty() ? json(nullptr) : json(f.missing_reason)},
                          {"n_train", f.n_train},
                          {"n_validation", f.n_validation},
                          {"n_test", f.n_test},
                          {"split_fingerprint", f.split_fingerprint}});
  }
  j["folds"] = std::move(folds_json);
  for (double scale : {1.0, 100.0}) {
    json s = {{"mse", summary_json(mse, scale)},
              {"mae", summary_json(mae, scale)},
              {"auc", summary_json(auc, scale)},
              {"aupr", summary_json(aupr, scale)}};
    j[scale == 1.0 ? "summary" : "summary_x100"] = std::move(s);
  }
  return j;
}

std::string EvalReport::folds_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "repeat,mse,mae,auc,aupr,n_train,n_validation,n_test,split_fingerprint,missing_reason\n";
  for (const auto& f : folds) {
    out << f.repeat << ',' << f.mse << ',' << f.mae << ',';
    if (f.auc) out << *f.auc;
    out << ',';
    if (f.aupr) out << *f.aupr;
    out << ',' << f.n_train << ',' << f.n_validation << ',' << f.n_test << ',' << f.split_fingerprint << ','
        << csv::escape_if_needed(f.missing_reason) << '\n';
  }
  return out.str();
}

FoldResult evaluate_predictions(std::span<const double> predictions, std::span<const Example> test, LabelRule rule) {
  if (predictions.size() != test.size()) throw MetricError("evaluate: prediction count mismatch");
  FoldResult f;
  f.n_test = test.size();
  std::vector<double> gold(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) gold[i] = test[i].target;
  f.mse = mse(predictions, gold);
  f.mae = mae(predictions, gold);

  std::vector<bool> labels(test.size());
  std::vector<double> ranked(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!test[i].sensitive) {
      f.missing_reason = "no binary ground truth";
      return f;
    }
    labels[i] = *test[i].sensitive;
    ranked[i] = ranking_score(predictions[i], rule);
  }
  const auto n_pos = std::count(labels.begin(), labels.end(), true);
  if (n_pos == 0 || n_pos == static_cast<std::ptrdiff_t>(labels.size())) {
    f.missing_reason = n_pos == 0 ? "test fold has no sensitive posts" : "test fold has only sensitive posts";
    return f;
  }
  f.auc = roc_auc(ranked, labels);
  f.aupr = aupr(ranked, labels);
  return f;
}

FoldResult evaluate_fold(const RegressorModel& model, std::span<const Example> test, LabelRule rule) {
  const auto predictions = model.predict_examples(test);
  return evaluate_predictions(predictions, test, rule);
}

EvalReport monte_carlo_cv(std::span<const Example> examples, Family family, const TrainConfig& config,
                          const SplitSpec& spec, const CvOptions& options) {
  validate(spec);
  {
    std::unordered_map<std::string_view, int> seen;
    for (const auto& ex : examples) {
      if (seen[ex.id]++) throw ValidationError("duplicate example id " + ex.id);
    }
  }
  std::vector<FoldResult> folds(spec.n_repeats);
  std::vector<std::exception_ptr> errors(spec.n_repeats);

  auto run = [&](std::size_t repeat) {
    try {
      const Split split = make_split(examples.size(), spec, repeat);
      auto gather = [&](const std::vector<std::size_t>& idx) {
        std::vector<Example> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(examples[i]);
        return out;
      };
      const auto tr = gather(split.train);
      const auto va = gather(split.validation);
      const auto te = gather(split.test);
      TrainConfig cfg = config;
      cfg.seed = derive_seed(config.seed, repeat);
      const RegressorModel model = train(family, tr, va, cfg);
      FoldResult f = evaluate_fold(model, te, options.label_rule);
      f.repeat = repeat;
      f.n_train = tr.size();
      f.n_validation = va.size();
      f.split_fingerprint = split_fingerprint(examples, split);
      folds[repeat] = std::move(f);
    } catch (...) {
      errors[repeat] = std::current_exception();
    }
  };

  const std::size_t workers =
      options.parallel && family != Family::External ? std::min<std::size_t>(max_threads(), spec.n_repeats) : 1;
  if (workers <= 1) {
    for (std::size_t r = 0; r < spec.n_repeats; ++r) run(r);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        for (std::size_t r = w; r < spec.n_repeats; r += workers) run(r);
      });
    }
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return summarize_folds(std::string(to_string(family)), std::move(folds));
}

EvalReport monte_carlo_cv(const DatasetBundle& bundle, Family family, const TrainConfig& config,
                          const SplitSpec& spec, const CvOptions& options) {
  const auto table = compute_sensitivities(bundle);
  const auto examples = make_examples(bundle, table, options.label_rule);
  return monte_carlo_cv(examples, family, config, spec, options);
}

std::string_view to_string(StratifyMode mode) {
  return mode == StratifyMode::TargetOnly ? "target_only" : "concat_parent";
}

StratifyMode parse_stratify_mode(std::string_view text) {
  if (text == "target_only" || text == "target") return StratifyMode::TargetOnly;
  if (text == "concat_parent" || text == "concat") return StratifyMode::ConcatParent;
  throw ValidationError("unknown stratify mode '" + std::string(text) + "' (target_only|concat_parent)");
}

StratifiedResult stratified_toxicity_mae(TextScorer& scorer, const DatasetBundle& bundle,
                                         const SensitivityTable& table, std::span<const double> thresholds,
                                         StratifyMode mode) {
  for (double t : thresholds) {
    if (!(t >= 0.0)) throw ValidationError("stratify thresholds must be >= 0");
  }
  std::vector<ScoreRequest> requests;
  requests.reserve(table.records.size());
  for (const auto& r : table.records) {
    const Post* post = bundle.find_post(r.post_id);
    if (post == nullptr) throw ValidationError("sensitivity record for unknown post " + r.post_id);
    ScoreRequest req{r.post_id, post->target_text, std::nullopt};
    if (mode == StratifyMode::ConcatParent && post->parent_text) {
      req.text = *post->parent_text + "\n" + post->target_text;
    }
    requests.push_back(std::move(req));
  }
  const ScoreBatch batch = scorer.score(requests);

  StratifiedResult out;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (batch.scores[i]) {
      ++out.n_scored;
    } else {
      out.failures.push_back({requests[i].id, batch.errors[i]});
    }
  }
  for (double t : thresholds) {
    StratifiedRow row;
    row.threshold = t;
    double sum = 0.0;
    for (std::size_t i = 0; i < requests.size(); ++i) {
      const auto& r = table.records[i];
      if (!batch.scores[i] || !(std::abs(r.delta) >= t)) continue;
      sum += std::abs(*batch.scores[i] - r.s_ic.value);
      ++row.n;
    }
    if (row.n > 0) row.mae = sum / static_cast<double>(row.n);
    out.rows.push_back(row);
  }
  return out;
}

StratifiedResult stratified_toxicity_mae(TextScorer& scorer, const DatasetBundle& bundle,
                                         std::span<const double> thresholds, StratifyMode mode) {
  return stratified_toxicity_mae(scorer, bundle, compute_sensitivities(bundle), thresholds, mode);
}

}  // namespace ctxsens
