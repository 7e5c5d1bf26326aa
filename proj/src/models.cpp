#include "ctxsens/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

namespace ctxsens {

using nlohmann::json;

std::string_view to_string(Family family) {
  switch (family) {
    case Family::ConstantMean: return "constant_mean";
    case Family::UniformRandom: return "uniform_random";
    case Family::Ridge: return "ridge";
    case Family::LinearSVR: return "linear_svr";
    case Family::RandomForest: return "random_forest";
    case Family::External: return "external";
  }
  return "constant_mean";
}

Family parse_family(std::string_view text) {
  if (text == "constant_mean" || text == "b1" || text == "mean") return Family::ConstantMean;
  if (text == "uniform_random" || text == "b2" || text == "random") return Family::UniformRandom;
  if (text == "ridge" || text == "lr") return Family::Ridge;
  if (text == "linear_svr" || text == "svr") return Family::LinearSVR;
  if (text == "random_forest" || text == "rf") return Family::RandomForest;
  if (text == "external") return Family::External;
  throw ValidationError("unknown model family '" + std::string(text) + "'");
}

double clamp_prediction(double raw) {
  if (std::isnan(raw)) return 0.0;
  return std::clamp(raw, -1.0, 1.0);
}

json TrainConfig::hyperparameters(Family family) const {
  json h = json::object();
  switch (family) {
    case Family::ConstantMean: break;
    case Family::UniformRandom: h["mode"] = random_mode == RandomMode::Empirical ? "empirical" : "interval"; break;
    case Family::Ridge:
      h["lambda"] = ridge.lambda;
      h["tolerance"] = ridge.tolerance;
      h["max_iterations"] = ridge.max_iterations;
      break;
    case Family::LinearSVR:
      h["epsilon"] = svr.epsilon;
      h["learning_rate"] = svr.learning_rate;
      h["c"] = svr.c;
      h["max_epochs"] = svr.max_epochs;
      h["early_stopping"] = early_stopping.enabled;
      h["patience"] = early_stopping.patience;
      break;
    case Family::RandomForest:
      h["n_trees"] = forest.n_trees;
      h["max_depth"] = forest.max_depth;
      h["min_samples_leaf"] = forest.min_samples_leaf;
      h["max_features"] = forest.max_features;
      h["bootstrap"] = forest.bootstrap;
      break;
    case Family::External:
      h["early_stopping"] = early_stopping.enabled;
      h["patience"] = early_stopping.patience;
      break;
  }
  if (family != Family::External) h["features"] = to_json(features);
  return h;
}

double RegressionTree::predict(const FeatureVector& x) const {
  std::size_t i = 0;
  for (;;) {
    const Node& node = nodes[i];
    if (node.feature < 0) return node.value;
    const double v = x.value_at(static_cast<std::uint32_t>(node.feature));
    i = static_cast<std::size_t>(v <= node.threshold ? node.left : node.right);
  }
}

RegressorModel::RegressorModel(Family family, ModelParams params, std::optional<Vocabulary> vocabulary,
                               TrainingMetadata metadata, std::shared_ptr<TextScorer> scorer)
    : family_(family),
      params_(std::move(params)),
      vocabulary_(std::move(vocabulary)),
      metadata_(std::move(metadata)),
      scorer_(std::move(scorer)) {}

double RegressorModel::predict_raw(const FeatureVector& x, std::uint64_t ordinal) const {
  switch (family_) {
    case Family::ConstantMean: return std::get<ConstantParams>(params_).mean;
    case Family::UniformRandom: {
      const auto& p = std::get<RandomParams>(params_);
      const double u = unit_double(mix64(p.seed ^ mix64(ordinal)));
      if (p.mode == RandomMode::Interval || p.targets.empty()) return 2.0 * u - 1.0;
      auto idx = static_cast<std::size_t>(u * static_cast<double>(p.targets.size()));
      return p.targets[std::min(idx, p.targets.size() - 1)];
    }
    case Family::Ridge:
    case Family::LinearSVR: {
      const auto& p = std::get<LinearParams>(params_);
      double s = p.bias;
      for (const auto& e : x.entries) {
        if (e.index < p.weights.size()) s += e.weight * p.weights[e.index];
      }
      return s;
    }
    case Family::RandomForest: {
      const auto& f = std::get<ForestModel>(params_);
      if (f.trees.empty()) return 0.0;
      double s = 0.0;
      for (const auto& t : f.trees) s += t.predict(x);
      return s / static_cast<double>(f.trees.size());
    }
    case Family::External: throw ValidationError("external models score text, not feature vectors");
  }
  return 0.0;
}

double RegressorModel::predict(const FeatureVector& x, std::uint64_t ordinal) const {
  return clamp_prediction(predict_raw(x, ordinal));
}

std::vector<double> RegressorModel::tree_predictions(const FeatureVector& x) const {
  const auto* f = std::get_if<ForestModel>(&params_);
  if (f == nullptr) throw ValidationError("tree_predictions: not a random forest");
  std::vector<double> out;
  out.reserve(f->trees.size());
  for (const auto& t : f->trees) out.push_back(t.predict(x));
  return out;
}

std::vector<double> RegressorModel::predict_examples(std::span<const Example> examples) const {
  std::vector<double> out(examples.size());
  if (family_ == Family::External) {
    if (!scorer_) throw ScorerError("external model has no scorer attached");
    std::vector<ScoreRequest> requests;
    requests.reserve(examples.size());
    for (const auto& ex : examples) requests.push_back({ex.id, ex.text, ex.parent});
    ScoreBatch batch = scorer_->score(requests);
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (!batch.scores[i]) {
        throw ScorerError("external scorer failed on " + examples[i].id + ": " + batch.errors[i]);
      }
      out[i] = clamp_prediction(*batch.scores[i]);
    }
    return out;
  }
  const bool needs_features = family_ != Family::ConstantMean && family_ != Family::UniformRandom;
  if (needs_features && !vocabulary_) throw ValidationError("model has no vocabulary to featurize text");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    FeatureVector x = needs_features ? vocabulary_->transform(examples[i].text) : FeatureVector{};
    out[i] = predict(x, i);
  }
  return out;
}

namespace {

std::string fingerprint_dataset(const VectorDataset& data) {
  Fingerprint fp;
  fp.update_u64(data.size());
  fp.update_u64(data.dimension);
  for (std::size_t i = 0; i < data.size(); ++i) {
    fp.update_u64(std::bit_cast<std::uint64_t>(data.y[i]));
    fp.update_u64(std::bit_cast<std::uint64_t>(data.weight_at(i)));
    fp.update_u64(data.x[i].entries.size());
    for (const auto& e : data.x[i].entries) {
      fp.update_u64(e.index);
      fp.update_u64(std::bit_cast<std::uint64_t>(e.weight));
    }
  }
  return fp.hex();
}

void check_targets(const VectorDataset& data) {
  if (data.size() == 0) throw ValidationError("train: empty training set");
  if (data.x.size() != data.y.size()) throw ValidationError("train: feature/target length mismatch");
  if (!data.weight.empty() && data.weight.size() != data.y.size()) {
    throw ValidationError("train: weight length mismatch");
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double y = data.y[i];
    if (!(y >= -1.0 && y <= 1.0)) {
      throw ValidationError("train: target " + std::to_string(y) + " at row " + std::to_string(i) +
                            " is outside [-1, 1]");
    }
    if (!(data.weight_at(i) > 0.0)) throw ValidationError("train: weights must be positive");
  }
}

double weighted_mean(const VectorDataset& data) {
  double sw = 0.0, swy = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    sw += data.weight_at(i);
    swy += data.weight_at(i) * data.y[i];
  }
  return swy / sw;
}

// Matrix-free conjugate gradient on the ridge normal equations with an
// unpenalized intercept (the last coordinate).
LinearParams fit_ridge(const VectorDataset& data, const RidgeParams& params) {
  const std::size_t d = data.dimension;
  const std::size_t n = data.size();
  if (params.lambda < 0.0) throw ValidationError("ridge: lambda must be >= 0");

  auto apply = [&](const std::vector<double>& z, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    const double b = z[d];
    for (std::size_t i = 0; i < n; ++i) {
      const double c = data.weight_at(i);
      const double r = c * (data.x[i].dot(z) + b);
      for (const auto& e : data.x[i].entries) out[e.index] += r * e.weight;
      out[d] += r;
    }
    for (std::size_t j = 0; j < d; ++j) out[j] += params.lambda * z[j];
  };

  std::vector<double> rhs(d + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double cy = data.weight_at(i) * data.y[i];
    for (const auto& e : data.x[i].entries) rhs[e.index] += cy * e.weight;
    rhs[d] += cy;
  }
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };

  std::vector<double> z(d + 1, 0.0);
  std::vector<double> r = rhs;
  std::vector<double> p = r;
  std::vector<double> ap(d + 1);
  double rr = dot(r, r);
  const double stop = params.tolerance * params.tolerance * dot(rhs, rhs);
  for (std::size_t it = 0; it < params.max_iterations && rr > stop; ++it) {
    apply(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) break;
    const double alpha = rr / pap;
    for (std::size_t j = 0; j <= d; ++j) {
      z[j] += alpha * p[j];
      r[j] -= alpha * ap[j];
    }
    const double rr_next = dot(r, r);
    const double beta = rr_next / rr;
    rr = rr_next;
    for (std::size_t j = 0; j <= d; ++j) p[j] = r[j] + beta * p[j];
  }
  LinearParams out;
  out.bias = z[d];
  z.pop_back();
  out.weights = std::move(z);
  return out;
}

double validation_mse(const LinearParams& p, const VectorDataset& val) {
  double s = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    double pred = p.bias;
    for (const auto& e : val.x[i].entries) {
      if (e.index < p.weights.size()) pred += e.weight * p.weights[e.index];
    }
    const double err = clamp_prediction(pred) - val.y[i];
    s += err * err;
  }
  return s / static_cast<double>(val.size());
}

// Primal SGD on the epsilon-insensitive loss with L2 regularization
// lambda = 1 / (C n). w is stored as scale * v so shrinkage is O(1).
LinearParams fit_svr(const VectorDataset& data, const VectorDataset* val, const TrainConfig& config,
                     TrainingMetadata& meta) {
  const SvrParams& params = config.svr;
  const std::size_t d = data.dimension;
  const std::size_t n = data.size();
  const double lambda = 1.0 / (params.c * static_cast<double>(n));
  const bool stopping = config.early_stopping.enabled && val != nullptr && val->size() > 0;
  if (config.early_stopping.enabled && config.early_stopping.patience < 1) {
    throw ValidationError("early stopping patience must be >= 1");
  }

  std::vector<double> v(d, 0.0);
  double scale = 1.0;
  double bias = weighted_mean(data);
  auto materialize = [&] {
    LinearParams p;
    p.weights.resize(d);
    for (std::size_t j = 0; j < d; ++j) p.weights[j] = scale * v[j];
    p.bias = bias;
    return p;
  };

  LinearParams best = materialize();
  double best_mse = stopping ? validation_mse(best, *val) : 0.0;
  if (stopping) meta.validation_curve.push_back(best_mse);
  meta.best_epoch = 0;

  Rng rng(derive_seed(config.seed, 0x5356));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t epoch = 0;
  while (epoch < params.max_epochs) {
    ++epoch;
    const double eta = params.learning_rate / static_cast<double>(epoch);
    rng.shuffle(std::span(order));
    for (std::size_t i : order) {
      const auto& x = data.x[i];
      double pred = bias;
      for (const auto& e : x.entries) pred += scale * v[e.index] * e.weight;
      const double residual = data.y[i] - pred;
      scale *= (1.0 - eta * lambda);
      if (scale < 1e-9) {
        for (double& vj : v) vj *= scale;
        scale = 1.0;
      }
      if (std::abs(residual) > params.epsilon) {
        const double g = eta * data.weight_at(i) * (residual > 0 ? 1.0 : -1.0);
        for (const auto& e : x.entries) v[e.index] += (g / scale) * e.weight;
        bias += g;
      }
    }
    if (stopping) {
      LinearParams current = materialize();
      const double mse = validation_mse(current, *val);
      meta.validation_curve.push_back(mse);
      if (mse < best_mse) {
        best_mse = mse;
        best = std::move(current);
        meta.best_epoch = epoch;
      } else if (epoch - meta.best_epoch >= config.early_stopping.patience) {
        break;
      }
    }
  }
  meta.epochs_run = epoch;
  if (!stopping) {
    best = materialize();
    meta.best_epoch = epoch;
  }
  return best;
}

class TreeBuilder {
 public:
  TreeBuilder(const VectorDataset& data, const ForestParams& params, std::size_t max_features)
      : data_(data), params_(params), max_features_(max_features), slot_(data.dimension, -1),
        stamp_(data.dimension, 0) {}

  RegressionTree build(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = data_.size();
    std::vector<std::uint32_t> rows(n);
    if (params_.bootstrap) {
      for (auto& r : rows) r = static_cast<std::uint32_t>(rng.below(n));
    } else {
      std::iota(rows.begin(), rows.end(), 0U);
    }
    RegressionTree tree;
    struct Task {
      std::int32_t node;
      std::vector<std::uint32_t> rows;
      std::size_t depth;
    };
    std::vector<Task> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, std::move(rows), 0});
    while (!stack.empty()) {
      Task task = std::move(stack.back());
      stack.pop_back();
      auto split = find_split(task.rows, task.depth, rng);
      auto& node = tree.nodes[static_cast<std::size_t>(task.node)];
      node.value = split.value;
      if (split.feature < 0) continue;
      node.feature = split.feature;
      node.threshold = split.threshold;
      std::vector<std::uint32_t> left, right;
      for (auto r : task.rows) {
        const double v = data_.x[r].value_at(static_cast<std::uint32_t>(split.feature));
        (v <= split.threshold ? left : right).push_back(r);
      }
      const auto left_id = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      const auto right_id = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes[static_cast<std::size_t>(task.node)].left = left_id;
      tree.nodes[static_cast<std::size_t>(task.node)].right = right_id;
      stack.push_back({right_id, std::move(right), task.depth + 1});
      stack.push_back({left_id, std::move(left), task.depth + 1});
    }
    return tree;
  }

 private:
  struct Stats {
    double w = 0, wy = 0, wyy = 0;
    std::size_t count = 0;
    void add(double weight, double y) {
      w += weight;
      wy += weight * y;
      wyy += weight * y * y;
      ++count;
    }
    double sse() const { return w > 0 ? std::max(0.0, wyy - wy * wy / w) : 0.0; }
  };
  struct Split {
    std::int32_t feature = -1;
    double threshold = 0.0;
    double value = 0.0;
  };
  struct Entry {
    double value;
    std::uint32_t row;
  };

  Split find_split(const std::vector<std::uint32_t>& rows, std::size_t depth, Rng& rng) {
    Stats total;
    for (auto r : rows) total.add(data_.weight_at(r), data_.y[r]);
    Split out;
    out.value = total.wy / total.w;
    const double parent_sse = total.sse();
    if (params_.max_depth > 0 && depth >= params_.max_depth) return out;
    if (rows.size() < 2 * std::max<std::size_t>(1, params_.min_samples_leaf)) return out;
    if (parent_sse <= 1e-15 * std::max(1.0, total.wyy)) return out;

    // Only features present in the node can separate it.
    ++generation_;
    std::vector<std::uint32_t> candidates;
    for (auto r : rows) {
      for (const auto& e : data_.x[r].entries) {
        if (stamp_[e.index] != generation_) {
          stamp_[e.index] = generation_;
          candidates.push_back(e.index);
        }
      }
    }
    std::sort(candidates.begin(), candidates.end());
    const std::size_t m = std::min(max_features_, candidates.size());
    for (std::size_t i = 0; i < m; ++i) {
      std::swap(candidates[i], candidates[i + rng.below(candidates.size() - i)]);
    }
    candidates.resize(m);
    std::sort(candidates.begin(), candidates.end());

    std::vector<std::vector<Entry>> columns(m);
    for (std::size_t k = 0; k < m; ++k) slot_[candidates[k]] = static_cast<std::int32_t>(k);
    for (auto r : rows) {
      for (const auto& e : data_.x[r].entries) {
        const auto k = slot_[e.index];
        if (k >= 0 && candidates[static_cast<std::size_t>(k)] == e.index) {
          columns[static_cast<std::size_t>(k)].push_back({e.weight, r});
        }
      }
    }
    for (auto f : candidates) slot_[f] = -1;

    const std::size_t min_leaf = std::max<std::size_t>(1, params_.min_samples_leaf);
    double best_sse = parent_sse;
    for (std::size_t k = 0; k < m; ++k) {
      auto& col = columns[k];
      std::sort(col.begin(), col.end(), [](const Entry& a, const Entry& b) {
        return a.value < b.value || (a.value == b.value && a.row < b.row);
      });
      Stats nonzero;
      for (const auto& e : col) nonzero.add(data_.weight_at(e.row), data_.y[e.row]);
      Stats zeros;
      zeros.w = total.w - nonzero.w;
      zeros.wy = total.wy - nonzero.wy;
      zeros.wyy = total.wyy - nonzero.wyy;
      zeros.count = total.count - nonzero.count;

      Stats left;
      bool zeros_added = zeros.count == 0;
      auto consider = [&](double threshold) {
        const std::size_t right_count = total.count - left.count;
        if (left.count < min_leaf || right_count < min_leaf) return;
        Stats right;
        right.w = total.w - left.w;
        right.wy = total.wy - left.wy;
        right.wyy = total.wyy - left.wyy;
        const double sse = left.sse() + right.sse();
        if (sse < best_sse - 1e-12 * std::max(1.0, parent_sse)) {
          best_sse = sse;
          out.feature = static_cast<std::int32_t>(candidates[k]);
          out.threshold = threshold;
        }
      };
      std::size_t i = 0;
      while (i < col.size() || !zeros_added) {
        // Next group in value order: the implicit zero block or a run of equal values.
        if (!zeros_added && (i >= col.size() || col[i].value > 0.0)) {
          left.w += zeros.w;
          left.wy += zeros.wy;
          left.wyy += zeros.wyy;
          left.count += zeros.count;
          zeros_added = true;
          if (left.count < total.count) consider(0.0);
          continue;
        }
        const double value = col[i].value;
        while (i < col.size() && col[i].value == value) {
          left.add(data_.weight_at(col[i].row), data_.y[col[i].row]);
          ++i;
        }
        if (left.count < total.count) consider(value);
      }
    }
    return out;
  }

  const VectorDataset& data_;
  const ForestParams& params_;
  std::size_t max_features_;
  std::vector<std::int32_t> slot_;
  std::vector<std::uint64_t> stamp_;
  std::uint64_t generation_ = 0;
};

ForestModel fit_forest(const VectorDataset& data, const TrainConfig& config) {
  const ForestParams& params = config.forest;
  if (params.n_trees == 0) throw ValidationError("random forest needs at least one tree");
  std::size_t max_features = params.max_features;
  if (max_features == 0) {
    max_features = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(data.dimension))));
  }
  ForestModel forest;
  forest.trees.resize(params.n_trees);
  const std::size_t n_workers = std::min<std::size_t>(max_threads(), params.n_trees);
  auto work = [&](std::size_t worker) {
    TreeBuilder builder(data, params, max_features);
    for (std::size_t t = worker; t < params.n_trees; t += n_workers) {
      forest.trees[t] = builder.build(config.seed ^ static_cast<std::uint64_t>(t));
    }
  };
  if (n_workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  return forest;
}

VectorDataset featurize(const Vocabulary& vocab, std::span<const Example> examples) {
  VectorDataset out;
  out.dimension = vocab.size();
  bool any_weight = false;
  for (const auto& ex : examples) {
    out.x.push_back(vocab.transform(ex.text));
    out.y.push_back(ex.target);
    out.weight.push_back(ex.weight);
    any_weight = any_weight || ex.weight != 1.0;
  }
  if (!any_weight) out.weight.clear();
  return out;
}

}  // namespace

RegressorModel train_vectors(Family family, const VectorDataset& train_set, const VectorDataset* validation_set,
                             const TrainConfig& config, std::optional<Vocabulary> vocabulary) {
  if (family == Family::External) throw ValidationError("external models train from text; use train()");
  check_targets(train_set);
  for (const auto& x : train_set.x) {
    if (!x.entries.empty() && x.entries.back().index >= train_set.dimension) {
      throw ValidationError("train: feature index exceeds dimension");
    }
  }
  TrainingMetadata meta;
  meta.seed = config.seed;
  meta.hyperparameters = config.hyperparameters(family);
  meta.training_fingerprint = fingerprint_dataset(train_set);
  meta.n_train = train_set.size();
  meta.n_validation = validation_set ? validation_set->size() : 0;

  ModelParams params;
  switch (family) {
    case Family::ConstantMean: params = ConstantParams{weighted_mean(train_set)}; break;
    case Family::UniformRandom: {
      RandomParams p;
      p.seed = config.seed;
      p.mode = config.random_mode;
      if (p.mode == RandomMode::Empirical) p.targets = train_set.y;
      params = std::move(p);
      break;
    }
    case Family::Ridge: params = fit_ridge(train_set, config.ridge); break;
    case Family::LinearSVR: params = fit_svr(train_set, validation_set, config, meta); break;
    case Family::RandomForest: params = fit_forest(train_set, config); break;
    case Family::External: break;
  }
  return RegressorModel(family, std::move(params), std::move(vocabulary), std::move(meta));
}

RegressorModel train(Family family, std::span<const Example> train_set, std::span<const Example> validation_set,
                     const TrainConfig& config) {
  if (train_set.empty()) throw ValidationError("train: empty training set");
  for (const auto& ex : train_set) {
    if (!(ex.target >= -1.0 && ex.target <= 1.0)) {
      throw ValidationError("train: target for " + ex.id + " is outside [-1, 1]");
    }
  }
  if (family == Family::External) {
    std::shared_ptr<TextScorer> scorer = config.external;
    ExternalParams p;
    p.endpoint = config.external_endpoint;
    if (!scorer) {
      if (!config.external_endpoint) throw ValidationError("external family needs a scorer endpoint");
      scorer = std::make_shared<ExternalScorer>(*config.external_endpoint, config.external_options);
    } else if (auto* ext = dynamic_cast<ExternalScorer*>(scorer.get())) {
      p.endpoint = ext->endpoint();
    }
    auto to_fit = [](std::span<const Example> xs) {
      std::vector<FitExample> out;
      out.reserve(xs.size());
      for (const auto& ex : xs) out.push_back({ex.id, ex.text, ex.parent, ex.target});
      return out;
    };
    const auto train_fit = to_fit(train_set);
    const auto val_fit = config.early_stopping.enabled ? to_fit(validation_set) : std::vector<FitExample>{};
    p.trained = scorer->fit(train_fit, val_fit, config.early_stopping.patience);
    TrainingMetadata meta;
    meta.seed = config.seed;
    meta.hyperparameters = config.hyperparameters(family);
    Fingerprint fp;
    for (const auto& ex : train_set) {
      fp.update(ex.text);
      fp.update_u64(std::bit_cast<std::uint64_t>(ex.target));
    }
    meta.training_fingerprint = fp.hex();
    meta.n_train = train_set.size();
    meta.n_validation = validation_set.size();
    return RegressorModel(family, p, std::nullopt, std::move(meta), std::move(scorer));
  }

  std::vector<std::string> texts;
  texts.reserve(train_set.size());
  for (const auto& ex : train_set) texts.push_back(ex.text);
  const bool needs_features = family != Family::ConstantMean && family != Family::UniformRandom;
  std::optional<Vocabulary> vocab;
  if (needs_features) vocab = Vocabulary::fit(texts, config.features);
  Vocabulary empty_vocab;
  const Vocabulary& v = vocab ? *vocab : empty_vocab;
  VectorDataset train_vec = featurize(v, train_set);
  VectorDataset val_vec = featurize(v, validation_set);
  return train_vectors(family, train_vec, validation_set.empty() ? nullptr : &val_vec, config, std::move(vocab));
}

double ridge_objective(const VectorDataset& data, std::span<const double> weights, double bias, double lambda) {
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double r = data.y[i] - data.x[i].dot(weights) - bias;
    loss += 0.5 * data.weight_at(i) * r * r;
  }
  double norm2 = 0.0;
  for (double w : weights) norm2 += w * w;
  return loss + 0.5 * lambda * norm2;
}

std::vector<double> ridge_gradient(const VectorDataset& data, std::span<const double> weights, double bias,
                                   double lambda) {
  std::vector<double> g(weights.size() + 1, 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double r = data.y[i] - data.x[i].dot(weights) - bias;
    const double c = data.weight_at(i) * r;
    for (const auto& e : data.x[i].entries) g[e.index] -= c * e.weight;
    g.back() -= c;
  }
  for (std::size_t j = 0; j < weights.size(); ++j) g[j] += lambda * weights[j];
  return g;
}

// ---- persistence ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'T', 'X', 'S', 'M', 'O', 'D', 'L'};

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) {
      throw ModelFormatError(ModelFormatError::Kind::Truncated, "model file truncated");
    }
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw ModelFormatError(ModelFormatError::Kind::Truncated, "model file truncated");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

json metadata_to_json(const TrainingMetadata& m) {
  return {{"seed", m.seed},
          {"hyperparameters", m.hyperparameters},
          {"training_fingerprint", m.training_fingerprint},
          {"n_train", m.n_train},
          {"n_validation", m.n_validation},
          {"epochs_run", m.epochs_run},
          {"best_epoch", m.best_epoch},
          {"validation_curve", m.validation_curve}};
}

TrainingMetadata metadata_from_json(const json& j) {
  TrainingMetadata m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.hyperparameters = j.at("hyperparameters");
  m.training_fingerprint = j.at("training_fingerprint").get<std::string>();
  m.n_train = j.at("n_train").get<std::size_t>();
  m.n_validation = j.at("n_validation").get<std::size_t>();
  m.epochs_run = j.at("epochs_run").get<std::size_t>();
  m.best_epoch = j.at("best_epoch").get<std::size_t>();
  m.validation_curve = j.at("validation_curve").get<std::vector<double>>();
  return m;
}

}  // namespace

std::string serialize_model(const RegressorModel& model) {
  json meta = {{"family", to_string(model.family())}, {"metadata", metadata_to_json(model.metadata())}};
  if (model.vocabulary()) meta["vocabulary"] = model.vocabulary()->to_json();

  Writer params;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ConstantParams>) {
          params.put(p.mean);
        } else if constexpr (std::is_same_v<T, RandomParams>) {
          meta["random"] = {{"mode", p.mode == RandomMode::Empirical ? "empirical" : "interval"}};
          params.put<std::uint64_t>(p.seed);
          params.put<std::uint64_t>(p.targets.size());
          for (double t : p.targets) params.put(t);
        } else if constexpr (std::is_same_v<T, LinearParams>) {
          params.put(p.bias);
          params.put<std::uint64_t>(p.weights.size());
          for (double w : p.weights) params.put(w);
        } else if constexpr (std::is_same_v<T, ForestModel>) {
          params.put<std::uint64_t>(p.trees.size());
          for (const auto& tree : p.trees) {
            params.put<std::uint64_t>(tree.nodes.size());
            for (const auto& n : tree.nodes) {
              params.put(n.feature);
              params.put(n.threshold);
              params.put(n.left);
              params.put(n.right);
              params.put(n.value);
            }
          }
        } else {
          meta["external"] = {{"endpoint", p.endpoint ? to_json(*p.endpoint) : json(nullptr)},
                              {"trained", p.trained}};
        }
      },
      model.params());

  Writer out;
  out.bytes(std::string_view(kMagic, sizeof kMagic));
  out.put<std::uint16_t>(kModelFormatMajor);
  out.put<std::uint16_t>(kModelFormatMinor);
  out.put<std::uint8_t>(static_cast<std::uint8_t>(model.family()));
  const std::string meta_bytes = meta.dump();
  out.put<std::uint64_t>(meta_bytes.size());
  out.bytes(meta_bytes);
  out.put<std::uint64_t>(params.str().size());
  out.bytes(params.str());
  out.put<std::uint32_t>(crc32(out.str()));
  return std::move(out.str());
}

RegressorModel deserialize_model(std::string_view bytes, const ExternalScorerOptions& external_options) {
  if (bytes.size() < sizeof kMagic + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ModelFormatError(ModelFormatError::Kind::BadMagic, "not a model file (bad magic)");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32(body) != stored_crc) throw ModelFormatError(ModelFormatError::Kind::Checksum, "model file checksum mismatch");

  Reader in(body);
  in.bytes(sizeof kMagic);
  const auto major = in.get<std::uint16_t>();
  in.get<std::uint16_t>();
  if (major > kModelFormatMajor) {
    throw ModelFormatError(ModelFormatError::Kind::Version,
                           "model format version " + std::to_string(major) + " is newer than supported " +
                               std::to_string(kModelFormatMajor));
  }
  const auto family_tag = in.get<std::uint8_t>();
  if (family_tag > static_cast<std::uint8_t>(Family::External)) {
    throw ModelFormatError(ModelFormatError::Kind::Corrupt, "unknown family tag");
  }
  const auto family = static_cast<Family>(family_tag);
  json meta;
  try {
    meta = json::parse(in.bytes(in.get<std::uint64_t>()));
  } catch (const json::exception& e) {
    throw ModelFormatError(ModelFormatError::Kind::Corrupt, std::string("bad metadata: ") + e.what());
  }
  Reader params(in.bytes(in.get<std::uint64_t>()));

  std::optional<Vocabulary> vocab;
  if (meta.contains("vocabulary")) vocab = Vocabulary::from_json(meta["vocabulary"]);
  TrainingMetadata metadata = metadata_from_json(meta.at("metadata"));

  ModelParams p;
  std::shared_ptr<TextScorer> scorer;
  switch (family) {
    case Family::ConstantMean: p = ConstantParams{params.get<double>()}; break;
    case Family::UniformRandom: {
      RandomParams r;
      r.mode = meta.at("random").at("mode").get<std::string>() == "empirical" ? RandomMode::Empirical
                                                                               : RandomMode::Interval;
      r.seed = params.get<std::uint64_t>();
      r.targets.resize(params.get<std::uint64_t>());
      for (double& t : r.targets) t = params.get<double>();
      p = std::move(r);
      break;
    }
    case Family::Ridge:
    case Family::LinearSVR: {
      LinearParams l;
      l.bias = params.get<double>();
      l.weights.resize(params.get<std::uint64_t>());
      for (double& w : l.weights) w = params.get<double>();
      p = std::move(l);
      break;
    }
    case Family::RandomForest: {
      ForestModel f;
      f.trees.resize(params.get<std::uint64_t>());
      for (auto& tree : f.trees) {
        tree.nodes.resize(params.get<std::uint64_t>());
        for (auto& n : tree.nodes) {
          n.feature = params.get<std::int32_t>();
          n.threshold = params.get<double>();
          n.left = params.get<std::int32_t>();
          n.right = params.get<std::int32_t>();
          n.value = params.get<double>();
          const auto limit = static_cast<std::int32_t>(tree.nodes.size());
          if (n.feature >= 0 && (n.left < 0 || n.left >= limit || n.right < 0 || n.right >= limit)) {
            throw ModelFormatError(ModelFormatError::Kind::Corrupt, "tree child index out of range");
          }
        }
      }
      p = std::move(f);
      break;
    }
    case Family::External: {
      ExternalParams e;
      const auto& ext = meta.at("external");
      if (!ext.at("endpoint").is_null()) e.endpoint = endpoint_from_json(ext.at("endpoint"));
      e.trained = ext.at("trained").get<bool>();
      if (e.endpoint) scorer = std::make_shared<ExternalScorer>(*e.endpoint, external_options);
      p = std::move(e);
      break;
    }
  }
  return RegressorModel(family, std::move(p), std::move(vocab), std::move(metadata), std::move(scorer));
}

void save_model(const RegressorModel& model, const std::filesystem::path& path) {
  write_file(path, serialize_model(model));
}

RegressorModel load_model(const std::filesystem::path& path, const ExternalScorerOptions& external_options) {
  return deserialize_model(read_file(path), external_options);
}

}  // namespace ctxsens
