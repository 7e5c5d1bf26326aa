#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ctxsens/features.hpp"
#include "ctxsens/scorer.hpp"
#include "ctxsens/util.hpp"

namespace ctxsens {

enum class Family { ConstantMean, UniformRandom, Ridge, LinearSVR, RandomForest, External };

std::string_view to_string(Family family);
Family parse_family(std::string_view text);

// A training or evaluation item. Vector families featurize `text` only.
struct Example {
  std::string id;
  std::string text;
  std::optional<std::string> parent;
  double target = 0.0;
  std::optional<bool> sensitive;  // binary ground truth, when known
  bool silver = false;
  double weight = 1.0;
};

// Pre-featurized training data.
struct VectorDataset {
  std::vector<FeatureVector> x;
  std::vector<double> y;
  std::vector<double> weight;  // empty = all 1
  std::size_t dimension = 0;

  std::size_t size() const { return y.size(); }
  double weight_at(std::size_t i) const { return weight.empty() ? 1.0 : weight[i]; }
};

enum class RandomMode {
  Empirical,  // uniform draw among the training targets
  Interval    // uniform on [-1, 1]
};

struct RidgeParams {
  double lambda = 1.0;
  double tolerance = 1e-10;  // relative residual of the normal equations
  std::size_t max_iterations = 5000;
};

struct SvrParams {
  double epsilon = 0.05;
  double learning_rate = 0.01;  // decays as lr / (1 + epoch)
  double c = 1.0;
  std::size_t max_epochs = 100;
};

struct ForestParams {
  std::size_t n_trees = 100;
  std::size_t max_depth = 12;  // 0 = unlimited
  std::size_t min_samples_leaf = 5;
  std::size_t max_features = 0;  // 0 = sqrt(dimension)
  bool bootstrap = true;
};

struct EarlyStopping {
  bool enabled = true;
  std::size_t patience = 5;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  FeatureConfig features;
  RidgeParams ridge;
  SvrParams svr;
  ForestParams forest;
  RandomMode random_mode = RandomMode::Empirical;
  EarlyStopping early_stopping;
  // External family: a live scorer, or an endpoint to connect to.
  std::shared_ptr<TextScorer> external;
  std::optional<Endpoint> external_endpoint;
  ExternalScorerOptions external_options;

  nlohmann::json hyperparameters(Family family) const;
};

struct RegressionTree {
  struct Node {
    std::int32_t feature = -1;  // -1 = leaf
    double threshold = 0.0;     // x <= threshold goes left
    std::int32_t left = -1;
    std::int32_t right = -1;
    double value = 0.0;
  };
  std::vector<Node> nodes;

  double predict(const FeatureVector& x) const;
};

struct ConstantParams {
  double mean = 0.0;
};
struct RandomParams {
  std::uint64_t seed = 0;
  RandomMode mode = RandomMode::Empirical;
  std::vector<double> targets;
};
struct LinearParams {
  std::vector<double> weights;
  double bias = 0.0;
};
struct ForestModel {
  std::vector<RegressionTree> trees;
};
struct ExternalParams {
  std::optional<Endpoint> endpoint;
  bool trained = false;  // whether the scorer accepted the fit handshake
};

using ModelParams = std::variant<ConstantParams, RandomParams, LinearParams, ForestModel, ExternalParams>;

struct TrainingMetadata {
  std::uint64_t seed = 0;
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::string training_fingerprint;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  std::vector<double> validation_curve;  // per epoch, epoch 0 = initial model
};

// Immutable once trained; predict is const and thread-safe except for the
// External family, whose scorer serializes access itself.
class RegressorModel {
 public:
  RegressorModel(Family family, ModelParams params, std::optional<Vocabulary> vocabulary,
                 TrainingMetadata metadata, std::shared_ptr<TextScorer> scorer = nullptr);

  Family family() const { return family_; }
  const ModelParams& params() const { return params_; }
  const std::optional<Vocabulary>& vocabulary() const { return vocabulary_; }
  const TrainingMetadata& metadata() const { return metadata_; }

  // Unclamped score; `ordinal` only matters for UniformRandom.
  double predict_raw(const FeatureVector& x, std::uint64_t ordinal = 0) const;
  // Clamped to [-1, 1]. Throws for External.
  double predict(const FeatureVector& x, std::uint64_t ordinal = 0) const;
  // Featurizes with the embedded vocabulary (or forwards to the scorer).
  // The i-th example gets ordinal i. Throws ScorerError when an external
  // scorer fails to score every example.
  std::vector<double> predict_examples(std::span<const Example> examples) const;

  // Random forests only.
  std::vector<double> tree_predictions(const FeatureVector& x) const;

 private:
  Family family_;
  ModelParams params_;
  std::optional<Vocabulary> vocabulary_;
  TrainingMetadata metadata_;
  std::shared_ptr<TextScorer> scorer_;
};

double clamp_prediction(double raw);

// Text entry point: fits the vocabulary on the training texts (vector
// families) and trains with early stopping on the validation examples.
RegressorModel train(Family family, std::span<const Example> train_set, std::span<const Example> validation_set,
                     const TrainConfig& config);

// Pre-featurized entry point; the model carries `vocabulary` if given.
RegressorModel train_vectors(Family family, const VectorDataset& train_set, const VectorDataset* validation_set,
                             const TrainConfig& config, std::optional<Vocabulary> vocabulary = std::nullopt);

// Ridge objective 0.5 * sum w_i (y_i - x_i.w - b)^2 + 0.5 * lambda * |w|^2
// and its gradient (weights then bias).
double ridge_objective(const VectorDataset& data, std::span<const double> weights, double bias, double lambda);
std::vector<double> ridge_gradient(const VectorDataset& data, std::span<const double> weights, double bias,
                                   double lambda);

class ModelFormatError : public ValidationError {
 public:
  enum class Kind { BadMagic, Truncated, Checksum, Version, Corrupt };
  ModelFormatError(Kind kind, const std::string& message) : ValidationError(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint16_t kModelFormatMajor = 1;
inline constexpr std::uint16_t kModelFormatMinor = 0;

std::string serialize_model(const RegressorModel& model);
RegressorModel deserialize_model(std::string_view bytes, const ExternalScorerOptions& external_options = {});
void save_model(const RegressorModel& model, const std::filesystem::path& path);
RegressorModel load_model(const std::filesystem::path& path, const ExternalScorerOptions& external_options = {});

}  // namespace ctxsens
