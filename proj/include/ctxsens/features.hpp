#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ctxsens {

struct FeatureConfig {
  bool lowercase = true;
  std::size_t min_token_length = 2;  // in code points
  std::size_t ngram_max = 2;         // 1 = unigrams only
  std::size_t min_df = 2;
  std::size_t max_features = 50000;  // 0 = unlimited
  bool sublinear_tf = false;         // 1 + ln(tf) instead of raw counts
  std::vector<std::string> stop_words;

  bool operator==(const FeatureConfig&) const = default;
};

nlohmann::json to_json(const FeatureConfig& config);
FeatureConfig feature_config_from_json(const nlohmann::json& j);

// Lowercases (Unicode simple case mapping), splits on runs of
// non-alphanumeric code points, drops short tokens and stop words, then
// appends n-grams joined by a single space.
std::vector<std::string> tokenize(std::string_view text, const FeatureConfig& config);

struct SparseEntry {
  std::uint32_t index = 0;
  double weight = 0.0;
  bool operator==(const SparseEntry&) const = default;
};

// Entries sorted by strictly increasing index, all < dimension.
struct FeatureVector {
  std::vector<SparseEntry> entries;
  std::size_t dimension = 0;

  bool empty() const { return entries.empty(); }
  double dot(std::span<const double> dense) const;
  double norm() const;
  double value_at(std::uint32_t index) const;  // 0 when absent
  bool operator==(const FeatureVector&) const = default;
};

// Builds a vector from arbitrary (index, weight) pairs: sorts, sums
// duplicates, drops exact zeros. No normalization.
FeatureVector make_feature_vector(std::vector<SparseEntry> entries, std::size_t dimension);

class Vocabulary {
 public:
  static constexpr int kFormatVersion = 1;

  Vocabulary() = default;

  // Throws ValidationError when texts is empty or no token survives.
  static Vocabulary fit(std::span<const std::string> texts, const FeatureConfig& config);

  std::size_t size() const { return terms_.size(); }
  std::size_t n_documents() const { return n_documents_; }
  const FeatureConfig& config() const { return config_; }
  const std::vector<std::string>& terms() const { return terms_; }
  std::size_t document_frequency(std::uint32_t index) const { return df_[index]; }
  // Returns -1 when the term is out of vocabulary.
  long long index_of(const std::string& term) const;
  std::size_t df_of(const std::string& term) const;
  double idf(std::uint32_t index) const { return idf_[index]; }

  // tf x idf over in-vocabulary terms, L2-normalized; zero vector when no
  // token is in the vocabulary.
  FeatureVector transform(std::string_view text) const;
  std::vector<FeatureVector> transform_all(std::span<const std::string> texts) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& other) const {
    return terms_ == other.terms_ && df_ == other.df_ && n_documents_ == other.n_documents_ &&
           config_ == other.config_;
  }

 private:
  void rebuild_lookup();

  FeatureConfig config_;
  std::size_t n_documents_ = 0;
  std::vector<std::string> terms_;
  std::vector<std::size_t> df_;
  std::vector<double> idf_;
  std::unordered_map<std::string, std::uint32_t> lookup_;
};

}  // namespace ctxsens
