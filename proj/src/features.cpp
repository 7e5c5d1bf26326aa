#include "ctxsens/features.hpp"

#include <locale.h>
#include <wctype.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <unordered_set>

#include "ctxsens/util.hpp"

namespace ctxsens {

using nlohmann::json;

namespace {

locale_t utf8_locale() {
  static locale_t loc = [] {
    locale_t l = newlocale(LC_CTYPE_MASK, "C.UTF-8", static_cast<locale_t>(0));
    if (l == static_cast<locale_t>(0)) l = newlocale(LC_CTYPE_MASK, "C.utf8", static_cast<locale_t>(0));
    return l;
  }();
  return loc;
}

// Decodes one code point; returns 0xFFFFFFFF for malformed sequences and
// advances past the offending byte.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  const unsigned char b0 = byte(i);
  std::size_t len = 0;
  char32_t cp = 0;
  if (b0 < 0x80) {
    ++i;
    return b0;
  } else if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    ++i;
    return 0xFFFFFFFF;
  }
  if (i + len > s.size()) {
    ++i;
    return 0xFFFFFFFF;
  }
  for (std::size_t k = 1; k < len; ++k) {
    const unsigned char b = byte(i + k);
    if ((b & 0xC0) != 0x80) {
      ++i;
      return 0xFFFFFFFF;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += len;
  return cp;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_alnum(char32_t cp) {
  if (cp < 0x80) return std::isalnum(static_cast<int>(cp)) != 0;
  if (cp == 0xFFFFFFFF) return false;
  locale_t loc = utf8_locale();
  if (loc == static_cast<locale_t>(0)) return true;  // treat non-ASCII as letters
  return iswalnum_l(static_cast<wint_t>(cp), loc) != 0;
}

char32_t to_lower(char32_t cp) {
  if (cp < 0x80) return static_cast<char32_t>(std::tolower(static_cast<int>(cp)));
  locale_t loc = utf8_locale();
  if (loc == static_cast<locale_t>(0)) return cp;
  return static_cast<char32_t>(towlower_l(static_cast<wint_t>(cp), loc));
}

}  // namespace

json to_json(const FeatureConfig& c) {
  return {{"lowercase", c.lowercase},         {"min_token_length", c.min_token_length},
          {"ngram_max", c.ngram_max},         {"min_df", c.min_df},
          {"max_features", c.max_features},   {"sublinear_tf", c.sublinear_tf},
          {"stop_words", c.stop_words}};
}

FeatureConfig feature_config_from_json(const json& j) {
  FeatureConfig c;
  c.lowercase = j.value("lowercase", c.lowercase);
  c.min_token_length = j.value("min_token_length", c.min_token_length);
  c.ngram_max = j.value("ngram_max", c.ngram_max);
  c.min_df = j.value("min_df", c.min_df);
  c.max_features = j.value("max_features", c.max_features);
  c.sublinear_tf = j.value("sublinear_tf", c.sublinear_tf);
  c.stop_words = j.value("stop_words", c.stop_words);
  if (c.ngram_max < 1) throw ValidationError("ngram_max must be >= 1");
  return c;
}

std::vector<std::string> tokenize(std::string_view text, const FeatureConfig& config) {
  std::vector<std::string> unigrams;
  std::string current;
  std::size_t current_len = 0;
  const std::unordered_set<std::string> stop(config.stop_words.begin(), config.stop_words.end());
  auto flush = [&] {
    if (current_len >= config.min_token_length && current_len > 0 && !stop.contains(current)) {
      unigrams.push_back(current);
    }
    current.clear();
    current_len = 0;
  };
  std::size_t i = 0;
  while (i < text.size()) {
    char32_t cp = next_code_point(text, i);
    if (is_alnum(cp)) {
      append_utf8(current, config.lowercase ? to_lower(cp) : cp);
      ++current_len;
    } else {
      flush();
    }
  }
  flush();

  std::vector<std::string> tokens = unigrams;
  for (std::size_t n = 2; n <= config.ngram_max; ++n) {
    for (std::size_t start = 0; start + n <= unigrams.size(); ++start) {
      std::string gram = unigrams[start];
      for (std::size_t k = 1; k < n; ++k) {
        gram.push_back(' ');
        gram += unigrams[start + k];
      }
      tokens.push_back(std::move(gram));
    }
  }
  return tokens;
}

double FeatureVector::dot(std::span<const double> dense) const {
  double s = 0.0;
  for (const auto& e : entries) s += e.weight * dense[e.index];
  return s;
}

double FeatureVector::norm() const {
  double s = 0.0;
  for (const auto& e : entries) s += e.weight * e.weight;
  return std::sqrt(s);
}

double FeatureVector::value_at(std::uint32_t index) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), index,
                             [](const SparseEntry& e, std::uint32_t i) { return e.index < i; });
  return (it != entries.end() && it->index == index) ? it->weight : 0.0;
}

FeatureVector make_feature_vector(std::vector<SparseEntry> entries, std::size_t dimension) {
  std::stable_sort(entries.begin(), entries.end(),
                   [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
  FeatureVector v;
  v.dimension = dimension;
  for (const auto& e : entries) {
    if (e.index >= dimension) throw std::out_of_range("feature index out of range");
    if (!v.entries.empty() && v.entries.back().index == e.index) {
      v.entries.back().weight += e.weight;
    } else {
      v.entries.push_back(e);
    }
  }
  std::erase_if(v.entries, [](const SparseEntry& e) { return e.weight == 0.0; });
  return v;
}

Vocabulary Vocabulary::fit(std::span<const std::string> texts, const FeatureConfig& config) {
  if (texts.empty()) throw ValidationError("fit_vocabulary: no texts");
  std::map<std::string, std::size_t> df;
  for (const auto& text : texts) {
    auto tokens = tokenize(text, config);
    std::set<std::string> unique(tokens.begin(), tokens.end());
    for (const auto& t : unique) ++df[t];
  }
  if (df.empty()) throw ValidationError("fit_vocabulary: corpus is empty after tokenization");

  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [term, count] : df) {
    if (count >= config.min_df) kept.emplace_back(term, count);
  }
  if (config.max_features > 0 && kept.size() > config.max_features) {
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    kept.resize(config.max_features);
    std::sort(kept.begin(), kept.end());
  }

  Vocabulary v;
  v.config_ = config;
  v.n_documents_ = texts.size();
  for (auto& [term, count] : kept) {
    v.terms_.push_back(term);
    v.df_.push_back(count);
  }
  v.rebuild_lookup();
  return v;
}

void Vocabulary::rebuild_lookup() {
  lookup_.clear();
  idf_.clear();
  for (std::size_t i = 0; i < terms_.size(); ++i) {
    lookup_.emplace(terms_[i], static_cast<std::uint32_t>(i));
    idf_.push_back(std::log((1.0 + static_cast<double>(n_documents_)) / (1.0 + static_cast<double>(df_[i]))) +
                   1.0);
  }
}

long long Vocabulary::index_of(const std::string& term) const {
  auto it = lookup_.find(term);
  return it == lookup_.end() ? -1 : static_cast<long long>(it->second);
}

std::size_t Vocabulary::df_of(const std::string& term) const {
  auto idx = index_of(term);
  return idx < 0 ? 0 : df_[static_cast<std::size_t>(idx)];
}

FeatureVector Vocabulary::transform(std::string_view text) const {
  std::map<std::uint32_t, double> tf;
  for (const auto& token : tokenize(text, config_)) {
    auto it = lookup_.find(token);
    if (it != lookup_.end()) tf[it->second] += 1.0;
  }
  FeatureVector v;
  v.dimension = terms_.size();
  double norm2 = 0.0;
  for (auto [index, count] : tf) {
    const double t = config_.sublinear_tf ? 1.0 + std::log(count) : count;
    const double w = t * idf_[index];
    v.entries.push_back({index, w});
    norm2 += w * w;
  }
  if (norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& e : v.entries) e.weight *= inv;
  }
  return v;
}

std::vector<FeatureVector> Vocabulary::transform_all(std::span<const std::string> texts) const {
  std::vector<FeatureVector> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(transform(t));
  return out;
}

json Vocabulary::to_json() const {
  json terms = json::array();
  for (std::size_t i = 0; i < terms_.size(); ++i) terms.push_back(json::array({terms_[i], df_[i]}));
  return {{"version", kFormatVersion},
          {"n_documents", n_documents_},
          {"config", ctxsens::to_json(config_)},
          {"terms", std::move(terms)}};
}

Vocabulary Vocabulary::from_json(const json& j) {
  const int version = j.at("version").get<int>();
  if (version > kFormatVersion) {
    throw ValidationError("vocabulary format version " + std::to_string(version) + " is newer than supported " +
                          std::to_string(kFormatVersion));
  }
  Vocabulary v;
  v.n_documents_ = j.at("n_documents").get<std::size_t>();
  v.config_ = feature_config_from_json(j.at("config"));
  for (const auto& entry : j.at("terms")) {
    v.terms_.push_back(entry.at(0).get<std::string>());
    v.df_.push_back(entry.at(1).get<std::size_t>());
  }
  v.rebuild_lookup();
  return v;
}

}  // namespace ctxsens
