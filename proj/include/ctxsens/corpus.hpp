#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctxsens/util.hpp"

namespace ctxsens {

enum class Label { NonToxic, Unsure, Toxic, VeryToxic };
enum class Condition { InContext, OutOfContext };
enum class Format { Jsonl, Csv };

std::string_view to_string(Label label);
std::string_view to_string(Condition condition);
std::optional<Label> parse_label(std::string_view text);
std::optional<Condition> parse_condition(std::string_view text);
Format parse_format(std::string_view text);

struct Post {
  std::string post_id;
  std::string target_text;
  std::optional<std::string> parent_text;  // absent for thread roots

  bool operator==(const Post&) const = default;
};

struct RaterJudgment {
  Label label = Label::NonToxic;
  // Only asked for in-context judgments.
  std::optional<bool> parent_helpful;

  bool operator==(const RaterJudgment&) const = default;
};

struct AnnotationRecord {
  std::string post_id;
  Condition condition = Condition::InContext;
  std::vector<RaterJudgment> judgments;

  bool operator==(const AnnotationRecord&) const = default;
};

// Posts plus both annotation conditions, in file order. Use validate() (or the
// loaders, which call it) before relying on the lookups.
class DatasetBundle {
 public:
  DatasetBundle() = default;
  DatasetBundle(std::vector<Post> posts, std::vector<AnnotationRecord> ic,
                std::vector<AnnotationRecord> oc);

  const std::vector<Post>& posts() const { return posts_; }
  const std::vector<AnnotationRecord>& ic_annotations() const { return ic_; }
  const std::vector<AnnotationRecord>& oc_annotations() const { return oc_; }

  const Post* find_post(std::string_view post_id) const;
  const AnnotationRecord* find_ic(std::string_view post_id) const;
  const AnnotationRecord* find_oc(std::string_view post_id) const;

  bool operator==(const DatasetBundle& other) const {
    return posts_ == other.posts_ && ic_ == other.ic_ && oc_ == other.oc_;
  }

 private:
  void index();

  std::vector<Post> posts_;
  std::vector<AnnotationRecord> ic_;
  std::vector<AnnotationRecord> oc_;
  std::unordered_map<std::string, std::size_t> post_index_;
  std::unordered_map<std::string, std::size_t> ic_index_;
  std::unordered_map<std::string, std::size_t> oc_index_;
};

class CorpusError : public ValidationError {
 public:
  enum class Kind { Parse, InvalidPost, DuplicatePost, DuplicateRecord, DanglingReference, EmptyJudgments };

  CorpusError(Kind kind, std::string message, std::string subject = {}, std::size_t line = 0);

  Kind kind() const { return kind_; }
  // Offending post_id, when there is one.
  const std::string& subject() const { return subject_; }
  std::size_t line() const { return line_; }

 private:
  Kind kind_;
  std::string subject_;
  std::size_t line_;
};

struct BundlePaths {
  std::filesystem::path posts;
  std::filesystem::path ic;
  std::filesystem::path oc;
};

// Throws CorpusError for the enumerated violations.
void validate(const DatasetBundle& bundle);

// Single JSONL file holding post lines and annotation lines in any order.
DatasetBundle load_bundle(const std::filesystem::path& path, Format format = Format::Jsonl);
DatasetBundle load_bundle(const BundlePaths& paths, Format format);

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& path,
                 Format format = Format::Jsonl);
void save_bundle(const DatasetBundle& bundle, const BundlePaths& paths, Format format);

// In-memory forms of the same schema, used by the file functions above.
std::string posts_to_jsonl(const std::vector<Post>& posts);
std::string annotations_to_jsonl(const std::vector<AnnotationRecord>& records);
std::string posts_to_csv(const std::vector<Post>& posts);
std::string annotations_to_csv(const std::vector<AnnotationRecord>& records);

// Pool files for sampling and augmentation: post lines only.
std::vector<Post> load_posts(const std::filesystem::path& path, Format format = Format::Jsonl);

// Adapter for the released dataset's flat CSV (one row per post, rater codes
// inline). Column names are configurable because the release layout was
// not available when this was written.
struct CccColumns {
  std::string id = "id";
  std::string target = "text";
  std::string parent = "parent";
  std::string ic_codes = "ic_codes";
  std::string oc_codes = "oc_codes";
  // Fallbacks used when per-rater code columns are missing.
  std::string ic_score = "toxicity_ic";
  std::string oc_score = "toxicity_oc";
};

struct CccImport {
  DatasetBundle bundle;     // filled only when per-rater codes are present
  bool has_rater_labels = false;
  std::vector<std::string> post_ids;
  std::vector<double> oc_scores;
  std::vector<double> ic_scores;
};

CccImport load_ccc_csv(const std::filesystem::path& path, const CccColumns& columns = {});

// A code column cell: JSON list (`[0, 1, "very_toxic"]`) or `|`-joined list.
// Integers 0/1/2/-1 map to non-toxic/toxic/very-toxic/unsure.
std::vector<RaterJudgment> parse_rater_codes(std::string_view cell);

}  // namespace ctxsens
