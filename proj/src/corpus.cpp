#include "ctxsens/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "ctxsens/csv.hpp"

namespace ctxsens {

using nlohmann::json;

std::string_view to_string(Label label) {
  switch (label) {
    case Label::NonToxic: return "non_toxic";
    case Label::Unsure: return "unsure";
    case Label::Toxic: return "toxic";
    case Label::VeryToxic: return "very_toxic";
  }
  return "non_toxic";
}

std::string_view to_string(Condition condition) {
  return condition == Condition::InContext ? "ic" : "oc";
}

std::optional<Label> parse_label(std::string_view text) {
  if (text == "non_toxic") return Label::NonToxic;
  if (text == "unsure") return Label::Unsure;
  if (text == "toxic") return Label::Toxic;
  if (text == "very_toxic") return Label::VeryToxic;
  return std::nullopt;
}

std::optional<Condition> parse_condition(std::string_view text) {
  if (text == "ic") return Condition::InContext;
  if (text == "oc") return Condition::OutOfContext;
  return std::nullopt;
}

Format parse_format(std::string_view text) {
  if (text == "jsonl") return Format::Jsonl;
  if (text == "csv") return Format::Csv;
  throw ValidationError("unknown format '" + std::string(text) + "' (expected jsonl or csv)");
}

DatasetBundle::DatasetBundle(std::vector<Post> posts, std::vector<AnnotationRecord> ic,
                             std::vector<AnnotationRecord> oc)
    : posts_(std::move(posts)), ic_(std::move(ic)), oc_(std::move(oc)) {
  index();
}

void DatasetBundle::index() {
  post_index_.clear();
  ic_index_.clear();
  oc_index_.clear();
  for (std::size_t i = 0; i < posts_.size(); ++i) post_index_.emplace(posts_[i].post_id, i);
  for (std::size_t i = 0; i < ic_.size(); ++i) ic_index_.emplace(ic_[i].post_id, i);
  for (std::size_t i = 0; i < oc_.size(); ++i) oc_index_.emplace(oc_[i].post_id, i);
}

const Post* DatasetBundle::find_post(std::string_view post_id) const {
  auto it = post_index_.find(std::string(post_id));
  return it == post_index_.end() ? nullptr : &posts_[it->second];
}

const AnnotationRecord* DatasetBundle::find_ic(std::string_view post_id) const {
  auto it = ic_index_.find(std::string(post_id));
  return it == ic_index_.end() ? nullptr : &ic_[it->second];
}

const AnnotationRecord* DatasetBundle::find_oc(std::string_view post_id) const {
  auto it = oc_index_.find(std::string(post_id));
  return it == oc_index_.end() ? nullptr : &oc_[it->second];
}

namespace {

std::string located(const std::string& where, std::size_t line, const std::string& msg) {
  std::string out = where;
  if (line > 0) out += ":" + std::to_string(line);
  return out + ": " + msg;
}

bool blank_after_trim(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

// Accumulates records with their source locations so every violation can be
// reported against the line that caused it.
class BundleBuilder {
 public:
  void add_post(Post post, const std::string& where, std::size_t line) {
    if (post.post_id.empty()) {
      throw CorpusError(CorpusError::Kind::InvalidPost, located(where, line, "empty post_id"), {}, line);
    }
    if (blank_after_trim(post.target_text)) {
      throw CorpusError(CorpusError::Kind::InvalidPost,
                        located(where, line, "empty target_text for post " + post.post_id),
                        post.post_id, line);
    }
    if (!post_ids_.insert(post.post_id).second) {
      throw CorpusError(CorpusError::Kind::DuplicatePost,
                        located(where, line, "duplicate post " + post.post_id), post.post_id, line);
    }
    posts_.push_back(std::move(post));
  }

  void add_annotation(AnnotationRecord record, const std::string& where, std::size_t line) {
    if (record.judgments.empty()) {
      throw CorpusError(CorpusError::Kind::EmptyJudgments,
                        located(where, line, "empty judgment list for post " + record.post_id),
                        record.post_id, line);
    }
    auto& seen = record.condition == Condition::InContext ? ic_ids_ : oc_ids_;
    if (!seen.insert(record.post_id).second) {
      throw CorpusError(CorpusError::Kind::DuplicateRecord,
                        located(where, line,
                                "duplicate (" + record.post_id + ", " +
                                    std::string(to_string(record.condition)) + ") record"),
                        record.post_id, line);
    }
    refs_.push_back({record.post_id, where, line});
    (record.condition == Condition::InContext ? ic_ : oc_).push_back(std::move(record));
  }

  DatasetBundle finish() {
    for (const auto& ref : refs_) {
      if (!post_ids_.contains(ref.post_id)) {
        throw CorpusError(CorpusError::Kind::DanglingReference,
                          located(ref.where, ref.line, "annotation references unknown post " + ref.post_id),
                          ref.post_id, ref.line);
      }
    }
    return DatasetBundle(std::move(posts_), std::move(ic_), std::move(oc_));
  }

 private:
  struct Ref {
    std::string post_id;
    std::string where;
    std::size_t line;
  };
  std::vector<Post> posts_;
  std::vector<AnnotationRecord> ic_, oc_;
  std::unordered_set<std::string> post_ids_, ic_ids_, oc_ids_;
  std::vector<Ref> refs_;
};

[[noreturn]] void parse_fail(const std::string& where, std::size_t line, const std::string& msg) {
  throw CorpusError(CorpusError::Kind::Parse, located(where, line, msg), {}, line);
}

const json& require(const json& obj, const char* key, const std::string& where, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) parse_fail(where, line, std::string("missing field '") + key + "'");
  return *it;
}

std::string require_string(const json& obj, const char* key, const std::string& where,
                           std::size_t line) {
  const json& v = require(obj, key, where, line);
  if (!v.is_string()) parse_fail(where, line, std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

Post post_from_json(const json& obj, const std::string& where, std::size_t line) {
  Post post;
  post.post_id = require_string(obj, "post_id", where, line);
  post.target_text = require_string(obj, "target_text", where, line);
  auto parent = obj.find("parent_text");
  if (parent == obj.end() || parent->is_null()) return post;
  if (parent->is_string()) {
    post.parent_text = parent->get<std::string>();
  } else {
    parse_fail(where, line, "field 'parent_text' must be a string or null");
  }
  return post;
}

AnnotationRecord annotation_from_json(const json& obj, const std::string& where, std::size_t line) {
  AnnotationRecord record;
  record.post_id = require_string(obj, "post_id", where, line);
  auto condition = parse_condition(require_string(obj, "condition", where, line));
  if (!condition) parse_fail(where, line, "condition must be \"ic\" or \"oc\"");
  record.condition = *condition;
  const json& judgments = require(obj, "judgments", where, line);
  if (!judgments.is_array()) parse_fail(where, line, "field 'judgments' must be an array");
  for (const json& j : judgments) {
    if (!j.is_object()) parse_fail(where, line, "judgment must be an object");
    RaterJudgment judgment;
    auto label = parse_label(require_string(j, "label", where, line));
    if (!label) parse_fail(where, line, "unknown label " + j.at("label").dump());
    judgment.label = *label;
    auto helpful = j.find("parent_helpful");
    if (helpful != j.end() && !helpful->is_null()) {
      if (!helpful->is_boolean()) parse_fail(where, line, "parent_helpful must be true, false or null");
      judgment.parent_helpful = helpful->get<bool>();
    }
    record.judgments.push_back(judgment);
  }
  return record;
}

enum class Expect { Posts, Annotations, Any };

void read_jsonl(const std::filesystem::path& path, Expect expect,
                std::optional<Condition> required_condition, BundleBuilder& builder) {
  const std::string text = read_file(path);
  const std::string where = path.string();
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank_after_trim(line)) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      parse_fail(where, line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) parse_fail(where, line_no, "line must be a JSON object");
    const bool is_annotation = obj.contains("condition");
    if (is_annotation && expect == Expect::Posts) {
      parse_fail(where, line_no, "annotation line in posts file");
    }
    if (!is_annotation && expect == Expect::Annotations) {
      parse_fail(where, line_no, "post line in annotation file");
    }
    if (is_annotation) {
      AnnotationRecord record = annotation_from_json(obj, where, line_no);
      if (required_condition && record.condition != *required_condition) {
        parse_fail(where, line_no,
                   "expected condition \"" + std::string(to_string(*required_condition)) + "\"");
      }
      builder.add_annotation(std::move(record), where, line_no);
    } else {
      builder.add_post(post_from_json(obj, where, line_no), where, line_no);
    }
  }
}

std::vector<csv::Row> read_csv_rows(const std::filesystem::path& path,
                                    const std::vector<std::string>& header) {
  std::vector<csv::Row> rows;
  try {
    rows = csv::parse(read_file(path));
  } catch (const CorpusError&) {
    throw;
  } catch (const ValidationError& e) {
    throw CorpusError(CorpusError::Kind::Parse, path.string() + ": " + e.what());
  }
  if (rows.empty()) parse_fail(path.string(), 1, "missing header row");
  const auto& head = rows.front();
  bool ok = head.fields.size() == header.size();
  for (std::size_t i = 0; ok && i < header.size(); ++i) ok = head.fields[i].value == header[i];
  if (!ok) {
    std::string expected;
    for (const auto& h : header) expected += (expected.empty() ? "" : ",") + h;
    parse_fail(path.string(), head.line, "header must be " + expected);
  }
  rows.erase(rows.begin());
  // Blank lines carry no record.
  std::erase_if(rows, [](const csv::Row& r) {
    return r.fields.size() == 1 && !r.fields[0].quoted && r.fields[0].value.empty();
  });
  for (const auto& r : rows) {
    if (r.fields.size() != header.size()) {
      parse_fail(path.string(), r.line,
                 "expected " + std::to_string(header.size()) + " columns, got " +
                     std::to_string(r.fields.size()));
    }
  }
  return rows;
}

const std::vector<std::string> kPostHeader = {"post_id", "target_text", "parent_text"};
const std::vector<std::string> kAnnotationHeader = {"post_id", "condition", "labels", "parent_helpful"};

std::vector<std::string> split_bars(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find('|', start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

void read_posts_csv(const std::filesystem::path& path, BundleBuilder& builder) {
  for (auto& row : read_csv_rows(path, kPostHeader)) {
    Post post;
    post.post_id = row.fields[0].value;
    post.target_text = row.fields[1].value;
    if (row.fields[2].quoted || !row.fields[2].value.empty()) post.parent_text = row.fields[2].value;
    builder.add_post(std::move(post), path.string(), row.line);
  }
}

void read_annotations_csv(const std::filesystem::path& path, Condition required,
                          BundleBuilder& builder) {
  const std::string where = path.string();
  for (auto& row : read_csv_rows(path, kAnnotationHeader)) {
    AnnotationRecord record;
    record.post_id = row.fields[0].value;
    auto condition = parse_condition(row.fields[1].value);
    if (!condition) parse_fail(where, row.line, "condition must be ic or oc");
    if (*condition != required) {
      parse_fail(where, row.line, "expected condition " + std::string(to_string(required)));
    }
    record.condition = *condition;
    if (!row.fields[2].value.empty()) {
      for (const auto& token : split_bars(row.fields[2].value)) {
        auto label = parse_label(token);
        if (!label) parse_fail(where, row.line, "unknown label '" + token + "'");
        record.judgments.push_back({*label, std::nullopt});
      }
    }
    if (!row.fields[3].value.empty()) {
      auto votes = split_bars(row.fields[3].value);
      if (votes.size() != record.judgments.size()) {
        parse_fail(where, row.line, "parent_helpful list length differs from labels");
      }
      for (std::size_t i = 0; i < votes.size(); ++i) {
        if (votes[i] == "true") {
          record.judgments[i].parent_helpful = true;
        } else if (votes[i] == "false") {
          record.judgments[i].parent_helpful = false;
        } else if (!votes[i].empty()) {
          parse_fail(where, row.line, "parent_helpful entries must be true, false or empty");
        }
      }
    }
    builder.add_annotation(std::move(record), where, row.line);
  }
}

json post_to_json(const Post& post) {
  json obj = json::object();
  obj["post_id"] = post.post_id;
  obj["target_text"] = post.target_text;
  obj["parent_text"] = post.parent_text ? json(*post.parent_text) : json(nullptr);
  return obj;
}

json annotation_to_json(const AnnotationRecord& record) {
  json judgments = json::array();
  for (const auto& j : record.judgments) {
    judgments.push_back({{"label", to_string(j.label)},
                         {"parent_helpful", j.parent_helpful ? json(*j.parent_helpful) : json(nullptr)}});
  }
  json obj = json::object();
  obj["post_id"] = record.post_id;
  obj["condition"] = to_string(record.condition);
  obj["judgments"] = std::move(judgments);
  return obj;
}

}  // namespace

CorpusError::CorpusError(Kind kind, std::string message, std::string subject, std::size_t line)
    : ValidationError(std::move(message)), kind_(kind), subject_(std::move(subject)), line_(line) {}

void validate(const DatasetBundle& bundle) {
  BundleBuilder builder;
  for (const auto& p : bundle.posts()) builder.add_post(p, "bundle", 0);
  for (const auto& r : bundle.ic_annotations()) {
    if (r.condition != Condition::InContext) {
      throw CorpusError(CorpusError::Kind::Parse, "out-of-context record stored as in-context", r.post_id);
    }
    builder.add_annotation(r, "bundle", 0);
  }
  for (const auto& r : bundle.oc_annotations()) {
    if (r.condition != Condition::OutOfContext) {
      throw CorpusError(CorpusError::Kind::Parse, "in-context record stored as out-of-context", r.post_id);
    }
    builder.add_annotation(r, "bundle", 0);
  }
  builder.finish();
}

DatasetBundle load_bundle(const std::filesystem::path& path, Format format) {
  if (format != Format::Jsonl) {
    throw ValidationError("single-file bundles are JSONL only; pass separate CSV files");
  }
  BundleBuilder builder;
  read_jsonl(path, Expect::Any, std::nullopt, builder);
  return builder.finish();
}

DatasetBundle load_bundle(const BundlePaths& paths, Format format) {
  BundleBuilder builder;
  if (format == Format::Jsonl) {
    read_jsonl(paths.posts, Expect::Posts, std::nullopt, builder);
    read_jsonl(paths.ic, Expect::Annotations, Condition::InContext, builder);
    read_jsonl(paths.oc, Expect::Annotations, Condition::OutOfContext, builder);
  } else {
    read_posts_csv(paths.posts, builder);
    read_annotations_csv(paths.ic, Condition::InContext, builder);
    read_annotations_csv(paths.oc, Condition::OutOfContext, builder);
  }
  return builder.finish();
}

std::vector<Post> load_posts(const std::filesystem::path& path, Format format) {
  BundleBuilder builder;
  if (format == Format::Jsonl) {
    read_jsonl(path, Expect::Posts, std::nullopt, builder);
  } else {
    read_posts_csv(path, builder);
  }
  return builder.finish().posts();
}

std::string posts_to_jsonl(const std::vector<Post>& posts) {
  std::string out;
  for (const auto& p : posts) out += post_to_json(p).dump() + "\n";
  return out;
}

std::string annotations_to_jsonl(const std::vector<AnnotationRecord>& records) {
  std::string out;
  for (const auto& r : records) out += annotation_to_json(r).dump() + "\n";
  return out;
}

std::string posts_to_csv(const std::vector<Post>& posts) {
  std::string out = "post_id,target_text,parent_text\n";
  for (const auto& p : posts) {
    out += csv::escape_if_needed(p.post_id) + "," + csv::quote(p.target_text) + ",";
    if (p.parent_text) out += csv::quote(*p.parent_text);
    out += "\n";
  }
  return out;
}

std::string annotations_to_csv(const std::vector<AnnotationRecord>& records) {
  std::string out = "post_id,condition,labels,parent_helpful\n";
  for (const auto& r : records) {
    std::string labels, helpful;
    bool any_helpful = false;
    for (std::size_t i = 0; i < r.judgments.size(); ++i) {
      const auto& j = r.judgments[i];
      if (i > 0) {
        labels += '|';
        helpful += '|';
      }
      labels += to_string(j.label);
      if (j.parent_helpful) {
        any_helpful = true;
        helpful += *j.parent_helpful ? "true" : "false";
      }
    }
    out += csv::escape_if_needed(r.post_id) + "," + std::string(to_string(r.condition)) + "," +
           labels + "," + (any_helpful ? helpful : std::string()) + "\n";
  }
  return out;
}

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& path, Format format) {
  if (format != Format::Jsonl) {
    throw ValidationError("single-file bundles are JSONL only; pass separate CSV files");
  }
  write_file(path, posts_to_jsonl(bundle.posts()) + annotations_to_jsonl(bundle.ic_annotations()) +
                       annotations_to_jsonl(bundle.oc_annotations()));
}

void save_bundle(const DatasetBundle& bundle, const BundlePaths& paths, Format format) {
  if (format == Format::Jsonl) {
    write_file(paths.posts, posts_to_jsonl(bundle.posts()));
    write_file(paths.ic, annotations_to_jsonl(bundle.ic_annotations()));
    write_file(paths.oc, annotations_to_jsonl(bundle.oc_annotations()));
  } else {
    write_file(paths.posts, posts_to_csv(bundle.posts()));
    write_file(paths.ic, annotations_to_csv(bundle.ic_annotations()));
    write_file(paths.oc, annotations_to_csv(bundle.oc_annotations()));
  }
}

std::vector<RaterJudgment> parse_rater_codes(std::string_view cell) {
  std::vector<RaterJudgment> out;
  auto from_int = [](long long code) -> Label {
    switch (code) {
      case 0: return Label::NonToxic;
      case 1: return Label::Toxic;
      case 2: return Label::VeryToxic;
      case -1: return Label::Unsure;
      default: throw ValidationError("unknown rater code " + std::to_string(code));
    }
  };
  auto from_token = [&](std::string token) -> Label {
    if (auto label = parse_label(token)) return *label;
    try {
      std::size_t used = 0;
      long long v = std::stoll(token, &used);
      if (used == token.size()) return from_int(v);
    } catch (const std::logic_error&) {
    }
    throw ValidationError("unknown rater code '" + token + "'");
  };
  std::string trimmed(cell);
  while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.back()))) trimmed.pop_back();
  while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.front()))) trimmed.erase(0, 1);
  if (trimmed.empty()) return out;
  if (trimmed.front() == '[') {
    json arr = json::parse(trimmed, nullptr, false);
    if (!arr.is_array()) throw ValidationError("malformed code list " + trimmed);
    for (const auto& v : arr) {
      if (v.is_number_integer()) {
        out.push_back({from_int(v.get<long long>()), std::nullopt});
      } else if (v.is_string()) {
        out.push_back({from_token(v.get<std::string>()), std::nullopt});
      } else {
        throw ValidationError("malformed code list " + trimmed);
      }
    }
    return out;
  }
  for (const auto& token : split_bars(trimmed)) out.push_back({from_token(token), std::nullopt});
  return out;
}

CccImport load_ccc_csv(const std::filesystem::path& path, const CccColumns& columns) {
  auto rows = csv::parse(read_file(path));
  if (rows.empty()) parse_fail(path.string(), 1, "missing header row");
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < rows[0].fields.size(); ++i) col.emplace(rows[0].fields[i].value, i);
  auto need = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) parse_fail(path.string(), 1, "missing column '" + name + "'");
    return it->second;
  };
  const std::size_t id_col = need(columns.id);
  const std::size_t target_col = need(columns.target);
  const std::optional<std::size_t> parent_col =
      col.contains(columns.parent) ? std::optional(col.at(columns.parent)) : std::nullopt;

  CccImport result;
  result.has_rater_labels = col.contains(columns.ic_codes) && col.contains(columns.oc_codes);
  std::optional<std::size_t> ic_col, oc_col;
  if (result.has_rater_labels) {
    ic_col = col.at(columns.ic_codes);
    oc_col = col.at(columns.oc_codes);
  } else {
    ic_col = need(columns.ic_score);
    oc_col = need(columns.oc_score);
  }

  BundleBuilder builder;
  const std::string where = path.string();
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() == 1 && row.fields[0].value.empty()) continue;
    if (row.fields.size() != rows[0].fields.size()) {
      parse_fail(where, row.line, "column count differs from header");
    }
    Post post;
    post.post_id = row.fields[id_col].value;
    post.target_text = row.fields[target_col].value;
    if (parent_col && !row.fields[*parent_col].value.empty()) post.parent_text = row.fields[*parent_col].value;
    result.post_ids.push_back(post.post_id);
    if (result.has_rater_labels) {
      try {
        builder.add_annotation({post.post_id, Condition::InContext, parse_rater_codes(row.fields[*ic_col].value)},
                               where, row.line);
        builder.add_annotation({post.post_id, Condition::OutOfContext, parse_rater_codes(row.fields[*oc_col].value)},
                               where, row.line);
      } catch (const CorpusError&) {
        throw;
      } catch (const std::exception& e) {
        parse_fail(where, row.line, e.what());
      }
    } else {
      try {
        result.ic_scores.push_back(std::stod(row.fields[*ic_col].value));
        result.oc_scores.push_back(std::stod(row.fields[*oc_col].value));
      } catch (const std::logic_error&) {
        parse_fail(where, row.line, "non-numeric toxicity score");
      }
    }
    builder.add_post(std::move(post), where, row.line);
  }
  result.bundle = builder.finish();
  return result;
}

}  // namespace ctxsens
