// ctxsens: command-line front end for the context-sensitivity toolkit.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxsens/aggregation.hpp"
#include "ctxsens/analysis.hpp"
#include "ctxsens/augmentation.hpp"
#include "ctxsens/corpus.hpp"
#include "ctxsens/csv.hpp"
#include "ctxsens/evaluation.hpp"
#include "ctxsens/features.hpp"
#include "ctxsens/models.hpp"
#include "ctxsens/scorer.hpp"
#include "ctxsens/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctxsens;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

// "0,0.1,0.5" or "start:stop:step" (inclusive).
std::vector<double> parse_thresholds(const std::string& spec) {
  std::vector<double> out;
  try {
    if (spec.find(':') != std::string::npos) {
      std::vector<double> parts;
      std::stringstream ss(spec);
      std::string item;
      while (std::getline(ss, item, ':')) parts.push_back(std::stod(item));
      if (parts.size() != 3 || !(parts[2] > 0) || parts[1] < parts[0]) throw std::invalid_argument("range");
      const auto steps = static_cast<long long>(std::floor((parts[1] - parts[0]) / parts[2] + 1e-9));
      for (long long i = 0; i <= steps; ++i) {
        out.push_back(std::round((parts[0] + static_cast<double>(i) * parts[2]) * 1e9) / 1e9);
      }
    } else {
      std::stringstream ss(spec);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
      }
    }
  } catch (const std::logic_error&) {
    throw ValidationError("bad threshold list '" + spec + "' (use a,b,c or start:stop:step)");
  }
  if (out.empty()) throw ValidationError("empty threshold list");
  return out;
}

// Every option of `app` with its resolved value: the given value, else the
// config file's, else the default.
json resolved_options(const CLI::App* app) {
  json j = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "h" || name.empty()) continue;
    const auto& res = opt->results();
    if (res.empty()) {
      j[name] = opt->get_default_str();
    } else if (res.size() == 1) {
      j[name] = res[0];
    } else {
      j[name] = res;
    }
  }
  return j;
}

class Manifest {
 public:
  Manifest(std::string subcommand, const CLI::App* app, const CLI::App* root)
      : subcommand_(std::move(subcommand)), started_(utc_now()) {
    config_ = resolved_options(app);
    globals_ = resolved_options(root);
  }
  void input(const std::string& role, const fs::path& path) {
    if (path.empty()) return;
    inputs_[role] = {{"path", path.string()}, {"fingerprint", file_fingerprint(path)}};
  }
  void seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }
  void extra(const std::string& key, json value) { extra_[key] = std::move(value); }
  void write(const fs::path& dir) const {
    json j = {{"subcommand", subcommand_},
              {"tool_version", kToolVersion},
              {"config", config_},
              {"global", globals_},
              {"seeds", seeds_},
              {"inputs", inputs_},
              {"threads", max_threads()},
              {"started_at", started_},
              {"finished_at", utc_now()}};
    for (auto& [k, v] : extra_.items()) j[k] = v;
    write_file(dir / "manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string subcommand_;
  std::string started_;
  json config_, globals_;
  json seeds_ = json::object();
  json inputs_ = json::object();
  json extra_ = json::object();
};

void prepare_out(const std::string& out) {
  if (out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw ValidationError("cannot create output directory " + out + ": " + ec.message());
}

struct Globals {
  unsigned threads = 0;
  std::string format = "json";
};

void print_report(const Globals& g, const json& j, const std::string& csv_text) {
  if (g.format == "csv") {
    std::cout << csv_text;
  } else {
    std::cout << j.dump(2) << "\n";
  }
}

// ---- bundle inputs --------------------------------------------------------

struct BundleOpts {
  std::string bundle, posts, ic, oc, ccc;
  std::string input_format = "jsonl";
};

void add_bundle_options(CLI::App* sub, BundleOpts& o) {
  sub->add_option("--bundle", o.bundle, "Combined JSONL with post and annotation lines")->check(CLI::ExistingFile);
  sub->add_option("--posts", o.posts, "Posts file")->check(CLI::ExistingFile);
  sub->add_option("--ic", o.ic, "In-context annotations")->check(CLI::ExistingFile);
  sub->add_option("--oc", o.oc, "Out-of-context annotations")->check(CLI::ExistingFile);
  sub->add_option("--ccc", o.ccc, "Released CCC flat CSV")->check(CLI::ExistingFile);
  sub->add_option("--input-format", o.input_format, "jsonl|csv")->check(CLI::IsMember({"jsonl", "csv"}));
}

struct LoadedBundle {
  DatasetBundle bundle;
  SensitivityTable table;
  bool has_rater_labels = true;
};

LoadedBundle load_inputs(const BundleOpts& o, Manifest& m) {
  LoadedBundle out;
  const int sources = !o.bundle.empty() + !o.posts.empty() + !o.ccc.empty();
  if (sources != 1) throw ValidationError("give exactly one of --bundle, --posts/--ic/--oc or --ccc");
  if (!o.ccc.empty()) {
    m.input("ccc", o.ccc);
    CccImport imp = load_ccc_csv(o.ccc);
    out.has_rater_labels = imp.has_rater_labels;
    out.table = compute_sensitivities(imp);
    out.bundle = std::move(imp.bundle);
    return out;
  }
  if (!o.bundle.empty()) {
    m.input("bundle", o.bundle);
    out.bundle = load_bundle(o.bundle, Format::Jsonl);
  } else {
    if (o.ic.empty() || o.oc.empty()) throw ValidationError("--posts needs --ic and --oc");
    m.input("posts", o.posts);
    m.input("ic", o.ic);
    m.input("oc", o.oc);
    out.bundle = load_bundle(BundlePaths{o.posts, o.ic, o.oc}, parse_format(o.input_format));
  }
  out.table = compute_sensitivities(out.bundle);
  return out;
}

// ---- training options -----------------------------------------------------

struct TrainOpts {
  std::string family = "ridge";
  std::uint64_t seed = 0;
  double lambda = 1.0;
  double svr_epsilon = 0.05;
  double learning_rate = 0.01;
  double svr_c = 1.0;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  bool no_early_stopping = false;
  std::size_t n_trees = 100;
  std::size_t max_depth = 12;
  std::size_t min_samples_leaf = 5;
  std::size_t tree_features = 0;
  bool no_bootstrap = false;
  std::string random_mode = "empirical";
  std::size_t min_df = 2;
  std::size_t vocab_size = 50000;
  std::size_t ngram_max = 2;
  std::size_t min_token_length = 2;
  bool sublinear_tf = false;
  bool keep_case = false;
  std::string scorer_cmd, scorer_tcp;
  long long timeout_ms = 30000;
  long long fit_timeout_ms = 600000;
  std::size_t max_in_flight = 64;
  int retries = 1;
};

void add_scorer_options(CLI::App* sub, TrainOpts& o) {
  sub->add_option("--scorer-cmd", o.scorer_cmd, "External scorer command line (NDJSON on stdio)");
  sub->add_option("--scorer-tcp", o.scorer_tcp, "External scorer at host:port");
  sub->add_option("--timeout-ms", o.timeout_ms, "Per-request timeout")->check(CLI::PositiveNumber);
  sub->add_option("--fit-timeout-ms", o.fit_timeout_ms, "Fit handshake timeout")->check(CLI::PositiveNumber);
  sub->add_option("--max-in-flight", o.max_in_flight, "Concurrent scorer requests")->check(CLI::PositiveNumber);
  sub->add_option("--retries", o.retries, "Extra attempts for failed requests")->check(CLI::NonNegativeNumber);
}

void add_train_options(CLI::App* sub, TrainOpts& o) {
  sub->add_option("--family", o.family, "constant_mean|uniform_random|ridge|linear_svr|random_forest|external");
  sub->add_option("--seed", o.seed, "Master seed");
  sub->add_option("--lambda", o.lambda, "Ridge L2 penalty")->check(CLI::NonNegativeNumber);
  sub->add_option("--svr-epsilon", o.svr_epsilon, "SVR epsilon")->check(CLI::NonNegativeNumber);
  sub->add_option("--learning-rate", o.learning_rate, "SVR initial learning rate")->check(CLI::PositiveNumber);
  sub->add_option("--svr-c", o.svr_c, "SVR C")->check(CLI::PositiveNumber);
  sub->add_option("--max-epochs", o.max_epochs, "SVR epochs")->check(CLI::PositiveNumber);
  sub->add_option("--patience", o.patience, "Early-stopping patience")->check(CLI::PositiveNumber);
  sub->add_flag("--no-early-stopping", o.no_early_stopping, "Disable early stopping");
  sub->add_option("--n-trees", o.n_trees, "Forest size")->check(CLI::PositiveNumber);
  sub->add_option("--max-depth", o.max_depth, "Tree depth, 0 = unlimited");
  sub->add_option("--min-samples-leaf", o.min_samples_leaf, "Tree leaf size")->check(CLI::PositiveNumber);
  sub->add_option("--tree-features", o.tree_features, "Features tried per split, 0 = sqrt(d)");
  sub->add_flag("--no-bootstrap", o.no_bootstrap, "Grow trees on the full sample");
  sub->add_option("--random-mode", o.random_mode, "empirical|interval")
      ->check(CLI::IsMember({"empirical", "interval"}));
  sub->add_option("--min-df", o.min_df, "Vocabulary min document frequency")->check(CLI::PositiveNumber);
  sub->add_option("--vocab-size", o.vocab_size, "Vocabulary cap, 0 = unlimited");
  sub->add_option("--ngram-max", o.ngram_max, "Longest n-gram")->check(CLI::PositiveNumber);
  sub->add_option("--min-token-length", o.min_token_length, "Shortest token in code points");
  sub->add_flag("--sublinear-tf", o.sublinear_tf, "Use 1 + ln(tf)");
  sub->add_flag("--keep-case", o.keep_case, "Do not lowercase");
  add_scorer_options(sub, o);
}

std::optional<Endpoint> endpoint_from(const TrainOpts& o) {
  if (!o.scorer_cmd.empty() && !o.scorer_tcp.empty()) throw ValidationError("give only one of --scorer-cmd/--scorer-tcp");
  if (!o.scorer_cmd.empty()) return parse_endpoint(o.scorer_cmd, false);
  if (!o.scorer_tcp.empty()) return parse_endpoint(o.scorer_tcp, true);
  return std::nullopt;
}

ExternalScorerOptions scorer_options(const TrainOpts& o) {
  ExternalScorerOptions s;
  s.timeout = std::chrono::milliseconds(o.timeout_ms);
  s.fit_timeout = std::chrono::milliseconds(o.fit_timeout_ms);
  s.max_in_flight = o.max_in_flight;
  s.retries = o.retries;
  return s;
}

TrainConfig make_train_config(const TrainOpts& o) {
  TrainConfig c;
  c.seed = o.seed;
  c.ridge.lambda = o.lambda;
  c.svr.epsilon = o.svr_epsilon;
  c.svr.learning_rate = o.learning_rate;
  c.svr.c = o.svr_c;
  c.svr.max_epochs = o.max_epochs;
  c.early_stopping.enabled = !o.no_early_stopping;
  c.early_stopping.patience = o.patience;
  c.forest.n_trees = o.n_trees;
  c.forest.max_depth = o.max_depth;
  c.forest.min_samples_leaf = o.min_samples_leaf;
  c.forest.max_features = o.tree_features;
  c.forest.bootstrap = !o.no_bootstrap;
  c.random_mode = o.random_mode == "interval" ? RandomMode::Interval : RandomMode::Empirical;
  c.features.min_df = o.min_df;
  c.features.max_features = o.vocab_size;
  c.features.ngram_max = o.ngram_max;
  c.features.min_token_length = o.min_token_length;
  c.features.sublinear_tf = o.sublinear_tf;
  c.features.lowercase = !o.keep_case;
  c.external_endpoint = endpoint_from(o);
  c.external_options = scorer_options(o);
  if (parse_family(o.family) == Family::External && !c.external_endpoint) {
    throw ValidationError("--family external needs --scorer-cmd or --scorer-tcp");
  }
  return c;
}

struct SplitOpts {
  double train = 0.8, validation = 0.1, test = 0.1;
  std::size_t repeats = 3;
  std::optional<std::uint64_t> split_seed;
};

void add_split_options(CLI::App* sub, SplitOpts& o) {
  sub->add_option("--train-frac", o.train, "Train fraction");
  sub->add_option("--val-frac", o.validation, "Validation fraction");
  sub->add_option("--test-frac", o.test, "Test fraction");
  sub->add_option("--repeats", o.repeats, "Monte Carlo repeats")->check(CLI::PositiveNumber);
  sub->add_option("--split-seed", o.split_seed, "Split seed (defaults to --seed)");
}

SplitSpec make_split_spec(const SplitOpts& o, std::uint64_t seed) {
  SplitSpec s;
  s.train = o.train;
  s.validation = o.validation;
  s.test = o.test;
  s.n_repeats = o.repeats;
  s.seed = o.split_seed.value_or(seed);
  validate(s);
  return s;
}

// ---- subcommands ----------------------------------------------------------

struct AggregateOpts {
  BundleOpts in;
  std::string out;
};

int run_aggregate(const AggregateOpts& o, const CLI::App* sub, const CLI::App* root) {
  Manifest m("aggregate", sub, root);
  prepare_out(o.out);
  LoadedBundle b = load_inputs(o.in, m);
  std::string lines;
  if (b.bundle.posts().empty()) {
    throw ValidationError("input has no posts");
  }
  lines = sensitivity_to_jsonl(b.bundle, b.table);
  write_file(fs::path(o.out) / "sensitivity.jsonl", lines);
  m.extra("summary", {{"n_records", b.table.records.size()},
                      {"excluded_unsure", b.table.excluded_unsure.size()},
                      {"missing_condition", b.table.missing_condition},
                      {"has_rater_labels", b.has_rater_labels}});
  m.write(o.out);
  std::cerr << "aggregate: " << b.table.records.size() << " posts, " << b.table.excluded_unsure.size()
            << " excluded as unsure, " << b.table.missing_condition.size() << " missing a condition\n";
  return 0;
}

struct StatsOpts {
  BundleOpts in;
  std::string out;
  std::size_t bins = 20;
  std::size_t toxicity_bins = 10;
  std::string thresholds = "0:1:0.1";
  std::string utility_thresholds = "0:0.7:0.1";
};

json agreement_json(const AgreementReport& r) {
  return {{"free_marginal_kappa", r.free_marginal_kappa},
          {"mean_pairwise_agreement", r.mean_pairwise_agreement},
          {"n_items", r.n_items},
          {"n_categories", r.n_categories}};
}

std::size_t count_words(const std::string& s) {
  std::size_t n = 0;
  bool in_word = false;
  for (unsigned char c : s) {
    const bool space = std::isspace(c) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

std::size_t count_code_points(const std::string& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

int run_stats(const StatsOpts& o, const CLI::App* sub, const CLI::App* root, const Globals& g) {
  Manifest m("stats", sub, root);
  prepare_out(o.out);
  LoadedBundle b = load_inputs(o.in, m);
  const auto& recs = b.table.records;
  const fs::path out(o.out);
  const auto thresholds = parse_thresholds(o.thresholds);
  const auto utility_thresholds = parse_thresholds(o.utility_thresholds);

  json stats;
  stats["n_posts"] = b.bundle.posts().empty() ? recs.size() : b.bundle.posts().size();
  stats["n_records"] = recs.size();
  stats["excluded_unsure"] = b.table.excluded_unsure.size();
  stats["excluded_unsure_ids"] = b.table.excluded_unsure;
  stats["missing_condition"] = b.table.missing_condition.size();
  const DeltaSummary d = summarize_deltas(recs);
  stats["delta"] = {{"unchanged", d.unchanged},
                    {"context_lowered_toxicity", d.positive},
                    {"context_raised_toxicity", d.negative},
                    {"fraction_unchanged", d.fraction_unchanged()},
                    {"fraction_positive", d.fraction_positive()},
                    {"fraction_negative", d.fraction_negative()}};
  if (!recs.empty()) {
    stats["binarized_unchanged"] = {
        {"strict_majority", binarized_unchanged_fraction(recs, BinarizeRule::StrictMajority)},
        {"at_least_half", binarized_unchanged_fraction(recs, BinarizeRule::AtLeastHalf)}};
    stats["class_ratio"] = class_ratio(recs);
  }
  stats["has_rater_labels"] = b.has_rater_labels;
  if (b.has_rater_labels && !b.bundle.ic_annotations().empty()) {
    json agree;
    std::vector<AnnotationRecord> all = b.bundle.ic_annotations();
    all.insert(all.end(), b.bundle.oc_annotations().begin(), b.bundle.oc_annotations().end());
    std::vector<AnnotationRecord> multi;
    for (const auto& r : all) {
      if (r.judgments.size() >= 2) multi.push_back(r);
    }
    auto split_by = [&](Condition c) {
      std::vector<AnnotationRecord> v;
      for (const auto& r : multi) {
        if (r.condition == c) v.push_back(r);
      }
      return v;
    };
    const auto ic = split_by(Condition::InContext);
    const auto oc = split_by(Condition::OutOfContext);
    for (auto [name, scheme] : {std::pair{"four_label", CategoryScheme::FourLabel},
                                std::pair{"binary", CategoryScheme::Binary}}) {
      json s;
      if (!ic.empty()) s["ic"] = agreement_json(agreement(ic, scheme));
      if (!oc.empty()) s["oc"] = agreement_json(agreement(oc, scheme));
      if (!multi.empty()) s["all"] = agreement_json(agreement(multi, scheme));
      agree[name] = s;
    }
    agree["records_with_fewer_than_2_raters"] = all.size() - multi.size();
    stats["agreement"] = agree;
  }

  // Length distribution (characters and words) of targets and parents.
  {
    std::ostringstream lengths;
    lengths << "post_id,target_chars,parent_chars,target_words,parent_words\n";
    double tc = 0, pc = 0, tw = 0, pw = 0;
    std::size_t n_parent = 0;
    for (const auto& p : b.bundle.posts()) {
      lengths << csv::escape_if_needed(p.post_id) << ',' << count_code_points(p.target_text) << ',';
      tc += static_cast<double>(count_code_points(p.target_text));
      tw += static_cast<double>(count_words(p.target_text));
      if (p.parent_text) {
        lengths << count_code_points(*p.parent_text);
        pc += static_cast<double>(count_code_points(*p.parent_text));
        pw += static_cast<double>(count_words(*p.parent_text));
        ++n_parent;
      }
      lengths << ',' << count_words(p.target_text) << ',';
      if (p.parent_text) lengths << count_words(*p.parent_text);
      lengths << '\n';
    }
    write_file(out / "lengths.csv", lengths.str());
    const double np = static_cast<double>(b.bundle.posts().size());
    if (np > 0) {
      stats["lengths"] = {{"mean_target_chars", tc / np},
                          {"mean_target_words", tw / np},
                          {"mean_parent_chars", n_parent ? json(pc / static_cast<double>(n_parent)) : json(nullptr)},
                          {"mean_parent_words", n_parent ? json(pw / static_cast<double>(n_parent)) : json(nullptr)}};
    }
  }

  // Distribution of IC and OC toxicity scores.
  {
    std::vector<double> ic, oc;
    for (const auto& r : recs) {
      ic.push_back(r.s_ic.value);
      oc.push_back(r.s_oc.value);
    }
    const auto hi = histogram(ic, o.toxicity_bins, 0.0, 1.0);
    const auto ho = histogram(oc, o.toxicity_bins, 0.0, 1.0);
    std::ostringstream t;
    t << "bin_center,ic_count,oc_count\n";
    const auto centers = hi.centers();
    for (std::size_t i = 0; i < centers.size(); ++i) t << fmt(centers[i]) << ',' << hi.counts[i] << ',' << ho.counts[i] << '\n';
    write_file(out / "toxicity_histogram.csv", t.str());
  }

  // Delta histogram.
  const auto h = sensitivity_histogram(recs, o.bins);
  {
    std::ostringstream t;
    t << "bin_center,count\n";
    const auto centers = h.centers();
    json hj = json::array();
    for (std::size_t i = 0; i < centers.size(); ++i) {
      t << fmt(centers[i]) << ',' << h.counts[i] << '\n';
      hj.push_back({{"bin_center", centers[i]}, {"lo", h.edges[i]}, {"hi", h.edges[i + 1]}, {"count", h.counts[i]}});
    }
    write_file(out / "delta_histogram.csv", t.str());
    stats["delta_histogram"] = hj;
  }

  {
    std::ostringstream t;
    t << "threshold,count\n";
    for (double th : thresholds) t << fmt(th) << ',' << count_sensitive(recs, th) << '\n';
    write_file(out / "sensitive_counts.csv", t.str());
  }

  {
    const auto rows = parent_utility(b.bundle.ic_annotations(), recs, utility_thresholds);
    std::ostringstream t;
    t << "threshold,fraction_helpful,n_helpful,n,n_no_votes\n";
    for (const auto& r : rows) {
      t << fmt(r.threshold) << ',' << fmt_opt(r.fraction_helpful) << ',' << r.n_helpful << ',' << r.n << ','
        << r.n_no_votes << '\n';
    }
    write_file(out / "parent_utility.csv", t.str());
  }

  write_file(out / "stats.json", stats.dump(2) + "\n");
  m.write(out);
  std::ostringstream csv_out;
  csv_out << "metric,value\n"
          << "n_records," << recs.size() << "\n"
          << "fraction_unchanged," << fmt(d.fraction_unchanged()) << "\n"
          << "fraction_positive," << fmt(d.fraction_positive()) << "\n"
          << "fraction_negative," << fmt(d.fraction_negative()) << "\n";
  print_report(g, stats, csv_out.str());
  return 0;
}

struct BootstrapOpts {
  std::string a, b, column, out;
  std::size_t resample_size = 100;
  std::size_t n_resamples = 1000;
  std::uint64_t seed = 0;
  std::string direction = "a_greater";
  bool without_replacement = false;
};

void add_bootstrap_options(CLI::App* sub, BootstrapOpts& o) {
  sub->add_option("--a", o.a, "CSV with group A booleans")->required()->check(CLI::ExistingFile);
  sub->add_option("--b", o.b, "CSV with group B booleans")->required()->check(CLI::ExistingFile);
  sub->add_option("--column", o.column, "Boolean column name (default: the only column)");
  sub->add_option("--resample-size", o.resample_size, "Items drawn per group")->check(CLI::PositiveNumber);
  sub->add_option("--n-resamples", o.n_resamples, "Resamples")->check(CLI::PositiveNumber);
  sub->add_option("--seed", o.seed, "Seed");
  sub->add_option("--direction", o.direction, "a_greater|b_greater|two_sided");
  sub->add_flag("--without-replacement", o.without_replacement, "Draw without replacement");
  sub->add_option("--out", o.out, "Output directory")->required();
}

std::vector<bool> read_bool_column(const fs::path& path, const std::string& column) {
  const auto rows = csv::parse(read_file(path));
  if (rows.empty()) throw ValidationError(path.string() + ": missing header");
  std::size_t col = 0;
  if (column.empty()) {
    if (rows[0].fields.size() != 1) throw ValidationError(path.string() + ": several columns, pick one with --column");
  } else {
    auto it = std::find_if(rows[0].fields.begin(), rows[0].fields.end(),
                           [&](const csv::Field& f) { return f.value == column; });
    if (it == rows[0].fields.end()) throw ValidationError(path.string() + ": no column '" + column + "'");
    col = static_cast<std::size_t>(it - rows[0].fields.begin());
  }
  std::vector<bool> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() == 1 && row.fields[0].value.empty()) continue;
    if (col >= row.fields.size()) throw ValidationError(path.string() + ":" + std::to_string(row.line) + ": short row");
    std::string v = row.fields[col].value;
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "1" || v == "true" || v == "yes" || v == "t") {
      out.push_back(true);
    } else if (v == "0" || v == "false" || v == "no" || v == "f") {
      out.push_back(false);
    } else {
      throw ValidationError(path.string() + ":" + std::to_string(row.line) + ": not a boolean: '" + v + "'");
    }
  }
  return out;
}

int run_bootstrap(const BootstrapOpts& o, const CLI::App* sub, const CLI::App* root, const Globals& g) {
  Manifest m("bootstrap", sub, root);
  const Direction dir = parse_direction(o.direction);
  prepare_out(o.out);
  m.input("a", o.a);
  m.input("b", o.b);
  m.seed("seed", o.seed);
  const auto a = read_bool_column(o.a, o.column);
  const auto b = read_bool_column(o.b, o.column);
  BootstrapOptions opt;
  opt.resample_size = o.resample_size;
  opt.n_resamples = o.n_resamples;
  opt.seed = o.seed;
  opt.direction = dir;
  opt.with_replacement = !o.without_replacement;
  const BootstrapResult r = paired_bootstrap(a, b, opt);
  json j = r.to_json();
  j["n_a"] = a.size();
  j["n_b"] = b.size();
  write_file(fs::path(o.out) / "bootstrap.json", j.dump(2) + "\n");
  m.write(o.out);
  print_report(g, j,
               "observed_a,observed_b,p_value\n" + fmt(r.observed_a) + "," + fmt(r.observed_b) + "," +
                   fmt(r.p_value) + "\n");
  return 0;
}

struct TrainCmdOpts {
  TrainOpts train;
  std::string data, validation, out;
  std::string label_rule = "absolute";
  double validation_fraction = 0.1;
};

// Iterative families hold out a validation slice when none is given.
void split_for_training(std::vector<Example>& data, std::vector<Example>& validation, Family family,
                        double fraction, std::uint64_t seed) {
  if (!validation.empty()) return;
  if (family != Family::LinearSVR && family != Family::External) return;
  if (!(fraction > 0.0 && fraction < 1.0)) return;
  SplitSpec s{1.0 - fraction, fraction, 0.0, 1, seed};
  const Split split = make_split(data.size(), s, 0);
  std::vector<Example> tr, va;
  for (auto i : split.train) tr.push_back(data[i]);
  for (auto i : split.validation) va.push_back(data[i]);
  data = std::move(tr);
  validation = std::move(va);
}

int run_train(const TrainCmdOpts& o, const CLI::App* sub, const CLI::App* root) {
  Manifest m("train", sub, root);
  const Family family = parse_family(o.train.family);
  const TrainConfig cfg = make_train_config(o.train);
  const LabelRule rule = parse_label_rule(o.label_rule);
  prepare_out(o.out);
  m.input("data", o.data);
  auto data = load_sensitivity_examples(o.data, rule);
  std::vector<Example> validation;
  if (!o.validation.empty()) {
    m.input("validation", o.validation);
    validation = load_sensitivity_examples(o.validation, rule);
  }
  split_for_training(data, validation, family, o.validation_fraction, o.train.seed);
  m.seed("seed", cfg.seed);
  const RegressorModel model = train(family, data, validation, cfg);
  save_model(model, fs::path(o.out) / "model.bin");
  m.extra("model", {{"family", to_string(family)},
                    {"n_train", data.size()},
                    {"n_validation", validation.size()},
                    {"epochs_run", model.metadata().epochs_run},
                    {"best_epoch", model.metadata().best_epoch},
                    {"vocabulary_size", model.vocabulary() ? model.vocabulary()->size() : 0},
                    {"training_fingerprint", model.metadata().training_fingerprint}});
  m.write(o.out);
  std::cerr << "train: " << to_string(family) << " on " << data.size() << " examples -> "
            << (fs::path(o.out) / "model.bin").string() << "\n";
  return 0;
}

fs::path model_file(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "model.bin";
  if (!fs::exists(p)) throw ValidationError("model file not found: " + p.string());
  return p;
}

struct EvaluateOpts {
  TrainOpts train;
  SplitOpts split;
  std::string data, model, out;
  std::string label_rule = "absolute";
  bool sequential = false;
};

int run_evaluate(const EvaluateOpts& o, const CLI::App* sub, const CLI::App* root, const Globals& g) {
  Manifest m("evaluate", sub, root);
  const LabelRule rule = parse_label_rule(o.label_rule);
  prepare_out(o.out);
  m.input("data", o.data);
  const auto data = load_sensitivity_examples(o.data, rule);
  EvalReport report;
  if (!o.model.empty()) {
    const fs::path mf = model_file(o.model);
    m.input("model", mf);
    const RegressorModel model = load_model(mf, scorer_options(o.train));
    FoldResult f = evaluate_fold(model, data, rule);
    f.split_fingerprint = hex64(0);
    report = summarize_folds(std::string(to_string(model.family())), {f});
  } else {
    const Family family = parse_family(o.train.family);
    const TrainConfig cfg = make_train_config(o.train);
    const SplitSpec spec = make_split_spec(o.split, o.train.seed);
    m.seed("seed", cfg.seed);
    m.seed("split_seed", spec.seed);
    CvOptions cv;
    cv.label_rule = rule;
    cv.parallel = !o.sequential;
    report = monte_carlo_cv(data, family, cfg, spec, cv);
  }
  const json j = report.to_json();
  write_file(fs::path(o.out) / "report.json", j.dump(2) + "\n");
  write_file(fs::path(o.out) / "folds.csv", report.folds_csv());
  m.write(o.out);
  print_report(g, j, report.folds_csv());
  if (report.has_missing) std::cerr << "evaluate: warning: some folds lack AUC/AUPR (see missing_reason)\n";
  return 0;
}

struct StratifyOpts {
  BundleOpts in;
  TrainOpts scorer;
  std::string mode = "both";
  std::string thresholds = "0:1:0.1";
  std::string out;
};

int run_stratify(const StratifyOpts& o, const CLI::App* sub, const CLI::App* root, const Globals& g) {
  Manifest m("stratify", sub, root);
  const auto endpoint = endpoint_from(o.scorer);
  if (!endpoint) throw ValidationError("stratify needs --scorer-cmd or --scorer-tcp");
  std::vector<StratifyMode> modes;
  if (o.mode == "both") {
    modes = {StratifyMode::TargetOnly, StratifyMode::ConcatParent};
  } else {
    modes = {parse_stratify_mode(o.mode)};
  }
  const auto thresholds = parse_thresholds(o.thresholds);
  prepare_out(o.out);
  LoadedBundle b = load_inputs(o.in, m);
  if (b.bundle.posts().empty()) throw ValidationError("stratify needs post texts");
  ExternalScorer scorer(*endpoint, scorer_options(o.scorer));

  std::ostringstream table;
  table << "threshold,mode,mae,n\n";
  std::string errors;
  json j = json::object();
  bool partial = false;
  for (StratifyMode mode : modes) {
    const auto r = stratified_toxicity_mae(scorer, b.bundle, b.table, thresholds, mode);
    json rows = json::array();
    for (const auto& row : r.rows) {
      table << fmt(row.threshold) << ',' << to_string(mode) << ',' << fmt_opt(row.mae) << ',' << row.n << '\n';
      rows.push_back({{"threshold", row.threshold}, {"mae", row.mae ? json(*row.mae) : json(nullptr)}, {"n", row.n}});
    }
    for (const auto& f : r.failures) {
      errors += json{{"post_id", f.post_id}, {"mode", to_string(mode)}, {"error", f.error}}.dump() + "\n";
    }
    partial = partial || r.partial();
    j[std::string(to_string(mode))] = {{"rows", rows}, {"n_scored", r.n_scored}, {"n_failed", r.failures.size()}};
  }
  j["partial"] = partial;
  write_file(fs::path(o.out) / "stratify.csv", table.str());
  write_file(fs::path(o.out) / "errors.jsonl", errors);
  m.extra("partial", partial);
  m.write(o.out);
  print_report(g, j, table.str());
  if (partial) std::cerr << "stratify: warning: some posts could not be scored, see errors.jsonl\n";
  return 0;
}

struct SampleOpts {
  TrainOpts scorer;
  std::string model, pool, out;
  std::string pool_format = "jsonl";
  std::size_t k = 250;
  std::string selection = "teacher";
  std::string score_transform = "identity";
  std::uint64_t seed = 0;
};

std::vector<Example> pool_examples(const std::vector<Post>& pool) {
  std::vector<Example> out;
  out.reserve(pool.size());
  for (const auto& p : pool) out.push_back({p.post_id, p.target_text, p.parent_text});
  return out;
}

int run_sample(const SampleOpts& o, const CLI::App* sub, const CLI::App* root) {
  Manifest m("sample", sub, root);
  const Selection selection = parse_selection(o.selection);
  const ScoreTransform transform = parse_score_transform(o.score_transform);
  prepare_out(o.out);
  const fs::path mf = model_file(o.model);
  m.input("model", mf);
  m.input("pool", o.pool);
  m.seed("seed", o.seed);
  const RegressorModel model = load_model(mf, scorer_options(o.scorer));
  const auto pool = load_posts(o.pool, parse_format(o.pool_format));
  if (o.k > pool.size()) throw ValidationError("--k " + std::to_string(o.k) + " exceeds pool size " + std::to_string(pool.size()));
  const auto examples = pool_examples(pool);
  const auto scores = model.predict_examples(examples);
  std::vector<std::size_t> chosen;
  if (selection == Selection::TeacherTopK) {
    std::vector<std::pair<std::string, double>> scored;
    std::unordered_map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      scored.emplace_back(pool[i].post_id, transform == ScoreTransform::Abs ? std::abs(scores[i]) : scores[i]);
      pos[pool[i].post_id] = i;
    }
    for (const auto& id : select_top_k(scored, o.k)) chosen.push_back(pos.at(id));
  } else {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(o.seed, 1));
    for (std::size_t i = 0; i < o.k; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    chosen.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(o.k));
    std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
      return scores[a] != scores[b] ? scores[a] > scores[b] : pool[a].post_id < pool[b].post_id;
    });
  }
  std::string lines;
  for (std::size_t r = 0; r < chosen.size(); ++r) {
    const auto& p = pool[chosen[r]];
    lines += json{{"rank", r + 1},
                  {"post_id", p.post_id},
                  {"score", scores[chosen[r]]},
                  {"target_text", p.target_text},
                  {"parent_text", p.parent_text ? json(*p.parent_text) : json(nullptr)}}
                 .dump() +
             "\n";
  }
  write_file(fs::path(o.out) / "sampled.jsonl", lines);
  m.write(o.out);
  std::cerr << "sample: wrote " << chosen.size() << " posts\n";
  return 0;
}

struct AugmentOpts {
  TrainOpts train;
  SplitOpts split;
  std::string data, pool, out;
  std::string pool_format = "jsonl";
  std::size_t cycles = 5;
  std::size_t k = 1000;
  std::string selection = "teacher";
  bool single_shot = false;
  std::string score_transform = "identity";
  double silver_weight = 1.0;
  std::string label_rule = "absolute";
};

int run_augment(const AugmentOpts& o, const CLI::App* sub, const CLI::App* root, const Globals& g) {
  Manifest m("augment", sub, root);
  AugmentationConfig cfg;
  cfg.selection = parse_selection(o.selection);
  cfg.k_per_cycle = o.k;
  cfg.n_cycles = o.cycles;
  cfg.single_shot = o.single_shot;
  cfg.score_transform = parse_score_transform(o.score_transform);
  cfg.family = parse_family(o.train.family);
  cfg.train = make_train_config(o.train);
  cfg.silver_weight = o.silver_weight;
  cfg.label_rule = parse_label_rule(o.label_rule);
  cfg.seed = o.train.seed;
  const SplitSpec spec = make_split_spec(o.split, o.train.seed);
  if (o.k == 0 || o.cycles == 0) throw ValidationError("--k and --cycles must be >= 1");
  prepare_out(o.out);
  m.input("data", o.data);
  m.input("pool", o.pool);
  m.seed("seed", o.train.seed);
  m.seed("split_seed", spec.seed);
  m.extra("augmentation", cfg.to_json());
  const auto gold = load_sensitivity_examples(o.data, cfg.label_rule);
  const auto pool = load_posts(o.pool, parse_format(o.pool_format));
  if (cfg.k() * cfg.cycles() > pool.size()) {
    throw ValidationError("pool exhaustion: need " + std::to_string(cfg.k() * cfg.cycles()) + " posts, pool has " +
                          std::to_string(pool.size()));
  }

  const fs::path out(o.out);
  std::ofstream cycles_file(out / "cycles.jsonl", std::ios::trunc);
  if (!cycles_file) throw std::runtime_error("cannot write " + (out / "cycles.jsonl").string());
  const auto res = run_augmentation_cv(gold, pool, cfg, spec, [&](const CycleLog& log) {
    cycles_file << log.to_json().dump() << "\n";
    cycles_file.flush();
    std::cerr << "augment: repeat " << log.repeat << " cycle " << log.cycle << " test mse " << fmt(log.student.mse)
              << "\n";
  });

  std::ostringstream table;
  table << "cycle,test_mse,test_mse_sem,test_mae,n_repeats\n";
  json per_cycle = json::array();
  for (std::size_t c = 0; c < res.per_cycle.size(); ++c) {
    const auto& r = res.per_cycle[c];
    table << c << ',' << fmt_opt(r.mse.mean) << ',' << fmt(r.mse.sem) << ',' << fmt_opt(r.mae.mean) << ','
          << r.n_folds() << '\n';
    json cj = r.to_json();
    cj["cycle"] = c;
    per_cycle.push_back(std::move(cj));
  }
  write_file(out / "augment.csv", table.str());
  const json report = {{"config", cfg.to_json()}, {"per_cycle", per_cycle}};
  write_file(out / "report.json", report.dump(2) + "\n");
  m.write(out);
  print_report(g, report, table.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-sensitivity toolkit for toxicity annotation data"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; command-line flags take precedence");
  app.set_version_flag("--version", std::string(kToolVersion));
  Globals g;
  app.add_option("--threads", g.threads, "Cap on worker threads (0 = hardware)");
  app.add_option("--format", g.format, "Report format on stdout: json|csv")->check(CLI::IsMember({"json", "csv"}));

  AggregateOpts agg;
  auto* agg_cmd = app.add_subcommand("aggregate", "Score posts and compute delta per post");
  add_bundle_options(agg_cmd, agg.in);
  agg_cmd->add_option("--out", agg.out, "Output directory")->required();

  StatsOpts st;
  auto* stats_cmd = app.add_subcommand("stats", "Dataset statistics, histograms and agreement");
  add_bundle_options(stats_cmd, st.in);
  stats_cmd->add_option("--out", st.out, "Output directory");
  stats_cmd->add_option("--bins", st.bins, "Delta histogram bins")->check(CLI::PositiveNumber);
  stats_cmd->add_option("--toxicity-bins", st.toxicity_bins, "Toxicity histogram bins")->check(CLI::PositiveNumber);
  stats_cmd->add_option("--thresholds", st.thresholds, "Thresholds for sensitive counts");
  stats_cmd->add_option("--utility-thresholds", st.utility_thresholds, "Thresholds for parent utility");
  stats_cmd->require_subcommand(0, 1);
  BootstrapOpts bs_nested;
  auto* stats_bs = stats_cmd->add_subcommand("bootstrap", "Paired bootstrap over two boolean groups");
  add_bootstrap_options(stats_bs, bs_nested);

  BootstrapOpts bs;
  auto* bs_cmd = app.add_subcommand("bootstrap", "Paired bootstrap over two boolean groups");
  add_bootstrap_options(bs_cmd, bs);

  TrainCmdOpts tr;
  auto* train_cmd = app.add_subcommand("train", "Train a sensitivity regressor");
  add_train_options(train_cmd, tr.train);
  train_cmd->add_option("--data", tr.data, "sensitivity.jsonl")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--validation", tr.validation, "Validation sensitivity.jsonl")->check(CLI::ExistingFile);
  train_cmd->add_option("--validation-fraction", tr.validation_fraction,
                        "Held-out slice for early stopping when --validation is absent");
  train_cmd->add_option("--label-rule", tr.label_rule, "absolute|positive_only");
  train_cmd->add_option("--out", tr.out, "Output directory")->required();

  EvaluateOpts ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Monte Carlo cross-validation, or score a saved model");
  add_train_options(eval_cmd, ev.train);
  add_split_options(eval_cmd, ev.split);
  eval_cmd->add_option("--data", ev.data, "sensitivity.jsonl")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--model", ev.model, "Evaluate this model on all of --data instead");
  eval_cmd->add_option("--label-rule", ev.label_rule, "absolute|positive_only");
  eval_cmd->add_flag("--sequential", ev.sequential, "Run repeats one at a time");
  eval_cmd->add_option("--out", ev.out, "Output directory")->required();

  StratifyOpts sf;
  auto* strat_cmd = app.add_subcommand("stratify", "MAE of a toxicity scorer by sensitivity threshold");
  add_bundle_options(strat_cmd, sf.in);
  add_scorer_options(strat_cmd, sf.scorer);
  strat_cmd->add_option("--mode", sf.mode, "target_only|concat_parent|both");
  strat_cmd->add_option("--thresholds", sf.thresholds, "a,b,c or start:stop:step");
  strat_cmd->add_option("--out", sf.out, "Output directory")->required();

  SampleOpts sp;
  auto* sample_cmd = app.add_subcommand("sample", "Pick likely context-sensitive posts from a pool");
  sample_cmd->add_option("--model", sp.model, "Model directory or file")->required();
  sample_cmd->add_option("--pool", sp.pool, "Pool posts file")->required()->check(CLI::ExistingFile);
  sample_cmd->add_option("--pool-format", sp.pool_format, "jsonl|csv")->check(CLI::IsMember({"jsonl", "csv"}));
  sample_cmd->add_option("--k", sp.k, "Posts to select")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--selection", sp.selection, "teacher|random");
  sample_cmd->add_option("--score-transform", sp.score_transform, "identity|abs");
  sample_cmd->add_option("--seed", sp.seed, "Seed for random selection");
  add_scorer_options(sample_cmd, sp.scorer);
  sample_cmd->add_option("--out", sp.out, "Output directory")->required();

  AugmentOpts au;
  auto* aug_cmd = app.add_subcommand("augment", "Teacher-student augmentation cycles");
  add_train_options(aug_cmd, au.train);
  add_split_options(aug_cmd, au.split);
  aug_cmd->add_option("--data", au.data, "Gold sensitivity.jsonl")->required()->check(CLI::ExistingFile);
  aug_cmd->add_option("--pool", au.pool, "Unlabelled pool posts")->required()->check(CLI::ExistingFile);
  aug_cmd->add_option("--pool-format", au.pool_format, "jsonl|csv")->check(CLI::IsMember({"jsonl", "csv"}));
  aug_cmd->add_option("--cycles", au.cycles, "Cycles")->check(CLI::PositiveNumber);
  aug_cmd->add_option("--k", au.k, "Posts added per cycle")->check(CLI::PositiveNumber);
  aug_cmd->add_option("--selection", au.selection, "teacher|random");
  aug_cmd->add_flag("--single-shot", au.single_shot, "One cycle of k * cycles posts");
  aug_cmd->add_option("--score-transform", au.score_transform, "identity|abs");
  aug_cmd->add_option("--silver-weight", au.silver_weight, "Loss weight of silver examples")->check(CLI::PositiveNumber);
  aug_cmd->add_option("--label-rule", au.label_rule, "absolute|positive_only");
  aug_cmd->add_option("--out", au.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    set_max_threads(g.threads);
    if (*agg_cmd) return run_aggregate(agg, agg_cmd, &app);
    if (*stats_cmd) {
      if (*stats_bs) return run_bootstrap(bs_nested, stats_bs, &app, g);
      return run_stats(st, stats_cmd, &app, g);
    }
    if (*bs_cmd) return run_bootstrap(bs, bs_cmd, &app, g);
    if (*train_cmd) return run_train(tr, train_cmd, &app);
    if (*eval_cmd) return run_evaluate(ev, eval_cmd, &app, g);
    if (*strat_cmd) return run_stratify(sf, strat_cmd, &app, g);
    if (*sample_cmd) return run_sample(sp, sample_cmd, &app);
    if (*aug_cmd) return run_augment(au, aug_cmd, &app, g);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
