#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ctxsens/corpus.hpp"
#include "ctxsens/util.hpp"
#include "synthetic.hpp"

using namespace ctxsens;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = CTXSENS_CLI;
const std::string kFake = CTXSENS_FAKE_SCORER;

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path workdir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "ctxsens_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    testing::BundleSpec spec;
    spec.n_posts = 300;
    spec.unsure_rate = 0.05;
    testing::write_bundle_files(testing::synthetic_bundle(spec), d);
    testing::BundleSpec pool_spec;
    pool_spec.n_posts = 400;
    pool_spec.seed = 99;
    auto pool = testing::synthetic_bundle(pool_spec).posts();
    for (auto& p : pool) p.post_id = "u" + p.post_id;
    write_file(d / "pool.jsonl", posts_to_jsonl(pool));
    return d;
  }();
  return dir;
}

Run cli(const std::string& args) {
  const auto dir = workdir();
  const std::string cmd = "\"" + kCli + "\" " + args + " > \"" + (dir / "stdout").string() + "\" 2> \"" +
                          (dir / "stderr").string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(dir / "stdout");
  r.err = read_file(dir / "stderr");
  return r;
}

std::string bundle_args() {
  const auto d = workdir();
  return "--posts " + (d / "posts.jsonl").string() + " --ic " + (d / "ic.jsonl").string() + " --oc " +
         (d / "oc.jsonl").string();
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream in(read_file(p));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

fs::path aggregated() {
  static const fs::path p = [] {
    const auto out = workdir() / "agg";
    const Run r = cli("aggregate " + bundle_args() + " --out " + out.string());
    REQUIRE(r.code == 0);
    return out / "sensitivity.jsonl";
  }();
  return p;
}

}  // namespace

TEST_CASE("version and help") {
  const Run v = cli("--version");
  CHECK(v.code == 0);
  CHECK(v.out.find(std::string(kToolVersion)) != std::string::npos);
  CHECK(cli("--help").code == 0);
  CHECK(cli("no-such-command").code == 1);
  CHECK(cli("train --family ridge").code == 1);
}

TEST_CASE("aggregate writes records and a manifest") {
  const auto path = aggregated();
  const auto rows = lines(path);
  CHECK(rows.size() > 250);
  CHECK(rows.size() < 300);
  const json first = json::parse(rows[0]);
  for (const char* key : {"post_id", "target_text", "delta", "threshold", "is_sensitive", "s_oc", "s_ic"}) {
    CHECK(first.contains(key));
  }
  const json m = json::parse(read_file(path.parent_path() / "manifest.json"));
  CHECK(m["subcommand"] == "aggregate");
  CHECK(m["tool_version"] == std::string(kToolVersion));
  CHECK(m["inputs"].size() == 3);
  CHECK(m.contains("started_at"));
  CHECK(m.contains("finished_at"));
}

TEST_CASE("stats writes every table") {
  const auto out = workdir() / "stats";
  const Run r = cli("stats " + bundle_args() + " --out " + out.string());
  REQUIRE(r.code == 0);
  const json s = json::parse(read_file(out / "stats.json"));
  const double total = s["delta"]["fraction_unchanged"].get<double>() + s["delta"]["fraction_positive"].get<double>() +
                       s["delta"]["fraction_negative"].get<double>();
  CHECK(total == doctest::Approx(1.0));
  CHECK(s.contains("agreement"));
  CHECK(s.contains("class_ratio"));
  for (const char* f : {"lengths.csv", "toxicity_histogram.csv", "delta_histogram.csv", "sensitive_counts.csv",
                        "parent_utility.csv"}) {
    INFO(f);
    REQUIRE(fs::exists(out / f));
    CHECK(lines(out / f).size() > 1);
  }
  CHECK(lines(out / "sensitive_counts.csv")[0] == "threshold,count");
}

TEST_CASE("train, then evaluate the saved model") {
  const auto out = workdir() / "model";
  REQUIRE(cli("train --data " + aggregated().string() + " --family ridge --seed 3 --out " + out.string()).code == 0);
  REQUIRE(fs::exists(out / "model.bin"));
  const auto ev = workdir() / "eval_model";
  const Run r = cli("evaluate --data " + aggregated().string() + " --model " + (out / "model.bin").string() +
                    " --out " + ev.string());
  REQUIRE(r.code == 0);
  const json rep = json::parse(read_file(ev / "report.json"));
  CHECK(rep["summary"]["mse"]["mean"].get<double>() >= 0.0);
}

TEST_CASE("cross-validated evaluation is reproducible") {
  const auto a = workdir() / "cv_a";
  const auto b = workdir() / "cv_b";
  const std::string args = "evaluate --data " + aggregated().string() + " --family ridge --seed 5 --repeats 3 --out ";
  REQUIRE(cli(args + a.string()).code == 0);
  REQUIRE(cli("--threads 1 " + args + b.string()).code == 0);
  CHECK(read_file(a / "folds.csv") == read_file(b / "folds.csv"));
  CHECK(lines(a / "folds.csv").size() == 4);
  const Run csv = cli("--format csv " + args + (workdir() / "cv_c").string());
  CHECK(csv.out.rfind("repeat,", 0) == 0);
}

TEST_CASE("config file supplies defaults that flags override") {
  const auto cfg = workdir() / "eval.toml";
  write_file(cfg, "[evaluate]\nfamily = \"constant_mean\"\nrepeats = 2\n");
  const auto out = workdir() / "cv_cfg";
  REQUIRE(cli("--config " + cfg.string() + " evaluate --data " + aggregated().string() + " --repeats 4 --out " +
              out.string())
              .code == 0);
  const json rep = json::parse(read_file(out / "report.json"));
  CHECK(rep["family"] == "constant_mean");
  CHECK(rep["folds"].size() == 4);
}

TEST_CASE("stratify against a child-process scorer") {
  const auto out = workdir() / "strat";
  const Run r = cli("stratify " + bundle_args() + " --scorer-cmd \"" + kFake + " --length\" --thresholds 0:1:0.25 --out " +
                    out.string());
  REQUIRE(r.code == 0);
  const auto rows = lines(out / "stratify.csv");
  CHECK(rows[0] == "threshold,mode,mae,n");
  CHECK(rows.size() == 1 + 2 * 5);
}

TEST_CASE("stratify reports partial results when some posts fail") {
  const auto out = workdir() / "strat_fail";
  const Run r = cli("stratify " + bundle_args() + " --scorer-cmd \"" + kFake +
                    " --length --fail-text f001\" --mode target_only --retries 0 --out " + out.string());
  CHECK(r.code == 0);
  CHECK(lines(out / "errors.jsonl").size() > 0);
  CHECK(lines(out / "stratify.csv").size() == 12);
}

TEST_CASE("sample ranks the pool by teacher score") {
  const auto model = workdir() / "model_for_sample";
  REQUIRE(cli("train --data " + aggregated().string() + " --family ridge --out " + model.string()).code == 0);
  const auto out = workdir() / "sample";
  REQUIRE(cli("sample --model " + model.string() + " --pool " + (workdir() / "pool.jsonl").string() +
              " --k 25 --out " + out.string())
              .code == 0);
  const auto rows = lines(out / "sampled.jsonl");
  REQUIRE(rows.size() == 25);
  double prev = 2.0;
  for (const auto& line : rows) {
    const double s = json::parse(line)["score"].get<double>();
    CHECK(s <= prev);
    prev = s;
  }
  CHECK(cli("sample --model " + model.string() + " --pool " + (workdir() / "pool.jsonl").string() +
            " --k 5000 --out " + out.string())
            .code == 1);
}

TEST_CASE("augment streams cycles and summarizes them") {
  const auto out = workdir() / "augment";
  const Run r = cli("augment --data " + aggregated().string() + " --pool " + (workdir() / "pool.jsonl").string() +
                    " --cycles 2 --k 30 --repeats 2 --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(lines(out / "cycles.jsonl").size() == 4);
  const auto rows = lines(out / "augment.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "cycle,test_mse,test_mse_sem,test_mae,n_repeats");
  CHECK(rows[1].rfind("0,", 0) == 0);
}

TEST_CASE("bootstrap over csv groups") {
  const auto d = workdir();
  std::string a = "flag\n", b = "flag\n";
  for (int i = 0; i < 200; ++i) {
    a += (i < 120 ? "true\n" : "false\n");
    b += (i < 40 ? "1\n" : "0\n");
  }
  write_file(d / "a.csv", a);
  write_file(d / "b.csv", b);
  const auto out = d / "boot";
  const std::string args = "--a " + (d / "a.csv").string() + " --b " + (d / "b.csv").string() + " --seed 2 --out ";
  REQUIRE(cli("bootstrap " + args + out.string()).code == 0);
  const json j = json::parse(read_file(out / "bootstrap.json"));
  CHECK(j["p_value"].get<double>() < 0.01);
  REQUIRE(cli("stats bootstrap " + args + (d / "boot2").string()).code == 0);
  CHECK(read_file(d / "boot2" / "bootstrap.json") == read_file(out / "bootstrap.json"));
}

TEST_CASE("invalid input exits 1 with a message") {
  const auto d = workdir();
  write_file(d / "broken.jsonl", "{\"post_id\": \"1\"\n");
  const Run r = cli("aggregate --bundle " + (d / "broken.jsonl").string() + " --out " + (d / "broken").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("broken.jsonl") != std::string::npos);
  const Run bad_rule = cli("evaluate --data " + aggregated().string() + " --label-rule sideways --out " +
                           (d / "bad").string());
  CHECK(bad_rule.code == 1);
}

TEST_CASE("an unreachable external scorer is a runtime failure") {
  const auto d = workdir();
  const Run r = cli("train --data " + aggregated().string() + " --family external --scorer-cmd /nonexistent/x --out " +
                    (d / "ext").string());
  CHECK(r.code == 2);
}
