#include <doctest.h>

#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "ctxsens/scorer.hpp"
#include "ctxsens/util.hpp"

using namespace ctxsens;
using namespace std::chrono_literals;

namespace {

const std::string kFake = CTXSENS_FAKE_SCORER;

CommandEndpoint fake(std::vector<std::string> args = {}) {
  CommandEndpoint e{{kFake}};
  e.argv.insert(e.argv.end(), args.begin(), args.end());
  return e;
}

std::vector<ScoreRequest> requests(std::size_t n, const std::string& prefix = "text") {
  std::vector<ScoreRequest> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({"id" + std::to_string(i), prefix + std::to_string(i), std::nullopt});
  return out;
}

}  // namespace

TEST_CASE("function scorer") {
  FunctionScorer f([](const ScoreRequest& r) { return static_cast<double>(r.text.size()); }, "len");
  const auto b = f.score(requests(3));
  CHECK(b.complete());
  CHECK(*b.scores[2] == 5.0);
  CHECK(f.describe() == "len");
}

TEST_CASE("endpoint parsing and json") {
  const auto tcp = parse_endpoint("localhost:9100", true);
  REQUIRE(std::holds_alternative<TcpEndpoint>(tcp));
  CHECK(std::get<TcpEndpoint>(tcp).port == 9100);
  const auto cmd = parse_endpoint("python3 serve.py --fast", false);
  CHECK(std::get<CommandEndpoint>(cmd).argv == std::vector<std::string>{"python3", "serve.py", "--fast"});
  CHECK(std::get<CommandEndpoint>(endpoint_from_json(to_json(cmd))).argv == std::get<CommandEndpoint>(cmd).argv);
  CHECK_THROWS_AS(parse_endpoint("nohost", true), ValidationError);
}

TEST_CASE("table lookup through the child process") {
  const auto table = std::filesystem::temp_directory_path() / "ctxsens_scorer_table.jsonl";
  write_file(table, "{\"text\":\"text0\",\"score\":0.25}\n{\"text\":\"text1\",\"score\":0.75}\n");
  ExternalScorer s(fake({"--table", table.string()}));
  const auto b = s.score(requests(3));
  CHECK(*b.scores[0] == 0.25);
  CHECK(*b.scores[1] == 0.75);
  CHECK_FALSE(b.scores[2].has_value());
  CHECK(b.errors[2].find("unknown text") != std::string::npos);
  CHECK_FALSE(b.complete());
}

TEST_CASE("out of order responses are matched by id") {
  ExternalScorer s(fake({"--length", "--shuffle", "7"}));
  auto reqs = requests(50);
  for (std::size_t i = 0; i < reqs.size(); ++i) reqs[i].text = std::string(i, 'x');
  const auto b = s.score(reqs);
  REQUIRE(b.complete());
  for (std::size_t i = 0; i < reqs.size(); ++i) CHECK(*b.scores[i] == doctest::Approx(static_cast<double>(i) / 100.0));
}

TEST_CASE("timeouts and scripted failures stay per item") {
  ExternalScorerOptions opt;
  opt.timeout = 300ms;
  opt.retries = 0;
  ExternalScorer s(fake({"--constant", "0.1", "--hang-text", "text2", "--fail-text", "text4"}), opt);
  const auto b = s.score(requests(6));
  CHECK(b.errors[2] == "timeout");
  CHECK(b.errors[4].find("scripted failure") != std::string::npos);
  CHECK(*b.scores[5] == 0.1);
  // The connection stays usable afterwards.
  const auto again = s.score(requests(2));
  CHECK(again.complete());
}

TEST_CASE("a dying scorer is restarted on retry") {
  ExternalScorerOptions opt;
  opt.retries = 3;
  ExternalScorer s(fake({"--constant", "0.3", "--die-after", "4"}), opt);
  const auto b = s.score(requests(10));
  CHECK(b.complete());
}

TEST_CASE("a dead scorer yields errors, not scores") {
  ExternalScorerOptions opt;
  opt.retries = 0;
  ExternalScorer s(fake({"--die-after", "0"}), opt);
  const auto b = s.score(requests(3));
  for (const auto& v : b.scores) CHECK_FALSE(v.has_value());
  for (const auto& e : b.errors) CHECK_FALSE(e.empty());
}

TEST_CASE("fit handshake") {
  ExternalScorer s(fake());
  std::vector<FitExample> ex = {{"a", "x", std::nullopt, 0.2}, {"b", "y", std::nullopt, 0.4}};
  CHECK(s.fit(ex, ex, 3));
  CHECK(*s.score(requests(1)).scores[0] == doctest::Approx(0.3));

  ExternalScorer r(fake({"--reject-fit"}));
  CHECK_FALSE(r.fit(ex));
}

TEST_CASE("missing executable is a scorer error") {
  ExternalScorer s(CommandEndpoint{{"/nonexistent/scorer"}});
  std::vector<FitExample> ex = {{"a", "x", std::nullopt, 0.2}};
  CHECK_THROWS_AS(s.fit(ex), ScorerError);
}

TEST_CASE("tcp endpoint") {
  const int port = 20000 + static_cast<int>(::getpid() % 20000);
  const std::string cmd = "\"" + kFake + "\" --constant 0.6 --die-after 3 --tcp-port " + std::to_string(port) +
                          " > /dev/null 2>&1 &";
  REQUIRE(std::system(cmd.c_str()) == 0);
  ScoreBatch b;
  for (int attempt = 0; attempt < 50; ++attempt) {
    std::this_thread::sleep_for(50ms);
    ExternalScorerOptions opt;
    opt.retries = 0;
    ExternalScorer s(TcpEndpoint{"127.0.0.1", port}, opt);
    b = s.score(requests(3));
    if (b.complete()) {
      s.score(requests(1));  // fourth request makes the server exit
      break;
    }
  }
  REQUIRE(b.complete());
  CHECK(*b.scores[1] == 0.6);
}
