#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace ctxsens {

struct ScoreRequest {
  std::string id;
  std::string text;
  std::optional<std::string> parent;
};

struct FitExample {
  std::string id;
  std::string text;
  std::optional<std::string> parent;
  double target = 0.0;
};

struct ScoreBatch {
  std::vector<std::optional<double>> scores;  // parallel to the requests
  std::vector<std::string> errors;            // empty string where scored

  bool complete() const;
};

// Anything that maps a post to a real score: toxicity scorers for stratified
// evaluation, or neural sensitivity regressors in the teacher/student slots.
class TextScorer {
 public:
  virtual ~TextScorer() = default;
  virtual ScoreBatch score(std::span<const ScoreRequest> requests) = 0;
  // Optional training handshake. Returns false for inference-only scorers.
  // Iterative scorers are expected to early-stop on `validation` with the
  // given patience.
  virtual bool fit(std::span<const FitExample> examples, std::span<const FitExample> validation = {},
                   std::size_t patience = 0) {
    (void)examples;
    (void)validation;
    (void)patience;
    return false;
  }
  virtual std::string describe() const = 0;
};

class FunctionScorer : public TextScorer {
 public:
  using Fn = std::function<double(const ScoreRequest&)>;
  explicit FunctionScorer(Fn fn, std::string name = "function") : fn_(std::move(fn)), name_(std::move(name)) {}
  ScoreBatch score(std::span<const ScoreRequest> requests) override;
  std::string describe() const override { return name_; }

 private:
  Fn fn_;
  std::string name_;
};

// Child process speaking newline-delimited JSON on stdin/stdout.
struct CommandEndpoint {
  std::vector<std::string> argv;
};

struct TcpEndpoint {
  std::string host;
  int port = 0;
};

using Endpoint = std::variant<CommandEndpoint, TcpEndpoint>;

nlohmann::json to_json(const Endpoint& endpoint);
Endpoint endpoint_from_json(const nlohmann::json& j);
// "host:port" -> TCP; anything else is split on whitespace into argv.
Endpoint parse_endpoint(const std::string& spec, bool tcp);

struct ExternalScorerOptions {
  std::chrono::milliseconds timeout{30000};      // per request
  std::chrono::milliseconds fit_timeout{600000};
  std::size_t max_in_flight = 64;
  int retries = 1;  // extra attempts for failed requests
};

class ScorerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Protocol: request `{"id","text","parent"}`, response `{"id","score"}`;
// responses may arrive in any order and are matched by id. Late responses
// for timed-out requests are discarded.
class ExternalScorer : public TextScorer {
 public:
  explicit ExternalScorer(Endpoint endpoint, ExternalScorerOptions options = {});
  ~ExternalScorer() override;
  ExternalScorer(const ExternalScorer&) = delete;
  ExternalScorer& operator=(const ExternalScorer&) = delete;

  ScoreBatch score(std::span<const ScoreRequest> requests) override;
  // Throws ScorerError when the scorer cannot be reached or dies.
  bool fit(std::span<const FitExample> examples, std::span<const FitExample> validation = {},
           std::size_t patience = 0) override;
  std::string describe() const override;

  const Endpoint& endpoint() const { return endpoint_; }

 private:
  class Connection;
  Connection& connection();
  void attempt(std::span<const ScoreRequest> requests, std::span<const std::size_t> which, ScoreBatch& out);

  Endpoint endpoint_;
  ExternalScorerOptions options_;
  std::mutex mutex_;
  std::unique_ptr<Connection> connection_;
  unsigned long long next_wire_id_ = 0;
};

}  // namespace ctxsens
