#include "ctxsens/scorer.hpp"

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <deque>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "ctxsens/util.hpp"

namespace ctxsens {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

bool ScoreBatch::complete() const {
  for (const auto& s : scores) {
    if (!s) return false;
  }
  return true;
}

ScoreBatch FunctionScorer::score(std::span<const ScoreRequest> requests) {
  ScoreBatch out;
  out.scores.resize(requests.size());
  out.errors.resize(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    try {
      out.scores[i] = fn_(requests[i]);
    } catch (const std::exception& e) {
      out.errors[i] = e.what();
    }
  }
  return out;
}

json to_json(const Endpoint& endpoint) {
  if (const auto* cmd = std::get_if<CommandEndpoint>(&endpoint)) {
    return {{"kind", "command"}, {"argv", cmd->argv}};
  }
  const auto& tcp = std::get<TcpEndpoint>(endpoint);
  return {{"kind", "tcp"}, {"host", tcp.host}, {"port", tcp.port}};
}

Endpoint endpoint_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "command") return CommandEndpoint{j.at("argv").get<std::vector<std::string>>()};
  if (kind == "tcp") return TcpEndpoint{j.at("host").get<std::string>(), j.at("port").get<int>()};
  throw ValidationError("unknown endpoint kind " + kind);
}

Endpoint parse_endpoint(const std::string& spec, bool tcp) {
  if (tcp) {
    auto colon = spec.rfind(':');
    if (colon == std::string::npos) throw ValidationError("TCP endpoint must be host:port, got " + spec);
    TcpEndpoint ep;
    ep.host = spec.substr(0, colon);
    try {
      ep.port = std::stoi(spec.substr(colon + 1));
    } catch (const std::logic_error&) {
      throw ValidationError("bad port in " + spec);
    }
    return ep;
  }
  CommandEndpoint cmd;
  std::istringstream in(spec);
  std::string word;
  while (in >> word) cmd.argv.push_back(word);
  if (cmd.argv.empty()) throw ValidationError("empty scorer command");
  return cmd;
}

namespace {

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

void set_nonblocking(int fd) {
  int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

}  // namespace

class ExternalScorer::Connection {
 public:
  explicit Connection(const Endpoint& endpoint) {
    ignore_sigpipe();
    if (const auto* cmd = std::get_if<CommandEndpoint>(&endpoint)) {
      spawn(*cmd);
    } else {
      dial(std::get<TcpEndpoint>(endpoint));
    }
  }

  ~Connection() {
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    if (pid_ > 0) {
      // Closing stdin asks the child to exit; escalate if it does not.
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, nullptr, WNOHANG) == pid_) return;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
  }

  void send(const std::string& line) {
    out_ += line;
    out_ += '\n';
  }

  bool closed() const { return closed_; }

  // Returns the next complete line, or nullopt on deadline or closure.
  std::optional<std::string> next_line(Clock::time_point deadline) {
    for (;;) {
      if (auto line = take_line()) return line;
      if (closed_) return std::nullopt;
      const auto now = Clock::now();
      if (now >= deadline && out_.empty()) return std::nullopt;
      long wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
      if (wait_ms < 0) wait_ms = 0;
      pollfd fds[2];
      nfds_t n = 0;
      fds[n++] = {read_fd_, POLLIN, 0};
      const bool want_write = !out_.empty();
      if (want_write) {
        if (write_fd_ == read_fd_) {
          fds[0].events |= POLLOUT;
        } else {
          fds[n++] = {write_fd_, POLLOUT, 0};
        }
      }
      int rc = ::poll(fds, n, static_cast<int>(std::min<long>(wait_ms, 1000)));
      if (rc < 0) {
        if (errno == EINTR) continue;
        closed_ = true;
        return std::nullopt;
      }
      if (rc == 0) {
        if (Clock::now() >= deadline) return std::nullopt;
        continue;
      }
      for (nfds_t i = 0; i < n; ++i) {
        if ((fds[i].revents & POLLOUT) != 0) flush_some();
        if (fds[i].fd == read_fd_ && (fds[i].revents & (POLLIN | POLLHUP | POLLERR)) != 0) read_some();
        if (fds[i].fd == write_fd_ && write_fd_ != read_fd_ && (fds[i].revents & (POLLERR | POLLHUP)) != 0) {
          closed_ = true;
        }
      }
    }
  }

 private:
  void spawn(const CommandEndpoint& cmd) {
    if (cmd.argv.empty()) throw ScorerError("empty scorer command");
    int to_child[2];
    int from_child[2];
    int status_pipe[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0 || ::pipe2(status_pipe, O_CLOEXEC) != 0) {
      throw ScorerError("pipe() failed");
    }
    pid_t pid = ::fork();
    if (pid < 0) throw ScorerError("fork() failed");
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      std::vector<char*> args;
      for (const auto& a : cmd.argv) args.push_back(const_cast<char*>(a.c_str()));
      args.push_back(nullptr);
      ::close(status_pipe[0]);
      ::execvp(args[0], args.data());
      int err = errno;
      [[maybe_unused]] auto n = ::write(status_pipe[1], &err, sizeof err);
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::close(status_pipe[1]);
    int exec_errno = 0;
    ssize_t got;
    do {
      got = ::read(status_pipe[0], &exec_errno, sizeof exec_errno);
    } while (got < 0 && errno == EINTR);
    ::close(status_pipe[0]);
    if (got > 0) {
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::waitpid(pid, nullptr, 0);
      throw ScorerError("cannot start scorer '" + cmd.argv[0] + "': " + std::strerror(exec_errno));
    }
    pid_ = pid;
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
    ::fcntl(write_fd_, F_SETFD, FD_CLOEXEC);
    ::fcntl(read_fd_, F_SETFD, FD_CLOEXEC);
    set_nonblocking(write_fd_);
    set_nonblocking(read_fd_);
  }

  void dial(const TcpEndpoint& tcp) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(tcp.port);
    if (::getaddrinfo(tcp.host.c_str(), port.c_str(), &hints, &res) != 0) {
      throw ScorerError("cannot resolve " + tcp.host);
    }
    int fd = -1;
    for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
      fd = ::socket(p->ai_family, p->ai_socktype | SOCK_CLOEXEC, p->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw ScorerError("cannot connect to " + tcp.host + ":" + port);
    set_nonblocking(fd);
    read_fd_ = write_fd_ = fd;
  }

  std::optional<std::string> take_line() {
    auto pos = in_.find('\n');
    if (pos == std::string::npos) return std::nullopt;
    std::string line = in_.substr(0, pos);
    in_.erase(0, pos + 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }

  void read_some() {
    char buf[65536];
    for (;;) {
      ssize_t n = ::read(read_fd_, buf, sizeof buf);
      if (n > 0) {
        in_.append(buf, static_cast<std::size_t>(n));
        continue;
      }
      if (n == 0) closed_ = true;
      else if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) closed_ = true;
      return;
    }
  }

  void flush_some() {
    while (!out_.empty()) {
      ssize_t n = (write_fd_ == read_fd_) ? ::send(write_fd_, out_.data(), out_.size(), MSG_NOSIGNAL)
                                          : ::write(write_fd_, out_.data(), out_.size());
      if (n > 0) {
        out_.erase(0, static_cast<std::size_t>(n));
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) return;
      closed_ = true;
      return;
    }
  }

  pid_t pid_ = -1;
  int read_fd_ = -1;
  int write_fd_ = -1;
  bool closed_ = false;
  std::string in_;
  std::string out_;
};

ExternalScorer::ExternalScorer(Endpoint endpoint, ExternalScorerOptions options)
    : endpoint_(std::move(endpoint)), options_(options) {
  if (options_.max_in_flight == 0) options_.max_in_flight = 1;
}

ExternalScorer::~ExternalScorer() = default;

ExternalScorer::Connection& ExternalScorer::connection() {
  if (!connection_ || connection_->closed()) connection_ = std::make_unique<Connection>(endpoint_);
  return *connection_;
}

std::string ExternalScorer::describe() const { return to_json(endpoint_).dump(); }

void ExternalScorer::attempt(std::span<const ScoreRequest> requests, std::span<const std::size_t> which,
                             ScoreBatch& out) {
  Connection* conn = nullptr;
  try {
    conn = &connection();
  } catch (const ScorerError& e) {
    for (std::size_t idx : which) out.errors[idx] = e.what();
    return;
  }
  std::deque<std::size_t> queue(which.begin(), which.end());
  struct Outstanding {
    std::size_t index;
    Clock::time_point deadline;
  };
  std::unordered_map<std::string, Outstanding> outstanding;

  while (!queue.empty() || !outstanding.empty()) {
    while (!queue.empty() && outstanding.size() < options_.max_in_flight) {
      const std::size_t idx = queue.front();
      queue.pop_front();
      const std::string wire_id = "r" + std::to_string(next_wire_id_++);
      const auto& req = requests[idx];
      json msg = {{"id", wire_id}, {"text", req.text}, {"parent", req.parent ? json(*req.parent) : json(nullptr)}};
      conn->send(msg.dump(-1, ' ', false, json::error_handler_t::replace));
      outstanding.emplace(wire_id, Outstanding{idx, Clock::now() + options_.timeout});
    }
    Clock::time_point earliest = Clock::time_point::max();
    for (const auto& [id, o] : outstanding) earliest = std::min(earliest, o.deadline);

    auto line = conn->next_line(earliest);
    if (line) {
      json resp = json::parse(*line, nullptr, false);
      if (resp.is_discarded() || !resp.is_object() || !resp.contains("id") || !resp["id"].is_string()) {
        continue;  // not a response we can match
      }
      auto it = outstanding.find(resp["id"].get<std::string>());
      if (it == outstanding.end()) continue;  // late answer to an expired request
      const std::size_t idx = it->second.index;
      outstanding.erase(it);
      if (resp.contains("score") && resp["score"].is_number()) {
        out.scores[idx] = resp["score"].get<double>();
        out.errors[idx].clear();
      } else if (resp.contains("error")) {
        out.errors[idx] = "scorer error: " + resp["error"].dump();
      } else {
        out.errors[idx] = "protocol violation: response without numeric score";
      }
      continue;
    }
    if (conn->closed()) {
      for (const auto& [id, o] : outstanding) out.errors[o.index] = "scorer closed the connection";
      for (std::size_t idx : queue) out.errors[idx] = "scorer closed the connection";
      connection_.reset();
      return;
    }
    const auto now = Clock::now();
    for (auto it = outstanding.begin(); it != outstanding.end();) {
      if (it->second.deadline <= now) {
        out.errors[it->second.index] = "timeout";
        it = outstanding.erase(it);
      } else {
        ++it;
      }
    }
  }
}

ScoreBatch ExternalScorer::score(std::span<const ScoreRequest> requests) {
  std::lock_guard lock(mutex_);
  ScoreBatch out;
  out.scores.resize(requests.size());
  out.errors.assign(requests.size(), "not attempted");
  std::vector<std::size_t> todo(requests.size());
  for (std::size_t i = 0; i < todo.size(); ++i) todo[i] = i;
  for (int round = 0; round <= options_.retries && !todo.empty(); ++round) {
    attempt(requests, todo, out);
    std::erase_if(todo, [&](std::size_t i) { return out.scores[i].has_value(); });
  }
  return out;
}

bool ExternalScorer::fit(std::span<const FitExample> examples, std::span<const FitExample> validation,
                         std::size_t patience) {
  std::lock_guard lock(mutex_);
  Connection& conn = connection();
  auto encode = [](std::span<const FitExample> xs) {
    json items = json::array();
    for (const auto& ex : xs) {
      items.push_back({{"id", ex.id},
                       {"text", ex.text},
                       {"parent", ex.parent ? json(*ex.parent) : json(nullptr)},
                       {"target", ex.target}});
    }
    return items;
  };
  json msg = {{"op", "fit"}, {"examples", encode(examples)}};
  if (!validation.empty()) {
    msg["validation"] = encode(validation);
    msg["patience"] = patience;
  }
  conn.send(msg.dump(-1, ' ', false, json::error_handler_t::replace));
  const auto deadline = Clock::now() + options_.fit_timeout;
  for (;;) {
    auto line = conn.next_line(deadline);
    if (!line) {
      if (conn.closed()) {
        connection_.reset();
        throw ScorerError("external scorer closed the connection during fit");
      }
      return false;
    }
    json resp = json::parse(*line, nullptr, false);
    if (resp.is_discarded() || !resp.is_object()) continue;
    if (resp.value("op", std::string()) == "fit") return resp.value("ok", false);
    if (resp.contains("error") && !resp.contains("id")) return false;
  }
}

}  // namespace ctxsens
