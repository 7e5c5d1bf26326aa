// Scripted NDJSON scorer used by the tests. Speaks the same protocol as a
// real model server on stdin/stdout, or on a TCP port.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

using nlohmann::json;

namespace {

struct Options {
  std::string table;
  double constant = 0.0;
  bool length = false;
  std::size_t shuffle = 0;
  bool reject_fit = false;
  std::string hang_text;
  std::string fail_text;
  long long die_after = -1;
  int tcp_port = 0;
  int delay_ms = 0;
};

class Scorer {
 public:
  explicit Scorer(const Options& o) : o_(o) {
    if (!o.table.empty()) {
      std::ifstream in(o.table);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        table_[j.at("text").get<std::string>()] = j.at("score").get<double>();
      }
    }
  }

  // Returns the response line, or nullopt to stay silent.
  std::optional<std::string> handle(const json& req) {
    if (req.value("op", std::string()) == "fit") {
      if (o_.reject_fit) return json{{"op", "fit"}, {"ok", false}}.dump();
      double sum = 0.0;
      const auto& ex = req.at("examples");
      for (const auto& e : ex) sum += e.at("target").get<double>();
      fitted_ = ex.empty() ? 0.0 : sum / static_cast<double>(ex.size());
      return json{{"op", "fit"}, {"ok", true}}.dump();
    }
    const std::string id = req.at("id").get<std::string>();
    const std::string text = req.at("text").get<std::string>();
    if (!o_.hang_text.empty() && text.find(o_.hang_text) != std::string::npos) return std::nullopt;
    if (!o_.fail_text.empty() && text.find(o_.fail_text) != std::string::npos) {
      return json{{"id", id}, {"error", "scripted failure"}}.dump();
    }
    double score = o_.constant;
    if (fitted_) {
      score = *fitted_;
    } else if (!table_.empty()) {
      auto it = table_.find(text);
      if (it == table_.end()) return json{{"id", id}, {"error", "unknown text"}}.dump();
      score = it->second;
    } else if (o_.length) {
      score = std::min(1.0, static_cast<double>(text.size()) / 100.0);
    }
    return json{{"id", id}, {"score", score}}.dump();
  }

 private:
  const Options& o_;
  std::unordered_map<std::string, double> table_;
  std::optional<double> fitted_;
};

bool write_all(int fd, const std::string& s) {
  std::size_t off = 0;
  while (off < s.size()) {
    const ssize_t n = ::write(fd, s.data() + off, s.size() - off);
    if (n <= 0) return false;
    off += static_cast<std::size_t>(n);
  }
  return true;
}

// Serves one stream until EOF. Returns false when the process should exit.
bool serve(int in_fd, int out_fd, const Options& o) {
  Scorer scorer(o);
  std::string buffer;
  std::vector<std::string> held;
  long long handled = 0;
  auto flush_held = [&] {
    std::reverse(held.begin(), held.end());
    for (const auto& line : held) {
      if (!write_all(out_fd, line + "\n")) return false;
    }
    held.clear();
    return true;
  };
  for (;;) {
    pollfd p{in_fd, POLLIN, 0};
    const int ready = ::poll(&p, 1, held.empty() ? -1 : 20);
    if (ready == 0) {
      if (!flush_held()) return true;
      continue;
    }
    char chunk[65536];
    const ssize_t n = ::read(in_fd, chunk, sizeof chunk);
    if (n <= 0) {
      flush_held();
      return true;
    }
    buffer.append(chunk, static_cast<std::size_t>(n));
    std::size_t nl;
    while ((nl = buffer.find('\n')) != std::string::npos) {
      const std::string line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      if (line.empty()) continue;
      const json req = json::parse(line, nullptr, false);
      if (req.is_discarded()) {
        write_all(out_fd, json{{"error", "bad json"}}.dump() + "\n");
        continue;
      }
      if (o.die_after >= 0 && handled >= o.die_after) return false;
      ++handled;
      if (o.delay_ms > 0) ::usleep(static_cast<useconds_t>(o.delay_ms) * 1000);
      auto resp = scorer.handle(req);
      if (!resp) continue;
      if (o.shuffle > 1 && !req.contains("op")) {
        held.push_back(*resp);
        if (held.size() >= o.shuffle && !flush_held()) return true;
      } else if (!write_all(out_fd, *resp + "\n")) {
        return true;
      }
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scripted NDJSON scorer"};
  Options o;
  app.add_option("--table", o.table, "JSONL of {text, score}");
  app.add_option("--constant", o.constant, "Score for every request");
  app.add_flag("--length", o.length, "Score = min(1, bytes / 100)");
  app.add_option("--shuffle", o.shuffle, "Answer in reversed batches of this size");
  app.add_flag("--reject-fit", o.reject_fit, "Refuse the fit handshake");
  app.add_option("--hang-text", o.hang_text, "Never answer texts containing this");
  app.add_option("--fail-text", o.fail_text, "Answer with an error for texts containing this");
  app.add_option("--die-after", o.die_after, "Exit after this many requests");
  app.add_option("--tcp-port", o.tcp_port, "Listen on 127.0.0.1:PORT instead of stdio");
  app.add_option("--delay-ms", o.delay_ms, "Sleep before each answer");
  CLI11_PARSE(app, argc, argv);

  if (o.tcp_port == 0) {
    serve(STDIN_FILENO, STDOUT_FILENO, o);
    return 0;
  }
  const int srv = ::socket(AF_INET, SOCK_STREAM, 0);
  int yes = 1;
  ::setsockopt(srv, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(o.tcp_port));
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::bind(srv, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(srv, 4) != 0) {
    std::perror("fake_scorer: bind");
    return 2;
  }
  std::cout << "listening " << o.tcp_port << std::endl;
  for (;;) {
    const int c = ::accept(srv, nullptr, nullptr);
    if (c < 0) continue;
    const bool keep = serve(c, c, o);
    ::close(c);
    if (!keep) return 0;
  }
}
