#pragma once

// Scriptable stand-in for a remote verifier, used by the HTTP contract tests
// and shipped as the `dvc_stub_server` tool.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <mutex>
#include <string>
#include <thread>

#include "dvc/protocol.hpp"
#include "httplib.h"
#include "json.hpp"

namespace dvc {

struct StubBehavior {
  std::string output = render_verdict_response({"stub", Decision::kYes, 0.91});
  int fail_first = 0;        // first N requests answer 500
  int status_override = 0;   // nonzero: every request answers this status
  int delay_ms = 0;          // sleep before answering
  bool adverse = false;
};

class StubVerifierServer {
 public:
  explicit StubVerifierServer(StubBehavior behavior = {}) : behavior_(std::move(behavior)) {
    auto handle = [this](const httplib::Request& req, httplib::Response& res, bool assess) {
      const int now = in_flight_.fetch_add(1) + 1;
      int seen = max_in_flight_.load();
      while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
      }
      const int n = requests_.fetch_add(1) + 1;
      if (behavior_.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(behavior_.delay_ms));
      {
        std::lock_guard lock(mu_);
        last_authorization_ = req.get_header_value("Authorization");
      }
      if (behavior_.status_override != 0) {
        res.status = behavior_.status_override;
      } else if (n <= behavior_.fail_first) {
        res.status = 500;
      } else {
        nlohmann::json in;
        try {
          in = nlohmann::json::parse(req.body);
        } catch (const std::exception&) {
          res.status = 400;
        }
        if (res.status != 400) {
          nlohmann::json out = {{"version", "1"}, {"request_id", in.value("request_id", std::string{})}};
          if (assess) {
            out["adverse"] = behavior_.adverse;
            out["quality"] = nullptr;
          } else {
            out["output"] = behavior_.output;
          }
          res.set_content(out.dump(), "application/json");
        }
      }
      in_flight_.fetch_sub(1);
    };
    server_.Post("/v1/verify", [handle](const httplib::Request& q, httplib::Response& r) { handle(q, r, false); });
    server_.Post("/v1/assess", [handle](const httplib::Request& q, httplib::Response& r) { handle(q, r, true); });
  }

  ~StubVerifierServer() { stop(); }
  StubVerifierServer(const StubVerifierServer&) = delete;
  StubVerifierServer& operator=(const StubVerifierServer&) = delete;

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw std::runtime_error("stub server could not bind");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  // Blocks in the calling thread.
  bool serve_forever(const std::string& host, int port) { return server_.listen(host, port); }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests() const { return requests_.load(); }
  int max_in_flight() const { return max_in_flight_.load(); }
  std::string last_authorization() const {
    std::lock_guard lock(mu_);
    return last_authorization_;
  }

 private:
  StubBehavior behavior_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<int> requests_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
  mutable std::mutex mu_;
  std::string last_authorization_;
};

}  // namespace dvc
