#pragma once

// Remote verifier speaking a small versioned JSON envelope over HTTP.
//
//   POST /v1/verify  {"version": "1", "request_id": "...", "frame_id": "...",
//                     "image_ref": "...", "crop": [x1,y1,x2,y2],
//                     "context_crop": [x1,y1,x2,y2], "scale": 1.0, "prompt": "..."}
//            reply   {"version": "1", "request_id": "...", "output": "<raw model text>"}
//
//   POST /v1/assess  {"version": "1", "request_id": "...", "frame_id": "...", "image_ref": "..."}
//            reply   {"version": "1", "request_id": "...", "adverse": bool,
//                     "quality": {...} | null, "aleatoric": number (optional)}
//
// Connection failures and 5xx replies are retried with exponential backoff;
// 4xx replies, read timeouts and malformed envelopes fail immediately.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <semaphore>
#include <string>
#include <thread>

#include "dvc/backends.hpp"
#include "httplib.h"

namespace dvc {

inline constexpr const char* kWireVersion = "1";
inline constexpr const char* kTokenEnvVar = "DVC_HTTP_TOKEN";

struct HttpVerifierOptions {
  std::string endpoint = "http://127.0.0.1:8080";
  std::string auth_token;  // sent as a bearer token when non-empty
  int timeout_ms = 2000;
  int max_attempts = 3;
  int backoff_ms = 100;
  double backoff_multiplier = 2.0;
  int max_in_flight = 4;
};

class HttpVerifier final : public VerifierBackend {
 public:
  static constexpr std::ptrdiff_t kMaxInFlightCap = 1024;

  explicit HttpVerifier(HttpVerifierOptions options)
      : options_(std::move(options)), slots_(validated_slots(options_)) {
    if (options_.auth_token.empty()) {
      if (const char* token = std::getenv(kTokenEnvVar)) options_.auth_token = token;
    }
  }

  BackendInfo info() const override { return {"http-verifier", kWireVersion}; }

  const HttpVerifierOptions& options() const noexcept { return options_; }

  GlobalAssessment assess_global(const FrameRecord& frame) override {
    const std::string id = next_request_id(frame.frame_id);
    const json body = {{"version", kWireVersion}, {"request_id", id}, {"frame_id", frame.frame_id},
                       {"image_ref", frame.image_ref}};
    int retries = 0;
    const json reply = call("/v1/assess", body, id, retries);
    try {
      GlobalAssessment a;
      a.adverse = reply.at("adverse").get<bool>();
      if (reply.contains("quality") && !reply.at("quality").is_null()) {
        a.quality = detail::quality_from_json(reply.at("quality"));
      }
      if (reply.contains("aleatoric")) a.aleatoric = reply.at("aleatoric").get<double>();
      return a;
    } catch (const std::exception& e) {
      throw BackendError(std::string("malformed assess envelope: ") + e.what(), retries);
    }
  }

  VerifyReply verify(const FrameRecord& frame, const VerifyRequest& request) override {
    const std::string id = next_request_id(frame.frame_id);
    const auto box = [](const BoundingBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); };
    const json body = {{"version", kWireVersion},       {"request_id", id},
                       {"frame_id", request.frame_id},   {"image_ref", request.image_ref},
                       {"crop", box(request.crop)},      {"context_crop", box(request.context_crop)},
                       {"scale", request.scale},         {"prompt", request.prompt}};
    int retries = 0;
    const json reply = call("/v1/verify", body, id, retries);
    const auto it = reply.find("output");
    if (it == reply.end() || !it->is_string()) {
      throw BackendError("malformed verify envelope: missing output", retries);
    }
    return {it->get<std::string>(), retries};
  }

 private:
  static std::ptrdiff_t validated_slots(const HttpVerifierOptions& o) {
    if (o.max_in_flight < 1 || o.max_in_flight > kMaxInFlightCap) {
      throw std::invalid_argument("max_in_flight must lie in [1, 1024]");
    }
    if (o.max_attempts < 1) throw std::invalid_argument("max_attempts must be >= 1");
    if (o.timeout_ms < 1) throw std::invalid_argument("timeout_ms must be >= 1");
    return o.max_in_flight;
  }

  // Holds one in-flight slot; released on every exit path.
  class Slot {
   public:
    explicit Slot(std::counting_semaphore<kMaxInFlightCap>& s) : s_(s) { s_.acquire(); }
    ~Slot() { s_.release(); }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

   private:
    std::counting_semaphore<kMaxInFlightCap>& s_;
  };

  std::string next_request_id(const std::string& frame_id) {
    return frame_id + "#" + std::to_string(counter_.fetch_add(1) + 1);
  }

  json call(const std::string& path, const json& body, const std::string& request_id, int& retries) {
    Slot slot(slots_);
    const std::string payload = body.dump();
    httplib::Headers headers;
    if (!options_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + options_.auth_token);

    double backoff = options_.backoff_ms;
    std::string last_error;
    for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
      if (attempt > 1) {
        ++retries;
        std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(backoff));
        backoff *= options_.backoff_multiplier;
      }
      httplib::Client client(options_.endpoint);
      const auto timeout = std::chrono::milliseconds(options_.timeout_ms);
      client.set_connection_timeout(timeout);
      client.set_read_timeout(timeout);
      client.set_write_timeout(timeout);
      const auto res = client.Post(path, headers, payload, "application/json");
      if (!res) {
        const auto err = res.error();
        last_error = "transport error: " + httplib::to_string(err);
        if (err == httplib::Error::Connection || err == httplib::Error::ConnectionTimeout) continue;
        throw BackendError(last_error, retries);
      }
      if (res->status >= 500) {
        last_error = "server error " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw BackendError("request rejected with status " + std::to_string(res->status), retries);
      }
      json reply;
      try {
        reply = json::parse(res->body);
      } catch (const std::exception&) {
        throw BackendError("malformed transport envelope", retries);
      }
      if (!reply.is_object() || reply.value("request_id", std::string{}) != request_id) {
        throw BackendError("malformed transport envelope: request id not echoed", retries);
      }
      return reply;
    }
    throw BackendError("retries exhausted after " + std::to_string(options_.max_attempts) +
                           " attempts: " + last_error,
                       retries);
  }

  HttpVerifierOptions options_;
  std::counting_semaphore<kMaxInFlightCap> slots_;
  std::atomic<std::uint64_t> counter_{0};
};

}  // namespace dvc
