#pragma once
// In-memory interactive sessions plus their JSON-over-HTTP front end.

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "mint/core.hpp"
#include "mint/engine.hpp"

namespace httplib {
class Server;
}

namespace mint {

// Carries the HTTP status and a stable machine-readable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }
  json to_json() const { return {{"code", code_}, {"message", what()}}; }

 private:
  int status_;
  std::string code_;
};

struct ServiceOptions {
  std::chrono::seconds ttl{30 * 60};
  int top_k = 5;
  int live_max_images = 6;
  std::string default_engine = "mint:js:t_meta=0:t_image=0:instr=0:start=first";
};

using Clock = std::function<std::chrono::steady_clock::time_point()>;

class SessionManager {
 public:
  // The model, schema, value model and case pool must outlive the manager;
  // all of them are shared read-only between sessions.
  SessionManager(const Classifier& model, const MetadataSchema& schema, const ImageValueModel& ivm,
                 std::vector<Case> cases, ServiceOptions options = {}, Clock clock = {});

  // {"mode": "simulated", "case_id": N, "engine": token}
  // {"mode": "live", "engine": token, "first_image": {"embedding": [...], "view": "near"}}
  // A live session without first_image waits for it as its first answer.
  json create(const json& request);
  json get(const std::string& id);
  json next(const std::string& id);
  // {"auto": true} reveals the bound case's input (simulated sessions);
  // {"answer": value} answers a question; {"image": {"embedding": [...], "view": v}} uploads.
  json answer(const std::string& id, const json& request);
  void remove(const std::string& id);
  json schema_json() const;

  size_t size() const;
  // Drops sessions idle longer than the TTL; returns how many went.
  size_t purge_expired();

  // The session's transcript as it would be written by the batch runner.
  EpisodeTranscript transcript(const std::string& id);

 private:
  struct Session {
    std::mutex mu;
    std::string id;
    bool simulated = true;
    const Case* bound = nullptr;
    std::optional<Episode> episode;  // empty until a live session's first image
    EngineConfig config;
    std::chrono::steady_clock::time_point created_at, last_access;
    int64_t created_seq = 0;
  };

  std::shared_ptr<Session> find(const std::string& id);
  json snapshot(const Session& s) const;
  json prompt(const Session& s) const;
  std::string new_id();

  const Classifier& model_;
  const MetadataSchema& schema_;
  const ImageValueModel& ivm_;
  std::vector<Case> cases_;
  std::map<int64_t, size_t> case_index_;
  ServiceOptions options_;
  Clock clock_;

  mutable std::shared_mutex registry_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex id_mu_;
  uint64_t id_state_;
  int64_t seq_ = 0;
};

// Routes: POST /sessions, GET|DELETE /sessions/{id}, POST /sessions/{id}/answer,
// GET /sessions/{id}/next, GET /schema, GET /healthz; static files under /
// when static_dir is non-empty and exists.
void install_routes(httplib::Server& server, SessionManager& manager, const std::string& static_dir);

}  // namespace mint
