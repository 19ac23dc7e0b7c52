#include "mint/service.hpp"

#include <filesystem>
#include <random>

#include <httplib.h>

namespace mint {

namespace {

json top_k_json(const PredictiveDistribution& p, int k) {
  json out = json::array();
  if (p.empty()) return out;
  for (int c : p.top_k(std::min<int>(k, static_cast<int>(p.size())))) {
    out.push_back({{"class", c}, {"prob", p[static_cast<size_t>(c)]}});
  }
  return out;
}

Embedding embedding_from_json(const json& j) {
  if (!j.is_array()) throw ServiceError(400, "invalid_image", "embedding must be an array of numbers");
  Embedding e;
  for (const auto& x : j) {
    if (!x.is_number()) throw ServiceError(400, "invalid_image", "embedding must be an array of numbers");
    e.push_back(x.get<double>());
  }
  return e;
}

ViewType view_from_json(const json& image) {
  if (!image.contains("view")) return ViewType::Near;
  try {
    return parse_view(image.at("view").get<std::string>());
  } catch (const std::exception& e) {
    throw ServiceError(400, "invalid_image", e.what());
  }
}

}  // namespace

SessionManager::SessionManager(const Classifier& model, const MetadataSchema& schema,
                               const ImageValueModel& ivm, std::vector<Case> cases,
                               ServiceOptions options, Clock clock)
    : model_(model),
      schema_(schema),
      ivm_(ivm),
      cases_(std::move(cases)),
      options_(std::move(options)),
      clock_(clock ? std::move(clock) : Clock([] { return std::chrono::steady_clock::now(); })) {
  for (size_t i = 0; i < cases_.size(); ++i) case_index_[cases_[i].case_id] = i;
  std::random_device rd;
  id_state_ = (static_cast<uint64_t>(rd()) << 32) ^ rd();
}

std::string SessionManager::new_id() {
  std::lock_guard lock(id_mu_);
  std::mt19937_64 rng(id_state_);
  const uint64_t a = rng(), b = rng();
  id_state_ = rng();
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(a),
                static_cast<unsigned long long>(b));
  return buf;
}

json SessionManager::create(const json& request) {
  if (!request.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
  const std::string mode = request.value("mode", std::string("simulated"));
  const std::string token = request.value("engine", options_.default_engine);
  EngineConfig config;
  try {
    config = EngineConfig::parse(token);
  } catch (const std::invalid_argument& e) {
    throw ServiceError(400, "invalid_engine", e.what());
  }

  auto s = std::make_shared<Session>();
  s->config = config;
  if (mode == "simulated") {
    if (!request.contains("case_id") || !request.at("case_id").is_number_integer()) {
      throw ServiceError(400, "bad_request", "simulated sessions need an integer case_id");
    }
    const auto id = request.at("case_id").get<int64_t>();
    auto it = case_index_.find(id);
    if (it == case_index_.end()) throw ServiceError(404, "unknown_case", "no case with id " + std::to_string(id));
    s->simulated = true;
    s->bound = &cases_[it->second];
    s->episode.emplace(model_, schema_, ivm_, config);
    s->episode->begin(*s->bound);
  } else if (mode == "live") {
    s->simulated = false;
    if (request.contains("first_image")) {
      const auto& im = request.at("first_image");
      s->episode.emplace(model_, schema_, ivm_, config);
      try {
        s->episode->begin_live(0, embedding_from_json(im.at("embedding")), view_from_json(im),
                               options_.live_max_images);
      } catch (const EncodingError& e) {
        throw ServiceError(400, "invalid_image", e.what());
      }
    }
  } else {
    throw ServiceError(400, "bad_request", "mode must be \"simulated\" or \"live\"");
  }

  purge_expired();
  s->id = new_id();
  s->created_at = s->last_access = clock_();
  std::unique_lock lock(registry_mu_);
  s->created_seq = ++seq_;
  sessions_[s->id] = s;
  std::lock_guard slock(s->mu);
  return snapshot(*s);
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) {
  std::shared_ptr<Session> s;
  {
    std::shared_lock lock(registry_mu_);
    auto it = sessions_.find(id);
    if (it != sessions_.end()) s = it->second;
  }
  if (!s) throw ServiceError(404, "not_found", "no session " + id);
  const auto now = clock_();
  {
    std::lock_guard slock(s->mu);
    if (now - s->last_access <= options_.ttl) {
      s->last_access = now;
      return s;
    }
  }
  std::unique_lock lock(registry_mu_);
  sessions_.erase(id);
  throw ServiceError(404, "not_found", "session " + id + " expired");
}

size_t SessionManager::purge_expired() {
  const auto now = clock_();
  std::unique_lock lock(registry_mu_);
  size_t n = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    bool expired;
    {
      std::lock_guard slock(it->second->mu);
      expired = now - it->second->last_access > options_.ttl;
    }
    if (expired) {
      it = sessions_.erase(it);
      ++n;
    } else {
      ++it;
    }
  }
  return n;
}

size_t SessionManager::size() const {
  std::shared_lock lock(registry_mu_);
  return sessions_.size();
}

json SessionManager::prompt(const Session& s) const {
  json j = {{"session_id", s.id}};
  if (!s.episode) {
    j["finished"] = false;
    j["awaiting_first_image"] = true;
    j["pending"] = action_to_json(AcquireImage{});
    j["candidates"] = json::array();
    j["top_k"] = json::array();
    return j;
  }
  const Episode& e = *s.episode;
  j["finished"] = e.finished();
  j["awaiting_first_image"] = false;
  j["pending"] = action_to_json(e.pending());
  json cands = json::array();
  for (const auto& c : e.candidates()) cands.push_back(candidate_to_json(c));
  j["candidates"] = cands;
  j["top_k"] = top_k_json(e.state().prediction, options_.top_k);
  if (e.finished()) j["stop_reason"] = std::string(to_string(e.transcript().stop_reason));
  return j;
}

json SessionManager::snapshot(const Session& s) const {
  json j = prompt(s);
  j["mode"] = s.simulated ? "simulated" : "live";
  j["engine"] = s.config.token();
  j["created_seq"] = s.created_seq;
  j["ttl_seconds"] = options_.ttl.count();
  if (s.bound) j["case_id"] = s.bound->case_id;
  if (!s.episode) {
    j["images"] = json::array();
    j["answers"] = json::object();
    j["transcript"] = nullptr;
    return j;
  }
  const auto& st = s.episode->state();
  json images = json::array();
  for (const auto& im : st.images) {
    json ij = {{"source_index", im.source_index},
               {"view", std::string(to_string(im.view))},
               {"substituted", im.substituted}};
    if (im.requested) ij["requested"] = std::string(to_string(*im.requested));
    images.push_back(ij);
  }
  json answers = json::object();
  for (const auto& [f, a] : st.answers) answers[schema_.field(f).name] = answer_to_json(a);
  j["images"] = images;
  j["answers"] = answers;
  j["n_images"] = st.images.size();
  j["n_meta"] = st.answers.size();
  j["transcript"] = s.episode->transcript().to_json();
  return j;
}

json SessionManager::get(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return snapshot(*s);
}

json SessionManager::next(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return prompt(*s);
}

EpisodeTranscript SessionManager::transcript(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  if (!s->episode) throw ServiceError(409, "no_transcript", "session has no image yet");
  return s->episode->transcript();
}

json SessionManager::answer(const std::string& id, const json& request) {
  if (!request.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
  auto s = find(id);
  std::lock_guard lock(s->mu);

  if (!s->episode) {
    if (!request.contains("image")) {
      throw ServiceError(409, "type_mismatch", "the session is waiting for its first image");
    }
    const auto& im = request.at("image");
    Episode ep(model_, schema_, ivm_, s->config);
    try {
      ep.begin_live(0, embedding_from_json(im.at("embedding")), view_from_json(im), options_.live_max_images);
    } catch (const EncodingError& e) {
      throw ServiceError(400, "invalid_image", e.what());
    }
    s->episode.emplace(std::move(ep));
    return snapshot(*s);
  }

  Episode& e = *s->episode;
  if (e.finished()) throw ServiceError(410, "gone", "the session has already stopped");
  const bool wants_meta = std::holds_alternative<AcquireMetadata>(e.pending());

  if (request.value("auto", false)) {
    if (!s->simulated) throw ServiceError(400, "bad_request", "auto answers need a simulated session");
    if (wants_meta) {
      e.answer_metadata_from_case();
    } else {
      e.provide_image();
    }
  } else if (request.contains("answer")) {
    if (!wants_meta) throw ServiceError(409, "type_mismatch", "an image was requested, not an answer");
    const auto& field = schema_.field(std::get<AcquireMetadata>(e.pending()).field_id);
    AnswerValue a;
    try {
      a = answer_from_json(request.at("answer"), field);
      e.answer_metadata(a);
    } catch (const EncodingError& err) {
      throw ServiceError(400, "invalid_answer", err.what());
    } catch (const DatasetError& err) {
      throw ServiceError(400, "invalid_answer", err.what());
    } catch (const json::exception& err) {
      throw ServiceError(400, "invalid_answer", err.what());
    }
  } else if (request.contains("image")) {
    if (wants_meta) throw ServiceError(409, "type_mismatch", "a question was asked, not an image");
    if (s->simulated) {
      throw ServiceError(400, "bad_request", "simulated sessions reveal images from their case; send {\"auto\": true}");
    }
    const auto& im = request.at("image");
    try {
      e.provide_image(embedding_from_json(im.at("embedding")), view_from_json(im));
    } catch (const EncodingError& err) {
      throw ServiceError(400, "invalid_image", err.what());
    }
  } else {
    throw ServiceError(400, "bad_request", "expected one of \"auto\", \"answer\" or \"image\"");
  }
  return snapshot(*s);
}

void SessionManager::remove(const std::string& id) {
  std::unique_lock lock(registry_mu_);
  if (sessions_.erase(id) == 0) throw ServiceError(404, "not_found", "no session " + id);
}

json SessionManager::schema_json() const { return schema_.to_json(); }

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ServiceError& e) {
    send_json(res, e.status(), e.to_json());
  } catch (const json::exception& e) {
    send_json(res, 400, {{"code", "bad_request"}, {"message", e.what()}});
  } catch (const PreconditionError& e) {
    send_json(res, 409, {{"code", "precondition"}, {"message", e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"code", "internal"}, {"message", e.what()}});
  }
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ServiceError(400, "bad_json", e.what());
  }
}

}  // namespace

void install_routes(httplib::Server& server, SessionManager& manager, const std::string& static_dir) {
  server.Post("/sessions", [&manager](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 201, manager.create(parse_body(req))); });
  });
  server.Get(R"(/sessions/([0-9a-f]+))", [&manager](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, manager.get(req.matches[1])); });
  });
  server.Delete(R"(/sessions/([0-9a-f]+))", [&manager](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      manager.remove(req.matches[1]);
      send_json(res, 200, {{"deleted", std::string(req.matches[1])}});
    });
  });
  server.Post(R"(/sessions/([0-9a-f]+)/answer)", [&manager](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, manager.answer(req.matches[1], parse_body(req))); });
  });
  server.Get(R"(/sessions/([0-9a-f]+)/next)", [&manager](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, manager.next(req.matches[1])); });
  });
  server.Get("/schema", [&manager](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, manager.schema_json()); });
  });
  server.Get("/healthz", [&manager](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"sessions", manager.size()}});
  });
  if (!static_dir.empty() && std::filesystem::is_directory(static_dir)) {
    server.set_mount_point("/", static_dir);
  }
}

}  // namespace mint
