#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

#include "fixtures.hpp"
#include "mint/service.hpp"

// httplib drags in resolv.h, whose macros clash with Eigen; keep it last.
#include <httplib.h>

using namespace mint;
using namespace mint::testing;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct FakeClock {
  std::shared_ptr<std::chrono::steady_clock::time_point> now =
      std::make_shared<std::chrono::steady_clock::time_point>();
  Clock fn() const {
    auto p = now;
    return [p] { return *p; };
  }
  void advance(std::chrono::seconds s) const { *now += s; }
};

SessionManager make_manager(ServiceOptions opts = {}, Clock clock = {}) {
  const auto& w = small_world();
  return SessionManager(*w.model, w.data.schema, w.ivm, w.data.test, opts, clock);
}

int error_status(const std::function<void()>& fn, std::string* code = nullptr) {
  try {
    fn();
  } catch (const ServiceError& e) {
    if (code) *code = e.code();
    return e.status();
  }
  return 0;
}

json drive_auto(SessionManager& m, const std::string& id) {
  json snap = m.get(id);
  while (!snap.at("finished").get<bool>()) snap = m.answer(id, {{"auto", true}});
  return snap;
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("simulated sessions start with one image and a prompt") {
  auto m = make_manager();
  const auto& w = small_world();
  const auto c = m.create({{"mode", "simulated"}, {"case_id", w.data.test[0].case_id}});
  const auto id = c.at("session_id").get<std::string>();
  CHECK(id.size() == 32u);
  const auto s = m.get(id);
  CHECK(s.at("n_images") == 1);
  CHECK(s.at("n_meta") == 0);
  CHECK(s.at("top_k").size() == 5u);
  CHECK_FALSE(s.at("candidates").empty());
  CHECK(s.at("pending").contains("type"));
  CHECK(m.get(id) == s);  // reads are idempotent
  CHECK(m.next(id).at("pending") == s.at("pending"));
}

TEST_CASE("request errors carry status and code") {
  auto m = make_manager();
  std::string code;
  CHECK(error_status([&] { m.create({{"mode", "simulated"}, {"case_id", 1}, {"engine", "mint:bogus"}}); }, &code) ==
        400);
  CHECK(code == "invalid_engine");
  try {
    m.create({{"mode", "simulated"}, {"case_id", 1}, {"engine", "nope"}});
  } catch (const ServiceError& e) {
    CHECK(std::string(e.what()).find("mint:") != std::string::npos);
  }
  CHECK(error_status([&] { m.create({{"mode", "simulated"}, {"case_id", -42}}); }, &code) == 404);
  CHECK(code == "unknown_case");
  CHECK(error_status([&] { m.create({{"mode", "batch"}}); }) == 400);
  CHECK(error_status([&] { m.get("deadbeef"); }, &code) == 404);
  CHECK(code == "not_found");
  CHECK(error_status([&] { m.remove("deadbeef"); }) == 404);
}

TEST_CASE("sessions on the same case are isolated") {
  auto m = make_manager();
  const auto cid = small_world().data.test[2].case_id;
  const json req{{"mode", "simulated"}, {"case_id", cid}, {"engine", "mint:js:t_meta=-inf:t_image=inf"}};
  const auto a = m.create(req).at("session_id").get<std::string>();
  const auto b = m.create(req).at("session_id").get<std::string>();
  CHECK(a != b);
  const auto before = m.get(b);
  m.answer(a, {{"auto", true}});
  m.answer(a, {{"answer", "unknown"}});
  CHECK(m.get(a).at("n_meta") == 2);
  auto after = m.get(b);
  CHECK(after == before);
}

TEST_CASE("answers: unknown is legal, mismatches leave state alone, history grows") {
  auto m = make_manager();
  const auto& w = small_world();
  const auto cid = w.data.test[1].case_id;
  const auto id = m.create({{"mode", "simulated"}, {"case_id", cid}, {"engine", "mint:js:t_meta=-inf:t_image=inf"}})
                      .at("session_id")
                      .get<std::string>();
  auto s = m.get(id);
  REQUIRE(s.at("pending").at("type") == "metadata");
  const size_t steps = s.at("transcript").at("steps").size();
  std::string code;
  CHECK(error_status([&] { m.answer(id, {{"image", {{"embedding", {1.0}}}}}); }, &code) == 409);
  CHECK(code == "type_mismatch");
  CHECK(error_status([&] { m.answer(id, {{"answer", "perhaps"}}); }, &code) == 400);
  CHECK(code == "invalid_answer");
  CHECK(error_status([&] { m.answer(id, {{"answer", json::array({1})}}); }) == 400);
  CHECK(error_status([&] { m.answer(id, {{"nothing", 1}}); }) == 400);
  CHECK(m.get(id) == s);
  s = m.answer(id, {{"answer", "unknown"}});
  CHECK(s.at("n_meta") == 1);
  CHECK(s.at("transcript").at("steps").size() == steps + 1);
  // The next question is categorical; an index past Unknown is rejected.
  REQUIRE(s.at("pending").at("type") == "metadata");
  const int f = s.at("pending").at("field_id").get<int>();
  REQUIRE(w.data.schema.field(f).is_categorical());
  CHECK(error_status([&] { m.answer(id, {{"answer", w.data.schema.field(f).cardinality() + 1}}); }, &code) == 400);
  CHECK(code == "invalid_answer");
  CHECK(m.get(id) == s);
  s = m.answer(id, {{"answer", w.data.schema.field(f).cardinality()}});
  CHECK(s.at("n_meta") == 2);
  CHECK(s.at("transcript").at("steps").size() == steps + 2);
}

TEST_CASE("image requests reject answers; simulated images come from the case") {
  auto m = make_manager();
  const auto& w = small_world();
  const Case* multi = nullptr;
  for (const auto& c : w.data.test) {
    if (c.images.size() >= 2) {
      multi = &c;
      break;
    }
  }
  REQUIRE(multi);
  const auto id = m.create({{"mode", "simulated"}, {"case_id", multi->case_id}, {"engine", "mint:js:t_meta=inf:t_image=-inf"}})
                      .at("session_id")
                      .get<std::string>();
  const auto s = m.get(id);
  REQUIRE(s.at("pending").at("type") == "image");
  std::string code;
  CHECK(error_status([&] { m.answer(id, {{"answer", 0}}); }, &code) == 409);
  CHECK(code == "type_mismatch");
  CHECK(error_status([&] { m.answer(id, {{"image", {{"embedding", std::vector<double>(16, 0.0)}}}}); }) == 400);
  CHECK(m.get(id) == s);
  CHECK(m.answer(id, {{"auto", true}}).at("n_images") == 2);
}

TEST_CASE("stopped sessions refuse answers but still serve their transcript") {
  auto m = make_manager();
  const auto cid = small_world().data.test[3].case_id;
  const auto id = m.create({{"mode", "simulated"}, {"case_id", cid}, {"engine", "mint:js:t_meta=inf:t_image=inf"}})
                      .at("session_id")
                      .get<std::string>();
  const auto s = m.get(id);
  CHECK(s.at("finished") == true);
  CHECK(s.at("stop_reason") == "below_threshold");
  std::string code;
  CHECK(error_status([&] { m.answer(id, {{"auto", true}}); }, &code) == 410);
  CHECK(code == "gone");
  CHECK(m.get(id).at("transcript") == s.at("transcript"));
}

TEST_CASE("auto-driven sessions reproduce batch transcripts") {
  auto m = make_manager();
  const auto& w = small_world();
  for (const char* engine : {"mint:js:t_meta=0.05:t_image=0:instr=0:start=first",
                             "mint:kl:t_meta=0.1:t_image=0.05:instr=1:start=random:seed=4"}) {
    const auto cfg = EngineConfig::parse(engine);
    for (size_t i = 0; i < 50; ++i) {
      const Case& c = w.data.test[i];
      const auto id =
          m.create({{"mode", "simulated"}, {"case_id", c.case_id}, {"engine", engine}}).at("session_id").get<std::string>();
      drive_auto(m, id);
      const auto batch = run_episode(c, *w.model, w.data.schema, w.ivm, cfg);
      CHECK(m.transcript(id).to_json().dump() == batch.to_json().dump());
      m.remove(id);
    }
  }
  CHECK(m.size() == 0u);
}

TEST_CASE("live sessions wait for their first image and cap uploads") {
  ServiceOptions opts;
  opts.live_max_images = 2;
  auto m = make_manager(opts);
  const auto id = m.create({{"mode", "live"}, {"engine", "mint:js:t_meta=inf:t_image=-inf"}}).at("session_id").get<std::string>();
  auto s = m.get(id);
  CHECK(s.at("awaiting_first_image") == true);
  CHECK(s.at("transcript").is_null());
  std::string code;
  CHECK(error_status([&] { m.answer(id, {{"answer", 0}}); }, &code) == 409);
  CHECK(error_status([&] { m.transcript(id); }) == 409);
  const std::vector<double> emb(16, 0.1);
  s = m.answer(id, {{"image", {{"embedding", emb}, {"view", "far"}}}});
  CHECK(s.at("n_images") == 1);
  CHECK(s.at("images")[0].at("view") == "far");
  CHECK(s.at("pending").at("type") == "image");
  CHECK(error_status([&] { m.answer(id, {{"auto", true}}); }) == 400);
  CHECK(error_status([&] { m.answer(id, {{"image", {{"embedding", {1.0, 2.0}}}}}); }, &code) == 400);
  CHECK(code == "invalid_image");
  CHECK(error_status([&] { m.answer(id, {{"image", {{"embedding", emb}, {"view", "sideways"}}}}); }) == 400);
  s = m.answer(id, {{"image", {{"embedding", emb}}}});
  CHECK(s.at("n_images") == 2);
  CHECK(s.at("finished") == true);  // image cap reached and questions gated off
  CHECK(s.at("transcript").at("label") == -1);

  const auto direct = m.create({{"mode", "live"}, {"first_image", {{"embedding", emb}}}});
  CHECK(direct.at("n_images") == 1);
  CHECK(direct.at("mode") == "live");
}

TEST_CASE("idle sessions expire after the TTL") {
  FakeClock clock;
  ServiceOptions opts;
  opts.ttl = std::chrono::seconds(60);
  auto m = make_manager(opts, clock.fn());
  const auto cid = small_world().data.test[0].case_id;
  const auto a = m.create({{"mode", "simulated"}, {"case_id", cid}}).at("session_id").get<std::string>();
  const auto b = m.create({{"mode", "simulated"}, {"case_id", cid}}).at("session_id").get<std::string>();
  clock.advance(std::chrono::seconds(45));
  m.get(a);  // touching refreshes the idle timer
  clock.advance(std::chrono::seconds(30));
  CHECK(m.get(a).at("session_id") == a);
  CHECK(error_status([&] { m.get(b); }) == 404);
  CHECK(m.size() == 1u);
  clock.advance(std::chrono::seconds(61));
  CHECK(m.purge_expired() == 1u);
  CHECK(m.size() == 0u);
}

TEST_CASE("concurrent sessions stay independent") {
  auto m = make_manager();
  const auto& w = small_world();
  const auto cfg = EngineConfig::parse(ServiceOptions{}.default_engine);
  std::atomic<int> mismatches{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) {
    pool.emplace_back([&, t] {
      for (size_t i = static_cast<size_t>(t); i < 40; i += 4) {
        const Case& c = w.data.test[i];
        const auto id = m.create({{"mode", "simulated"}, {"case_id", c.case_id}}).at("session_id").get<std::string>();
        drive_auto(m, id);
        const auto batch = run_episode(c, *w.model, w.data.schema, w.ivm, cfg);
        if (m.transcript(id).to_json() != batch.to_json()) ++mismatches;
      }
    });
  }
  for (auto& th : pool) th.join();
  CHECK(mismatches == 0);
  CHECK(m.size() == 40u);
}

TEST_CASE("HTTP routes and static files") {
  auto m = make_manager();
  const auto dir = std::filesystem::temp_directory_path() / "mint_static_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "index.html") << "<html>hello</html>";

  httplib::Server server;
  install_routes(server, m, dir.string());
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body).at("status") == "ok");

  auto index = cli.Get("/index.html");
  REQUIRE(index);
  CHECK(index->status == 200);
  CHECK(index->body.find("hello") != std::string::npos);
  auto root = cli.Get("/");
  REQUIRE(root);
  CHECK(root->status == 200);

  auto schema = cli.Get("/schema");
  REQUIRE(schema);
  CHECK(MetadataSchema::from_json(json::parse(schema->body)).fingerprint() == small_world().data.schema.fingerprint());

  const auto cid = small_world().data.test[5].case_id;
  auto created = cli.Post("/sessions", json{{"mode", "simulated"}, {"case_id", cid}}.dump(), "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const auto id = json::parse(created->body).at("session_id").get<std::string>();

  auto next = cli.Get("/sessions/" + id + "/next");
  REQUIRE(next);
  CHECK(next->status == 200);
  json snap = json::parse(cli.Get("/sessions/" + id)->body);
  while (!snap.at("finished").get<bool>()) {
    auto r = cli.Post("/sessions/" + id + "/answer", R"({"auto": true})", "application/json");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    snap = json::parse(r->body);
  }
  const auto batch =
      run_episode(small_world().data.test[5], *small_world().model, small_world().data.schema, small_world().ivm,
                  EngineConfig::parse(ServiceOptions{}.default_engine));
  CHECK(snap.at("transcript").dump() == batch.to_json().dump());

  auto gone = cli.Post("/sessions/" + id + "/answer", R"({"auto": true})", "application/json");
  CHECK(gone->status == 410);
  CHECK(json::parse(gone->body).at("code") == "gone");
  auto bad = cli.Post("/sessions", "{not json", "application/json");
  CHECK(bad->status == 400);
  CHECK(json::parse(bad->body).contains("message"));
  auto missing = cli.Get("/sessions/0123abcd");
  CHECK(missing->status == 404);
  CHECK(cli.Delete("/sessions/" + id)->status == 200);
  CHECK(cli.Get("/sessions/" + id)->status == 404);

  server.stop();
  th.join();
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
