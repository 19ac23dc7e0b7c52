#include <doctest.h>

#include <limits>
#include <set>

#include "fixtures.hpp"
#include "mint/baselines.hpp"
#include "mint/calibrate.hpp"
#include "mint/evalharness.hpp"

using namespace mint;
using namespace mint::testing;

namespace {

std::vector<int> meta_counts(std::span<const EpisodeTranscript> ts) {
  std::vector<int> out;
  for (const auto& t : ts) out.push_back(t.n_meta());
  return out;
}

// Label 3 is only in the top 3 when some field is answered with index 0.
FnClassifier two_field_toy() {
  return FnClassifier(4, [](std::span<const Embedding>, const AnswerMap& a) -> std::vector<double> {
    for (const auto& [f, v] : a) {
      if (std::get<CategoricalAnswer>(v).index == 0) return {0.1, 0.2, 0.3, 0.4};
    }
    return {0.4, 0.3, 0.2, 0.1};
  });
}

std::vector<Case> two_field_cases() {
  std::vector<Case> cs;
  for (int i = 0; i < 10; ++i) {
    Case c = simple_case(i, 1, 2, 3);
    c.metadata[0] = CategoricalAnswer{i < 6 ? 0 : 1};
    c.metadata[1] = CategoricalAnswer{i < 9 ? 0 : 1};
    cs.push_back(c);
  }
  return cs;
}

}  // namespace

TEST_SUITE("baselines") {

TEST_CASE("global order ignores metadata the model ignores") {
  const auto schema = MetadataSchema({categorical_field(0, "a", 2), categorical_field(1, "b", 3),
                                      categorical_field(2, "c", 2)});
  FnClassifier blind(4, [](std::span<const Embedding>, const AnswerMap&) {
    return std::vector<double>{0.4, 0.3, 0.2, 0.1};
  });
  std::vector<Case> cs;
  for (int i = 0; i < 5; ++i) {
    Case c = simple_case(i, 1, 2, i % 4);
    c.metadata = {{0, CategoricalAnswer{0}}, {1, CategoricalAnswer{2}}, {2, CategoricalAnswer{1}}};
    cs.push_back(c);
  }
  CHECK(fit_global_order(cs, blind, schema) == std::vector<int>{0, 1, 2});
  CHECK_THROWS_AS(fit_global_order({}, blind, schema), DatasetError);
}

TEST_CASE("global order starts with the most useful field") {
  const auto schema = MetadataSchema({categorical_field(0, "weak", 2), categorical_field(1, "strong", 2)});
  const auto m = two_field_toy();
  const auto cs = two_field_cases();
  // Direct evaluation of each field alone.
  auto alone = [&](int f) {
    std::vector<PredictiveDistribution> preds;
    std::vector<int> labels;
    for (const auto& c : cs) {
      preds.push_back(m.predict({}, {{f, c.metadata.at(f)}}, schema));
      labels.push_back(c.label);
    }
    return topk_accuracy(preds, labels, 3);
  };
  CHECK(alone(0) == doctest::Approx(0.6));
  CHECK(alone(1) == doctest::Approx(0.9));
  const auto order = fit_global_order(cs, m, schema);
  CHECK(order == std::vector<int>{1, 0});
  CHECK(fit_global_order(cs, m, schema) == order);
}

TEST_CASE("global order on generated data is a permutation and deterministic") {
  const auto& w = small_world();
  const auto val = std::span(w.data.val).first(100);
  const auto a = fit_global_order(val, *w.model, w.data.schema);
  const auto b = fit_global_order(val, *w.model, w.data.schema);
  CHECK(a == b);
  CHECK(std::set<int>(a.begin(), a.end()).size() == static_cast<size_t>(w.data.schema.size()));
}

TEST_CASE("MSP early stopping limits") {
  const auto& w = small_world();
  for (size_t i = 0; i < 40; ++i) {
    const Case& c = w.data.test[i];
    const auto t0 = run_policy(MspPolicy{0.0, 3}, c, *w.model, w.data.schema, w.ivm);
    CHECK(t0.n_images() == 1);
    CHECK(t0.n_meta() == 0);
    const auto t1 = run_policy(MspPolicy{1.5, 3}, c, *w.model, w.data.schema, w.ivm);
    CHECK(t1.n_images() == static_cast<int>(c.images.size()));
    CHECK(t1.n_meta() == 0);
    CHECK(t1.stop_reason == StopReason::InputsExhausted);
  }
}

TEST_CASE("fixed budgets reproduce the image-only and all-input rows") {
  const auto& w = small_world();
  const FixedBudgetPolicy image_only{std::nullopt, 0, 0, 0, std::nullopt};
  const FixedBudgetPolicy everything{};
  for (size_t i = 0; i < 30; ++i) {
    const Case& c = w.data.test[i];
    const auto a = run_policy(image_only, c, *w.model, w.data.schema, w.ivm);
    CHECK(a.n_meta() == 0);
    CHECK(a.n_images() == static_cast<int>(c.images.size()));
    std::vector<Embedding> imgs;
    for (const auto& im : c.images) imgs.push_back(im.embedding);
    CHECK(a.final_prediction == w.model->predict(imgs, {}, w.data.schema));
    const auto b = run_policy(everything, c, *w.model, w.data.schema, w.ivm);
    CHECK(b.n_inputs() == static_cast<int>(c.images.size()) + w.data.schema.size());
    CHECK(b.final_prediction == predict_full(c, *w.model, w.data.schema));
  }
}

TEST_CASE("fixed total-input budget never exceeds the cap") {
  const auto& w = small_world();
  const auto ts = run_policy(parse_policy("fixed:inputs=4"), std::span(w.data.test).first(40), *w.model,
                             w.data.schema, w.ivm);
  for (const auto& t : ts) CHECK(t.n_inputs() == 4);
}

TEST_CASE("random policy is reproducible per seed") {
  const auto& w = small_world();
  const auto cases = std::span(w.data.test).first(20);
  const auto a = run_policy(RandomPolicy{4, std::nullopt}, cases, *w.model, w.data.schema, w.ivm);
  const auto b = run_policy(RandomPolicy{4, std::nullopt}, cases, *w.model, w.data.schema, w.ivm);
  const auto c = run_policy(RandomPolicy{5, std::nullopt}, cases, *w.model, w.data.schema, w.ivm);
  bool any_diff = false;
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].to_json() == b[i].to_json());
    any_diff = any_diff || a[i].acquired_fields() != c[i].acquired_fields();
  }
  CHECK(any_diff);
}

TEST_CASE("static policies acquire the same count for every case") {
  const auto& w = small_world();
  const auto cases = std::span(w.data.test).first(60);
  const auto order = fit_global_order(std::span(w.data.val).first(60), *w.model, w.data.schema);
  for (const Policy& p : {Policy{RandomPolicy{1, 5}}, Policy{GlobalStaticPolicy{order, 5}},
                          Policy{RandomPolicy{2, std::nullopt}}}) {
    const auto counts = meta_counts(run_policy(p, cases, *w.model, w.data.schema, w.ivm));
    std::vector<double> d(counts.begin(), counts.end());
    CHECK(variance(d) == 0.0);
  }
  EngineConfig cfg;
  cfg.t_meta = 0.05;
  const auto counts = meta_counts(run_policy(MintPolicy{cfg}, cases, *w.model, w.data.schema, w.ivm));
  std::vector<double> d(counts.begin(), counts.end());
  CHECK(variance(d) > 0.0);
}

TEST_CASE("global policy with a bad order is rejected") {
  const auto& w = small_world();
  CHECK_THROWS_AS(run_policy(GlobalStaticPolicy{}, w.data.test[0], *w.model, w.data.schema, w.ivm),
                  std::invalid_argument);
  std::vector<int> dup(static_cast<size_t>(w.data.schema.size()), 0);
  CHECK_THROWS_AS(run_policy(GlobalStaticPolicy{dup, std::nullopt}, w.data.test[0], *w.model, w.data.schema, w.ivm),
                  std::invalid_argument);
}

TEST_CASE("policy tokens") {
  for (const char* tok : {"random:seed=7", "random:seed=7:meta=3", "global:order=1,0,2", "msp:tau=0.8:seed=2",
                          "fixed:inputs=3:metric=kl:t_meta=0.1:t_image=0", "fixed:meta=3:images=all:order=schema",
                          "fixed:meta=all:images=2:order=js", "mint:js:t_meta=0.02:t_image=0:instr=1:start=all"}) {
    const auto p = parse_policy(tok);
    CHECK(policy_token(parse_policy(policy_token(p))) == policy_token(p));
  }
  CHECK(std::holds_alternative<MintPolicy>(parse_policy("mint:kl")));
  CHECK(std::get<RandomPolicy>(parse_policy("random:seed=9:meta=2")).n_meta == 2);
  CHECK(std::get<GlobalStaticPolicy>(parse_policy("global")).order.empty());
  for (const char* bad : {"", "oracle", "random:seed=x", "msp:tau=-1", "fixed:inputs=0",
                          "fixed:inputs=2:meta=1", "global:order=a", "random:colour=red"}) {
    CHECK_THROWS_AS(parse_policy(bad), std::invalid_argument);
  }
}

}  // TEST_SUITE

TEST_SUITE("baselines") {

TEST_CASE("image-only MINT against matched MSP on default data") {
  const auto& w = default_world();
  auto summary = [&](std::span<const EpisodeTranscript> ts) {
    std::vector<PredictiveDistribution> p;
    std::vector<int> l;
    double images = 0;
    for (const auto& t : ts) {
      p.push_back(t.final_prediction);
      l.push_back(t.label);
      images += t.n_images();
    }
    return std::pair{topk_accuracy(p, l, 3), images / static_cast<double>(ts.size())};
  };
  EngineConfig cfg;
  cfg.t_meta = std::numeric_limits<double>::infinity();
  cfg.t_image = 0.05;
  const auto [mint_acc, mint_images] = summary(run_episodes(w.data.test, *w.model, w.data.schema, w.ivm, cfg));
  const double tau = fit_msp_tau(w.data.val, *w.model, w.data.schema, mint_images);
  const auto [msp_acc, msp_images] = summary(run_policy(MspPolicy{tau, 1}, w.data.test, *w.model, w.data.schema, w.ivm));
  MESSAGE("mint top3 " << mint_acc << " at " << mint_images << " images; msp top3 " << msp_acc << " at "
                       << msp_images << " images");
  // Comparable accuracy at a matched image budget.
  CHECK(std::abs(mint_acc - msp_acc) <= 0.05);
  CHECK(std::abs(mint_images - msp_images) <= 0.3);
  // The image value signal on this generator is weak, so MINT is not
  // expected to beat MSP here; the direction is reported, not required.
  WARN(mint_acc >= msp_acc);
}

}  // TEST_SUITE
