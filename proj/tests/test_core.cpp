#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "fixtures.hpp"
#include "mint/core.hpp"

using namespace mint;
using namespace mint::testing;

TEST_SUITE("core") {

TEST_CASE("empty answers encode as unknown one-hot plus scalar placeholder") {
  const auto schema = yes_no_scalar_schema();
  CHECK(encode_metadata({}, schema) == std::vector<double>{0, 0, 1, 40});
}

TEST_CASE("a single categorical answer sets its one-hot slot") {
  const auto schema = yes_no_scalar_schema();
  CHECK(encode_metadata({{0, CategoricalAnswer{0}}}, schema) == std::vector<double>{1, 0, 0, 40});
  CHECK(encode_metadata({{1, ScalarAnswer{71.5}}}, schema) == std::vector<double>{0, 0, 1, 71.5});
  CHECK(encode_metadata({{1, ScalarUnknown{}}}, schema) == std::vector<double>{0, 0, 1, 40});
}

TEST_CASE("preset schema encodes to 101 slots with one hot per categorical field") {
  const auto schema = dermatology_schema_preset();
  int categorical = 0, slots = 0;
  for (const auto& f : schema.fields()) {
    if (f.is_categorical()) {
      ++categorical;
      slots += f.encoded_width();  // answers plus the unknown slot
    }
  }
  CHECK(categorical == 24);
  CHECK(slots == 100);
  const auto v = encode_metadata({}, schema);
  CHECK(v.size() == 101u);
  int ones = 0;
  for (const auto& f : schema.fields()) {
    if (!f.is_categorical()) continue;
    for (int k = 0; k < f.encoded_width(); ++k) ones += v[static_cast<size_t>(schema.offset(f.id) + k)] == 1.0;
  }
  CHECK(ones == 24);
}

TEST_CASE("encoding rejects answers that do not fit the field") {
  const auto schema = yes_no_scalar_schema();
  CHECK_THROWS_AS(encode_metadata({{0, ScalarAnswer{1.0}}}, schema), EncodingError);
  CHECK_THROWS_AS(encode_metadata({{0, CategoricalAnswer{3}}}, schema), EncodingError);
  CHECK_THROWS_AS(encode_metadata({{1, CategoricalAnswer{0}}}, schema), EncodingError);
  CHECK_THROWS_AS(encode_metadata({{1, ScalarAnswer{std::nan("")}}}, schema), EncodingError);
  CHECK_THROWS(encode_metadata({{5, CategoricalAnswer{0}}}, schema));
}

TEST_CASE("distinct answer maps encode differently apart from unknown") {
  const auto schema = yes_no_scalar_schema();
  std::vector<AnswerMap> maps = {{}, {{0, CategoricalAnswer{0}}}, {{0, CategoricalAnswer{1}}},
                                 {{1, ScalarAnswer{10}}}, {{0, CategoricalAnswer{1}}, {1, ScalarAnswer{10}}}};
  for (size_t i = 0; i < maps.size(); ++i) {
    for (size_t j = i + 1; j < maps.size(); ++j) {
      CHECK(encode_metadata(maps[i], schema) != encode_metadata(maps[j], schema));
    }
  }
  // Answering Unknown is indistinguishable from not asking.
  CHECK(encode_metadata({{0, CategoricalAnswer{2}}}, schema) == encode_metadata({}, schema));
}

TEST_CASE("schema construction validates ids, percentiles and options") {
  CHECK_THROWS_AS(MetadataSchema({categorical_field(1, "a", 2)}), SchemaError);
  CHECK_THROWS_AS(MetadataSchema({categorical_field(0, "a", 0)}), SchemaError);
  CHECK_THROWS_AS(MetadataSchema({scalar_field(0, "s", 50, 40, 60)}), SchemaError);
  auto f = categorical_field(0, "a", 2);
  f.options = {"only one"};
  CHECK_THROWS_AS(MetadataSchema({f}), SchemaError);
}

TEST_CASE("image pooling is the element-wise mean") {
  std::vector<Embedding> two = {{1, 2}, {3, 4}};
  CHECK(pool_image_embeddings(two, 2) == Embedding{2, 3});
  std::vector<Embedding> one = {{5, 5}};
  CHECK(pool_image_embeddings(one, 2) == Embedding{5, 5});
  CHECK(pool_image_embeddings({}, 3) == Embedding{0, 0, 0});
  std::vector<Embedding> bad = {{1, 2, 3}};
  CHECK_THROWS(pool_image_embeddings(bad, 2));
}

TEST_CASE("predictive distribution validates and ranks with ties to the lower index") {
  CHECK_THROWS(PredictiveDistribution({0.5, 0.6}));
  CHECK_THROWS(PredictiveDistribution({-0.1, 1.1}));
  PredictiveDistribution p({0.2, 0.4, 0.2, 0.2});
  CHECK(p.ranking() == std::vector<int>{1, 0, 2, 3});
  CHECK(p.top_k(2) == std::vector<int>{1, 0});
  CHECK(p.in_top_k(0, 2));
  CHECK_FALSE(p.in_top_k(2, 2));
}

TEST_CASE("json round trips for schema, answers, cases and infinities") {
  const auto schema = dermatology_schema_preset();
  const auto back = MetadataSchema::from_json(schema.to_json());
  CHECK(back.fingerprint() == schema.fingerprint());
  CHECK(back.encoded_width() == schema.encoded_width());

  const auto s2 = yes_no_scalar_schema();
  Case c = simple_case(42, 2, 3, 1);
  c.metadata = {{0, CategoricalAnswer{1}}, {1, ScalarAnswer{0.1 + 0.2}}};
  c.difficulty = 0.3;
  c.severity = Severity::High;
  const auto c2 = case_from_json(case_to_json(c), s2);
  CHECK(c2.case_id == 42);
  CHECK(c2.metadata == c.metadata);
  CHECK(c2.images[1].embedding == c.images[1].embedding);
  CHECK(c2.severity == Severity::High);

  CHECK(real_from_json(real_to_json(std::numeric_limits<double>::infinity())) ==
        std::numeric_limits<double>::infinity());
  CHECK(real_from_json(real_to_json(-std::numeric_limits<double>::infinity())) ==
        -std::numeric_limits<double>::infinity());
  CHECK(real_from_json(real_to_json(0.1)) == 0.1);
}

TEST_CASE("case files round trip through JSONL") {
  const auto& w = small_world();
  const auto path = std::filesystem::temp_directory_path() / "mint_core_cases.jsonl";
  write_cases_jsonl(path.string(), w.data.val);
  const auto back = read_cases_jsonl(path.string(), w.data.schema);
  REQUIRE(back.size() == w.data.val.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].metadata == w.data.val[i].metadata);
    CHECK(back[i].images.size() == w.data.val[i].images.size());
    CHECK(back[i].images[0].embedding == w.data.val[i].images[0].embedding);
  }
  std::filesystem::remove(path);
}

TEST_CASE("view and severity tokens round trip") {
  for (auto v : kAllViews) CHECK(parse_view(to_string(v)) == v);
  for (auto s : kAllSeverities) CHECK(parse_severity(to_string(s)) == s);
  CHECK_THROWS(parse_view("sideways"));
}

}  // TEST_SUITE
