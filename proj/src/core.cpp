#include "mint/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace mint {

std::string_view to_string(ViewType v) {
  switch (v) {
    case ViewType::Near: return "near";
    case ViewType::Far: return "far";
    case ViewType::Other: return "other";
  }
  return "other";
}

ViewType parse_view(std::string_view token) {
  if (token == "near") return ViewType::Near;
  if (token == "far") return ViewType::Far;
  if (token == "other") return ViewType::Other;
  throw DatasetError("unknown view type '" + std::string(token) + "'");
}

std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::Low: return "low";
    case Severity::Medium: return "medium";
    case Severity::High: return "high";
  }
  return "low";
}

Severity parse_severity(std::string_view token) {
  if (token == "low") return Severity::Low;
  if (token == "medium") return Severity::Medium;
  if (token == "high") return Severity::High;
  throw DatasetError("unknown severity '" + std::string(token) + "'");
}

std::string describe(const AnswerValue& a) {
  if (const auto* c = std::get_if<CategoricalAnswer>(&a)) return std::to_string(c->index);
  if (const auto* s = std::get_if<ScalarAnswer>(&a)) {
    std::ostringstream os;
    os << s->value;
    return os.str();
  }
  return "unknown";
}

int FieldSpec::cardinality() const {
  const auto* c = std::get_if<CategoricalKind>(&kind);
  if (c == nullptr) throw SchemaError("field " + std::to_string(id) + " is not categorical");
  return c->cardinality;
}

const ScalarKind& FieldSpec::scalar() const {
  const auto* s = std::get_if<ScalarKind>(&kind);
  if (s == nullptr) throw SchemaError("field " + std::to_string(id) + " is not scalar");
  return *s;
}

AnswerValue FieldSpec::unknown_answer() const {
  if (is_categorical()) return CategoricalAnswer{cardinality()};
  return ScalarUnknown{};
}

std::vector<AnswerValue> FieldSpec::hypothetical_answers() const {
  std::vector<AnswerValue> out;
  if (is_categorical()) {
    for (int i = 0; i <= cardinality(); ++i) out.emplace_back(CategoricalAnswer{i});
  } else {
    const auto& s = scalar();
    for (double v : {s.p10, s.p50, s.p90}) out.emplace_back(ScalarAnswer{v});
  }
  return out;
}

MetadataSchema::MetadataSchema(std::vector<FieldSpec> fields) : fields_(std::move(fields)) {
  offsets_.reserve(fields_.size());
  for (size_t i = 0; i < fields_.size(); ++i) {
    const auto& f = fields_[i];
    if (f.id != static_cast<int>(i)) {
      throw SchemaError("field ids must be dense 0..K-1; position " + std::to_string(i) +
                        " has id " + std::to_string(f.id));
    }
    if (f.is_categorical()) {
      if (f.cardinality() < 1) throw SchemaError("field " + f.name + " has cardinality < 1");
      if (!f.options.empty() && static_cast<int>(f.options.size()) != f.cardinality()) {
        throw SchemaError("field " + f.name + " option labels do not match cardinality");
      }
    } else {
      const auto& s = f.scalar();
      if (!(s.p10 <= s.p50 && s.p50 <= s.p90)) {
        throw SchemaError("field " + f.name + " percentiles are not ordered");
      }
      if (s.placeholder != s.p50) {
        throw SchemaError("field " + f.name + " placeholder must equal p50");
      }
    }
    offsets_.push_back(width_);
    width_ += f.encoded_width();
  }
}

const FieldSpec& MetadataSchema::field(int id) const {
  if (id < 0 || id >= size()) {
    throw SchemaError("schema mismatch: unknown field id " + std::to_string(id));
  }
  return fields_[static_cast<size_t>(id)];
}

std::vector<int> MetadataSchema::screens() const {
  std::set<int> s;
  for (const auto& f : fields_) s.insert(f.screen_id);
  return {s.begin(), s.end()};
}

std::string MetadataSchema::fingerprint() const { return fnv1a_hex(to_json().dump()); }

json MetadataSchema::to_json() const {
  json arr = json::array();
  for (const auto& f : fields_) {
    json jf{{"id", f.id}, {"name", f.name}, {"screen_id", f.screen_id}};
    if (f.is_categorical()) {
      jf["kind"] = "categorical";
      jf["cardinality"] = f.cardinality();
      if (!f.options.empty()) jf["options"] = f.options;
    } else {
      const auto& s = f.scalar();
      jf["kind"] = "scalar";
      jf["placeholder"] = s.placeholder;
      jf["p10"] = s.p10;
      jf["p50"] = s.p50;
      jf["p90"] = s.p90;
    }
    arr.push_back(std::move(jf));
  }
  return json{{"fields", std::move(arr)}};
}

MetadataSchema MetadataSchema::from_json(const json& j) {
  std::vector<FieldSpec> fields;
  try {
    for (const auto& jf : j.at("fields")) {
      FieldSpec f;
      f.id = jf.at("id").get<int>();
      f.name = jf.at("name").get<std::string>();
      f.screen_id = jf.at("screen_id").get<int>();
      const auto kind = jf.at("kind").get<std::string>();
      if (kind == "categorical") {
        f.kind = CategoricalKind{jf.at("cardinality").get<int>()};
        if (jf.contains("options")) f.options = jf.at("options").get<std::vector<std::string>>();
      } else if (kind == "scalar") {
        f.kind = ScalarKind{jf.at("placeholder").get<double>(), jf.at("p10").get<double>(),
                            jf.at("p50").get<double>(), jf.at("p90").get<double>()};
      } else {
        throw SchemaError("unknown field kind '" + kind + "'");
      }
      fields.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed schema: ") + e.what());
  }
  return MetadataSchema(std::move(fields));
}

void MetadataSchema::check_answer(int field_id, const AnswerValue& a) const {
  const auto& f = field(field_id);
  if (f.is_categorical()) {
    const auto* c = std::get_if<CategoricalAnswer>(&a);
    if (c == nullptr) {
      throw EncodingError("field " + std::to_string(field_id) + " expects a categorical answer");
    }
    if (c->index < 0 || c->index > f.cardinality()) {
      throw EncodingError("field " + std::to_string(field_id) + " categorical index " +
                          std::to_string(c->index) + " out of range 0.." +
                          std::to_string(f.cardinality()));
    }
  } else {
    if (std::holds_alternative<CategoricalAnswer>(a)) {
      throw EncodingError("field " + std::to_string(field_id) + " expects a scalar answer");
    }
    if (const auto* s = std::get_if<ScalarAnswer>(&a); s && !std::isfinite(s->value)) {
      throw EncodingError("field " + std::to_string(field_id) + " scalar answer is not finite");
    }
  }
}

MetadataSchema dermatology_schema_preset() {
  std::vector<FieldSpec> fields;
  auto add_cat = [&](std::string name, int cardinality, int screen,
                     std::vector<std::string> options = {}) {
    FieldSpec f;
    f.id = static_cast<int>(fields.size());
    f.name = std::move(name);
    f.kind = CategoricalKind{cardinality};
    f.screen_id = screen;
    f.options = std::move(options);
    fields.push_back(std::move(f));
  };
  FieldSpec age;
  age.id = 0;
  age.name = "Age";
  // Population placeholders; a dataset build replaces them with training-set percentiles.
  age.kind = ScalarKind{40.0, 18.0, 40.0, 70.0};
  age.screen_id = 0;
  fields.push_back(age);
  add_cat("Gender", 5, 0, {"F", "M", "Unspecified", "Prefer not to say", "Other"});
  add_cat("Skin type", 6, 0, {"I", "II", "III", "IV", "V", "VI"});
  const std::vector<std::string> yn{"Yes", "No"};
  const std::vector<std::pair<std::string, int>> yes_no{
      {"Is the appearance concerning?", 1},
      {"Is it bleeding?", 1},
      {"Is it burning?", 1},
      {"Are you experiencing chills?", 2},
      {"Are you experiencing fatigue?", 2},
      {"Are you experiencing fever?", 2},
      {"Are you experiencing joint pain?", 2},
      {"Are you experiencing joint pain? (repeat)", 2},
      {"Are you experiencing mouth sores?", 2},
      {"Are you experiencing shortness of breath?", 2},
      {"No symptoms other than what can be seen?", 3},
      {"Is it itchy?", 3},
      {"Is it getting darker?", 3},
      {"Is it getting larger?", 3},
      {"Is it painful?", 3},
      {"Do you have a history of eczema?", 4},
      {"Do you have a history of psoriasis?", 4},
      {"Do you have a history of melanoma?", 4},
      {"Do you have a history of skin cancer?", 4},
  };
  for (const auto& [q, screen] : yes_no) add_cat(q, 2, screen, yn);
  add_cat("Which body part is the skin problem on?", 12, 5);
  add_cat("What best describes your skin issue?", 6, 5,
          {"Acne", "Growth or mole", "Hair loss", "Other hair issue", "Nail issue",
           "Pigment issue"});
  add_cat("Duration of problem", 9, 5,
          {"Since childhood", "One day", "Less than one week", "One to four weeks",
           "One to three months", "Three to twelve months", "Over one year",
           "Over five years", "Other"});
  return MetadataSchema(std::move(fields));
}

void Case::validate(const MetadataSchema& schema, int num_classes) const {
  if (images.empty()) throw DatasetError("case " + std::to_string(case_id) + " has no images");
  const size_t dim = images.front().embedding.size();
  for (const auto& im : images) {
    if (im.embedding.size() != dim) {
      throw DatasetError("case " + std::to_string(case_id) + " has mixed embedding dimensions");
    }
  }
  if (static_cast<int>(metadata.size()) != schema.size()) {
    throw DatasetError("case " + std::to_string(case_id) + " must store one answer per field");
  }
  for (const auto& [id, a] : metadata) schema.check_answer(id, a);
  if (label < 0 || label >= num_classes) {
    throw DatasetError("case " + std::to_string(case_id) + " label out of range");
  }
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) {
    throw DatasetError("case " + std::to_string(case_id) + " difficulty outside [0,1]");
  }
}

int Case::embedding_dim() const {
  return images.empty() ? 0 : static_cast<int>(images.front().embedding.size());
}

PredictiveDistribution::PredictiveDistribution(std::vector<double> probs)
    : probs_(std::move(probs)) {
  double sum = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0)) throw std::invalid_argument("probabilities must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("probabilities must sum to 1 (got " + std::to_string(sum) + ")");
  }
}

std::vector<int> PredictiveDistribution::ranking() const {
  std::vector<int> idx(probs_.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return probs_[static_cast<size_t>(a)] > probs_[static_cast<size_t>(b)]; });
  return idx;
}

std::vector<int> PredictiveDistribution::top_k(int k) const {
  auto r = ranking();
  r.resize(std::min(r.size(), static_cast<size_t>(std::max(k, 0))));
  return r;
}

bool PredictiveDistribution::in_top_k(int label, int k) const {
  // Count classes that outrank the label under the lower-index tie rule.
  const double pl = probs_.at(static_cast<size_t>(label));
  int ahead = 0;
  for (size_t i = 0; i < probs_.size(); ++i) {
    if (probs_[i] > pl || (probs_[i] == pl && static_cast<int>(i) < label)) ++ahead;
  }
  return ahead < k;
}

std::vector<double> encode_metadata(const AnswerMap& answers, const MetadataSchema& schema) {
  std::vector<double> out(static_cast<size_t>(schema.encoded_width()), 0.0);
  for (const auto& [id, a] : answers) schema.check_answer(id, a);
  for (const auto& f : schema.fields()) {
    const auto off = static_cast<size_t>(schema.offset(f.id));
    auto it = answers.find(f.id);
    if (f.is_categorical()) {
      int slot = f.cardinality();
      if (it != answers.end()) slot = std::get<CategoricalAnswer>(it->second).index;
      out[off + static_cast<size_t>(slot)] = 1.0;
    } else {
      double v = f.scalar().placeholder;
      if (it != answers.end()) {
        if (const auto* s = std::get_if<ScalarAnswer>(&it->second)) v = s->value;
      }
      out[off] = v;
    }
  }
  return out;
}

Embedding pool_image_embeddings(std::span<const Embedding> embeddings, size_t dim) {
  Embedding out(dim, 0.0);
  if (embeddings.empty()) return out;
  for (const auto& e : embeddings) {
    if (e.size() != dim) {
      throw std::invalid_argument("embedding dimension mismatch: expected " +
                                  std::to_string(dim) + ", got " + std::to_string(e.size()));
    }
    for (size_t i = 0; i < dim; ++i) out[i] += e[i];
  }
  const double n = static_cast<double>(embeddings.size());
  for (double& v : out) v /= n;
  return out;
}

PredictiveDistribution predict_full(const Case& c, const Classifier& model,
                                    const MetadataSchema& schema) {
  std::vector<Embedding> ims;
  ims.reserve(c.images.size());
  for (const auto& im : c.images) ims.push_back(im.embedding);
  return model.predict(ims, c.metadata, schema);
}

json answer_to_json(const AnswerValue& a) {
  if (const auto* c = std::get_if<CategoricalAnswer>(&a)) return c->index;
  if (const auto* s = std::get_if<ScalarAnswer>(&a)) return s->value;
  return "unknown";
}

AnswerValue answer_from_json(const json& j, const FieldSpec& field) {
  if (j.is_string()) {
    if (j.get<std::string>() != "unknown") throw DatasetError("unrecognised answer token");
    return field.unknown_answer();
  }
  if (!j.is_number()) throw DatasetError("answer must be a number or \"unknown\"");
  if (field.is_categorical()) {
    if (!j.is_number_integer()) {
      throw DatasetError("field " + std::to_string(field.id) + " expects an integer index");
    }
    return CategoricalAnswer{j.get<int>()};
  }
  return ScalarAnswer{j.get<double>()};
}

json case_to_json(const Case& c) {
  json images = json::array();
  for (const auto& im : c.images) {
    images.push_back({{"view", std::string(to_string(im.view))}, {"embedding", im.embedding}});
  }
  json meta = json::array();
  for (const auto& [id, a] : c.metadata) {
    meta.push_back({{"field_id", id}, {"value", answer_to_json(a)}});
  }
  return json{{"case_id", c.case_id},
              {"label", c.label},
              {"severity", std::string(to_string(c.severity))},
              {"difficulty", c.difficulty},
              {"images", std::move(images)},
              {"metadata", std::move(meta)}};
}

Case case_from_json(const json& j, const MetadataSchema& schema) {
  Case c;
  try {
    c.case_id = j.at("case_id").get<int64_t>();
    c.label = j.at("label").get<int>();
    c.severity = parse_severity(j.at("severity").get<std::string>());
    c.difficulty = j.at("difficulty").get<double>();
    for (const auto& ji : j.at("images")) {
      c.images.push_back(
          {parse_view(ji.at("view").get<std::string>()), ji.at("embedding").get<Embedding>()});
    }
    for (const auto& jm : j.at("metadata")) {
      const int id = jm.at("field_id").get<int>();
      c.metadata[id] = answer_from_json(jm.at("value"), schema.field(id));
    }
  } catch (const json::exception& e) {
    throw DatasetError(std::string("malformed case record: ") + e.what());
  }
  return c;
}

void write_cases_jsonl(const std::string& path, std::span<const Case> cases) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open " + path + " for writing");
  for (const auto& c : cases) out << case_to_json(c).dump() << '\n';
}

std::vector<Case> read_cases_jsonl(const std::string& path, const MetadataSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path);
  std::vector<Case> cases;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    cases.push_back(case_from_json(json::parse(line), schema));
  }
  return cases;
}

void write_schema(const std::string& path, const MetadataSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open " + path + " for writing");
  out << schema.to_json().dump(2) << '\n';
}

MetadataSchema read_schema(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path);
  return MetadataSchema::from_json(json::parse(in));
}

std::string fnv1a_hex(std::string_view bytes) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json real_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

double real_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    return std::stod(s);
  }
  return j.get<double>();
}

}  // namespace mint
