#pragma once
// Domain types shared by every module: metadata schema, cases, answers,
// predictive distributions and the classifier interface the engine wraps.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace mint {

using json = nlohmann::json;

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EncodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ViewType { Near, Far, Other };
inline constexpr std::array<ViewType, 3> kAllViews{ViewType::Near, ViewType::Far,
                                                   ViewType::Other};

std::string_view to_string(ViewType v);
ViewType parse_view(std::string_view token);

enum class Severity { Low, Medium, High };
inline constexpr std::array<Severity, 3> kAllSeverities{Severity::Low, Severity::Medium,
                                                        Severity::High};

std::string_view to_string(Severity s);
Severity parse_severity(std::string_view token);

using Embedding = std::vector<double>;

// Answer to a categorical field. index == cardinality means Unknown.
struct CategoricalAnswer {
  int index = 0;
  bool operator==(const CategoricalAnswer&) const = default;
};

struct ScalarAnswer {
  double value = 0.0;
  bool operator==(const ScalarAnswer&) const = default;
};

struct ScalarUnknown {
  bool operator==(const ScalarUnknown&) const = default;
};

using AnswerValue = std::variant<CategoricalAnswer, ScalarAnswer, ScalarUnknown>;
using AnswerMap = std::map<int, AnswerValue>;

std::string describe(const AnswerValue& a);

struct CategoricalKind {
  int cardinality = 2;  // excludes Unknown
};

struct ScalarKind {
  double placeholder = 0.0;  // training-set median, used when unanswered
  double p10 = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
};

struct FieldSpec {
  int id = 0;
  std::string name;
  std::variant<CategoricalKind, ScalarKind> kind;
  int screen_id = 0;
  std::vector<std::string> options;  // display labels, categorical only; may be empty

  bool is_categorical() const { return std::holds_alternative<CategoricalKind>(kind); }
  int cardinality() const;  // categorical only
  const ScalarKind& scalar() const;
  int encoded_width() const { return is_categorical() ? cardinality() + 1 : 1; }
  AnswerValue unknown_answer() const;
  // Every hypothetical answer the value estimator enumerates for this field.
  std::vector<AnswerValue> hypothetical_answers() const;
};

class MetadataSchema {
 public:
  MetadataSchema() = default;
  explicit MetadataSchema(std::vector<FieldSpec> fields);

  const std::vector<FieldSpec>& fields() const { return fields_; }
  const FieldSpec& field(int id) const;
  int size() const { return static_cast<int>(fields_.size()); }
  int encoded_width() const { return width_; }
  int offset(int id) const { return offsets_.at(static_cast<size_t>(id)); }
  std::vector<int> screens() const;
  std::string fingerprint() const;

  json to_json() const;
  static MetadataSchema from_json(const json& j);

  // Throws EncodingError when the answer does not fit the field.
  void check_answer(int field_id, const AnswerValue& a) const;

 private:
  std::vector<FieldSpec> fields_;
  std::vector<int> offsets_;
  int width_ = 0;
};

// 24 categorical questions totalling 100 one-hot slots plus one scalar (age).
MetadataSchema dermatology_schema_preset();

struct CaseImage {
  ViewType view = ViewType::Near;
  Embedding embedding;
};

struct Case {
  int64_t case_id = 0;
  std::vector<CaseImage> images;
  AnswerMap metadata;  // one stored answer per schema field
  int label = 0;
  double difficulty = 0.0;
  Severity severity = Severity::Low;

  void validate(const MetadataSchema& schema, int num_classes) const;
  int embedding_dim() const;
};

class PredictiveDistribution {
 public:
  PredictiveDistribution() = default;
  // Validates non-negativity and unit sum (1e-9).
  explicit PredictiveDistribution(std::vector<double> probs);

  std::span<const double> probs() const { return probs_; }
  const std::vector<double>& vec() const { return probs_; }
  size_t size() const { return probs_.size(); }
  double operator[](size_t i) const { return probs_[i]; }
  bool empty() const { return probs_.empty(); }

  // Class indices by descending probability, ties to the lower index.
  std::vector<int> ranking() const;
  std::vector<int> top_k(int k) const;
  bool in_top_k(int label, int k) const;

  bool operator==(const PredictiveDistribution&) const = default;

 private:
  std::vector<double> probs_;
};

class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual PredictiveDistribution predict(std::span<const Embedding> images,
                                         const AnswerMap& answers,
                                         const MetadataSchema& schema) const = 0;
  virtual int num_classes() const = 0;
};

std::vector<double> encode_metadata(const AnswerMap& answers, const MetadataSchema& schema);

Embedding pool_image_embeddings(std::span<const Embedding> embeddings, size_t dim);

// Prediction with every input of the case, images in listed order.
PredictiveDistribution predict_full(const Case& c, const Classifier& model,
                                    const MetadataSchema& schema);

// Dataset files: one JSON object per line.
json answer_to_json(const AnswerValue& a);
AnswerValue answer_from_json(const json& j, const FieldSpec& field);
json case_to_json(const Case& c);
Case case_from_json(const json& j, const MetadataSchema& schema);

void write_cases_jsonl(const std::string& path, std::span<const Case> cases);
std::vector<Case> read_cases_jsonl(const std::string& path, const MetadataSchema& schema);
void write_schema(const std::string& path, const MetadataSchema& schema);
MetadataSchema read_schema(const std::string& path);

// FNV-1a 64-bit over bytes, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

// JSON has no infinities; they travel as the strings "inf" / "-inf".
json real_to_json(double v);
double real_from_json(const json& j);

}  // namespace mint
