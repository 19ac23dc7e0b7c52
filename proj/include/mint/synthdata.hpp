#pragma once
// Deterministic generator for a dermatology-shaped multi-modal dataset whose
// informativeness is controlled per field, so acquisition behaviour can be
// checked against known structure.

#include <array>
#include <string>
#include <vector>

#include "mint/core.hpp"

namespace mint {

struct FieldGenSpec {
  std::string name;
  int cardinality = 2;  // 0 marks a scalar field
  double informativeness = 0.8;
  double unknown_rate = 0.1;
  int screen_id = 0;
};

struct GeneratorConfig {
  int num_classes = 12;
  int embedding_dim = 16;
  int n_train = 2000;
  int n_val = 500;
  int n_test = 500;
  int min_images = 2;
  int max_images = 6;
  std::array<double, 3> view_probs{0.4, 0.4, 0.2};  // near, far, other
  // Scale of the class-specific part of each view's mean; near shots carry
  // the most class signal.
  std::array<double, 3> view_separation{1.0, 0.6, 0.35};
  double class_spread = 0.45;  // std of class prototypes per dimension
  double view_offset_spread = 1.0;
  double noise_sigma = 1.5;
  // Per-case image noise is noise_sigma * exp(image_quality_spread * z), z ~ N(0,1).
  double image_quality_spread = 0.5;
  // Image class signal is scaled by exp(-attenuation * image_quality_spread * z).
  double image_signal_attenuation = 1.0;
  // The last confusable_classes classes share an image prototype up to
  // confusable_spread jitter per dimension.
  int confusable_classes = 5;
  double confusable_spread = 0.1;
  std::vector<FieldGenSpec> fields;
  double answer_sharpness = 0.95;  // mass on a class's preferred answer
  // Probability that a class has a distinctive answer profile for an
  // informative categorical field; other classes answer uniformly.
  double field_relevance = 0.25;
  double scalar_class_sd = 8.0;
  double scalar_population_mean = 45.0;
  double scalar_population_sd = 16.0;
  int rater_panel_size = 10;
  double rater_temperature = 1.0;
  std::array<double, 3> severity_props{0.56, 0.36, 0.08};  // low, medium, high
  std::vector<Severity> severity_map;  // class -> severity; empty derives it from the proportions
  uint64_t seed = 1;

  static GeneratorConfig defaults();
  void validate() const;
  json to_json() const;
  static GeneratorConfig from_json(const json& j);
  std::string hash() const;
};

// Per-class generative parameters, kept so tests can check recoverability.
struct GenerativeWorld {
  std::vector<std::array<Embedding, 3>> view_means;  // [class][view]
  // [field][class] -> answer distribution over non-unknown answers (categorical)
  std::vector<std::vector<std::vector<double>>> answer_tables;
  std::vector<std::vector<double>> scalar_class_means;  // [field][class], scalar fields only
  std::vector<Severity> severity_of_class;
  std::vector<double> class_prior;
};

struct GeneratedData {
  std::vector<Case> train, val, test;
  MetadataSchema schema;
  GenerativeWorld world;
  std::string config_hash;
};

GeneratedData generate(const GeneratorConfig& config);

// Linear-interpolation percentile (q in [0,100]) of a non-empty sample.
double percentile(std::vector<double> values, double q);

}  // namespace mint
