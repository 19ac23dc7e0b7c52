#pragma once

#include <functional>
#include <memory>

#include "mint/classifier.hpp"
#include "mint/core.hpp"
#include "mint/engine.hpp"
#include "mint/synthdata.hpp"

namespace mint::testing {

// Classifier backed by an arbitrary function, for hand-built toys.
class FnClassifier final : public Classifier {
 public:
  using Fn = std::function<std::vector<double>(std::span<const Embedding>, const AnswerMap&)>;
  FnClassifier(int c, Fn fn) : c_(c), fn_(std::move(fn)) {}
  PredictiveDistribution predict(std::span<const Embedding> images, const AnswerMap& answers,
                                 const MetadataSchema&) const override {
    return PredictiveDistribution(fn_(images, answers));
  }
  int num_classes() const override { return c_; }

 private:
  int c_;
  Fn fn_;
};

FieldSpec categorical_field(int id, std::string name, int cardinality, int screen = 0);
FieldSpec scalar_field(int id, std::string name, double p10, double p50, double p90, int screen = 0);

// Two fields: yes/no (0) and a scalar with p50 = 40 (1).
MetadataSchema yes_no_scalar_schema();

// One case with the given number of images, all in one view.
Case simple_case(int64_t id, int n_images, int dim, int label = 0);

// Small generated dataset with a trained classifier and image value model,
// built once per process.
struct World {
  GeneratedData data;
  std::unique_ptr<MlpClassifier> model;
  ImageValueModel ivm;
};
const World& small_world();
// Default generator and model settings, seed 1, for the default-data properties.
const World& default_world();

}  // namespace mint::testing
