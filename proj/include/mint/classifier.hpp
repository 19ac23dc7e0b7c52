#pragma once
// Reference multi-modal classifier: mean-pooled image embedding, metadata
// embedding layer, FiLM or concatenation fusion and a two-layer MLP head.

#include <array>
#include <utility>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mint/core.hpp"

namespace mint {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int step) : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

enum class Fusion { Concat, FiLM };
std::string_view to_string(Fusion f);
Fusion parse_fusion(std::string_view token);

struct ModelConfig {
  Fusion fusion = Fusion::FiLM;
  int hidden_size = 64;
  int meta_embedding_size = 32;
  int embedding_dim = 16;
  int num_classes = 12;
  double mask_prob = 0.3;
  double image_drop_prob = 0.5;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double decay_factor = 0.1;  // lr_t = lr0 * decay^(t/steps)
  int steps = 4000;
  int batch_size = 16;
  int eval_every = 250;  // checkpoint cadence when a validation set is given
  uint64_t seed = 1;

  void validate() const;
  json to_json() const;
  static ModelConfig from_json(const json& j);
};

// Every tensor is stored as a matrix; biases are single columns.
struct Weights {
  Eigen::MatrixXd meta_w, meta_b;
  Eigen::MatrixXd gamma_w, gamma_b;  // FiLM scale, gamma = 1 + gamma_w e + gamma_b
  Eigen::MatrixXd beta_w, beta_b;    // FiLM shift
  Eigen::MatrixXd hidden_w, hidden_b;
  Eigen::MatrixXd out_w, out_b;

  using Tensor = Eigen::MatrixXd Weights::*;
  static constexpr std::array<std::pair<const char*, Tensor>, 10> kTensors{{
      {"meta_w", &Weights::meta_w},
      {"meta_b", &Weights::meta_b},
      {"gamma_w", &Weights::gamma_w},
      {"gamma_b", &Weights::gamma_b},
      {"beta_w", &Weights::beta_w},
      {"beta_b", &Weights::beta_b},
      {"hidden_w", &Weights::hidden_w},
      {"hidden_b", &Weights::hidden_b},
      {"out_w", &Weights::out_w},
      {"out_b", &Weights::out_b},
  }};

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (const auto& [name, t] : kTensors) fn(name, this->*t);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [name, t] : kTensors) fn(name, this->*t);
  }

  Weights zeros_like() const;
  size_t parameter_count() const;
};

struct TrainedModel {
  ModelConfig config;
  std::string schema_fingerprint;
  // Metadata input normalisation: x = (encoded - offset) * scale. The offset
  // is the all-unknown encoding, so an empty answer map feeds zeros.
  Eigen::VectorXd meta_offset;
  Eigen::VectorXd meta_scale;
  Weights weights;

  int metadata_width() const { return static_cast<int>(meta_offset.size()); }
};

TrainedModel init_model(const ModelConfig& config, const MetadataSchema& schema);

PredictiveDistribution forward(const TrainedModel& model, std::span<const double> pooled_image,
                               std::span<const double> metadata_vec);

struct Example {
  std::vector<double> pooled_image;
  std::vector<double> metadata_vec;  // raw encode_metadata output
  int label = 0;
};

struct LossAndGradients {
  double loss = 0.0;  // mean cross-entropy over the batch
  Weights gradients;
};

LossAndGradients loss_and_gradients(const TrainedModel& model, std::span<const Example> batch);

struct TrainCheckpoint {
  int step = 0;
  double train_loss = 0.0;  // running mean since the previous checkpoint
  double val_top3 = 0.0;    // NaN when no validation set
};

struct TrainResult {
  TrainedModel model;
  std::vector<TrainCheckpoint> history;
  int selected_step = 0;
  double max_meta_grad_norm = 0.0;  // Frobenius norm of d loss / d meta_w, max over steps
};

TrainResult train(std::span<const Case> dataset, const MetadataSchema& schema,
                  const ModelConfig& config, std::span<const Case> validation = {});

json model_to_json(const TrainedModel& model);
TrainedModel model_from_json(const json& j, const MetadataSchema& schema);
void save_model(const std::string& path, const TrainedModel& model);
TrainedModel load_model(const std::string& path, const MetadataSchema& schema);

class MlpClassifier final : public Classifier {
 public:
  MlpClassifier(TrainedModel model, const MetadataSchema& schema);

  PredictiveDistribution predict(std::span<const Embedding> images, const AnswerMap& answers,
                                 const MetadataSchema& schema) const override;
  int num_classes() const override { return model_.config.num_classes; }
  const TrainedModel& model() const { return model_; }

 private:
  TrainedModel model_;
};

}  // namespace mint
