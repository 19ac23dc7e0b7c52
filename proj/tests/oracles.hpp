#pragma once
// Independent reference computations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fixtures.hpp"
#include "mint/classifier.hpp"
#include "mint/engine.hpp"

namespace mint::testing {

// Independent divergence references: clamp-and-renormalise KL in nats,
// base-2 JS distance, absolute entropy difference in bits.
inline double ref_divergence(MetricKind m, const std::vector<double>& p, const std::vector<double>& q) {
  auto clamp = [](std::vector<double> v) {
    double s = 0;
    for (double& x : v) s += (x = std::max(x, 1e-12));
    for (double& x : v) x /= s;
    return v;
  };
  auto h = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) {
      if (x > 0) s -= x * std::log2(x);
    }
    return s;
  };
  switch (m) {
    case MetricKind::KL: {
      const auto a = clamp(p), b = clamp(q);
      double s = 0;
      for (size_t i = 0; i < a.size(); ++i) s += a[i] * std::log(a[i] / b[i]);
      return std::max(0.0, s);
    }
    case MetricKind::JSDistance: {
      double s = 0;
      for (size_t i = 0; i < p.size(); ++i) {
        const double mid = 0.5 * (p[i] + q[i]);
        if (p[i] > 0) s += 0.5 * p[i] * std::log2(p[i] / mid);
        if (q[i] > 0) s += 0.5 * q[i] * std::log2(q[i] / mid);
      }
      return std::sqrt(std::max(0.0, s));
    }
    case MetricKind::EntropyDiff:
      return std::abs(h(p) - h(q));
  }
  return 0;
}

inline double oracle_value(const AcquisitionState& s, const FieldSpec& f, const Classifier& model,
                    const MetadataSchema& schema, MetricKind m) {
  std::vector<Embedding> imgs;
  std::vector<std::pair<int, Embedding>> sorted;
  for (const auto& im : s.images) sorted.emplace_back(im.source_index, im.embedding);
  std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.first < b.first; });
  for (auto& [i, e] : sorted) imgs.push_back(e);
  const auto current = model.predict(imgs, s.answers, schema).vec();
  std::vector<AnswerValue> branches;
  if (f.is_categorical()) {
    for (int a = 0; a <= f.cardinality(); ++a) branches.emplace_back(CategoricalAnswer{a});
  } else {
    const auto& k = f.scalar();
    branches = {ScalarAnswer{k.p10}, ScalarAnswer{k.p50}, ScalarAnswer{k.p90}};
  }
  double total = 0;
  for (const auto& b : branches) {
    AnswerMap answers = s.answers;
    answers[f.id] = b;
    total += ref_divergence(m, current, model.predict(imgs, answers, schema).vec());
  }
  return total / static_cast<double>(branches.size());
}

inline AcquisitionState state_with_images(const Case& c, std::vector<int> idx, const Classifier& m,
                                   const MetadataSchema& schema) {
  AcquisitionState s;
  s.case_id = c.case_id;
  for (int i : idx) {
    const auto& im = c.images[static_cast<size_t>(i)];
    s.images.push_back({i, im.view, std::nullopt, false, im.embedding});
  }
  s.prediction = predict_state(s, m, schema);
  return s;
}

// Two yes/no fields; only field 0 moves the prediction.
inline FnClassifier toy_two_class() {
  return FnClassifier(2, [](std::span<const Embedding>, const AnswerMap& a) -> std::vector<double> {
    auto it = a.find(0);
    if (it == a.end()) return {0.5, 0.5};
    const int idx = std::get<CategoricalAnswer>(it->second).index;
    if (idx == 0) return {0.9, 0.1};
    if (idx == 1) return {0.1, 0.9};
    return {0.5, 0.5};
  });
}

inline MetadataSchema two_yes_no() {
  return MetadataSchema({categorical_field(0, "a", 2), categorical_field(1, "b", 2)});
}

inline Case toy_case(int n_images = 1) {
  Case c = simple_case(1, n_images, 2);
  c.metadata = {{0, CategoricalAnswer{0}}, {1, CategoricalAnswer{1}}};
  return c;
}

inline ModelConfig toy_config(Fusion fusion) {
  ModelConfig c;
  c.fusion = fusion;
  c.embedding_dim = 2;
  c.hidden_size = 3;
  c.meta_embedding_size = 2;
  c.num_classes = 3;
  c.seed = 5;
  return c;
}

inline std::vector<Example> toy_batch(const MetadataSchema& schema) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  std::vector<Example> batch;
  for (int i = 0; i < 4; ++i) {
    Example e;
    e.pooled_image = {n01(rng), n01(rng)};
    AnswerMap a{{0, CategoricalAnswer{i % 3}}, {1, ScalarAnswer{30.0 + 5 * i}}};
    e.metadata_vec = encode_metadata(a, schema);
    e.label = i % 3;
    batch.push_back(e);
  }
  return batch;
}

// Perturb every weight so no gradient is structurally zero at initialisation.
inline void jitter(TrainedModel& m) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01(0.0, 0.3);
  m.weights.for_each([&](const char*, Eigen::MatrixXd& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += n01(rng);
  });
}

// Worst relative error between analytic and central-difference gradients
// over every weight of a jittered toy model.
inline double worst_gradient_error(Fusion fusion, size_t* checked = nullptr) {
  const auto schema = yes_no_scalar_schema();
  auto model = init_model(toy_config(fusion), schema);
  jitter(model);
  const auto batch = toy_batch(schema);
  const auto analytic = loss_and_gradients(model, batch);
  const double h = 1e-4;
  double worst = 0.0;
  size_t n = 0;
  for (const auto& [name, tensor] : Weights::kTensors) {
    auto& t = model.weights.*tensor;
    const auto& g = analytic.gradients.*tensor;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double keep = t.data()[i];
      t.data()[i] = keep + h;
      const double up = loss_and_gradients(model, batch).loss;
      t.data()[i] = keep - h;
      const double down = loss_and_gradients(model, batch).loss;
      t.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = g.data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (std::abs(a - numeric) > 1e-9) worst = std::max(worst, rel);
      ++n;
    }
  }
  if (checked) *checked = n;
  return worst;
}

}  // namespace mint::testing
