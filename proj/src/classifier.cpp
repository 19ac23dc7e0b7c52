#include "mint/classifier.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "mint/rng.hpp"

namespace mint {

std::string_view to_string(Fusion f) { return f == Fusion::FiLM ? "film" : "concat"; }

Fusion parse_fusion(std::string_view token) {
  if (token == "film") return Fusion::FiLM;
  if (token == "concat") return Fusion::Concat;
  throw std::invalid_argument("unknown fusion '" + std::string(token) + "'");
}

void ModelConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(mask_prob) || !prob(image_drop_prob)) {
    throw std::invalid_argument("masking probabilities must lie in [0,1]");
  }
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (batch_size < 1 || hidden_size < 1 || meta_embedding_size < 1 || embedding_dim < 1 ||
      num_classes < 2) {
    throw std::invalid_argument("model dimensions must be positive (and >= 2 classes)");
  }
  if (!(learning_rate >= 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(decay_factor > 0.0)) {
    throw std::invalid_argument("invalid optimiser settings");
  }
}

json ModelConfig::to_json() const {
  return json{{"fusion", std::string(mint::to_string(fusion))},
              {"hidden_size", hidden_size},
              {"meta_embedding_size", meta_embedding_size},
              {"embedding_dim", embedding_dim},
              {"num_classes", num_classes},
              {"mask_prob", mask_prob},
              {"image_drop_prob", image_drop_prob},
              {"learning_rate", learning_rate},
              {"momentum", momentum},
              {"decay_factor", decay_factor},
              {"steps", steps},
              {"batch_size", batch_size},
              {"eval_every", eval_every},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  if (j.contains("fusion")) c.fusion = parse_fusion(j.at("fusion").get<std::string>());
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.meta_embedding_size = j.value("meta_embedding_size", c.meta_embedding_size);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.mask_prob = j.value("mask_prob", c.mask_prob);
  c.image_drop_prob = j.value("image_drop_prob", c.image_drop_prob);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

Weights Weights::zeros_like() const {
  Weights z = *this;
  z.for_each([](const char*, Eigen::MatrixXd& m) { m.setZero(); });
  return z;
}

size_t Weights::parameter_count() const {
  size_t n = 0;
  for_each([&](const char*, const Eigen::MatrixXd& m) { n += static_cast<size_t>(m.size()); });
  return n;
}

namespace {

int head_input_size(const ModelConfig& c) {
  return c.fusion == Fusion::FiLM ? c.embedding_dim : c.embedding_dim + c.meta_embedding_size;
}

void he_init(Eigen::MatrixXd& m, int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / cols));
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
}

// Column-batched activations kept for the backward pass.
struct ForwardPass {
  Eigen::MatrixXd x;       // normalised metadata, W x B
  Eigen::MatrixXd v;       // pooled images, D x B
  Eigen::MatrixXd pre_e, e;
  Eigen::MatrixXd gamma;   // FiLM only
  Eigen::MatrixXd z;
  Eigen::MatrixXd pre_h, h;
  Eigen::MatrixXd probs;   // C x B
};

void softmax_columns(Eigen::MatrixXd& logits) {
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    auto col = logits.col(j);
    const double mx = col.maxCoeff();
    col = (col.array() - mx).exp();
    col /= col.sum();
  }
}

ForwardPass run_forward(const TrainedModel& model, Eigen::MatrixXd v, const Eigen::MatrixXd& raw_meta) {
  const auto& w = model.weights;
  const auto& cfg = model.config;
  ForwardPass f;
  f.v = std::move(v);
  f.x = (raw_meta.colwise() - model.meta_offset).array().colwise() * model.meta_scale.array();
  f.pre_e = (w.meta_w * f.x).colwise() + w.meta_b.col(0);
  f.e = f.pre_e.cwiseMax(0.0);
  if (cfg.fusion == Fusion::FiLM) {
    f.gamma = ((w.gamma_w * f.e).colwise() + w.gamma_b.col(0)).array() + 1.0;
    Eigen::MatrixXd beta = (w.beta_w * f.e).colwise() + w.beta_b.col(0);
    f.z = f.gamma.cwiseProduct(f.v) + beta;
  } else {
    f.z.resize(f.v.rows() + f.e.rows(), f.v.cols());
    f.z << f.v, f.e;
  }
  f.pre_h = (w.hidden_w * f.z).colwise() + w.hidden_b.col(0);
  f.h = f.pre_h.cwiseMax(0.0);
  f.probs = (w.out_w * f.h).colwise() + w.out_b.col(0);
  softmax_columns(f.probs);
  return f;
}

void check_shapes(const TrainedModel& model, size_t pooled, size_t meta) {
  if (pooled != static_cast<size_t>(model.config.embedding_dim)) {
    throw std::invalid_argument("pooled image has dimension " + std::to_string(pooled) +
                                ", model expects " + std::to_string(model.config.embedding_dim));
  }
  if (meta != static_cast<size_t>(model.metadata_width())) {
    throw std::invalid_argument("metadata vector has width " + std::to_string(meta) +
                                ", model expects " + std::to_string(model.metadata_width()));
  }
}

PredictiveDistribution to_distribution(const Eigen::VectorXd& col) {
  std::vector<double> p(col.data(), col.data() + col.size());
  // Guard the unit-sum contract against accumulated rounding.
  double s = 0.0;
  for (double x : p) s += x;
  for (double& x : p) x /= s;
  return PredictiveDistribution(std::move(p));
}

Example make_example(const Case& c, const MetadataSchema& schema, const ModelConfig& cfg,
                     std::mt19937_64* rng) {
  std::bernoulli_distribution drop_image(cfg.image_drop_prob);
  std::bernoulli_distribution mask_field(cfg.mask_prob);
  std::vector<Embedding> kept;
  for (size_t i = 0; i < c.images.size(); ++i) {
    if (i == 0 || rng == nullptr || !drop_image(*rng)) kept.push_back(c.images[i].embedding);
  }
  AnswerMap answers;
  for (const auto& [id, a] : c.metadata) {
    if (rng == nullptr || !mask_field(*rng)) answers.emplace(id, a);
  }
  return Example{pool_image_embeddings(kept, static_cast<size_t>(cfg.embedding_dim)),
                 encode_metadata(answers, schema), c.label};
}

double validation_top3(const TrainedModel& model, std::span<const Example> val) {
  if (val.empty()) return std::numeric_limits<double>::quiet_NaN();
  int hits = 0;
  for (const auto& ex : val) {
    if (forward(model, ex.pooled_image, ex.metadata_vec).in_top_k(ex.label, 3)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(val.size());
}

}  // namespace

TrainedModel init_model(const ModelConfig& config, const MetadataSchema& schema) {
  config.validate();
  TrainedModel m;
  m.config = config;
  m.schema_fingerprint = schema.fingerprint();
  const int width = schema.encoded_width();
  const auto offset = encode_metadata({}, schema);
  m.meta_offset = Eigen::Map<const Eigen::VectorXd>(offset.data(), width);
  m.meta_scale = Eigen::VectorXd::Ones(width);
  for (const auto& f : schema.fields()) {
    if (!f.is_categorical()) {
      const auto& s = f.scalar();
      const double spread = s.p90 - s.p10;
      m.meta_scale(schema.offset(f.id)) = spread > 0.0 ? 1.0 / spread : 1.0;
    }
  }
  auto rng = substream(config.seed, "init");
  const int D = config.embedding_dim, E = config.meta_embedding_size, H = config.hidden_size,
            C = config.num_classes;
  auto& w = m.weights;
  he_init(w.meta_w, E, std::max(width, 1), rng);
  if (width == 0) w.meta_w.resize(E, 0);
  w.meta_b = Eigen::MatrixXd::Zero(E, 1);
  if (config.fusion == Fusion::FiLM) {
    // Small modulation weights start the model near identity modulation.
    he_init(w.gamma_w, D, E, rng);
    w.gamma_w *= 0.1;
    he_init(w.beta_w, D, E, rng);
    w.gamma_b = Eigen::MatrixXd::Zero(D, 1);
    w.beta_b = Eigen::MatrixXd::Zero(D, 1);
  } else {
    w.gamma_w.resize(0, 0);
    w.gamma_b.resize(0, 0);
    w.beta_w.resize(0, 0);
    w.beta_b.resize(0, 0);
  }
  he_init(w.hidden_w, H, head_input_size(config), rng);
  w.hidden_b = Eigen::MatrixXd::Zero(H, 1);
  he_init(w.out_w, C, H, rng);
  w.out_b = Eigen::MatrixXd::Zero(C, 1);
  return m;
}

PredictiveDistribution forward(const TrainedModel& model, std::span<const double> pooled_image,
                               std::span<const double> metadata_vec) {
  check_shapes(model, pooled_image.size(), metadata_vec.size());
  Eigen::MatrixXd v = Eigen::Map<const Eigen::VectorXd>(pooled_image.data(),
                                                        static_cast<Eigen::Index>(pooled_image.size()));
  Eigen::MatrixXd m = Eigen::Map<const Eigen::VectorXd>(metadata_vec.data(),
                                                        static_cast<Eigen::Index>(metadata_vec.size()));
  const auto f = run_forward(model, std::move(v), m);
  return to_distribution(f.probs.col(0));
}

LossAndGradients loss_and_gradients(const TrainedModel& model, std::span<const Example> batch) {
  if (batch.empty()) throw std::invalid_argument("batch must be non-empty");
  const auto& cfg = model.config;
  const auto& w = model.weights;
  const auto B = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXd v(cfg.embedding_dim, B), meta(model.metadata_width(), B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& ex = batch[static_cast<size_t>(j)];
    check_shapes(model, ex.pooled_image.size(), ex.metadata_vec.size());
    if (ex.label < 0 || ex.label >= cfg.num_classes) throw std::invalid_argument("label out of range");
    v.col(j) = Eigen::Map<const Eigen::VectorXd>(ex.pooled_image.data(), cfg.embedding_dim);
    meta.col(j) = Eigen::Map<const Eigen::VectorXd>(ex.metadata_vec.data(), model.metadata_width());
  }
  const auto f = run_forward(model, std::move(v), meta);

  LossAndGradients out;
  out.gradients = w.zeros_like();
  auto& g = out.gradients;
  Eigen::MatrixXd dlogits = f.probs;
  double loss = 0.0;
  for (Eigen::Index j = 0; j < B; ++j) {
    const int y = batch[static_cast<size_t>(j)].label;
    loss -= std::log(std::max(f.probs(y, j), std::numeric_limits<double>::min()));
    dlogits(y, j) -= 1.0;
  }
  out.loss = loss / static_cast<double>(B);
  dlogits /= static_cast<double>(B);

  g.out_w = dlogits * f.h.transpose();
  g.out_b = dlogits.rowwise().sum();
  Eigen::MatrixXd da_h = (w.out_w.transpose() * dlogits).cwiseProduct(
      (f.pre_h.array() > 0.0).cast<double>().matrix());
  g.hidden_w = da_h * f.z.transpose();
  g.hidden_b = da_h.rowwise().sum();
  Eigen::MatrixXd dz = w.hidden_w.transpose() * da_h;
  Eigen::MatrixXd de;
  if (cfg.fusion == Fusion::FiLM) {
    Eigen::MatrixXd dgamma = dz.cwiseProduct(f.v);
    g.gamma_w = dgamma * f.e.transpose();
    g.gamma_b = dgamma.rowwise().sum();
    g.beta_w = dz * f.e.transpose();
    g.beta_b = dz.rowwise().sum();
    de = w.gamma_w.transpose() * dgamma + w.beta_w.transpose() * dz;
  } else {
    de = dz.bottomRows(cfg.meta_embedding_size);
  }
  Eigen::MatrixXd da_e = de.cwiseProduct((f.pre_e.array() > 0.0).cast<double>().matrix());
  g.meta_w = da_e * f.x.transpose();
  g.meta_b = da_e.rowwise().sum();
  return out;
}

TrainResult train(std::span<const Case> dataset, const MetadataSchema& schema,
                  const ModelConfig& config, std::span<const Case> validation) {
  if (dataset.empty()) throw TrainingError("training set is empty", 0);
  config.validate();
  for (const auto& c : dataset) c.validate(schema, config.num_classes);

  TrainResult result;
  result.model = init_model(config, schema);
  auto& model = result.model;

  std::vector<Example> val;
  for (const auto& c : validation) val.push_back(make_example(c, schema, config, nullptr));

  auto rng = substream(config.seed, "train");
  std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
  Weights velocity = model.weights.zeros_like();
  Weights best = model.weights;
  double best_top3 = -1.0;
  double running_loss = 0.0;
  int running_n = 0;
  std::vector<Example> batch(static_cast<size_t>(config.batch_size));

  auto checkpoint = [&](int step) {
    TrainCheckpoint cp{step, running_n > 0 ? running_loss / running_n : 0.0,
                       validation_top3(model, val)};
    result.history.push_back(cp);
    running_loss = 0.0;
    running_n = 0;
    if (!val.empty() && cp.val_top3 > best_top3) {
      best_top3 = cp.val_top3;
      best = model.weights;
      result.selected_step = step;
    }
  };

  for (int step = 0; step < config.steps; ++step) {
    for (auto& ex : batch) ex = make_example(dataset[pick(rng)], schema, config, &rng);
    auto lg = loss_and_gradients(model, batch);
    if (!std::isfinite(lg.loss)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step), step);
    }
    result.max_meta_grad_norm = std::max(result.max_meta_grad_norm, lg.gradients.meta_w.norm());
    running_loss += lg.loss;
    ++running_n;
    const double lr = config.learning_rate *
                      std::pow(config.decay_factor, static_cast<double>(step) / config.steps);
    for (const auto& [name, t] : Weights::kTensors) {
      auto& wt = model.weights.*t;
      if (wt.size() == 0) continue;
      auto& vel = velocity.*t;
      vel = config.momentum * vel - lr * (lg.gradients.*t);
      wt += vel;
    }
    const int done = step + 1;
    if ((config.eval_every > 0 && done % config.eval_every == 0) || done == config.steps) {
      checkpoint(done);
    }
  }
  if (!val.empty()) {
    model.weights = best;
  } else {
    result.selected_step = config.steps;
  }
  return result;
}

json model_to_json(const TrainedModel& model) {
  json tensors = json::array();
  model.weights.for_each([&](const char* name, const Eigen::MatrixXd& m) {
    std::vector<double> data;
    data.reserve(static_cast<size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    }
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"data", data}});
  });
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return json{{"format", "mint-model-v1"},
              {"config", model.config.to_json()},
              {"schema_fingerprint", model.schema_fingerprint},
              {"meta_offset", vec(model.meta_offset)},
              {"meta_scale", vec(model.meta_scale)},
              {"tensors", std::move(tensors)}};
}

TrainedModel model_from_json(const json& j, const MetadataSchema& schema) {
  TrainedModel m;
  try {
    if (j.at("format").get<std::string>() != "mint-model-v1") {
      throw SchemaError("unsupported model format");
    }
    m.config = ModelConfig::from_json(j.at("config"));
    m.schema_fingerprint = j.at("schema_fingerprint").get<std::string>();
    if (m.schema_fingerprint != schema.fingerprint()) {
      throw SchemaError("model was trained on schema " + m.schema_fingerprint +
                        " but schema " + schema.fingerprint() + " was provided");
    }
    const auto off = j.at("meta_offset").get<std::vector<double>>();
    const auto sc = j.at("meta_scale").get<std::vector<double>>();
    m.meta_offset = Eigen::Map<const Eigen::VectorXd>(off.data(), static_cast<Eigen::Index>(off.size()));
    m.meta_scale = Eigen::Map<const Eigen::VectorXd>(sc.data(), static_cast<Eigen::Index>(sc.size()));
    std::map<std::string, json> by_name;
    for (const auto& t : j.at("tensors")) by_name[t.at("name").get<std::string>()] = t;
    m.weights.for_each([&](const char* name, Eigen::MatrixXd& w) {
      const auto& t = by_name.at(name);
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      const auto data = t.at("data").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
        throw SchemaError(std::string("tensor ") + name + " has inconsistent shape");
      }
      w.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = data[static_cast<size_t>(r * cols + c)];
      }
    });
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed model document: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw SchemaError(std::string("model document is missing a tensor: ") + e.what());
  }
  if (m.metadata_width() != schema.encoded_width()) {
    throw SchemaError("model metadata width does not match schema");
  }
  return m;
}

void save_model(const std::string& path, const TrainedModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << model_to_json(model).dump() << '\n';
}

TrainedModel load_model(const std::string& path, const MetadataSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return model_from_json(json::parse(in), schema);
}

MlpClassifier::MlpClassifier(TrainedModel model, const MetadataSchema& schema)
    : model_(std::move(model)) {
  if (model_.schema_fingerprint != schema.fingerprint()) {
    throw SchemaError("classifier schema fingerprint mismatch");
  }
}

PredictiveDistribution MlpClassifier::predict(std::span<const Embedding> images,
                                              const AnswerMap& answers,
                                              const MetadataSchema& schema) const {
  const auto pooled = pool_image_embeddings(images, static_cast<size_t>(model_.config.embedding_dim));
  const auto meta = encode_metadata(answers, schema);
  return forward(model_, pooled, meta);
}

}  // namespace mint
