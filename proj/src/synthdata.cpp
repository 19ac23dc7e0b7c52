#include "mint/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mint/rng.hpp"

namespace mint {

namespace {

constexpr double kPi = 3.14159265358979323846;

double log_normal_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * kPi);
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

std::vector<Severity> derive_severity_map(const GeneratorConfig& c) {
  // Largest-remainder allocation of classes to severities, at least one each.
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int assigned = 0;
  for (size_t s = 0; s < 3; ++s) {
    const double share = c.severity_props[s] * c.num_classes;
    counts[s] = std::max(1, static_cast<int>(std::floor(share)));
    rem[s] = share - std::floor(share);
    assigned += counts[s];
  }
  while (assigned < c.num_classes) {
    const auto s = static_cast<size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++counts[s];
    rem[s] = -1.0;
    ++assigned;
  }
  while (assigned > c.num_classes) {
    const auto s = static_cast<size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    --counts[s];
    --assigned;
  }
  std::vector<Severity> out;
  for (size_t s = 0; s < 3; ++s) {
    for (int i = 0; i < counts[s]; ++i) out.push_back(kAllSeverities[s]);
  }
  return out;
}

GenerativeWorld build_world(const GeneratorConfig& c) {
  GenerativeWorld w;
  auto rng = substream(c.seed, "world");
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto D = static_cast<size_t>(c.embedding_dim);
  const auto C = static_cast<size_t>(c.num_classes);

  std::array<Embedding, 3> view_offsets;
  for (auto& o : view_offsets) {
    o.resize(D);
    for (double& x : o) x = c.view_offset_spread * n01(rng);
  }
  std::vector<Embedding> protos(C, Embedding(D));
  for (auto& proto : protos) {
    for (double& x : proto) x = c.class_spread * n01(rng);
  }
  // The last confusable_classes classes share one prototype up to a small
  // jitter, so images alone cannot tell them apart.
  if (c.confusable_classes > 0) {
    Embedding shared(D);
    for (double& x : shared) x = c.class_spread * n01(rng);
    for (size_t k = C - static_cast<size_t>(c.confusable_classes); k < C; ++k) {
      for (size_t d = 0; d < D; ++d) {
        protos[k][d] = shared[d] + c.confusable_spread / c.class_spread * protos[k][d];
      }
    }
  }
  w.view_means.resize(C);
  for (size_t k = 0; k < C; ++k) {
    const auto& proto = protos[k];
    for (size_t v = 0; v < 3; ++v) {
      auto& m = w.view_means[k][v];
      m.resize(D);
      for (size_t d = 0; d < D; ++d) m[d] = view_offsets[v][d] + c.view_separation[v] * proto[d];
    }
  }

  w.answer_tables.resize(c.fields.size());
  w.scalar_class_means.resize(c.fields.size());
  for (size_t f = 0; f < c.fields.size(); ++f) {
    const auto& spec = c.fields[f];
    if (spec.cardinality == 0) {
      std::uniform_real_distribution<double> u(-1.5, 1.5);
      auto& means = w.scalar_class_means[f];
      for (size_t k = 0; k < C; ++k) {
        means.push_back(c.scalar_population_mean + u(rng) * c.scalar_population_sd);
      }
      continue;
    }
    const auto card = static_cast<size_t>(spec.cardinality);
    std::uniform_int_distribution<size_t> pick(0, card - 1);
    auto& table = w.answer_tables[f];
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (size_t k = 0; k < C; ++k) {
      const bool distinctive = u01(rng) < c.field_relevance;
      const size_t preferred = pick(rng);
      if (!distinctive) {
        table.emplace_back(card, 1.0 / static_cast<double>(card));
        continue;
      }
      std::vector<double> row(card, (1.0 - c.answer_sharpness) / static_cast<double>(card - 1));
      row[preferred] = c.answer_sharpness;
      table.push_back(std::move(row));
    }
  }

  w.severity_of_class = c.severity_map.empty() ? derive_severity_map(c) : c.severity_map;
  std::array<int, 3> per_sev{};
  for (auto s : w.severity_of_class) ++per_sev[static_cast<size_t>(s)];
  for (auto s : w.severity_of_class) {
    const auto i = static_cast<size_t>(s);
    w.class_prior.push_back(c.severity_props[i] / per_sev[i]);
  }
  return w;
}

struct RawCase {
  Case c;
  std::vector<std::optional<double>> scalar_values;  // per field, before schema binding
};

Case sample_case(const GeneratorConfig& cfg, const GenerativeWorld& w, int64_t case_id) {
  auto rng = substream(cfg.seed, "case", static_cast<uint64_t>(case_id));
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Case c;
  c.case_id = case_id;
  std::discrete_distribution<int> cls(w.class_prior.begin(), w.class_prior.end());
  c.label = cls(rng);
  c.severity = w.severity_of_class[static_cast<size_t>(c.label)];
  std::uniform_int_distribution<int> n_images(cfg.min_images, cfg.max_images);
  std::discrete_distribution<int> view(cfg.view_probs.begin(), cfg.view_probs.end());
  const double zq = cfg.image_quality_spread * n01(rng);
  const double sigma = cfg.noise_sigma * std::exp(zq);
  // Poor images also lose signal: they drift toward a generic embedding.
  const double signal = std::exp(-cfg.image_signal_attenuation * zq);
  const int n = n_images(rng);
  for (int i = 0; i < n; ++i) {
    CaseImage im;
    im.view = kAllViews[static_cast<size_t>(view(rng))];
    const auto& mean = w.view_means[static_cast<size_t>(c.label)][static_cast<size_t>(im.view)];
    im.embedding.resize(mean.size());
    for (size_t d = 0; d < mean.size(); ++d) im.embedding[d] = signal * mean[d] + sigma * n01(rng);
    c.images.push_back(std::move(im));
  }
  for (size_t f = 0; f < cfg.fields.size(); ++f) {
    const auto& spec = cfg.fields[f];
    const int id = static_cast<int>(f);
    const bool informative = u01(rng) < spec.informativeness;
    if (spec.cardinality == 0) {
      const double mean = informative ? w.scalar_class_means[f][static_cast<size_t>(c.label)]
                                      : cfg.scalar_population_mean;
      const double sd = informative ? cfg.scalar_class_sd : cfg.scalar_population_sd;
      const double value = mean + sd * n01(rng);
      c.metadata[id] = ScalarAnswer{value};
    } else {
      int a = 0;
      if (informative) {
        const auto& row = w.answer_tables[f][static_cast<size_t>(c.label)];
        std::discrete_distribution<int> d(row.begin(), row.end());
        a = d(rng);
      } else {
        std::uniform_int_distribution<int> d(0, spec.cardinality - 1);
        a = d(rng);
      }
      c.metadata[id] = CategoricalAnswer{a};
    }
    if (u01(rng) < spec.unknown_rate) {
      c.metadata[id] = spec.cardinality == 0 ? AnswerValue{ScalarUnknown{}}
                                             : AnswerValue{CategoricalAnswer{spec.cardinality}};
    }
  }

  // Synthetic rater panel: each rater samples from a tempered version of the
  // exact generative posterior given every input of the case.
  const auto C = static_cast<size_t>(cfg.num_classes);
  const double sd = std::max(sigma, 1e-6);
  std::vector<double> logp(C);
  for (size_t k = 0; k < C; ++k) {
    double lp = std::log(w.class_prior[k]);
    for (const auto& im : c.images) {
      const auto& mean = w.view_means[k][static_cast<size_t>(im.view)];
      for (size_t d = 0; d < mean.size(); ++d) lp += log_normal_pdf(im.embedding[d], signal * mean[d], sd);
    }
    for (size_t f = 0; f < cfg.fields.size(); ++f) {
      const auto& spec = cfg.fields[f];
      const auto& a = c.metadata.at(static_cast<int>(f));
      if (spec.cardinality == 0) {
        if (const auto* s = std::get_if<ScalarAnswer>(&a)) {
          lp += log_sum_exp(
              std::log(std::max(spec.informativeness, 1e-300)) +
                  log_normal_pdf(s->value, w.scalar_class_means[f][k], cfg.scalar_class_sd),
              std::log(std::max(1.0 - spec.informativeness, 1e-300)) +
                  log_normal_pdf(s->value, cfg.scalar_population_mean, cfg.scalar_population_sd));
        }
      } else {
        const int idx = std::get<CategoricalAnswer>(a).index;
        if (idx < spec.cardinality) {
          lp += std::log(spec.informativeness * w.answer_tables[f][k][static_cast<size_t>(idx)] +
                         (1.0 - spec.informativeness) / spec.cardinality);
        }
      }
    }
    logp[k] = lp / cfg.rater_temperature;
  }
  const double mx = *std::max_element(logp.begin(), logp.end());
  for (double& v : logp) v = std::exp(v - mx);
  std::discrete_distribution<int> rater(logp.begin(), logp.end());
  int votes = 0;
  for (int r = 0; r < cfg.rater_panel_size; ++r) {
    if (rater(rng) == c.label) ++votes;
  }
  c.difficulty = 1.0 - static_cast<double>(votes) / cfg.rater_panel_size;
  return c;
}

}  // namespace

GeneratorConfig GeneratorConfig::defaults() {
  GeneratorConfig c;
  // Eight informative fields at 0.8 and four pure-noise fields, interleaved.
  const std::vector<std::pair<int, double>> layout{
      {0, 0.8}, {2, 0.8}, {3, 0.8}, {2, 0.0}, {4, 0.8}, {2, 0.8},
      {3, 0.0}, {5, 0.8}, {2, 0.8}, {2, 0.0}, {3, 0.8}, {6, 0.0}};
  for (size_t i = 0; i < layout.size(); ++i) {
    FieldGenSpec f;
    f.cardinality = layout[i].first;
    f.informativeness = layout[i].second;
    f.name = f.cardinality == 0 ? "age" : "q" + std::to_string(i);
    f.screen_id = static_cast<int>(i / 2);
    c.fields.push_back(f);
  }
  return c;
}

void GeneratorConfig::validate() const {
  const double total = severity_props[0] + severity_props[1] + severity_props[2];
  if (std::abs(total - 1.0) > 1e-9 ||
      std::any_of(severity_props.begin(), severity_props.end(), [](double p) { return p < 0.0; })) {
    throw std::invalid_argument("severity proportions must be non-negative and sum to 1");
  }
  const double vtotal = view_probs[0] + view_probs[1] + view_probs[2];
  if (std::abs(vtotal - 1.0) > 1e-9) throw std::invalid_argument("view probabilities must sum to 1");
  if (num_classes < 2 || embedding_dim < 1) throw std::invalid_argument("invalid dimensions");
  if (confusable_classes < 0 || confusable_classes > num_classes || !(confusable_spread >= 0.0) ||
      !(class_spread > 0.0)) {
    throw std::invalid_argument("invalid class geometry");
  }
  if (min_images < 1 || max_images < min_images) throw std::invalid_argument("invalid image counts");
  if (n_train < 0 || n_val < 0 || n_test < 0) throw std::invalid_argument("negative split size");
  if (rater_panel_size < 1 || !(rater_temperature > 0.0)) throw std::invalid_argument("invalid rater panel");
  if (!(noise_sigma >= 0.0) || !(image_quality_spread >= 0.0) ||
      !(image_signal_attenuation >= 0.0)) {
    throw std::invalid_argument("noise parameters must be non-negative");
  }
  if (!(field_relevance >= 0.0 && field_relevance <= 1.0)) {
    throw std::invalid_argument("field_relevance must lie in [0,1]");
  }
  if (!(answer_sharpness > 0.0 && answer_sharpness <= 1.0)) {
    throw std::invalid_argument("answer_sharpness must lie in (0,1]");
  }
  if (!severity_map.empty() && static_cast<int>(severity_map.size()) != num_classes) {
    throw std::invalid_argument("severity_map must list every class");
  }
  for (const auto& f : fields) {
    if (f.informativeness < 0.0 || f.informativeness > 1.0) {
      throw std::invalid_argument("informativeness must lie in [0,1]");
    }
    if (f.unknown_rate < 0.0 || f.unknown_rate > 1.0) {
      throw std::invalid_argument("unknown_rate must lie in [0,1]");
    }
    if (f.cardinality == 1 || f.cardinality < 0) {
      throw std::invalid_argument("categorical fields need cardinality >= 2");
    }
  }
}

json GeneratorConfig::to_json() const {
  json fs = json::array();
  for (const auto& f : fields) {
    fs.push_back({{"name", f.name},
                  {"cardinality", f.cardinality},
                  {"informativeness", f.informativeness},
                  {"unknown_rate", f.unknown_rate},
                  {"screen_id", f.screen_id}});
  }
  json sev = json::array();
  for (auto s : severity_map) sev.push_back(std::string(mint::to_string(s)));
  return json{{"num_classes", num_classes},
              {"embedding_dim", embedding_dim},
              {"n_train", n_train},
              {"n_val", n_val},
              {"n_test", n_test},
              {"min_images", min_images},
              {"max_images", max_images},
              {"view_probs", view_probs},
              {"view_separation", view_separation},
              {"class_spread", class_spread},
              {"view_offset_spread", view_offset_spread},
              {"noise_sigma", noise_sigma},
              {"image_quality_spread", image_quality_spread},
              {"image_signal_attenuation", image_signal_attenuation},
              {"confusable_classes", confusable_classes},
              {"confusable_spread", confusable_spread},
              {"field_relevance", field_relevance},
              {"fields", fs},
              {"answer_sharpness", answer_sharpness},
              {"scalar_class_sd", scalar_class_sd},
              {"scalar_population_mean", scalar_population_mean},
              {"scalar_population_sd", scalar_population_sd},
              {"rater_panel_size", rater_panel_size},
              {"rater_temperature", rater_temperature},
              {"severity_props", severity_props},
              {"severity_map", sev},
              {"seed", seed}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  GeneratorConfig c = defaults();
  c.num_classes = j.value("num_classes", c.num_classes);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.n_train = j.value("n_train", c.n_train);
  c.n_val = j.value("n_val", c.n_val);
  c.n_test = j.value("n_test", c.n_test);
  c.min_images = j.value("min_images", c.min_images);
  c.max_images = j.value("max_images", c.max_images);
  c.view_probs = j.value("view_probs", c.view_probs);
  c.view_separation = j.value("view_separation", c.view_separation);
  c.class_spread = j.value("class_spread", c.class_spread);
  c.view_offset_spread = j.value("view_offset_spread", c.view_offset_spread);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.image_quality_spread = j.value("image_quality_spread", c.image_quality_spread);
  c.image_signal_attenuation = j.value("image_signal_attenuation", c.image_signal_attenuation);
  c.confusable_classes = j.value("confusable_classes", c.confusable_classes);
  c.confusable_spread = j.value("confusable_spread", c.confusable_spread);
  c.field_relevance = j.value("field_relevance", c.field_relevance);
  if (j.contains("fields")) {
    c.fields.clear();
    for (const auto& jf : j.at("fields")) {
      FieldGenSpec f;
      f.name = jf.value("name", std::string("q") + std::to_string(c.fields.size()));
      f.cardinality = jf.value("cardinality", f.cardinality);
      f.informativeness = jf.value("informativeness", f.informativeness);
      f.unknown_rate = jf.value("unknown_rate", f.unknown_rate);
      f.screen_id = jf.value("screen_id", static_cast<int>(c.fields.size() / 2));
      c.fields.push_back(f);
    }
  }
  c.answer_sharpness = j.value("answer_sharpness", c.answer_sharpness);
  c.scalar_class_sd = j.value("scalar_class_sd", c.scalar_class_sd);
  c.scalar_population_mean = j.value("scalar_population_mean", c.scalar_population_mean);
  c.scalar_population_sd = j.value("scalar_population_sd", c.scalar_population_sd);
  c.rater_panel_size = j.value("rater_panel_size", c.rater_panel_size);
  c.rater_temperature = j.value("rater_temperature", c.rater_temperature);
  c.severity_props = j.value("severity_props", c.severity_props);
  if (j.contains("severity_map")) {
    c.severity_map.clear();
    for (const auto& s : j.at("severity_map")) c.severity_map.push_back(parse_severity(s.get<std::string>()));
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string GeneratorConfig::hash() const { return fnv1a_hex(to_json().dump()); }

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

GeneratedData generate(const GeneratorConfig& config) {
  config.validate();
  GeneratedData out;
  out.config_hash = config.hash();
  out.world = build_world(config);
  int64_t id = 0;
  for (int i = 0; i < config.n_train; ++i) out.train.push_back(sample_case(config, out.world, id++));
  for (int i = 0; i < config.n_val; ++i) out.val.push_back(sample_case(config, out.world, id++));
  for (int i = 0; i < config.n_test; ++i) out.test.push_back(sample_case(config, out.world, id++));

  std::vector<FieldSpec> fields;
  for (size_t f = 0; f < config.fields.size(); ++f) {
    const auto& spec = config.fields[f];
    FieldSpec fs;
    fs.id = static_cast<int>(f);
    fs.name = spec.name;
    fs.screen_id = spec.screen_id;
    if (spec.cardinality == 0) {
      // Placeholder and percentiles come from the training split only.
      std::vector<double> seen;
      for (const auto& c : out.train) {
        if (const auto* s = std::get_if<ScalarAnswer>(&c.metadata.at(fs.id))) seen.push_back(s->value);
      }
      if (seen.empty()) seen.push_back(config.scalar_population_mean);
      const double p50 = percentile(seen, 50.0);
      fs.kind = ScalarKind{p50, percentile(seen, 10.0), p50, percentile(seen, 90.0)};
    } else {
      fs.kind = CategoricalKind{spec.cardinality};
    }
    fields.push_back(std::move(fs));
  }
  out.schema = MetadataSchema(std::move(fields));
  return out;
}

}  // namespace mint
