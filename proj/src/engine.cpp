#include "mint/engine.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "mint/parallel.hpp"
#include "mint/rng.hpp"

namespace mint {

namespace {

std::string format_real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_real(std::string_view s) {
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a number: '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (true) {
    const size_t pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_flag(std::string_view v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw std::invalid_argument("expected 0/1, got '" + std::string(v) + "'");
}

double cross_entropy(const PredictiveDistribution& p, int label) {
  return -std::log(std::max(p[static_cast<size_t>(label)], kClampEpsilon));
}

const char* const kTokenHelp =
    "mint:<kl|js|entropy>[:t_meta=X][:t_image=X][:instr=0|1][:start=first|random|all]"
    "[:max_steps=N][:seed=N][:kl_rev=0|1][:stop=0|1]";

}  // namespace

std::string_view to_string(StartPolicy p) {
  switch (p) {
    case StartPolicy::FirstListed: return "first";
    case StartPolicy::SeededRandom: return "random";
    case StartPolicy::AllImages: return "all";
  }
  return "first";
}

StartPolicy parse_start_policy(std::string_view token) {
  if (token == "first") return StartPolicy::FirstListed;
  if (token == "random") return StartPolicy::SeededRandom;
  if (token == "all") return StartPolicy::AllImages;
  throw std::invalid_argument("unknown start policy '" + std::string(token) +
                              "' (expected first|random|all)");
}

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::AllValuesBelowThreshold: return "below_threshold";
    case StopReason::InputsExhausted: return "exhausted";
    case StopReason::StepCap: return "step_cap";
  }
  return "exhausted";
}

StopReason parse_stop_reason(std::string_view token) {
  if (token == "below_threshold") return StopReason::AllValuesBelowThreshold;
  if (token == "exhausted") return StopReason::InputsExhausted;
  if (token == "step_cap") return StopReason::StepCap;
  throw std::invalid_argument("unknown stop reason '" + std::string(token) + "'");
}

std::string EngineConfig::token() const {
  std::string t = "mint:" + std::string(to_string(metric));
  t += ":t_meta=" + format_real(t_meta);
  t += ":t_image=" + format_real(t_image);
  t += std::string(":instr=") + (instruction_mode ? "1" : "0");
  t += ":start=" + std::string(to_string(start));
  if (max_steps) t += ":max_steps=" + std::to_string(*max_steps);
  if (start == StartPolicy::SeededRandom) t += ":seed=" + std::to_string(seed);
  if (kl_reversed) t += ":kl_rev=1";
  if (!early_stop) t += ":stop=0";
  return t;
}

EngineConfig EngineConfig::parse(std::string_view token) {
  const auto parts = split(token, ':');
  if (parts.size() < 2 || parts[0] != "mint") {
    throw std::invalid_argument("bad engine token '" + std::string(token) + "'; expected " +
                                kTokenHelp);
  }
  EngineConfig c;
  try {
    c.metric = parse_metric(parts[1]);
    for (size_t i = 2; i < parts.size(); ++i) {
      const auto eq = parts[i].find('=');
      if (eq == std::string_view::npos) throw std::invalid_argument("missing '='");
      const auto k = parts[i].substr(0, eq);
      const auto v = parts[i].substr(eq + 1);
      if (k == "t_meta") {
        c.t_meta = parse_real(v);
      } else if (k == "t_image") {
        c.t_image = parse_real(v);
      } else if (k == "instr") {
        c.instruction_mode = parse_flag(v);
      } else if (k == "start") {
        c.start = parse_start_policy(v);
      } else if (k == "max_steps") {
        c.max_steps = std::stoi(std::string(v));
        if (*c.max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
      } else if (k == "seed") {
        c.seed = std::stoull(std::string(v));
      } else if (k == "kl_rev") {
        c.kl_reversed = parse_flag(v);
      } else if (k == "stop") {
        c.early_stop = parse_flag(v);
      } else {
        throw std::invalid_argument("unknown key '" + std::string(k) + "'");
      }
    }
  } catch (const std::exception& e) {
    throw std::invalid_argument("bad engine token '" + std::string(token) + "': " + e.what() +
                                "; expected " + kTokenHelp);
  }
  if (std::isnan(c.t_meta) || std::isnan(c.t_image)) {
    throw std::invalid_argument("thresholds must not be NaN");
  }
  return c;
}

json EngineConfig::to_json() const {
  json j{{"metric", std::string(mint::to_string(metric))},
         {"t_meta", real_to_json(t_meta)},
         {"t_image", real_to_json(t_image)},
         {"instruction_mode", instruction_mode},
         {"kl_reversed", kl_reversed},
         {"start", std::string(mint::to_string(start))},
         {"early_stop", early_stop},
         {"seed", seed}};
  j["max_steps"] = max_steps ? json(*max_steps) : json(nullptr);
  return j;
}

EngineConfig EngineConfig::from_json(const json& j) {
  EngineConfig c;
  c.metric = parse_metric(j.at("metric").get<std::string>());
  c.t_meta = real_from_json(j.at("t_meta"));
  c.t_image = real_from_json(j.at("t_image"));
  c.instruction_mode = j.value("instruction_mode", false);
  c.kl_reversed = j.value("kl_reversed", false);
  c.start = parse_start_policy(j.value("start", std::string("first")));
  c.seed = j.value("seed", uint64_t{1});
  c.early_stop = j.value("early_stop", true);
  if (j.contains("max_steps") && !j.at("max_steps").is_null()) c.max_steps = j.at("max_steps").get<int>();
  return c;
}

json action_to_json(const Action& a) {
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, AcquireMetadata>) {
          return {{"type", "metadata"}, {"field_id", x.field_id}};
        } else if constexpr (std::is_same_v<T, AcquireImage>) {
          return {{"type", "image"},
                  {"view", x.view ? json(std::string(to_string(*x.view))) : json("any")}};
        } else {
          return {{"type", "stop"}, {"reason", std::string(to_string(x.reason))}};
        }
      },
      a);
}

Action action_from_json(const json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "metadata") return AcquireMetadata{j.at("field_id").get<int>()};
  if (type == "image") {
    const auto v = j.at("view").get<std::string>();
    return AcquireImage{v == "any" ? std::nullopt : std::optional<ViewType>(parse_view(v))};
  }
  if (type == "stop") return Stop{parse_stop_reason(j.at("reason").get<std::string>())};
  throw std::invalid_argument("unknown action type '" + type + "'");
}

// ---------------------------------------------------------------------------
// Image value model

ImageValueModel::Features ImageValueModel::features(const PredictiveDistribution& p, int n_images,
                                                    int n_meta, std::optional<ViewType> view) {
  Features f{};
  const auto rank = p.ranking();
  const double top1 = p[static_cast<size_t>(rank[0])];
  const double top2 = rank.size() > 1 ? p[static_cast<size_t>(rank[1])] : 0.0;
  f[0] = entropy_bits(p.probs());
  f[1] = top1;
  f[2] = top2;
  f[3] = top1 - top2;
  f[4] = n_images;
  f[5] = n_meta;
  if (view) f[6 + static_cast<size_t>(*view)] = 1.0;
  return f;
}

double ImageValueModel::predict(const Features& f) const {
  double v = bias_;
  for (size_t i = 0; i < f.size(); ++i) v += weights_[i] * f[i];
  return v;
}

json ImageValueModel::to_json() const {
  return {{"format", "mint-image-value-v1"}, {"weights", weights_}, {"bias", bias_}};
}

ImageValueModel ImageValueModel::from_json(const json& j) {
  if (j.value("format", std::string()) != "mint-image-value-v1") {
    throw std::invalid_argument("not an image value model document");
  }
  return ImageValueModel(j.at("weights").get<Features>(), j.at("bias").get<double>());
}

std::vector<ImageValueRow> image_value_rows(std::span<const Case> cases, const Classifier& model,
                                            const MetadataSchema& schema, uint64_t seed) {
  std::vector<std::vector<ImageValueRow>> per_case(cases.size());
  parallel_for(cases.size(), [&](size_t ci) {
    const Case& c = cases[ci];
    const int n = static_cast<int>(c.images.size());
    if (n < 2) return;
    auto rng = substream(seed, "image-value", static_cast<uint64_t>(c.case_id));
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    auto predict_with = [&](std::vector<int> idx, const AnswerMap& answers) {
      std::sort(idx.begin(), idx.end());
      std::vector<Embedding> embs;
      for (int i : idx) embs.push_back(c.images[static_cast<size_t>(i)].embedding);
      return model.predict(embs, answers, schema);
    };

    for (int j = 1; j < n; ++j) {
      const double density = u01(rng);
      AnswerMap answers;
      for (const auto& [id, a] : c.metadata) {
        if (u01(rng) < density) answers[id] = a;
      }
      const std::vector<int> prefix(perm.begin(), perm.begin() + j);
      const auto before = predict_with(prefix, answers);
      const double ce_before = cross_entropy(before, c.label);
      const bool was_correct = before.in_top_k(c.label, 3);
      auto add_row = [&](int next, std::optional<ViewType> view) {
        auto idx = prefix;
        idx.push_back(next);
        const auto after = predict_with(idx, answers);
        ImageValueRow row;
        row.features = ImageValueModel::features(before, j, static_cast<int>(answers.size()), view);
        row.target = ce_before - cross_entropy(after, c.label);
        row.case_id = c.case_id;
        row.flipped_to_correct = !was_correct && after.in_top_k(c.label, 3);
        per_case[ci].push_back(row);
      };
      add_row(perm[static_cast<size_t>(j)], std::nullopt);
      for (ViewType v : kAllViews) {
        for (int r = j; r < n; ++r) {
          if (c.images[static_cast<size_t>(perm[static_cast<size_t>(r)])].view == v) {
            add_row(perm[static_cast<size_t>(r)], v);
            break;
          }
        }
      }
    }
  });
  std::vector<ImageValueRow> rows;
  for (auto& v : per_case) rows.insert(rows.end(), v.begin(), v.end());
  return rows;
}

ImageValueModel fit_image_value_model(std::span<const ImageValueRow> rows, double ridge) {
  if (rows.empty()) throw DatasetError("image value model: no training rows (need cases with >= 2 images)");
  constexpr int W = ImageValueModel::kFeatureWidth + 1;
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(W, W);
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(W);
  for (const auto& r : rows) {
    Eigen::VectorXd x(W);
    for (int i = 0; i < ImageValueModel::kFeatureWidth; ++i) x[i] = r.features[static_cast<size_t>(i)];
    x[W - 1] = 1.0;
    xtx.noalias() += x * x.transpose();
    xty.noalias() += x * r.target;
  }
  const double scale = xtx.diagonal().maxCoeff();
  xtx.diagonal().array() += ridge * std::max(scale, 1.0);
  const Eigen::VectorXd w = xtx.ldlt().solve(xty);
  ImageValueModel::Features weights{};
  for (int i = 0; i < ImageValueModel::kFeatureWidth; ++i) weights[static_cast<size_t>(i)] = w[i];
  return ImageValueModel(weights, w[W - 1]);
}

ImageValueModel train_image_value_model(std::span<const Case> cases, const Classifier& model,
                                        const MetadataSchema& schema, uint64_t seed) {
  const auto rows = image_value_rows(cases, model, schema, seed);
  return fit_image_value_model(rows);
}

// ---------------------------------------------------------------------------
// State and value estimation

std::vector<Embedding> AcquisitionState::pooled_order() const {
  std::vector<const AcquiredImage*> sorted;
  for (const auto& im : images) sorted.push_back(&im);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->source_index < b->source_index; });
  std::vector<Embedding> out;
  for (const auto* im : sorted) out.push_back(im->embedding);
  return out;
}

bool AcquisitionState::has_image(int source_index) const {
  return std::any_of(images.begin(), images.end(),
                     [&](const auto& im) { return im.source_index == source_index; });
}

PredictiveDistribution predict_state(const AcquisitionState& s, const Classifier& model,
                                     const MetadataSchema& schema) {
  return model.predict(s.pooled_order(), s.answers, schema);
}

double estimate_metadata_value(const AcquisitionState& s, const FieldSpec& field,
                               const Classifier& model, const MetadataSchema& schema,
                               MetricKind metric, bool kl_reversed) {
  if (s.images.empty()) throw PreconditionError("value estimation needs at least one image");
  if (s.answers.contains(field.id)) {
    throw PreconditionError("field " + std::to_string(field.id) + " already acquired");
  }
  const auto images = s.pooled_order();
  const auto hypotheticals = field.hypothetical_answers();
  AnswerMap answers = s.answers;
  double total = 0.0;
  for (const auto& a : hypotheticals) {
    answers[field.id] = a;
    const auto updated = model.predict(images, answers, schema);
    total += divergence(metric, s.prediction.probs(), updated.probs(), kl_reversed);
  }
  return total / static_cast<double>(hypotheticals.size());
}

double estimate_image_value(const AcquisitionState& s, std::optional<ViewType> view,
                            const ImageValueModel& ivm) {
  return ivm.value(s.prediction, static_cast<int>(s.images.size()),
                   static_cast<int>(s.answers.size()), view);
}

json candidate_to_json(const Candidate& c) {
  json j = action_to_json(c.action);
  j.erase("type");
  j["kind"] = std::holds_alternative<AcquireMetadata>(c.action) ? "metadata" : "image";
  j["value"] = real_to_json(c.value);
  j["thresholded"] = real_to_json(c.thresholded);
  return j;
}

namespace {

Candidate candidate_from_json(const json& j) {
  Candidate c;
  if (j.at("kind").get<std::string>() == "metadata") {
    c.action = AcquireMetadata{j.at("field_id").get<int>()};
  } else {
    const auto v = j.at("view").get<std::string>();
    c.action = AcquireImage{v == "any" ? std::nullopt : std::optional<ViewType>(parse_view(v))};
  }
  c.value = real_from_json(j.at("value"));
  c.thresholded = real_from_json(j.at("thresholded"));
  return c;
}

json probs_to_json(const PredictiveDistribution& p) { return json(p.vec()); }

}  // namespace

Action choose_action(std::span<const Candidate> candidates, bool gate) {
  if (candidates.empty()) return Stop{StopReason::InputsExhausted};
  size_t best = 0;
  for (size_t i = 1; i < candidates.size(); ++i) {
    if (candidates[i].thresholded > candidates[best].thresholded) best = i;
  }
  if (gate && !(candidates[best].thresholded >= 0.0)) return Stop{StopReason::AllValuesBelowThreshold};
  return candidates[best].action;
}

// ---------------------------------------------------------------------------
// Transcripts

json TranscriptStep::to_json() const {
  json j{{"step", index}, {"initial", initial}};
  json cs = json::array();
  for (const auto& c : candidates) cs.push_back(candidate_to_json(c));
  j["candidates"] = std::move(cs);
  j["action"] = action_to_json(action);
  j["answer"] = answer ? answer_to_json(*answer) : json(nullptr);
  j["image_index"] = image_index ? json(*image_index) : json(nullptr);
  j["image_view"] = image_view ? json(std::string(to_string(*image_view))) : json(nullptr);
  j["substituted"] = substituted;
  j["prediction"] = probs_to_json(prediction);
  j["n_images"] = n_images;
  j["n_meta"] = n_meta;
  return j;
}

TranscriptStep TranscriptStep::from_json(const json& j, const MetadataSchema& schema) {
  TranscriptStep s;
  s.index = j.at("step").get<int>();
  s.initial = j.at("initial").get<bool>();
  for (const auto& c : j.at("candidates")) s.candidates.push_back(candidate_from_json(c));
  s.action = action_from_json(j.at("action"));
  if (!j.at("answer").is_null()) {
    const auto* m = std::get_if<AcquireMetadata>(&s.action);
    if (!m) throw std::invalid_argument("answer recorded on a non-metadata step");
    s.answer = answer_from_json(j.at("answer"), schema.field(m->field_id));
  }
  if (!j.at("image_index").is_null()) s.image_index = j.at("image_index").get<int>();
  if (!j.at("image_view").is_null()) s.image_view = parse_view(j.at("image_view").get<std::string>());
  s.substituted = j.at("substituted").get<bool>();
  s.prediction = PredictiveDistribution(j.at("prediction").get<std::vector<double>>());
  s.n_images = j.at("n_images").get<int>();
  s.n_meta = j.at("n_meta").get<int>();
  return s;
}

int EpisodeTranscript::n_images() const { return steps.empty() ? 0 : steps.back().n_images; }
int EpisodeTranscript::n_meta() const { return steps.empty() ? 0 : steps.back().n_meta; }

int EpisodeTranscript::n_interactions() const {
  int n = 0;
  for (const auto& s : steps) {
    if (!s.initial && !std::holds_alternative<Stop>(s.action)) ++n;
  }
  return n;
}

const PredictiveDistribution& EpisodeTranscript::prediction_after(int n) const {
  const TranscriptStep* last_initial = nullptr;
  const TranscriptStep* chosen = nullptr;
  int seen = 0;
  for (const auto& s : steps) {
    if (std::holds_alternative<Stop>(s.action)) break;
    if (s.initial) {
      last_initial = &s;
      chosen = &s;
      continue;
    }
    if (seen >= n) break;
    chosen = &s;
    ++seen;
  }
  if (!chosen) {
    if (last_initial) return last_initial->prediction;
    return final_prediction;
  }
  return chosen->prediction;
}

std::vector<int> EpisodeTranscript::acquired_fields() const {
  std::vector<int> out;
  for (const auto& s : steps) {
    if (s.answer) {
      if (const auto* m = std::get_if<AcquireMetadata>(&s.action)) out.push_back(m->field_id);
    }
  }
  return out;
}

json EpisodeTranscript::to_json() const {
  json ss = json::array();
  for (const auto& s : steps) ss.push_back(s.to_json());
  return {{"case_id", case_id},
          {"label", label},
          {"policy", policy},
          {"steps", std::move(ss)},
          {"final_prediction", probs_to_json(final_prediction)},
          {"stop_reason", std::string(to_string(stop_reason))},
          {"n_images", n_images()},
          {"n_meta", n_meta()}};
}

EpisodeTranscript EpisodeTranscript::from_json(const json& j, const MetadataSchema& schema) {
  EpisodeTranscript t;
  t.case_id = j.at("case_id").get<int64_t>();
  t.label = j.at("label").get<int>();
  t.policy = j.at("policy").get<std::string>();
  for (const auto& s : j.at("steps")) t.steps.push_back(TranscriptStep::from_json(s, schema));
  t.final_prediction = PredictiveDistribution(j.at("final_prediction").get<std::vector<double>>());
  t.stop_reason = parse_stop_reason(j.at("stop_reason").get<std::string>());
  return t;
}

// One line per step. Every line carries the episode keys; the Stop step
// closes an episode.
void write_transcripts_jsonl(const std::string& path, std::span<const EpisodeTranscript> ts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& t : ts) {
    for (const auto& s : t.steps) {
      json j{{"case_id", t.case_id}, {"label", t.label}, {"policy", t.policy}};
      j.update(s.to_json());
      if (std::holds_alternative<Stop>(s.action)) {
        j["stop_reason"] = std::string(to_string(t.stop_reason));
        j["final_prediction"] = probs_to_json(t.final_prediction);
      }
      out << j.dump() << '\n';
    }
  }
}

std::vector<EpisodeTranscript> read_transcripts_jsonl(const std::string& path,
                                                      const MetadataSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<EpisodeTranscript> out;
  EpisodeTranscript cur;
  bool open = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (!open) {
      cur = EpisodeTranscript{};
      cur.case_id = j.at("case_id").get<int64_t>();
      cur.label = j.at("label").get<int>();
      cur.policy = j.at("policy").get<std::string>();
      open = true;
    } else if (j.at("case_id").get<int64_t>() != cur.case_id) {
      throw DatasetError(path + ":" + std::to_string(lineno) + ": episode without a stop step");
    }
    cur.steps.push_back(TranscriptStep::from_json(j, schema));
    if (std::holds_alternative<Stop>(cur.steps.back().action)) {
      cur.stop_reason = parse_stop_reason(j.at("stop_reason").get<std::string>());
      cur.final_prediction =
          PredictiveDistribution(j.at("final_prediction").get<std::vector<double>>());
      out.push_back(std::move(cur));
      open = false;
    }
  }
  if (open) throw DatasetError(path + ": truncated episode for case " + std::to_string(cur.case_id));
  return out;
}

// ---------------------------------------------------------------------------
// Value cache

ValueCache::Key ValueCache::key(uint64_t image_mask, uint64_t field_mask, const EngineConfig& c) {
  return {image_mask, field_mask, static_cast<int>(c.metric), c.kl_reversed, c.instruction_mode};
}

const ValueCache::Entry* ValueCache::find(uint64_t image_mask, uint64_t field_mask,
                                          const EngineConfig& c) const {
  const auto it = entries_.find(key(image_mask, field_mask, c));
  return it == entries_.end() ? nullptr : &it->second;
}

const ValueCache::Entry& ValueCache::insert(uint64_t image_mask, uint64_t field_mask,
                                            const EngineConfig& c, Entry e) {
  return entries_.insert_or_assign(key(image_mask, field_mask, c), std::move(e)).first->second;
}

// ---------------------------------------------------------------------------
// Episode

Episode::Episode(const Classifier& model, const MetadataSchema& schema, const ImageValueModel& ivm,
                 EngineConfig config)
    : model_(&model), schema_(&schema), ivm_(&ivm), config_(config) {}

void Episode::begin(const Case& c, ValueCache* cache) {
  if (c.images.empty()) throw PreconditionError("case " + std::to_string(c.case_id) + " has no images");
  bound_ = &c;
  cache_ = (c.images.size() <= 64 && schema_->size() <= 64) ? cache : nullptr;
  state_ = AcquisitionState{};
  state_.case_id = c.case_id;
  transcript_ = EpisodeTranscript{};
  transcript_.case_id = c.case_id;
  transcript_.label = c.label;
  transcript_.policy = config_.token();
  decisions_ = 0;
  finished_ = false;

  std::vector<int> initial;
  switch (config_.start) {
    case StartPolicy::FirstListed:
      initial.push_back(0);
      break;
    case StartPolicy::SeededRandom: {
      auto rng = substream(config_.seed, "first-image", static_cast<uint64_t>(c.case_id));
      std::uniform_int_distribution<int> pick(0, static_cast<int>(c.images.size()) - 1);
      initial.push_back(pick(rng));
      break;
    }
    case StartPolicy::AllImages:
      for (int i = 0; i < static_cast<int>(c.images.size()); ++i) initial.push_back(i);
      break;
  }
  for (int idx : initial) {
    const auto& im = c.images[static_cast<size_t>(idx)];
    acquire_image(AcquiredImage{idx, im.view, std::nullopt, false, im.embedding}, true);
  }
  decide();
}

void Episode::begin_live(int64_t session_case_id, Embedding first, ViewType view, int max_images) {
  if (max_images < 1) throw std::invalid_argument("live sessions allow at least one image");
  bound_ = nullptr;
  cache_ = nullptr;
  live_max_images_ = max_images;
  state_ = AcquisitionState{};
  state_.case_id = session_case_id;
  transcript_ = EpisodeTranscript{};
  transcript_.case_id = session_case_id;
  transcript_.policy = config_.token();
  decisions_ = 0;
  finished_ = false;
  acquire_image(AcquiredImage{0, view, std::nullopt, false, std::move(first)}, true);
  decide();
}

void Episode::acquire_image(AcquiredImage img, bool initial) {
  TranscriptStep step;
  if (!initial) step = std::move(pending_);
  step.initial = initial;
  if (initial) step.action = AcquireImage{std::nullopt};
  step.image_index = img.source_index;
  step.image_view = img.view;
  step.substituted = img.substituted;
  state_.images.push_back(std::move(img));
  refresh_prediction();
  push_acquisition(std::move(step));
}

void Episode::refresh_prediction() {
  if (cache_) {
    if (const auto* e = cache_->find(image_mask(), field_mask(), config_)) {
      state_.prediction = e->prediction;
      return;
    }
  }
  state_.prediction = predict_state(state_, *model_, *schema_);
}

void Episode::push_acquisition(TranscriptStep step) {
  step.index = static_cast<int>(transcript_.steps.size());
  step.prediction = state_.prediction;
  step.n_images = static_cast<int>(state_.images.size());
  step.n_meta = static_cast<int>(state_.answers.size());
  transcript_.steps.push_back(std::move(step));
}

uint64_t Episode::image_mask() const {
  uint64_t m = 0;
  for (const auto& im : state_.images) m |= uint64_t{1} << im.source_index;
  return m;
}

uint64_t Episode::field_mask() const {
  uint64_t m = 0;
  for (const auto& [id, a] : state_.answers) m |= uint64_t{1} << id;
  return m;
}

int Episode::first_unused_image(std::optional<ViewType> view) const {
  for (int i = 0; i < static_cast<int>(bound_->images.size()); ++i) {
    if (state_.has_image(i)) continue;
    if (!view || bound_->images[static_cast<size_t>(i)].view == *view) return i;
  }
  return -1;
}

void Episode::decide() {
  pending_ = TranscriptStep{};
  const bool images_left = bound_ ? first_unused_image(std::nullopt) >= 0
                                  : static_cast<int>(state_.images.size()) < live_max_images_;

  std::vector<Action> actions;
  for (const auto& f : schema_->fields()) {
    if (!state_.answers.contains(f.id)) actions.push_back(AcquireMetadata{f.id});
  }
  if (images_left) {
    if (config_.instruction_mode) {
      for (ViewType v : kAllViews) actions.push_back(AcquireImage{v});
    } else {
      actions.push_back(AcquireImage{std::nullopt});
    }
  }

  const ValueCache::Entry* cached = cache_ ? cache_->find(image_mask(), field_mask(), config_) : nullptr;
  std::vector<double> values;
  if (cached && cached->actions == actions) {
    values = cached->values;
  } else {
    for (const auto& a : actions) {
      if (const auto* m = std::get_if<AcquireMetadata>(&a)) {
        values.push_back(estimate_metadata_value(state_, schema_->field(m->field_id), *model_,
                                                 *schema_, config_.metric, config_.kl_reversed));
      } else {
        values.push_back(estimate_image_value(state_, std::get<AcquireImage>(a).view, *ivm_));
      }
    }
    if (cache_) cache_->insert(image_mask(), field_mask(), config_, {state_.prediction, values, actions});
  }

  for (size_t i = 0; i < actions.size(); ++i) {
    const bool meta = std::holds_alternative<AcquireMetadata>(actions[i]);
    const double t = meta ? config_.t_meta : config_.t_image;
    pending_.candidates.push_back(Candidate{actions[i], values[i], values[i] - t});
  }

  if (actions.empty()) {
    pending_.action = Stop{StopReason::InputsExhausted};
  } else if (config_.max_steps && decisions_ >= *config_.max_steps) {
    pending_.action = Stop{StopReason::StepCap};
  } else {
    pending_.action = choose_action(pending_.candidates, config_.early_stop);
  }

  if (const auto* stop = std::get_if<Stop>(&pending_.action)) {
    TranscriptStep step = std::move(pending_);
    push_acquisition(std::move(step));
    transcript_.final_prediction = state_.prediction;
    transcript_.stop_reason = stop->reason;
    finished_ = true;
    pending_ = transcript_.steps.back();
  }
}

void Episode::answer_metadata(const AnswerValue& a) {
  if (finished_) throw PreconditionError("episode already stopped");
  const auto* m = std::get_if<AcquireMetadata>(&pending_.action);
  if (!m) throw PreconditionError("pending action is not a metadata question");
  schema_->check_answer(m->field_id, a);
  state_.answers[m->field_id] = a;
  ++decisions_;
  TranscriptStep step = std::move(pending_);
  step.answer = a;
  refresh_prediction();
  push_acquisition(std::move(step));
  decide();
}

void Episode::answer_metadata_from_case() {
  if (!bound_) throw PreconditionError("live episodes have no stored answers");
  const auto* m = std::get_if<AcquireMetadata>(&pending_.action);
  if (!m) throw PreconditionError("pending action is not a metadata question");
  answer_metadata(bound_->metadata.at(m->field_id));
}

void Episode::provide_image() {
  if (finished_) throw PreconditionError("episode already stopped");
  if (!bound_) throw PreconditionError("live episodes need an uploaded image");
  const auto* req = std::get_if<AcquireImage>(&pending_.action);
  if (!req) throw PreconditionError("pending action is not an image request");
  int idx = first_unused_image(req->view);
  bool substituted = false;
  if (idx < 0) {
    idx = first_unused_image(std::nullopt);
    substituted = true;
  }
  if (idx < 0) throw PreconditionError("no unused image left");
  const auto& im = bound_->images[static_cast<size_t>(idx)];
  ++decisions_;
  acquire_image(AcquiredImage{idx, im.view, req->view, substituted, im.embedding}, false);
  decide();
}

void Episode::provide_image(Embedding e, ViewType view) {
  if (finished_) throw PreconditionError("episode already stopped");
  if (bound_) throw PreconditionError("simulated episodes reveal images from the bound case");
  const auto* req = std::get_if<AcquireImage>(&pending_.action);
  if (!req) throw PreconditionError("pending action is not an image request");
  if (!state_.images.empty() && e.size() != state_.images.front().embedding.size()) {
    throw EncodingError("embedding dimension mismatch");
  }
  const bool substituted = req->view && *req->view != view;
  const int idx = static_cast<int>(state_.images.size());
  ++decisions_;
  acquire_image(AcquiredImage{idx, view, req->view, substituted, std::move(e)}, false);
  decide();
}

EpisodeTranscript run_episode(const Case& c, const Classifier& model, const MetadataSchema& schema,
                              const ImageValueModel& ivm, const EngineConfig& config,
                              ValueCache* cache) {
  Episode ep(model, schema, ivm, config);
  ep.begin(c, cache);
  while (!ep.finished()) {
    if (std::holds_alternative<AcquireMetadata>(ep.pending())) {
      ep.answer_metadata_from_case();
    } else {
      ep.provide_image();
    }
  }
  return ep.transcript();
}

std::vector<EpisodeTranscript> run_episodes(std::span<const Case> cases, const Classifier& model,
                                            const MetadataSchema& schema,
                                            const ImageValueModel& ivm, const EngineConfig& config) {
  std::vector<EpisodeTranscript> out(cases.size());
  parallel_for(cases.size(), [&](size_t i) { out[i] = run_episode(cases[i], model, schema, ivm, config); });
  return out;
}

}  // namespace mint
