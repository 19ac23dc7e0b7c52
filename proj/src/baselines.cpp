#include "mint/baselines.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "mint/parallel.hpp"
#include "mint/rng.hpp"

namespace mint {

namespace {

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

std::optional<int> parse_count(std::string_view v) {
  if (v == "all") return std::nullopt;
  const int n = std::stoi(std::string(v));
  if (n < 0) throw std::invalid_argument("counts must be non-negative");
  return n;
}

std::string count_token(const std::optional<int>& n) { return n ? std::to_string(*n) : "all"; }

const char* const kPolicyHelp =
    "random[:seed=N][:meta=N] | global[:order=i,j,...][:meta=N] | msp:tau=X[:seed=N] | "
    "fixed:inputs=N[:metric=kl|js|entropy][:t_meta=X][:t_image=X] | fixed:meta=N|all:images=N|all[:order=js|kl|entropy|schema] | "
    "mint:<metric>[:...]";

// Builds a transcript for scripted policies with the same step layout the
// engine emits.
class Recorder {
 public:
  Recorder(const Case& c, const Classifier& model, const MetadataSchema& schema, std::string policy)
      : case_(c), model_(model), schema_(schema) {
    t_.case_id = c.case_id;
    t_.label = c.label;
    t_.policy = std::move(policy);
    s_.case_id = c.case_id;
  }

  void image(int idx, bool initial) {
    const auto& im = case_.images[static_cast<size_t>(idx)];
    s_.images.push_back(AcquiredImage{idx, im.view, std::nullopt, false, im.embedding});
    TranscriptStep step;
    step.initial = initial;
    step.action = AcquireImage{std::nullopt};
    step.image_index = idx;
    step.image_view = im.view;
    push(std::move(step));
  }

  void field(int id, std::vector<Candidate> candidates = {}) {
    s_.answers[id] = case_.metadata.at(id);
    TranscriptStep step;
    step.candidates = std::move(candidates);
    step.action = AcquireMetadata{id};
    step.answer = s_.answers[id];
    push(std::move(step));
  }

  EpisodeTranscript finish(StopReason reason) {
    TranscriptStep step;
    step.action = Stop{reason};
    step.index = static_cast<int>(t_.steps.size());
    step.prediction = s_.prediction;
    step.n_images = static_cast<int>(s_.images.size());
    step.n_meta = static_cast<int>(s_.answers.size());
    t_.steps.push_back(std::move(step));
    t_.final_prediction = s_.prediction;
    t_.stop_reason = reason;
    return std::move(t_);
  }

  const AcquisitionState& state() const { return s_; }

 private:
  void push(TranscriptStep step) {
    s_.prediction = predict_state(s_, model_, schema_);
    step.index = static_cast<int>(t_.steps.size());
    step.prediction = s_.prediction;
    step.n_images = static_cast<int>(s_.images.size());
    step.n_meta = static_cast<int>(s_.answers.size());
    t_.steps.push_back(std::move(step));
  }

  const Case& case_;
  const Classifier& model_;
  const MetadataSchema& schema_;
  AcquisitionState s_;
  EpisodeTranscript t_;
};

EpisodeTranscript images_then_order(const Case& c, const std::vector<int>& order,
                                    std::optional<int> n_meta, const Classifier& model,
                                    const MetadataSchema& schema, const std::string& token) {
  Recorder r(c, model, schema, token);
  for (int i = 0; i < static_cast<int>(c.images.size()); ++i) r.image(i, true);
  const size_t n = n_meta ? std::min(order.size(), static_cast<size_t>(*n_meta)) : order.size();
  for (size_t i = 0; i < n; ++i) r.field(order[i]);
  return r.finish(n < order.size() ? StopReason::StepCap : StopReason::InputsExhausted);
}

}  // namespace

Policy parse_policy(std::string_view token) {
  const auto parts = split(token, ':');
  const auto head = parts[0];
  auto bad = [&](const std::string& why) {
    return std::invalid_argument("bad policy token '" + std::string(token) + "': " + why +
                                 "; expected " + kPolicyHelp);
  };
  if (head == "mint") {
    try {
      return MintPolicy{EngineConfig::parse(token)};
    } catch (const std::invalid_argument& e) {
      throw bad(e.what());
    }
  }
  try {
    std::vector<std::pair<std::string_view, std::string_view>> kv;
    for (size_t i = 1; i < parts.size(); ++i) {
      const auto eq = parts[i].find('=');
      if (eq == std::string_view::npos) throw bad("missing '=' in '" + std::string(parts[i]) + "'");
      kv.emplace_back(parts[i].substr(0, eq), parts[i].substr(eq + 1));
    }
    if (head == "random") {
      RandomPolicy p;
      for (const auto& [k, v] : kv) {
        if (k == "seed") p.seed = std::stoull(std::string(v));
        else if (k == "meta") p.n_meta = parse_count(v);
        else throw bad("unknown key '" + std::string(k) + "'");
      }
      return p;
    }
    if (head == "global") {
      GlobalStaticPolicy p;
      for (const auto& [k, v] : kv) {
        if (k == "order") {
          for (auto f : split(v, ',')) p.order.push_back(std::stoi(std::string(f)));
        } else if (k == "meta") {
          p.n_meta = parse_count(v);
        } else {
          throw bad("unknown key '" + std::string(k) + "'");
        }
      }
      return p;
    }
    if (head == "msp") {
      MspPolicy p;
      for (const auto& [k, v] : kv) {
        if (k == "tau") p.tau = std::stod(std::string(v));
        else if (k == "seed") p.seed = std::stoull(std::string(v));
        else throw bad("unknown key '" + std::string(k) + "'");
      }
      if (!(p.tau >= 0.0)) throw bad("tau must be >= 0");
      return p;
    }
    if (head == "fixed") {
      FixedBudgetPolicy p;
      for (const auto& [k, v] : kv) {
        if (k == "inputs") {
          p.n_inputs = std::stoi(std::string(v));
          if (*p.n_inputs < 1) throw bad("inputs must be >= 1");
        } else if (k == "meta") {
          p.n_meta = parse_count(v);
        } else if (k == "images") {
          p.n_images = parse_count(v);
          if (p.n_images && *p.n_images < 1) throw bad("images must be >= 1");
        } else if (k == "order") {
          if (v == "schema") {
            p.order = BudgetOrder::Schema;
          } else {
            p.order = BudgetOrder::Value;
            p.metric = parse_metric(v);
          }
        } else if (k == "metric") {
          p.metric = parse_metric(v);
        } else if (k == "t_meta") {
          p.t_meta = std::stod(std::string(v));
        } else if (k == "t_image") {
          p.t_image = std::stod(std::string(v));
        } else {
          throw bad("unknown key '" + std::string(k) + "'");
        }
      }
      if (p.n_inputs && (p.n_meta || p.n_images)) throw bad("inputs= excludes meta=/images=");
      return p;
    }
  } catch (const std::invalid_argument& e) {
    if (std::string_view(e.what()).starts_with("bad policy token")) throw;
    throw bad(e.what());
  } catch (const std::out_of_range&) {
    throw bad("number out of range");
  }
  throw bad("unknown policy '" + std::string(head) + "'");
}

std::string policy_token(const Policy& policy) {
  return std::visit(
      [](const auto& p) -> std::string {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, RandomPolicy>) {
          std::string t = "random:seed=" + std::to_string(p.seed);
          if (p.n_meta) t += ":meta=" + std::to_string(*p.n_meta);
          return t;
        } else if constexpr (std::is_same_v<T, GlobalStaticPolicy>) {
          std::string t = "global";
          if (!p.order.empty()) {
            t += ":order=";
            for (size_t i = 0; i < p.order.size(); ++i) t += (i ? "," : "") + std::to_string(p.order[i]);
          }
          if (p.n_meta) t += ":meta=" + std::to_string(*p.n_meta);
          return t;
        } else if constexpr (std::is_same_v<T, MspPolicy>) {
          std::ostringstream os;
          os.precision(17);
          os << "msp:tau=" << p.tau << ":seed=" << p.seed;
          return os.str();
        } else if constexpr (std::is_same_v<T, FixedBudgetPolicy>) {
          if (p.n_inputs) {
            std::ostringstream os;
            os.precision(17);
            os << "fixed:inputs=" << *p.n_inputs << ":metric=" << to_string(p.metric);
            if (p.t_meta != 0.0) os << ":t_meta=" << p.t_meta;
            if (p.t_image != 0.0) os << ":t_image=" << p.t_image;
            return os.str();
          }
          return "fixed:meta=" + count_token(p.n_meta) + ":images=" + count_token(p.n_images) +
                 ":order=" + (p.order == BudgetOrder::Schema ? "schema" : std::string(to_string(p.metric)));
        } else {
          return p.config.token();
        }
      },
      policy);
}

std::vector<int> fit_global_order(std::span<const Case> validation, const Classifier& model,
                                  const MetadataSchema& schema) {
  if (validation.empty()) throw DatasetError("global order needs a non-empty validation set");
  std::vector<std::vector<Embedding>> images(validation.size());
  for (size_t i = 0; i < validation.size(); ++i) {
    for (const auto& im : validation[i].images) images[i].push_back(im.embedding);
  }
  std::vector<int> order;
  std::vector<bool> used(static_cast<size_t>(schema.size()), false);
  std::vector<AnswerMap> prefix(validation.size());
  for (int pos = 0; pos < schema.size(); ++pos) {
    int best = -1;
    int best_hits = -1;
    for (int f = 0; f < schema.size(); ++f) {
      if (used[static_cast<size_t>(f)]) continue;
      std::vector<int> hit(validation.size(), 0);
      parallel_for(validation.size(), [&](size_t i) {
        AnswerMap a = prefix[i];
        a[f] = validation[i].metadata.at(f);
        hit[i] = model.predict(images[i], a, schema).in_top_k(validation[i].label, 3) ? 1 : 0;
      });
      const int hits = std::accumulate(hit.begin(), hit.end(), 0);
      if (hits > best_hits) {
        best_hits = hits;
        best = f;
      }
    }
    used[static_cast<size_t>(best)] = true;
    order.push_back(best);
    for (size_t i = 0; i < validation.size(); ++i) prefix[i][best] = validation[i].metadata.at(best);
  }
  return order;
}

EpisodeTranscript run_policy(const Policy& policy, const Case& c, const Classifier& model,
                             const MetadataSchema& schema, const ImageValueModel& ivm) {
  const std::string token = policy_token(policy);
  return std::visit(
      [&](const auto& p) -> EpisodeTranscript {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, RandomPolicy>) {
          std::vector<int> order(static_cast<size_t>(schema.size()));
          std::iota(order.begin(), order.end(), 0);
          auto rng = substream(p.seed, "random-order", static_cast<uint64_t>(c.case_id));
          std::shuffle(order.begin(), order.end(), rng);
          return images_then_order(c, order, p.n_meta, model, schema, token);
        } else if constexpr (std::is_same_v<T, GlobalStaticPolicy>) {
          if (static_cast<int>(p.order.size()) != schema.size()) {
            throw std::invalid_argument("global order must list every field (fit it first)");
          }
          auto sorted = p.order;
          std::sort(sorted.begin(), sorted.end());
          for (int i = 0; i < schema.size(); ++i) {
            if (sorted[static_cast<size_t>(i)] != i) throw std::invalid_argument("global order is not a permutation");
          }
          return images_then_order(c, p.order, p.n_meta, model, schema, token);
        } else if constexpr (std::is_same_v<T, MspPolicy>) {
          std::vector<int> order(c.images.size());
          std::iota(order.begin(), order.end(), 0);
          auto rng = substream(p.seed, "msp-order", static_cast<uint64_t>(c.case_id));
          std::shuffle(order.begin(), order.end(), rng);
          Recorder r(c, model, schema, token);
          r.image(order[0], true);
          for (size_t i = 1; i < order.size(); ++i) {
            const auto& probs = r.state().prediction.vec();
            if (*std::max_element(probs.begin(), probs.end()) >= p.tau) {
              return r.finish(StopReason::AllValuesBelowThreshold);
            }
            r.image(order[i], false);
          }
          const auto& probs = r.state().prediction.vec();
          const bool confident = *std::max_element(probs.begin(), probs.end()) >= p.tau;
          return r.finish(confident ? StopReason::AllValuesBelowThreshold : StopReason::InputsExhausted);
        } else if constexpr (std::is_same_v<T, FixedBudgetPolicy>) {
          if (p.n_inputs) {
            EngineConfig cfg;
            cfg.metric = p.metric;
            cfg.t_meta = p.t_meta;
            cfg.t_image = p.t_image;
            cfg.early_stop = false;
            cfg.max_steps = *p.n_inputs - 1;
            auto t = run_episode(c, model, schema, ivm, cfg);
            t.policy = token;
            return t;
          }
          Recorder r(c, model, schema, token);
          const int n_img = p.n_images ? std::min(*p.n_images, static_cast<int>(c.images.size()))
                                       : static_cast<int>(c.images.size());
          for (int i = 0; i < n_img; ++i) r.image(i, true);
          const int n_meta = p.n_meta ? std::min(*p.n_meta, schema.size()) : schema.size();
          for (int k = 0; k < n_meta; ++k) {
            if (p.order == BudgetOrder::Schema) {
              r.field(k);
              continue;
            }
            std::vector<Candidate> cands;
            for (const auto& f : schema.fields()) {
              if (r.state().answers.contains(f.id)) continue;
              const double v = estimate_metadata_value(r.state(), f, model, schema, p.metric);
              cands.push_back(Candidate{AcquireMetadata{f.id}, v, v});
            }
            const auto chosen = std::get<AcquireMetadata>(choose_action(cands)).field_id;
            r.field(chosen, std::move(cands));
          }
          const bool capped = n_img < static_cast<int>(c.images.size()) || n_meta < schema.size();
          return r.finish(capped ? StopReason::StepCap : StopReason::InputsExhausted);
        } else {
          auto t = run_episode(c, model, schema, ivm, p.config);
          return t;
        }
      },
      policy);
}

std::vector<EpisodeTranscript> run_policy(const Policy& p, std::span<const Case> cases,
                                          const Classifier& model, const MetadataSchema& schema,
                                          const ImageValueModel& ivm) {
  std::vector<EpisodeTranscript> out(cases.size());
  parallel_for(cases.size(), [&](size_t i) { out[i] = run_policy(p, cases[i], model, schema, ivm); });
  return out;
}

}  // namespace mint
