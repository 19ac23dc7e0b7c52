#include "mint/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "mint/parallel.hpp"
#include "mint/rng.hpp"
#include "mint/synthdata.hpp"

namespace mint {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double cross_entropy(const PredictiveDistribution& p, int label) {
  return -std::log(std::max(p[static_cast<size_t>(label)], kClampEpsilon));
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

OperatingStats stats_from_json(const json& j) {
  OperatingStats s;
  s.top3 = j.at("top3").get<double>();
  s.mean_inputs = j.at("mean_inputs").get<double>();
  s.mean_meta = j.at("mean_meta").get<double>();
  s.mean_images = j.at("mean_images").get<double>();
  s.reduction_fraction = j.at("reduction_fraction").get<double>();
  s.median_inputs = j.at("median_inputs").get<double>();
  s.o1 = j.at("o1").get<double>();
  s.o2 = j.at("o2").get<double>();
  return s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

json stats_to_json(const OperatingStats& s) {
  return {{"top3", s.top3},
          {"mean_inputs", s.mean_inputs},
          {"mean_meta", s.mean_meta},
          {"mean_images", s.mean_images},
          {"reduction_fraction", s.reduction_fraction},
          {"median_inputs", s.median_inputs},
          {"o1", s.o1},
          {"o2", s.o2}};
}

std::vector<FullInputResult> full_input_results(std::span<const Case> cases, const Classifier& model,
                                                const MetadataSchema& schema) {
  std::vector<FullInputResult> out(cases.size());
  parallel_for(cases.size(), [&](size_t i) {
    const Case& c = cases[i];
    out[i] = FullInputResult{c.case_id, c.label, static_cast<int>(c.images.size()) + schema.size(),
                             predict_full(c, model, schema)};
  });
  return out;
}

EpisodeSummary summarize(const EpisodeTranscript& t) {
  EpisodeSummary s;
  s.n_images = t.n_images();
  s.n_meta = t.n_meta();
  if (t.label >= 0) {
    s.top3 = t.final_prediction.in_top_k(t.label, 3);
    s.cross_entropy = cross_entropy(t.final_prediction, t.label);
  }
  return s;
}

OperatingStats operating_stats(std::span<const EpisodeSummary> episodes,
                               std::span<const FullInputResult> full, LossMode mode) {
  if (episodes.size() != full.size()) throw std::invalid_argument("episode and full-input case sets differ");
  if (episodes.empty()) throw std::invalid_argument("no episodes");
  const double n = static_cast<double>(episodes.size());
  OperatingStats s;
  double available = 0.0, withheld = 0.0, full_top3 = 0.0, per_case = 0.0;
  std::vector<double> inputs;
  for (size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    s.top3 += e.top3;
    s.mean_images += e.n_images;
    s.mean_meta += e.n_meta;
    inputs.push_back(e.n_images + e.n_meta);
    available += full[i].n_available;
    withheld += full[i].n_available - e.n_images - e.n_meta;  // integer per case, so exact
    full_top3 += full[i].prediction.in_top_k(full[i].label, 3);
    per_case += std::abs(cross_entropy(full[i].prediction, full[i].label) - e.cross_entropy);
  }
  // Hit counts are integers, so the aggregate gap is a single exact division.
  const double top3_gap = std::abs(full_top3 - s.top3) / n;
  s.top3 /= n;
  s.mean_images /= n;
  s.mean_meta /= n;
  s.mean_inputs = s.mean_images + s.mean_meta;
  available /= n;
  full_top3 /= n;
  s.median_inputs = median(inputs);
  s.reduction_fraction = 1.0 - s.mean_inputs / available;
  s.o1 = withheld / n;
  s.o2 = mode == LossMode::AggregateTop3 ? top3_gap : per_case / n;
  return s;
}

Objectives evaluate_objectives(std::span<const EpisodeTranscript> transcripts,
                               std::span<const FullInputResult> full, LossMode mode) {
  if (transcripts.size() != full.size()) throw std::invalid_argument("transcript and full-input case sets differ");
  std::vector<EpisodeSummary> eps;
  for (size_t i = 0; i < transcripts.size(); ++i) {
    if (transcripts[i].case_id != full[i].case_id) {
      throw std::invalid_argument("case mismatch at position " + std::to_string(i));
    }
    eps.push_back(summarize(transcripts[i]));
  }
  const auto s = operating_stats(eps, full, mode);
  Objectives o;
  o.o1 = s.o1;
  o.o2 = s.o2;
  o.top3_acquired = s.top3;
  o.mean_acquired = s.mean_inputs;
  o.mean_available = s.mean_inputs + s.o1;
  double t = 0.0;
  for (const auto& f : full) t += f.prediction.in_top_k(f.label, 3);
  o.top3_full = t / static_cast<double>(full.size());
  return o;
}

json ThresholdGrid::to_json() const {
  json m = json::array(), im = json::array();
  for (double v : t_meta) m.push_back(real_to_json(v));
  for (double v : t_image) im.push_back(real_to_json(v));
  return {{"t_meta", m}, {"t_image", im}};
}

ThresholdGrid ThresholdGrid::from_json(const json& j) {
  ThresholdGrid g;
  for (const auto& v : j.at("t_meta")) g.t_meta.push_back(real_from_json(v));
  for (const auto& v : j.at("t_image")) g.t_image.push_back(real_from_json(v));
  if (g.t_meta.empty() || g.t_image.empty()) throw std::invalid_argument("threshold grid axes must be non-empty");
  return g;
}

ThresholdGrid default_grid() {
  const std::vector<double> axis{-kInf, 0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, kInf};
  return ThresholdGrid{axis, axis};
}

ThresholdGrid data_driven_grid(std::span<const EpisodeTranscript> exhaustive, int points_per_axis) {
  if (points_per_axis < 1) throw std::invalid_argument("points_per_axis must be >= 1");
  std::vector<double> meta, image;
  for (const auto& t : exhaustive) {
    for (const auto& s : t.steps) {
      for (const auto& c : s.candidates) {
        (std::holds_alternative<AcquireMetadata>(c.action) ? meta : image).push_back(c.value);
      }
    }
  }
  auto axis = [&](const std::vector<double>& vals) {
    std::vector<double> a{-kInf, 0.0, kInf};
    if (!vals.empty()) {
      for (int i = 0; i < points_per_axis; ++i) {
        const double q = 100.0 * (i + 0.5) / points_per_axis;
        a.push_back(percentile(vals, q));
      }
    }
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    return a;
  };
  return ThresholdGrid{axis(meta), axis(image)};
}

Sweep sweep_thresholds(std::span<const Case> cases, const Classifier& model,
                       const MetadataSchema& schema, const ImageValueModel& ivm,
                       const EngineConfig& base, const ThresholdGrid& grid, LossMode mode) {
  if (grid.size() == 0) throw std::invalid_argument("empty threshold grid");
  if (cases.empty()) throw std::invalid_argument("no cases to calibrate on");
  const auto full = full_input_results(cases, model, schema);
  std::vector<std::vector<EpisodeSummary>> per_point(grid.size(), std::vector<EpisodeSummary>(cases.size()));
  parallel_for(cases.size(), [&](size_t i) {
    ValueCache cache;
    for (size_t g = 0; g < grid.size(); ++g) {
      EngineConfig cfg = base;
      std::tie(cfg.t_meta, cfg.t_image) = grid.at(g);
      per_point[g][i] = summarize(run_episode(cases[i], model, schema, ivm, cfg, &cache));
    }
  });
  Sweep s;
  s.base = base;
  s.grid = grid;
  s.mode = mode;
  for (size_t g = 0; g < grid.size(); ++g) {
    const auto [tm, ti] = grid.at(g);
    s.points.push_back(GridPoint{tm, ti, operating_stats(per_point[g], full, mode)});
  }
  return s;
}

std::string_view to_string(Task t) { return t == Task::MaxReduction ? "task1" : "task2"; }

EngineConfig OperatingPoint::engine_config(const EngineConfig& base) const {
  EngineConfig c = base;
  c.t_meta = t_meta;
  c.t_image = t_image;
  return c;
}

json OperatingPoint::to_json() const {
  return {{"task", std::string(mint::to_string(task))},
          {"epsilon", epsilon},
          {"grid_index", grid_index},
          {"t_meta", real_to_json(t_meta)},
          {"t_image", real_to_json(t_image)},
          {"achieved", stats_to_json(achieved)}};
}

OperatingPoint OperatingPoint::from_json(const json& j) {
  OperatingPoint p;
  const auto task = j.at("task").get<std::string>();
  if (task != "task1" && task != "task2") throw std::invalid_argument("unknown task '" + task + "'");
  p.task = task == "task1" ? Task::MaxReduction : Task::MinLoss;
  p.epsilon = j.at("epsilon").get<double>();
  p.grid_index = j.at("grid_index").get<size_t>();
  p.t_meta = real_from_json(j.at("t_meta"));
  p.t_image = real_from_json(j.at("t_image"));
  p.achieved = stats_from_json(j.at("achieved"));
  return p;
}

namespace {

// Small slack so accumulated rounding in means never flips feasibility.
constexpr double kSlack = 1e-12;

OperatingPoint make_point(const Sweep& s, Task task, double eps, size_t g) {
  OperatingPoint p;
  p.task = task;
  p.epsilon = eps;
  p.grid_index = g;
  p.t_meta = s.points[g].t_meta;
  p.t_image = s.points[g].t_image;
  p.achieved = s.points[g].stats;
  return p;
}

}  // namespace

OperatingPoint calibrate_task1(const Sweep& sweep, double epsilon2) {
  if (!(epsilon2 >= 0.0)) throw std::invalid_argument("epsilon2 must be >= 0");
  std::optional<size_t> best;
  double best_o2 = kInf;
  for (size_t g = 0; g < sweep.points.size(); ++g) {
    const auto& s = sweep.points[g].stats;
    best_o2 = std::min(best_o2, s.o2);
    if (s.o2 > epsilon2 + kSlack) continue;
    if (!best) {
      best = g;
      continue;
    }
    const auto& b = sweep.points[*best].stats;
    if (s.o1 > b.o1 || (s.o1 == b.o1 && s.median_inputs < b.median_inputs)) best = g;
  }
  if (!best) {
    throw InfeasibleError("no threshold pair keeps O2 <= " + fmt(epsilon2) + "; best achievable O2 = " +
                              fmt(best_o2),
                          best_o2);
  }
  return make_point(sweep, Task::MaxReduction, epsilon2, *best);
}

OperatingPoint calibrate_task2(const Sweep& sweep, double epsilon1) {
  if (!(epsilon1 >= 0.0)) throw std::invalid_argument("epsilon1 must be >= 0");
  std::optional<size_t> best;
  double best_o1 = -kInf;
  for (size_t g = 0; g < sweep.points.size(); ++g) {
    const auto& s = sweep.points[g].stats;
    best_o1 = std::max(best_o1, s.o1);
    if (s.o1 < epsilon1 - kSlack) continue;
    if (!best) {
      best = g;
      continue;
    }
    const auto& b = sweep.points[*best].stats;
    if (s.o2 < b.o2 || (s.o2 == b.o2 && s.o1 > b.o1)) best = g;
  }
  if (!best) {
    throw InfeasibleError("no threshold pair reaches O1 >= " + fmt(epsilon1) + "; best achievable O1 = " +
                              fmt(best_o1),
                          best_o1);
  }
  return make_point(sweep, Task::MinLoss, epsilon1, *best);
}

json calibration_report(const Sweep& sweep, const OperatingPoint& chosen) {
  json pts = json::array();
  for (size_t g = 0; g < sweep.points.size(); ++g) {
    const auto& p = sweep.points[g];
    json j = stats_to_json(p.stats);
    j["index"] = g;
    j["t_meta"] = real_to_json(p.t_meta);
    j["t_image"] = real_to_json(p.t_image);
    pts.push_back(std::move(j));
  }
  return {{"task", {{"kind", std::string(to_string(chosen.task))}, {"epsilon", chosen.epsilon}}},
          {"loss_mode", sweep.mode == LossMode::AggregateTop3 ? "aggregate_top3" : "per_case_ce"},
          {"base_config", sweep.base.to_json()},
          {"grid", sweep.grid.to_json()},
          {"points", std::move(pts)},
          {"chosen", chosen.to_json()},
          {"engine_token", chosen.engine_config(sweep.base).token()}};
}

double fit_msp_tau(std::span<const Case> validation, const Classifier& model,
                   const MetadataSchema& schema, double target_mean_images, uint64_t seed) {
  if (validation.empty()) throw std::invalid_argument("fit_msp_tau needs validation cases");
  // Max probability after each image of the policy's seeded order.
  std::vector<std::vector<double>> traj(validation.size());
  parallel_for(validation.size(), [&](size_t i) {
    const Case& c = validation[i];
    std::vector<int> order(c.images.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = substream(seed, "msp-order", static_cast<uint64_t>(c.case_id));
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t j = 1; j <= order.size(); ++j) {
      std::vector<int> idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(j));
      std::sort(idx.begin(), idx.end());
      std::vector<Embedding> embs;
      for (int k : idx) embs.push_back(c.images[static_cast<size_t>(k)].embedding);
      const auto p = model.predict(embs, {}, schema);
      traj[i].push_back(*std::max_element(p.vec().begin(), p.vec().end()));
    }
  });
  auto mean_images = [&](double tau) {
    double total = 0.0;
    for (const auto& t : traj) {
      size_t used = t.size();
      for (size_t j = 0; j + 1 < t.size(); ++j) {
        if (t[j] >= tau) {
          used = j + 1;
          break;
        }
      }
      total += static_cast<double>(used);
    }
    return total / static_cast<double>(traj.size());
  };
  if (target_mean_images <= 1.0) return 0.0;
  if (target_mean_images >= mean_images(1.0)) return 1.0;
  // The mean only changes at observed confidences, so search those exactly;
  // ties in distance go to the smaller tau.
  std::vector<double> taus{0.0, 1.0};
  for (const auto& t : traj) taus.insert(taus.end(), t.begin(), t.end());
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  double best_tau = 0.0, best_gap = kInf, best_mean = 0.0;
  for (double tau : taus) {
    if (tau < 0.0 || tau > 1.0) continue;
    const double m = mean_images(tau);
    const double gap = std::abs(m - target_mean_images);
    if (gap < best_gap) {
      best_gap = gap;
      best_tau = tau;
      best_mean = m;
    }
  }
  if (best_gap > 0.1) {
    throw InfeasibleError("no tau gives mean images within 0.1 of " + fmt(target_mean_images) +
                              " (closest " + fmt(best_mean) + ")",
                          best_mean);
  }
  return best_tau;
}

}  // namespace mint
