#pragma once
// Threshold selection on validation data: either keep accuracy within a
// tolerance while dropping as many inputs as possible (task 1), or drop a
// required number of inputs while losing as little accuracy as possible
// (task 2).

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mint/core.hpp"
#include "mint/engine.hpp"

namespace mint {

class InfeasibleError : public std::runtime_error {
 public:
  InfeasibleError(const std::string& what, double best) : std::runtime_error(what), best_(best) {}
  // Best achievable value of the constrained objective over the grid.
  double best() const { return best_; }

 private:
  double best_;
};

struct FullInputResult {
  int64_t case_id = 0;
  int label = 0;
  int n_available = 0;  // images + metadata fields
  PredictiveDistribution prediction;
};

std::vector<FullInputResult> full_input_results(std::span<const Case> cases, const Classifier& model,
                                                const MetadataSchema& schema);

enum class LossMode { AggregateTop3, PerCaseCrossEntropy };

struct Objectives {
  double o1 = 0.0;  // mean available - mean acquired
  double o2 = 0.0;  // performance change versus full inputs
  double top3_full = 0.0;
  double top3_acquired = 0.0;
  double mean_available = 0.0;
  double mean_acquired = 0.0;
};

Objectives evaluate_objectives(std::span<const EpisodeTranscript> transcripts,
                               std::span<const FullInputResult> full,
                               LossMode mode = LossMode::AggregateTop3);

// Compact per-episode summary kept for every grid point.
struct EpisodeSummary {
  int n_images = 0;
  int n_meta = 0;
  bool top3 = false;
  double cross_entropy = 0.0;
};

EpisodeSummary summarize(const EpisodeTranscript& t);

struct OperatingStats {
  double top3 = 0.0;
  double mean_inputs = 0.0;
  double mean_meta = 0.0;
  double mean_images = 0.0;
  double reduction_fraction = 0.0;  // 1 - mean acquired / mean available
  double median_inputs = 0.0;
  double o1 = 0.0;
  double o2 = 0.0;
};

json stats_to_json(const OperatingStats& s);

OperatingStats operating_stats(std::span<const EpisodeSummary> episodes,
                               std::span<const FullInputResult> full, LossMode mode);

struct ThresholdGrid {
  std::vector<double> t_meta;
  std::vector<double> t_image;
  size_t size() const { return t_meta.size() * t_image.size(); }
  // Row-major: index = i_meta * |t_image| + i_image.
  std::pair<double, double> at(size_t index) const {
    return {t_meta[index / t_image.size()], t_image[index % t_image.size()]};
  }
  json to_json() const;
  static ThresholdGrid from_json(const json& j);
};

// -inf, 0, 1e-4, 3e-4, ..., 3, +inf on both axes.
ThresholdGrid default_grid();

// Quantiles of the raw candidate values seen in exhaustive validation
// episodes, plus the infinite anchors and zero.
ThresholdGrid data_driven_grid(std::span<const EpisodeTranscript> exhaustive, int points_per_axis);

struct GridPoint {
  double t_meta = 0.0;
  double t_image = 0.0;
  OperatingStats stats;
};

struct Sweep {
  EngineConfig base;
  ThresholdGrid grid;
  LossMode mode = LossMode::AggregateTop3;
  std::vector<GridPoint> points;  // aligned with grid indices
};

// Runs the engine at every grid point over the cases, sharing one value
// cache per case across points.
Sweep sweep_thresholds(std::span<const Case> cases, const Classifier& model,
                       const MetadataSchema& schema, const ImageValueModel& ivm,
                       const EngineConfig& base, const ThresholdGrid& grid,
                       LossMode mode = LossMode::AggregateTop3);

enum class Task { MaxReduction, MinLoss };  // task 1 (epsilon2), task 2 (epsilon1)
std::string_view to_string(Task t);

struct OperatingPoint {
  Task task = Task::MaxReduction;
  double epsilon = 0.0;
  size_t grid_index = 0;
  double t_meta = 0.0;
  double t_image = 0.0;
  OperatingStats achieved;

  EngineConfig engine_config(const EngineConfig& base) const;
  json to_json() const;
  static OperatingPoint from_json(const json& j);
};

// Task 1: among points with O2 <= epsilon2, maximise O1; ties by lower
// median inputs, then lower grid index.
OperatingPoint calibrate_task1(const Sweep& sweep, double epsilon2);
// Task 2: among points with O1 >= epsilon1, minimise O2; ties by larger O1,
// then lower grid index.
OperatingPoint calibrate_task2(const Sweep& sweep, double epsilon1);

json calibration_report(const Sweep& sweep, const OperatingPoint& chosen);

// Tau whose MSP episodes come closest to the target mean image count, found
// by scanning the observed confidences; infeasible when no tau lands within 0.1.
double fit_msp_tau(std::span<const Case> validation, const Classifier& model,
                   const MetadataSchema& schema, double target_mean_images, uint64_t seed = 1);

}  // namespace mint
