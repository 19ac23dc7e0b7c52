#pragma once
// Monte Carlo model of users abandoning the submission flow. Each screen a
// case touches may lose the user once; images are lost per requested image.

#include <map>
#include <span>
#include <vector>

#include "mint/core.hpp"
#include "mint/engine.hpp"

namespace mint {

struct ScreenSpec {
  int screen_id = 0;
  double p_drop = 0.01;
};

struct ImagesScreen {
  double p_drop = 0.02;
  int n_images_nominal = 3;
  // Per-image probability q with (1 - q)^n_nominal = 1 - p_drop.
  double per_image() const;
};

struct FlowModel {
  std::vector<ScreenSpec> screens;
  std::map<int, int> field_screen;  // field id -> screen id
  ImagesScreen images;

  // One screen per distinct schema screen id, fields mapped as the schema says.
  static FlowModel defaults(const MetadataSchema& schema, double p_screen = 0.01,
                            double p_images = 0.02);
  // Throws SchemaError on bad probabilities or unmapped fields.
  void validate(const MetadataSchema& schema) const;
  double p_screen(int screen_id) const;
  json to_json() const;
  static FlowModel from_json(const json& j);
};

struct Interval {
  double mean = 0.0;
  double lo = 0.0;  // 2.5th percentile over simulations
  double hi = 0.0;  // 97.5th
  double stderr_ = 0.0;  // standard error of the mean over simulations
};

json interval_to_json(const Interval& iv);

struct DropoffResult {
  Interval drop_rate;
  Interval correct_shown_rate;
  std::vector<double> per_sim_drop;
  std::vector<double> per_sim_correct;
  int n_sims = 0;
  json to_json(bool with_traces = false) const;
};

// Uniform draws are keyed by (seed, sim, case_id, slot), so two transcript
// sets simulated with the same seed share their randomness case by case.
DropoffResult simulate_dropoff(std::span<const EpisodeTranscript> transcripts, const FlowModel& flow,
                               const MetadataSchema& schema, int n_sims, uint64_t seed, int k = 3);

struct DropoffComparison {
  DropoffResult a, b;
  Interval drop_delta;     // a - b per simulation
  Interval correct_delta;  // a - b per simulation
  double drop_dominance = 0.0;  // fraction of simulations with drop(a) <= drop(b)
  json to_json() const;
};

// Throws PreconditionError unless both sets cover the same cases in order.
DropoffComparison compare_dropoff(std::span<const EpisodeTranscript> a,
                                  std::span<const EpisodeTranscript> b, const FlowModel& flow,
                                  const MetadataSchema& schema, int n_sims, uint64_t seed, int k = 3);

// 1 - prod(1 - p) over touched screens and requested images, averaged over cases.
double expected_drop_rate(std::span<const EpisodeTranscript> transcripts, const FlowModel& flow,
                          const MetadataSchema& schema);

}  // namespace mint
