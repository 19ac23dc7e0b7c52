#pragma once
// Greedy acquisition loop: score every remaining input, take the best one
// whose thresholded value is non-negative, otherwise stop.

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "mint/core.hpp"
#include "mint/divergence.hpp"

namespace mint {

enum class StartPolicy { FirstListed, SeededRandom, AllImages };
std::string_view to_string(StartPolicy p);
StartPolicy parse_start_policy(std::string_view token);

enum class StopReason { AllValuesBelowThreshold, InputsExhausted, StepCap };
std::string_view to_string(StopReason r);
StopReason parse_stop_reason(std::string_view token);

struct EngineConfig {
  MetricKind metric = MetricKind::JSDistance;
  double t_meta = 0.0;
  double t_image = 0.0;
  bool instruction_mode = false;
  bool kl_reversed = false;
  std::optional<int> max_steps;  // cap on acquisitions after the initial image(s)
  bool early_stop = true;  // false: always take the argmax until exhausted or capped
  StartPolicy start = StartPolicy::FirstListed;
  uint64_t seed = 1;  // only used by SeededRandom

  // mint:js:t_meta=0.02:t_image=0.1:instr=1:start=first:max_steps=5:seed=3:kl_rev=1:stop=0
  std::string token() const;
  static EngineConfig parse(std::string_view token);
  json to_json() const;
  static EngineConfig from_json(const json& j);
};

struct AcquireMetadata {
  int field_id = 0;
  bool operator==(const AcquireMetadata&) const = default;
};
struct AcquireImage {
  std::optional<ViewType> view;  // empty means "any image"
  bool operator==(const AcquireImage&) const = default;
};
struct Stop {
  StopReason reason = StopReason::InputsExhausted;
  bool operator==(const Stop&) const = default;
};
using Action = std::variant<AcquireMetadata, AcquireImage, Stop>;

json action_to_json(const Action& a);
Action action_from_json(const json& j);

// Linear regressor over prediction statistics that guesses how much the
// cross-entropy would drop if one more image were added.
class ImageValueModel {
 public:
  static constexpr int kFeatureWidth = 6 + 3;
  using Features = std::array<double, kFeatureWidth>;

  ImageValueModel() = default;
  ImageValueModel(Features weights, double bias) : weights_(weights), bias_(bias) {}

  // [entropy bits, top1, top2, top1 - top2, #images, #metadata, one-hot view]
  // An empty view gives an all-zero one-hot ("any image").
  static Features features(const PredictiveDistribution& p, int n_images, int n_meta,
                           std::optional<ViewType> view);
  double predict(const Features& f) const;
  double value(const PredictiveDistribution& p, int n_images, int n_meta,
               std::optional<ViewType> view) const {
    return predict(features(p, n_images, n_meta, view));
  }

  const Features& weights() const { return weights_; }
  double bias() const { return bias_; }

  json to_json() const;
  static ImageValueModel from_json(const json& j);

 private:
  Features weights_{};
  double bias_ = 0.0;
};

struct ImageValueRow {
  ImageValueModel::Features features{};
  double target = 0.0;  // realised cross-entropy reduction
  int64_t case_id = 0;
  bool flipped_to_correct = false;  // label entered the top-3 with this image
};

// For every case and every prefix of a seeded image permutation (with a
// seeded random subset of metadata revealed), one row per view type still
// available plus one "any" row for the next image in the permutation.
std::vector<ImageValueRow> image_value_rows(std::span<const Case> cases, const Classifier& model,
                                            const MetadataSchema& schema, uint64_t seed);
ImageValueModel fit_image_value_model(std::span<const ImageValueRow> rows, double ridge = 1e-8);
ImageValueModel train_image_value_model(std::span<const Case> cases, const Classifier& model,
                                        const MetadataSchema& schema, uint64_t seed);

struct AcquiredImage {
  int source_index = 0;  // index in the case, or upload order in live mode
  ViewType view = ViewType::Near;
  std::optional<ViewType> requested;
  bool substituted = false;
  Embedding embedding;
};

struct AcquisitionState {
  int64_t case_id = 0;
  std::vector<AcquiredImage> images;  // acquisition order
  AnswerMap answers;
  PredictiveDistribution prediction;

  // Embeddings ordered by source index, the order every prediction uses.
  std::vector<Embedding> pooled_order() const;
  bool has_image(int source_index) const;
};

PredictiveDistribution predict_state(const AcquisitionState& s, const Classifier& model,
                                     const MetadataSchema& schema);

// Mean divergence over the field's hypothetical answers, before thresholds.
double estimate_metadata_value(const AcquisitionState& s, const FieldSpec& field,
                               const Classifier& model, const MetadataSchema& schema,
                               MetricKind metric, bool kl_reversed = false);

double estimate_image_value(const AcquisitionState& s, std::optional<ViewType> view,
                            const ImageValueModel& ivm);

struct Candidate {
  Action action;  // AcquireMetadata or AcquireImage
  double value = 0.0;
  double thresholded = 0.0;
};

json candidate_to_json(const Candidate& c);

// Argmax over thresholded values; ties go to the earlier candidate, so
// metadata (in id order) before images. Without gating the argmax is taken
// even when its thresholded value is negative.
Action choose_action(std::span<const Candidate> candidates, bool gate = true);

struct TranscriptStep {
  int index = 0;
  bool initial = false;  // image acquired before the loop starts
  std::vector<Candidate> candidates;
  Action action;
  std::optional<AnswerValue> answer;
  std::optional<int> image_index;
  std::optional<ViewType> image_view;
  bool substituted = false;
  PredictiveDistribution prediction;  // after this step
  int n_images = 0;
  int n_meta = 0;

  json to_json() const;
  static TranscriptStep from_json(const json& j, const MetadataSchema& schema);
};

struct EpisodeTranscript {
  int64_t case_id = 0;
  int label = -1;  // -1 when unknown (live sessions)
  std::string policy;
  std::vector<TranscriptStep> steps;
  PredictiveDistribution final_prediction;
  StopReason stop_reason = StopReason::InputsExhausted;

  int n_images() const;
  int n_meta() const;
  int n_inputs() const { return n_images() + n_meta(); }
  // Acquisitions after the initial image(s).
  int n_interactions() const;
  // Prediction after the initial images plus n further acquisitions
  // (clamped to the episode's last acquisition).
  const PredictiveDistribution& prediction_after(int n) const;
  std::vector<int> acquired_fields() const;

  json to_json() const;
  static EpisodeTranscript from_json(const json& j, const MetadataSchema& schema);
};

void write_transcripts_jsonl(const std::string& path, std::span<const EpisodeTranscript> ts);
std::vector<EpisodeTranscript> read_transcripts_jsonl(const std::string& path,
                                                      const MetadataSchema& schema);

// Raw value vectors and predictions per visited state of one case, so a
// threshold sweep only pays for each state once. Not thread-safe; use one
// per case.
class ValueCache {
 public:
  struct Entry {
    PredictiveDistribution prediction;
    std::vector<double> values;  // aligned with the unthresholded candidate list
    std::vector<Action> actions;
  };
  const Entry* find(uint64_t image_mask, uint64_t field_mask, const EngineConfig& c) const;
  const Entry& insert(uint64_t image_mask, uint64_t field_mask, const EngineConfig& c, Entry e);
  size_t size() const { return entries_.size(); }

 private:
  using Key = std::tuple<uint64_t, uint64_t, int, bool, bool>;
  static Key key(uint64_t image_mask, uint64_t field_mask, const EngineConfig& c);
  std::map<Key, Entry> entries_;
};

// Step-able episode shared by the batch runner and the session service.
class Episode {
 public:
  Episode(const Classifier& model, const MetadataSchema& schema, const ImageValueModel& ivm,
          EngineConfig config);

  // Simulation: acquire the initial image(s) of a bound case per the start
  // policy and decide the first action.
  void begin(const Case& c, ValueCache* cache = nullptr);
  // Live: the first image is uploaded; at most max_images may be acquired.
  void begin_live(int64_t session_case_id, Embedding first, ViewType view, int max_images);

  const Action& pending() const { return pending_.action; }
  const std::vector<Candidate>& candidates() const { return pending_.candidates; }
  bool finished() const { return finished_; }
  bool live() const { return bound_ == nullptr; }

  // Answer the pending question. Any valid answer for the field is accepted.
  void answer_metadata(const AnswerValue& a);
  // Simulation: reveal the case's own answer for the pending question.
  void answer_metadata_from_case();
  // Simulation: reveal an image for the pending image request.
  void provide_image();
  // Live: provide the requested image.
  void provide_image(Embedding e, ViewType view);

  const AcquisitionState& state() const { return state_; }
  const EpisodeTranscript& transcript() const { return transcript_; }
  const EngineConfig& config() const { return config_; }

 private:
  void acquire_image(AcquiredImage img, bool initial);
  void refresh_prediction();
  void decide();
  void push_acquisition(TranscriptStep step);
  int first_unused_image(std::optional<ViewType> view) const;
  uint64_t image_mask() const;
  uint64_t field_mask() const;

  const Classifier* model_;
  const MetadataSchema* schema_;
  const ImageValueModel* ivm_;
  EngineConfig config_;
  const Case* bound_ = nullptr;
  ValueCache* cache_ = nullptr;
  int live_max_images_ = 0;
  int decisions_ = 0;
  bool finished_ = false;
  AcquisitionState state_;
  TranscriptStep pending_;
  EpisodeTranscript transcript_;
};

// Drives an episode to completion, answering from the case.
EpisodeTranscript run_episode(const Case& c, const Classifier& model, const MetadataSchema& schema,
                              const ImageValueModel& ivm, const EngineConfig& config,
                              ValueCache* cache = nullptr);

std::vector<EpisodeTranscript> run_episodes(std::span<const Case> cases, const Classifier& model,
                                            const MetadataSchema& schema,
                                            const ImageValueModel& ivm, const EngineConfig& config);

}  // namespace mint
