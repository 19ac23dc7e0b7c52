#pragma once
// Comparison policies. Every policy produces transcripts in the engine's
// format so the evaluation code treats them uniformly.

#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mint/core.hpp"
#include "mint/engine.hpp"

namespace mint {

// All images up front, then metadata in a per-case random order.
struct RandomPolicy {
  uint64_t seed = 1;
  std::optional<int> n_meta;
};

// All images up front, then metadata in one fixed order for every case.
struct GlobalStaticPolicy {
  std::vector<int> order;  // empty: fit on validation data before running
  std::optional<int> n_meta;
};

// Images only, in seeded random order, until max probability reaches tau.
struct MspPolicy {
  double tau = 0.8;
  uint64_t seed = 1;
};

enum class BudgetOrder { Value, Schema };

// Either a cap on total inputs (the engine's greedy order with the given
// offsets, never stopping early) or fixed counts of images (listed order)
// and metadata (value or schema order).
struct FixedBudgetPolicy {
  std::optional<int> n_inputs;
  double t_meta = 0.0;  // offsets used to rank metadata against images under n_inputs
  double t_image = 0.0;
  std::optional<int> n_meta;    // empty = all
  std::optional<int> n_images;  // empty = all
  BudgetOrder order = BudgetOrder::Value;
  MetricKind metric = MetricKind::JSDistance;
};

struct MintPolicy {
  EngineConfig config;
};

using Policy = std::variant<RandomPolicy, GlobalStaticPolicy, MspPolicy, FixedBudgetPolicy, MintPolicy>;

// Tokens: random:seed=7[:meta=N], global[:order=3,1,...][:meta=N], msp:tau=0.8[:seed=N],
// fixed:inputs=3[:metric=js][:t_meta=X][:t_image=X], fixed:meta=3:images=all[:order=js|schema], mint:...
Policy parse_policy(std::string_view token);
std::string policy_token(const Policy& p);

// Greedy forward selection of the field order that maximises validation
// top-3 accuracy given all images; ties go to the lowest field id.
std::vector<int> fit_global_order(std::span<const Case> validation, const Classifier& model,
                                  const MetadataSchema& schema);

EpisodeTranscript run_policy(const Policy& p, const Case& c, const Classifier& model,
                             const MetadataSchema& schema, const ImageValueModel& ivm);

std::vector<EpisodeTranscript> run_policy(const Policy& p, std::span<const Case> cases,
                                          const Classifier& model, const MetadataSchema& schema,
                                          const ImageValueModel& ivm);

}  // namespace mint
