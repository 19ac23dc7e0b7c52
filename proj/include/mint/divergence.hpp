#pragma once
// Distances between predictive distributions used to score how much a
// hypothetical answer would move the current prediction.

#include <span>
#include <string>
#include <string_view>

namespace mint {

enum class MetricKind { KL, JSDistance, EntropyDiff };

std::string_view to_string(MetricKind m);  // "kl" | "js" | "entropy"
MetricKind parse_metric(std::string_view token);

inline constexpr double kClampEpsilon = 1e-12;

// KL(p || q) in nats. Both arguments are clamped below at kClampEpsilon and
// renormalised, so zero entries are finite.
double kl(std::span<const double> p, std::span<const double> q);

// Square root of the base-2 Jensen-Shannon divergence; lies in [0,1].
double js_distance(std::span<const double> p, std::span<const double> q);

// Shannon entropy in bits with 0 log 0 = 0.
double entropy_bits(std::span<const double> p);

// |H(p) - H(q)| in bits.
double entropy_diff(std::span<const double> p, std::span<const double> q);

// Dispatch on metric. `current` is the prediction before the hypothetical
// input; KL runs as KL(current || updated) unless `kl_reversed`.
double divergence(MetricKind m, std::span<const double> current, std::span<const double> updated,
                  bool kl_reversed = false);

}  // namespace mint
