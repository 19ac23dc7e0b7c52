#include "mint/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace mint {

namespace {

void check_lengths(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument("distribution length mismatch: " + std::to_string(p.size()) +
                                " vs " + std::to_string(q.size()));
  }
}

std::vector<double> clamp_renormalise(std::span<const double> p) {
  std::vector<double> out(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : out) {
    v = std::max(v, kClampEpsilon);
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

// Base-2 KL without clamping; m must be positive wherever a is.
double kl2_unclamped(std::span<const double> a, std::span<const double> m) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] > 0.0) s += a[i] * std::log2(a[i] / m[i]);
  }
  return s;
}

}  // namespace

std::string_view to_string(MetricKind m) {
  switch (m) {
    case MetricKind::KL: return "kl";
    case MetricKind::JSDistance: return "js";
    case MetricKind::EntropyDiff: return "entropy";
  }
  return "js";
}

MetricKind parse_metric(std::string_view token) {
  if (token == "kl") return MetricKind::KL;
  if (token == "js") return MetricKind::JSDistance;
  if (token == "entropy") return MetricKind::EntropyDiff;
  throw std::invalid_argument("unknown metric '" + std::string(token) +
                              "' (expected kl | js | entropy)");
}

double kl(std::span<const double> p, std::span<const double> q) {
  check_lengths(p, q);
  const auto pc = clamp_renormalise(p);
  const auto qc = clamp_renormalise(q);
  double s = 0.0;
  for (size_t i = 0; i < pc.size(); ++i) s += pc[i] * std::log(pc[i] / qc[i]);
  return std::max(0.0, s);
}

double js_distance(std::span<const double> p, std::span<const double> q) {
  check_lengths(p, q);
  std::vector<double> m(p.size());
  for (size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  const double jsd = 0.5 * kl2_unclamped(p, m) + 0.5 * kl2_unclamped(q, m);
  return std::clamp(std::sqrt(std::max(0.0, jsd)), 0.0, 1.0);
}

double entropy_bits(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log2(v);
  }
  return std::max(0.0, h);
}

double entropy_diff(std::span<const double> p, std::span<const double> q) {
  check_lengths(p, q);
  return std::abs(entropy_bits(p) - entropy_bits(q));
}

double divergence(MetricKind m, std::span<const double> current, std::span<const double> updated,
                  bool kl_reversed) {
  switch (m) {
    case MetricKind::KL: return kl_reversed ? kl(updated, current) : kl(current, updated);
    case MetricKind::JSDistance: return js_distance(current, updated);
    case MetricKind::EntropyDiff: return entropy_diff(current, updated);
  }
  throw std::invalid_argument("unknown metric");
}

}  // namespace mint
