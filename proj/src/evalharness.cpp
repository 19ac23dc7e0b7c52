#include "mint/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "mint/rng.hpp"

namespace mint {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

// Lentz's method for the incomplete beta continued fraction.
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double topk_accuracy(std::span<const PredictiveDistribution> predictions, std::span<const int> labels,
                     int k) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("predictions and labels differ in length");
  if (predictions.empty()) return 0.0;
  double hits = 0.0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    if (k > static_cast<int>(predictions[i].size())) throw std::invalid_argument("k exceeds the class count");
    hits += predictions[i].in_top_k(labels[i], k);
  }
  return hits / static_cast<double>(predictions.size());
}

Curve interaction_curve(std::span<const EpisodeTranscript> transcripts, int k, std::optional<int> max_n) {
  Curve c;
  if (transcripts.empty()) return c;
  int n_max = 0;
  if (max_n) {
    n_max = *max_n;
  } else {
    for (const auto& t : transcripts) n_max = std::max(n_max, t.n_interactions());
  }
  for (int n = 0; n <= n_max; ++n) {
    CurvePoint p;
    p.n_interactions = n;
    double hits = 0.0;
    for (const auto& t : transcripts) {
      hits += t.prediction_after(n).in_top_k(t.label, k);
      if (t.n_interactions() >= n) ++p.n_cases_contributing;
    }
    p.top3 = hits / static_cast<double>(transcripts.size());
    c.points.push_back(p);
  }
  if (n_max == 0) {
    c.auc = c.points[0].top3;
  } else {
    double area = 0.0;
    for (int n = 0; n < n_max; ++n) {
      area += 0.5 * (c.points[static_cast<size_t>(n)].top3 + c.points[static_cast<size_t>(n) + 1].top3);
    }
    c.auc = area / n_max;
  }
  return c;
}

double incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0 || a <= 0.0 || b <= 0.0) throw std::domain_error("incomplete_beta: bad arguments");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                     b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cf(a, b, x) / a;
  return 1.0 - bt * beta_cf(b, a, 1.0 - x) / b;
}

double incomplete_gamma_q(double a, double x) {
  if (a <= 0.0 || x < 0.0) throw std::domain_error("incomplete_gamma_q: bad arguments");
  if (x == 0.0) return 1.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a, sum = 1.0 / a, del = sum;
    for (int n = 0; n < 100000; ++n) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-16) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - gln);
  }
  constexpr double kTiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 100000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

double chi_square_sf(double stat, double df) {
  if (df <= 0.0) throw std::domain_error("chi-square needs df > 0");
  if (stat <= 0.0) return 1.0;
  return incomplete_gamma_q(0.5 * df, 0.5 * stat);
}

double student_t_two_sided(double t, double df) {
  if (df <= 0.0) throw std::domain_error("student t needs df > 0");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 3) throw std::invalid_argument("spearman needs at least 3 pairs");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("spearman: rho undefined for constant input");
  SpearmanResult r;
  r.n = static_cast<int>(x.size());
  r.rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = n - 2.0;
  if (std::abs(r.rho) >= 1.0) {
    r.p = 0.0;
  } else {
    const double t = r.rho * std::sqrt(df / (1.0 - r.rho * r.rho));
    r.p = student_t_two_sided(t, df);
  }
  return r;
}

namespace {

struct AnovaParts {
  double ssb = 0.0, ssw = 0.0;
};

AnovaParts anova_parts(std::span<const double> values, std::span<const size_t> sizes) {
  const double grand = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  AnovaParts p;
  size_t off = 0;
  for (size_t g = 0; g < sizes.size(); ++g) {
    double mean = 0.0;
    for (size_t i = 0; i < sizes[g]; ++i) mean += values[off + i];
    mean /= static_cast<double>(sizes[g]);
    for (size_t i = 0; i < sizes[g]; ++i) p.ssw += (values[off + i] - mean) * (values[off + i] - mean);
    p.ssb += static_cast<double>(sizes[g]) * (mean - grand) * (mean - grand);
    off += sizes[g];
  }
  return p;
}

double f_stat(const AnovaParts& p, int dfb, int dfw) {
  // Relative guard so rounding noise in equal means reads as zero.
  if (p.ssb <= 1e-12 * (p.ssb + p.ssw) || p.ssb == 0.0) return 0.0;
  if (p.ssw == 0.0) return kInf;
  return (p.ssb / dfb) / (p.ssw / dfw);
}

}  // namespace

AnovaResult anova_f(const std::vector<std::vector<double>>& groups, int n_perm, uint64_t seed) {
  if (groups.size() < 2) throw std::invalid_argument("anova needs at least 2 groups");
  std::vector<double> values;
  std::vector<size_t> sizes;
  for (const auto& g : groups) {
    if (g.size() < 2) throw std::invalid_argument("anova needs at least 2 values per group");
    values.insert(values.end(), g.begin(), g.end());
    sizes.push_back(g.size());
  }
  AnovaResult r;
  r.df_between = static_cast<int>(groups.size()) - 1;
  r.df_within = static_cast<int>(values.size() - groups.size());
  const auto parts = anova_parts(values, sizes);
  r.ssb = parts.ssb;
  r.ssw = parts.ssw;
  r.f = f_stat(parts, r.df_between, r.df_within);
  r.n_perm = n_perm;
  if (n_perm <= 0) {
    r.p = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  auto rng = substream(seed, "anova-permutation");
  std::vector<double> shuffled = values;
  int extreme = 0;
  for (int i = 0; i < n_perm; ++i) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const double f = f_stat(anova_parts(shuffled, sizes), r.df_between, r.df_within);
    if (f >= r.f) ++extreme;
  }
  r.p = (1.0 + extreme) / (1.0 + n_perm);
  return r;
}

std::vector<ChiSquareResult> chi_square_question_frequency(
    const std::map<std::string, std::vector<double>>& per_group, std::span<const double> global,
    double alpha, int bonferroni_m) {
  if (bonferroni_m < 1) throw std::invalid_argument("bonferroni_m must be >= 1");
  const double global_total = std::accumulate(global.begin(), global.end(), 0.0);
  for (double g : global) {
    if (g < 0.0) throw std::invalid_argument("counts must be non-negative");
  }
  std::vector<ChiSquareResult> out;
  for (const auto& [name, obs] : per_group) {
    if (obs.size() != global.size()) throw std::invalid_argument("group '" + name + "' has a different question set");
    ChiSquareResult r;
    r.group = name;
    const double total = std::accumulate(obs.begin(), obs.end(), 0.0);
    if (total <= 0.0 || global_total <= 0.0) {
      out.push_back(r);
      continue;
    }
    std::vector<double> o, e;
    double pooled_o = 0.0;
    for (size_t j = 0; j < obs.size(); ++j) {
      if (obs[j] < 0.0) throw std::invalid_argument("counts must be non-negative");
      const double expected = global[j] / global_total * total;
      if (expected <= 0.0) {
        pooled_o += obs[j];
        r.pooled = true;
      } else {
        o.push_back(obs[j]);
        e.push_back(expected);
      }
    }
    if (r.pooled && !e.empty()) {
      // The catch-all bucket absorbs the smallest-expected real cell so its
      // expectation is positive.
      const auto it = std::min_element(e.begin(), e.end());
      const auto j = static_cast<size_t>(it - e.begin());
      o[j] += pooled_o;
    }
    for (size_t j = 0; j < o.size(); ++j) r.stat += (o[j] - e[j]) * (o[j] - e[j]) / e[j];
    r.df = static_cast<int>(o.size()) - 1;
    r.p = r.df > 0 ? chi_square_sf(r.stat, r.df) : 1.0;
    r.significant = r.p < alpha / bonferroni_m;
    out.push_back(r);
  }
  return out;
}

std::string_view to_string(HistogramKind k) {
  switch (k) {
    case HistogramKind::Images: return "images";
    case HistogramKind::Metadata: return "metadata";
    case HistogramKind::Total: return "total";
  }
  return "total";
}

std::map<int, int> input_histogram(std::span<const EpisodeTranscript> transcripts, HistogramKind kind) {
  std::map<int, int> h;
  for (const auto& t : transcripts) {
    const int n = kind == HistogramKind::Images ? t.n_images()
                  : kind == HistogramKind::Metadata ? t.n_meta()
                                                    : t.n_inputs();
    ++h[n];
  }
  return h;
}

double variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

std::string curve_csv(const Curve& c) {
  std::ostringstream os;
  os.precision(17);
  os << "n_interactions,top3,n_cases_contributing\n";
  for (const auto& p : c.points) os << p.n_interactions << ',' << p.top3 << ',' << p.n_cases_contributing << '\n';
  return os.str();
}

std::string histogram_csv(const std::map<int, int>& h) {
  std::ostringstream os;
  os << "count,cases\n";
  for (const auto& [k, v] : h) os << k << ',' << v << '\n';
  return os.str();
}

json behaviour_analysis(std::span<const EpisodeTranscript> transcripts, std::span<const Case> cases,
                        const MetadataSchema& schema, int n_perm, uint64_t seed, double alpha) {
  if (transcripts.size() != cases.size()) throw std::invalid_argument("transcripts and cases differ in length");
  json out;
  std::vector<double> difficulty, interactions;
  std::array<std::vector<double>, 3> by_severity;
  const auto K = static_cast<size_t>(schema.size());
  std::map<std::string, std::vector<double>> per_class;
  std::vector<double> global(K, 0.0);
  for (size_t i = 0; i < cases.size(); ++i) {
    if (transcripts[i].case_id != cases[i].case_id) throw std::invalid_argument("case mismatch");
    const double n = transcripts[i].n_inputs();
    difficulty.push_back(cases[i].difficulty);
    interactions.push_back(n);
    by_severity[static_cast<size_t>(cases[i].severity)].push_back(n);
    auto& row = per_class["class_" + std::to_string(cases[i].label)];
    row.resize(K, 0.0);
    for (int f : transcripts[i].acquired_fields()) {
      row[static_cast<size_t>(f)] += 1.0;
      global[static_cast<size_t>(f)] += 1.0;
    }
  }
  try {
    const auto s = spearman(difficulty, interactions);
    out["difficulty_vs_inputs"] = {{"rho", s.rho}, {"p", s.p}, {"n", s.n}};
  } catch (const std::invalid_argument& e) {
    out["difficulty_vs_inputs"] = {{"error", e.what()}};
  }
  std::vector<std::vector<double>> groups;
  json names = json::array();
  for (size_t s = 0; s < 3; ++s) {
    if (by_severity[s].size() >= 2) {
      groups.push_back(by_severity[s]);
      names.push_back(std::string(to_string(kAllSeverities[s])));
    }
  }
  if (groups.size() >= 2) {
    const auto a = anova_f(groups, n_perm, seed);
    out["inputs_by_severity"] = {{"groups", names},       {"f", real_to_json(a.f)},
                                 {"p_perm", a.p},          {"df_between", a.df_between},
                                 {"df_within", a.df_within}, {"n_perm", a.n_perm}};
  } else {
    out["inputs_by_severity"] = {{"error", "fewer than two severity groups with >= 2 cases"}};
  }
  const auto chi = chi_square_question_frequency(per_class, global, alpha, static_cast<int>(per_class.size()));
  json cj = json::array();
  int significant = 0;
  for (const auto& r : chi) {
    significant += r.significant;
    cj.push_back({{"group", r.group}, {"stat", r.stat}, {"df", r.df}, {"p", r.p},
                  {"significant", r.significant}, {"pooled", r.pooled}});
  }
  out["question_profiles"] = {{"alpha", alpha},
                              {"bonferroni_m", static_cast<int>(per_class.size())},
                              {"groups", cj},
                              {"n_significant", significant}};
  return out;
}

}  // namespace mint
