#pragma once
// Accuracy curves, input-count histograms and the rank / ANOVA / chi-square
// analyses of acquisition behaviour, with their own special functions.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mint/core.hpp"
#include "mint/engine.hpp"

namespace mint {

double topk_accuracy(std::span<const PredictiveDistribution> predictions, std::span<const int> labels,
                     int k);

struct CurvePoint {
  int n_interactions = 0;
  double top3 = 0.0;  // top-k in general; k defaults to 3
  int n_cases_contributing = 0;  // cases whose episode had reached n acquisitions
};

struct Curve {
  std::vector<CurvePoint> points;
  double auc = 0.0;  // trapezoid over n, divided by the n range
};

// Point n uses each case's prediction after its initial image(s) plus n
// further acquisitions; finished episodes contribute their final prediction.
Curve interaction_curve(std::span<const EpisodeTranscript> transcripts, int k = 3,
                        std::optional<int> max_n = std::nullopt);

// Regularised incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
// Regularised upper incomplete gamma Q(a, x) by series / continued fraction.
double incomplete_gamma_q(double a, double x);
double chi_square_sf(double stat, double df);
// Two-sided Student-t tail probability P(|T| >= |t|).
double student_t_two_sided(double t, double df);

struct SpearmanResult {
  double rho = 0.0;
  double p = 1.0;
  int n = 0;
};

// Average ranks for ties; p from the t approximation.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

struct AnovaResult {
  double f = 0.0;  // +inf when within-group variation is zero but means differ
  double p = 1.0;  // permutation p-value, (1 + #{F* >= F}) / (1 + n_perm)
  double ssb = 0.0;
  double ssw = 0.0;
  int df_between = 0;
  int df_within = 0;
  int n_perm = 0;
};

AnovaResult anova_f(const std::vector<std::vector<double>>& groups, int n_perm = 10000,
                    uint64_t seed = 1);

struct ChiSquareResult {
  std::string group;
  double stat = 0.0;
  int df = 0;
  double p = 1.0;
  bool significant = false;
  bool pooled = false;  // zero-expected cells were merged into a catch-all bucket
};

// Each group's ask counts against the global ask proportions scaled to the
// group total; significant iff p < alpha / bonferroni_m.
std::vector<ChiSquareResult> chi_square_question_frequency(
    const std::map<std::string, std::vector<double>>& per_group, std::span<const double> global,
    double alpha, int bonferroni_m);

enum class HistogramKind { Images, Metadata, Total };
std::string_view to_string(HistogramKind k);

std::map<int, int> input_histogram(std::span<const EpisodeTranscript> transcripts, HistogramKind kind);

double variance(std::span<const double> v);

std::string curve_csv(const Curve& c);
std::string histogram_csv(const std::map<int, int>& h);

// Difficulty vs. interactions (Spearman), interactions by severity (ANOVA)
// and per-class question profiles (chi-square, Bonferroni over classes).
json behaviour_analysis(std::span<const EpisodeTranscript> transcripts, std::span<const Case> cases,
                        const MetadataSchema& schema, int n_perm, uint64_t seed, double alpha = 0.001);

}  // namespace mint
