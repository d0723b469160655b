#pragma once

// Continual-learning summaries over accuracy matrices, subset-based
// significance testing, and replay-count histograms.
//
// R(i, j) is the test accuracy on task j after learning task i.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rpmcl/random.hpp"
#include "rpmcl/replay.hpp"

namespace rpmcl {

using RMatrix = Eigen::MatrixXd;

struct MetricsError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Mean over rows of gamma_i / gamma_off_i, gamma being the row mean.
double omega(const RMatrix& R, const RMatrix& R_offline);
/// Mean of the lower triangle including the diagonal.
double avg_accuracy(const RMatrix& R);
/// Mean of R(i, j) - R(j, j) over j < i.
double bwt(const RMatrix& R);
/// Mean of the strict upper triangle.
double fwt(const RMatrix& R);

struct MetricValues {
  double omega = 0.0;
  double avg_accuracy = 0.0;
  double bwt = 0.0;
  double fwt = 0.0;
  double final_accuracy = 0.0;  // mean of the last row
};

MetricValues compute_metrics(const RMatrix& R, const RMatrix& R_offline);

struct MetricsReport {
  std::string learner;
  MetricValues mean;
  std::vector<std::string> labels;  // one per breakdown entry, e.g. "perm1"
  std::vector<MetricValues> breakdown;
};

MetricsReport aggregate_metrics(std::string learner, std::vector<std::string> labels,
                                std::vector<MetricValues> values);

// Significance testing.

/// Random partition of [0, pool) into n_subsets disjoint subsets of size
/// floor(pool / n_subsets); the remainder is discarded.
std::vector<std::vector<std::size_t>> partition_subsets(std::size_t pool, int n_subsets, Rng& rng);

/// Per-subset accuracy averaged over runs. Every run's flags cover the same
/// pool in the same order.
std::vector<double> subset_accuracies(std::span<const std::vector<std::uint8_t>> run_flags,
                                      const std::vector<std::vector<std::size_t>>& subsets);

enum class WelchVariant : std::uint8_t {
  TwoSample,          // Welch on the two index-paired sets
  PairedDifferences,  // one-sample t on a - b
};

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

TTestResult welch_paired_test(std::span<const double> a, std::span<const double> b,
                              WelchVariant variant = WelchVariant::TwoSample);

/// Regularized incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);

/// Step-down rejections at family level alpha, in input order.
std::vector<bool> holm_bonferroni(std::span<const double> pvals, double alpha = 0.01);

struct Comparison {
  std::string a;
  std::string b;
  double mean_a = 0.0;
  double mean_b = 0.0;
  TTestResult test;
  bool rejected = false;
};

struct SignificanceReport {
  std::string family;
  double alpha = 0.01;
  int n_subsets = 300;
  std::vector<Comparison> comparisons;
};

/// Compares `reference` against each of `others` on shared subsets, then
/// applies Holm-Bonferroni across the family.
SignificanceReport compare_family(const std::string& family, const std::string& reference,
                                  const std::vector<double>& reference_subsets,
                                  const std::vector<std::pair<std::string, std::vector<double>>>& others,
                                  double alpha = 0.01, WelchVariant variant = WelchVariant::TwoSample);

// Replay-count histograms: task id -> replay count -> number of samples.
using Histogram = std::map<int, std::map<std::int64_t, double>>;

Histogram replay_histogram(std::span<const ReplayEntry> entries);
Histogram average_histograms(std::span<const Histogram> histograms);
double histogram_total(const Histogram& h);
/// Population variance of the replay counts.
double replay_count_variance(std::span<const ReplayEntry> entries);

void write_histogram_csv(std::ostream& out, const Histogram& h);
void write_rmatrix_csv(std::ostream& out, const RMatrix& R, const std::string& permutation,
                       const std::string& learner);
RMatrix read_rmatrix_csv(std::istream& in);

}  // namespace rpmcl
