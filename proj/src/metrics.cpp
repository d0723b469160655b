#include "rpmcl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace rpmcl {
namespace {

void require_square(const RMatrix& R, const char* what) {
  if (R.rows() == 0 || R.rows() != R.cols()) throw MetricsError(std::string(what) + ": R must be square and non-empty");
}

void require_two_tasks(const RMatrix& R, const char* what) {
  require_square(R, what);
  if (R.rows() < 2) throw MetricsError(std::string(what) + ": needs at least two tasks");
}

double mean(std::span<const double> x) { return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size()); }

double sample_variance(std::span<const double> x, double m) {
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / double(x.size() - 1);
}

// Two-sided p for |t| with df degrees of freedom.
double two_sided_p(double t, double df) {
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

}  // namespace

double omega(const RMatrix& R, const RMatrix& R_offline) {
  require_square(R, "omega");
  if (R.rows() != R_offline.rows() || R.cols() != R_offline.cols())
    throw MetricsError("omega: R and R_offline differ in shape");
  const Eigen::VectorXd gamma = R.rowwise().mean();
  const Eigen::VectorXd gamma_off = R_offline.rowwise().mean();
  if ((gamma_off.array() == 0.0).any()) throw MetricsError("omega: offline row mean is zero");
  return (gamma.array() / gamma_off.array()).mean();
}

double avg_accuracy(const RMatrix& R) {
  require_square(R, "avg_accuracy");
  const double T = double(R.rows());
  return 2.0 / (T * (T + 1.0)) * R.triangularView<Eigen::Lower>().toDenseMatrix().sum();
}

double bwt(const RMatrix& R) {
  require_two_tasks(R, "bwt");
  const double T = double(R.rows());
  const RMatrix lower = R.triangularView<Eigen::StrictlyLower>();
  // sum_{i>j} R(j, j) = sum_j (T - 1 - j) R(j, j)
  double diag_part = 0.0;
  for (Eigen::Index j = 0; j < R.rows(); ++j) diag_part += double(R.rows() - 1 - j) * R(j, j);
  return 2.0 / (T * (T - 1.0)) * (lower.sum() - diag_part);
}

double fwt(const RMatrix& R) {
  require_two_tasks(R, "fwt");
  const double T = double(R.rows());
  return 2.0 / (T * (T - 1.0)) * R.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().sum();
}

MetricValues compute_metrics(const RMatrix& R, const RMatrix& R_offline) {
  MetricValues m;
  m.omega = omega(R, R_offline);
  m.avg_accuracy = avg_accuracy(R);
  m.bwt = bwt(R);
  m.fwt = fwt(R);
  m.final_accuracy = R.row(R.rows() - 1).mean();
  return m;
}

MetricsReport aggregate_metrics(std::string learner, std::vector<std::string> labels,
                                std::vector<MetricValues> values) {
  if (values.empty()) throw MetricsError("aggregate_metrics: nothing to aggregate");
  MetricsReport report;
  report.learner = std::move(learner);
  const double n = double(values.size());
  for (const auto& v : values) {
    report.mean.omega += v.omega / n;
    report.mean.avg_accuracy += v.avg_accuracy / n;
    report.mean.bwt += v.bwt / n;
    report.mean.fwt += v.fwt / n;
    report.mean.final_accuracy += v.final_accuracy / n;
  }
  report.labels = std::move(labels);
  report.breakdown = std::move(values);
  return report;
}

std::vector<std::vector<std::size_t>> partition_subsets(std::size_t pool, int n_subsets, Rng& rng) {
  if (n_subsets <= 0) throw MetricsError("partition_subsets: subset count must be positive");
  if (pool < static_cast<std::size_t>(n_subsets)) throw MetricsError("partition_subsets: pool smaller than subset count");
  std::vector<std::size_t> order(pool);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(std::span<std::size_t>(order), rng);
  const std::size_t size = pool / static_cast<std::size_t>(n_subsets);
  std::vector<std::vector<std::size_t>> subsets(static_cast<std::size_t>(n_subsets));
  for (std::size_t s = 0; s < subsets.size(); ++s)
    subsets[s].assign(order.begin() + std::ptrdiff_t(s * size), order.begin() + std::ptrdiff_t((s + 1) * size));
  return subsets;
}

std::vector<double> subset_accuracies(std::span<const std::vector<std::uint8_t>> run_flags,
                                      const std::vector<std::vector<std::size_t>>& subsets) {
  if (run_flags.empty()) throw MetricsError("subset_accuracies: no runs");
  std::vector<double> out(subsets.size(), 0.0);
  for (const auto& flags : run_flags) {
    if (flags.size() != run_flags.front().size()) throw MetricsError("subset_accuracies: runs differ in pool size");
    for (std::size_t s = 0; s < subsets.size(); ++s) {
      double hits = 0.0;
      for (std::size_t idx : subsets[s]) hits += flags.at(idx);
      out[s] += hits / double(subsets[s].size());
    }
  }
  for (double& x : out) x /= double(run_flags.size());
  return out;
}

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw MetricsError("incomplete_beta: shape parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  // The continued fraction converges fast for x < (a + 1) / (a + b + 2);
  // otherwise use the symmetry I_x(a, b) = 1 - I_{1-x}(b, a).
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);

  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  constexpr double tiny = 1e-300;
  constexpr double tol = 1e-15;

  // Modified Lentz evaluation.
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double f = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    f *= d * c;

    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    f *= delta;
    if (std::abs(delta - 1.0) < tol) break;
  }
  return std::exp(log_front) * f / a;
}

double student_t_cdf(double t, double df) {
  if (df <= 0.0) throw MetricsError("student_t_cdf: degrees of freedom must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

TTestResult welch_paired_test(std::span<const double> a, std::span<const double> b, WelchVariant variant) {
  if (a.size() != b.size()) throw MetricsError("welch_paired_test: samples differ in length");
  if (a.size() < 2) throw MetricsError("welch_paired_test: need at least two pairs");
  const double n = double(a.size());
  TTestResult r;

  if (variant == WelchVariant::PairedDifferences) {
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
    const double md = mean(d);
    const double vd = sample_variance(d, md);
    r.df = n - 1.0;
    if (vd == 0.0) {
      r.t = md == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), md);
      r.p = md == 0.0 ? 1.0 : 0.0;
      return r;
    }
    r.t = md / std::sqrt(vd / n);
    r.p = two_sided_p(r.t, r.df);
    return r;
  }

  const double ma = mean(a), mb = mean(b);
  const double va = sample_variance(a, ma) / n;
  const double vb = sample_variance(b, mb) / n;
  if (va + vb == 0.0) {
    r.df = 2.0 * (n - 1.0);
    r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
    r.p = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) / (va * va / (n - 1.0) + vb * vb / (n - 1.0));
  r.p = two_sided_p(r.t, r.df);
  return r;
}

std::vector<bool> holm_bonferroni(std::span<const double> pvals, double alpha) {
  const std::size_t m = pvals.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return pvals[x] < pvals[y]; });
  std::vector<bool> reject(m, false);
  for (std::size_t k = 0; k < m; ++k) {
    if (pvals[order[k]] > alpha / double(m - k)) break;
    reject[order[k]] = true;
  }
  return reject;
}

SignificanceReport compare_family(const std::string& family, const std::string& reference,
                                  const std::vector<double>& reference_subsets,
                                  const std::vector<std::pair<std::string, std::vector<double>>>& others,
                                  double alpha, WelchVariant variant) {
  SignificanceReport report;
  report.family = family;
  report.alpha = alpha;
  report.n_subsets = int(reference_subsets.size());
  std::vector<double> pvals;
  for (const auto& [name, subsets] : others) {
    Comparison c;
    c.a = reference;
    c.b = name;
    c.mean_a = mean(reference_subsets);
    c.mean_b = mean(subsets);
    c.test = welch_paired_test(reference_subsets, subsets, variant);
    pvals.push_back(c.test.p);
    report.comparisons.push_back(std::move(c));
  }
  const auto reject = holm_bonferroni(pvals, alpha);
  for (std::size_t i = 0; i < reject.size(); ++i) report.comparisons[i].rejected = reject[i];
  return report;
}

Histogram replay_histogram(std::span<const ReplayEntry> entries) {
  Histogram h;
  for (const auto& e : entries) h[e.task_id][e.replay_count] += 1.0;
  return h;
}

Histogram average_histograms(std::span<const Histogram> histograms) {
  Histogram out;
  if (histograms.empty()) return out;
  for (const auto& h : histograms)
    for (const auto& [task, bins] : h)
      for (const auto& [count, n] : bins) out[task][count] += n;
  for (auto& [task, bins] : out)
    for (auto& [count, n] : bins) n /= double(histograms.size());
  return out;
}

double histogram_total(const Histogram& h) {
  double total = 0.0;
  for (const auto& [task, bins] : h)
    for (const auto& [count, n] : bins) total += n;
  return total;
}

double replay_count_variance(std::span<const ReplayEntry> entries) {
  if (entries.empty()) return 0.0;
  double m = 0.0;
  for (const auto& e : entries) m += double(e.replay_count);
  m /= double(entries.size());
  double ss = 0.0;
  for (const auto& e : entries) ss += (double(e.replay_count) - m) * (double(e.replay_count) - m);
  return ss / double(entries.size());
}

void write_histogram_csv(std::ostream& out, const Histogram& h) {
  out << "task_id,replay_count,n_samples\n";
  char line[128];
  for (const auto& [task, bins] : h)
    for (const auto& [count, n] : bins) {
      std::snprintf(line, sizeof line, "%d,%lld,%.17g\n", task, static_cast<long long>(count), n);
      out << line;
    }
}

void write_rmatrix_csv(std::ostream& out, const RMatrix& R, const std::string& permutation,
                       const std::string& learner) {
  out << "# permutation=" << permutation << " learner=" << learner << '\n';
  char cell[64];
  for (Eigen::Index i = 0; i < R.rows(); ++i) {
    for (Eigen::Index j = 0; j < R.cols(); ++j) {
      std::snprintf(cell, sizeof cell, "%.17g", R(i, j));
      out << (j ? "," : "") << cell;
    }
    out << '\n';
  }
}

RMatrix read_rmatrix_csv(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string cell;
    rows.emplace_back();
    while (std::getline(ss, cell, ',')) rows.back().push_back(std::stod(cell));
  }
  if (rows.empty()) throw MetricsError("read_rmatrix_csv: no rows");
  RMatrix R(Eigen::Index(rows.size()), Eigen::Index(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw MetricsError("read_rmatrix_csv: ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j) R(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
  }
  return R;
}

}  // namespace rpmcl
