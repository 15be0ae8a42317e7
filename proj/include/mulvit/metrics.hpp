#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mulvit/common.hpp"

namespace mulvit {

/// Raised when a statistic is mathematically undefined on the given data
/// (zero variance, constant targets). Reports carry these as absent fields
/// rather than silent zeros.
struct UndefinedMetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricsReport {
  double rmse_db = 0.0;
  double mae_db = 0.0;
  std::optional<double> pearson_r;   // absent when either series has zero variance
  std::optional<double> r_squared;   // absent when targets are constant
  double coverage = 0.0;             // fraction of |error| <= threshold_db
  double threshold_db = 3.0;
  std::vector<std::pair<double, double>> cdf;  // (abs_error_db, k/n), sorted
  int64_t n = 0;
};

namespace metrics {

double rmse(const std::vector<double>& pred, const std::vector<double>& target);
double mae(const std::vector<double>& pred, const std::vector<double>& target);

/// Pearson correlation; throws UndefinedMetricError when a variance is zero.
double pearson_r(const std::vector<double>& a, const std::vector<double>& b);

/// Coefficient of determination 1 - SSE/SST (may be negative); throws
/// UndefinedMetricError when the targets are constant.
double r_squared(const std::vector<double>& pred, const std::vector<double>& target);

/// Sorted empirical CDF of absolute errors as (error, k/n) pairs.
std::vector<std::pair<double, double>> error_cdf(const std::vector<double>& abs_errors);

/// Fraction of absolute errors <= threshold.
double coverage_at(const std::vector<double>& abs_errors, double threshold);

/// Assembles the full report; undefined statistics become absent fields.
MetricsReport compute(const std::vector<double>& pred, const std::vector<double>& target,
                      double threshold_db = 3.0);

std::string format(const MetricsReport& report);

/// CDF table as CSV (abs_error_db, cum_fraction); `config_echo` is written as
/// a leading `# config:` comment when non-empty.
void write_cdf_csv(const std::string& path, const std::vector<std::pair<double, double>>& cdf,
                   const std::string& config_echo = "");

}  // namespace metrics

}  // namespace mulvit
