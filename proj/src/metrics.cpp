#include "mulvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace mulvit {
namespace metrics {

namespace {

void require_pair(const std::vector<double>& a, const std::vector<double>& b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  if (a.empty()) throw DataError(std::string(what) + ": empty input");
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double rmse(const std::vector<double>& pred, const std::vector<double>& target) {
  require_pair(pred, target, "rmse");
  double s = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double mae(const std::vector<double>& pred, const std::vector<double>& target) {
  require_pair(pred, target, "mae");
  double s = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) s += std::fabs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

double pearson_r(const std::vector<double>& a, const std::vector<double>& b) {
  require_pair(a, b, "pearson_r");
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) {
    throw UndefinedMetricError("pearson_r undefined: zero variance input");
  }
  return cov / std::sqrt(va * vb);
}

double r_squared(const std::vector<double>& pred, const std::vector<double>& target) {
  require_pair(pred, target, "r_squared");
  const double mt = mean_of(target);
  double sse = 0.0, sst = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    const double d = target[i] - mt;
    sse += e * e;
    sst += d * d;
  }
  if (sst == 0.0) throw UndefinedMetricError("r_squared undefined: constant targets");
  return 1.0 - sse / sst;
}

std::vector<std::pair<double, double>> error_cdf(const std::vector<double>& abs_errors) {
  if (abs_errors.empty()) throw DataError("error_cdf: empty input");
  std::vector<double> e = abs_errors;
  std::sort(e.begin(), e.end());
  std::vector<std::pair<double, double>> cdf(e.size());
  const double n = static_cast<double>(e.size());
  for (size_t k = 0; k < e.size(); ++k) {
    cdf[k] = {e[k], static_cast<double>(k + 1) / n};
  }
  return cdf;
}

double coverage_at(const std::vector<double>& abs_errors, double threshold) {
  if (abs_errors.empty()) throw DataError("coverage_at: empty input");
  int64_t hits = 0;
  for (double e : abs_errors) {
    if (e <= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(abs_errors.size());
}

MetricsReport compute(const std::vector<double>& pred, const std::vector<double>& target,
                      double threshold_db) {
  require_pair(pred, target, "metrics");
  MetricsReport rep;
  rep.n = static_cast<int64_t>(pred.size());
  rep.threshold_db = threshold_db;
  rep.rmse_db = rmse(pred, target);
  rep.mae_db = mae(pred, target);
  try {
    rep.pearson_r = pearson_r(pred, target);
  } catch (const UndefinedMetricError&) {
    rep.pearson_r.reset();
  }
  try {
    rep.r_squared = r_squared(pred, target);
  } catch (const UndefinedMetricError&) {
    rep.r_squared.reset();
  }
  std::vector<double> abs_err(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) abs_err[i] = std::fabs(pred[i] - target[i]);
  rep.cdf = error_cdf(abs_err);
  rep.coverage = coverage_at(abs_err, threshold_db);
  return rep;
}

std::string format(const MetricsReport& rep) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "samples:        %lld\n", static_cast<long long>(rep.n));
  out += buf;
  std::snprintf(buf, sizeof(buf), "rmse_db:        %.4f\n", rep.rmse_db);
  out += buf;
  std::snprintf(buf, sizeof(buf), "mae_db:         %.4f\n", rep.mae_db);
  out += buf;
  if (rep.pearson_r) {
    std::snprintf(buf, sizeof(buf), "pearson_r:      %.4f\n", *rep.pearson_r);
  } else {
    std::snprintf(buf, sizeof(buf), "pearson_r:      undefined\n");
  }
  out += buf;
  if (rep.r_squared) {
    std::snprintf(buf, sizeof(buf), "r_squared:      %.4f\n", *rep.r_squared);
  } else {
    std::snprintf(buf, sizeof(buf), "r_squared:      undefined\n");
  }
  out += buf;
  std::snprintf(buf, sizeof(buf), "coverage@%.1fdb: %.4f\n", rep.threshold_db, rep.coverage);
  out += buf;
  return out;
}

void write_cdf_csv(const std::string& path, const std::vector<std::pair<double, double>>& cdf,
                   const std::string& config_echo) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  if (!config_echo.empty()) f << "# config: " << config_echo << "\n";
  f << "abs_error_db,cum_fraction\n";
  char buf[96];
  for (const auto& [e, frac] : cdf) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", e, frac);
    f << buf;
  }
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace metrics
}  // namespace mulvit
