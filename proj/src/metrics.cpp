#include "gafield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace gafield {

namespace {

void check_lengths(std::span<const double> p, std::span<const double> t) {
  if (p.size() != t.size()) throw MetricError("metrics: length mismatch");
  if (p.empty()) throw MetricError("metrics: empty fields");
}

}  // namespace

double mse(std::span<const double> p, std::span<const double> t) {
  check_lengths(p, t);
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = t[i] - p[i];
    acc += d * d;
  }
  return acc / static_cast<double>(p.size());
}

double mae(std::span<const double> p, std::span<const double> t) {
  check_lengths(p, t);
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(t[i] - p[i]);
  return acc / static_cast<double>(p.size());
}

double maxae(std::span<const double> p, std::span<const double> t) {
  check_lengths(p, t);
  double m = 0;
  for (std::size_t i = 0; i < p.size(); ++i) m = std::max(m, std::abs(t[i] - p[i]));
  return m;
}

double r2(std::span<const double> p, std::span<const double> t) {
  check_lengths(p, t);
  double mean = 0;
  for (double v : t) mean += v;
  mean /= static_cast<double>(t.size());
  double ssr = 0, sst = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double r = t[i] - p[i];
    const double c = t[i] - mean;
    ssr += r * r;
    sst += c * c;
  }
  if (sst == 0) throw MetricError("r2: ground truth is constant");
  return 1.0 - ssr / sst;
}

double rel_l2(std::span<const double> p, std::span<const double> t) {
  check_lengths(p, t);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    num += d * d;
    den += t[i] * t[i];
  }
  if (den == 0) throw MetricError("rel_l2: ground truth has zero norm");
  return std::sqrt(num) / std::sqrt(den);
}

double rel_l1(std::span<const double> p, std::span<const double> t) {
  check_lengths(p, t);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    num += std::abs(p[i] - t[i]);
    den += std::abs(t[i]);
  }
  if (den == 0) throw MetricError("rel_l1: ground truth has zero norm");
  return num / den;
}

MetricReport compute_metrics(std::span<const double> p, std::span<const double> t) {
  MetricReport r;
  r.mse = mse(p, t);
  r.mae = mae(p, t);
  r.maxae = maxae(p, t);
  r.r2 = r2(p, t);
  r.rel_l2 = rel_l2(p, t);
  r.rel_l1 = rel_l1(p, t);
  r.sample_count = 1;
  return r;
}

MetricReport average_reports(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw MetricError("average_reports: no reports");
  MetricReport out;
  const double n = static_cast<double>(reports.size());
  for (const MetricReport& r : reports) {
    out.mse += r.mse / n;
    out.mae += r.mae / n;
    out.maxae += r.maxae / n;
    out.r2 += r.r2 / n;
    out.rel_l2 += r.rel_l2 / n;
    out.rel_l1 += r.rel_l1 / n;
    out.sample_count += r.sample_count;
  }
  return out;
}

std::string metric_report_csv(const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "mse,mae,maxae,r2,rel_l2,rel_l1,samples\n%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n",
                r.mse, r.mae, r.maxae, r.r2, r.rel_l2, r.rel_l1, r.sample_count);
  return buf;
}

std::string metric_report_table(const MetricReport& r) {
  std::ostringstream os;
  char buf[96];
  auto row = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "  %-8s %14.6g\n", name, v);
    os << buf;
  };
  os << "metrics over " << r.sample_count << " sample(s):\n";
  row("MSE", r.mse);
  row("MAE", r.mae);
  row("MaxAE", r.maxae);
  row("R2", r.r2);
  row("RelL2", r.rel_l2);
  row("RelL1", r.rel_l1);
  return os.str();
}

}  // namespace gafield
