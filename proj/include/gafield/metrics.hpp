#pragma once

// The six evaluation metrics, computed per sample and averaged over a test
// set. Degenerate denominators surface as MetricError, never as infinity.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gafield {

struct MetricError : std::domain_error {
  using std::domain_error::domain_error;
};

double mse(std::span<const double> predicted, std::span<const double> truth);
double mae(std::span<const double> predicted, std::span<const double> truth);
double maxae(std::span<const double> predicted, std::span<const double> truth);
// 1 - SSR/SST; truth must not be constant.
double r2(std::span<const double> predicted, std::span<const double> truth);
// ||p - t||_2 / ||t||_2; truth must not be all zero.
double rel_l2(std::span<const double> predicted, std::span<const double> truth);
// ||p - t||_1 / ||t||_1; truth must not be all zero.
double rel_l1(std::span<const double> predicted, std::span<const double> truth);

struct MetricReport {
  double mse = 0, mae = 0, maxae = 0, r2 = 0, rel_l2 = 0, rel_l1 = 0;
  std::size_t sample_count = 0;
};

MetricReport compute_metrics(std::span<const double> predicted, std::span<const double> truth);
// Plain mean of every field over per-sample reports.
MetricReport average_reports(const std::vector<MetricReport>& reports);

std::string metric_report_csv(const MetricReport& r);
std::string metric_report_table(const MetricReport& r);

}  // namespace gafield
