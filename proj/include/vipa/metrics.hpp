#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vipa {

class EmptyAccumulatorError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct OverlapCounts {
  std::size_t intersection = 0;
  std::size_t uni = 0;
};

OverlapCounts overlap(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// |pred & gt| / |pred | gt|; 1.0 when both masks are empty.
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// Running totals for oIoU, mIoU and precision at IoU thresholds.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(std::vector<double> thresholds = {0.5, 0.7}) : thresholds_(std::move(thresholds)) {}

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  void add_counts(OverlapCounts counts);
  /// Appends another accumulator's samples after this one's.
  void merge(const EvalAccumulator& other);

  std::size_t size() const { return ious_.size(); }
  std::size_t total_intersection() const { return inter_; }
  std::size_t total_union() const { return union_; }
  const std::vector<double>& per_sample_ious() const { return ious_; }
  const std::vector<double>& thresholds() const { return thresholds_; }

 private:
  std::size_t inter_ = 0;
  std::size_t union_ = 0;
  std::size_t empty_samples_ = 0;  // both masks empty
  std::vector<double> ious_;
  std::vector<double> thresholds_;

  friend double oiou(const EvalAccumulator&);
};

/// Sum of intersections over sum of unions.
double oiou(const EvalAccumulator& acc);
/// Mean per-sample IoU.
double miou(const EvalAccumulator& acc);
/// Fraction of samples with IoU strictly above t.
double precision_at(const EvalAccumulator& acc, double t);

struct MetricRow {
  std::string name;
  double value = 0;
};

std::vector<MetricRow> metric_rows(const EvalAccumulator& acc);
/// Aligned two-column text table.
std::string format_table(const std::vector<MetricRow>& rows);
/// "metric,value" header plus one row per metric.
std::string format_csv(const std::vector<MetricRow>& rows);

}  // namespace vipa
