#include "vipa/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace vipa {

OverlapCounts overlap(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("mask size mismatch: " + std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()));
  }
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    c.intersection += (p && g) ? 1 : 0;
    c.uni += (p || g) ? 1 : 0;
  }
  return c;
}

namespace {
double ratio(OverlapCounts c) {
  return c.uni == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.uni);
}
}  // namespace

double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) { return ratio(overlap(pred, gt)); }

void EvalAccumulator::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  add_counts(overlap(pred, gt));
}

void EvalAccumulator::add_counts(OverlapCounts counts) {
  if (counts.intersection > counts.uni) throw std::invalid_argument("intersection exceeds union");
  inter_ += counts.intersection;
  union_ += counts.uni;
  if (counts.uni == 0) ++empty_samples_;
  ious_.push_back(ratio(counts));
}

void EvalAccumulator::merge(const EvalAccumulator& other) {
  if (other.thresholds_ != thresholds_) throw std::invalid_argument("cannot merge accumulators with other thresholds");
  inter_ += other.inter_;
  union_ += other.union_;
  empty_samples_ += other.empty_samples_;
  ious_.insert(ious_.end(), other.ious_.begin(), other.ious_.end());
}

namespace {
void require_samples(const EvalAccumulator& acc) {
  if (acc.size() == 0) throw EmptyAccumulatorError("metric requested from an empty accumulator");
}
}  // namespace

double oiou(const EvalAccumulator& acc) {
  require_samples(acc);
  // A corpus of empty-vs-empty samples only agrees perfectly.
  if (acc.union_ == 0) return 1.0;
  return static_cast<double>(acc.inter_) / static_cast<double>(acc.union_);
}

double miou(const EvalAccumulator& acc) {
  require_samples(acc);
  // Sorted summation keeps the result independent of sample order.
  auto v = acc.per_sample_ious();
  std::sort(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double precision_at(const EvalAccumulator& acc, double t) {
  require_samples(acc);
  const auto& v = acc.per_sample_ious();
  const auto hits = std::count_if(v.begin(), v.end(), [t](double x) { return x > t; });
  return static_cast<double>(hits) / static_cast<double>(v.size());
}

std::vector<MetricRow> metric_rows(const EvalAccumulator& acc) {
  std::vector<MetricRow> rows{{"oIoU", oiou(acc)}, {"mIoU", miou(acc)}};
  for (double t : acc.thresholds()) {
    char name[32];
    std::snprintf(name, sizeof name, "P@%g", t);
    rows.push_back({name, precision_at(acc, t)});
  }
  rows.push_back({"samples", static_cast<double>(acc.size())});
  return rows;
}

std::string format_table(const std::vector<MetricRow>& rows) {
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-*s  %10s\n", static_cast<int>(width), "metric", "value");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %10.4f\n", static_cast<int>(width), r.name.c_str(), r.value);
    out << buf;
  }
  return out.str();
}

std::string format_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "metric,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << r.name << ',' << buf << '\n';
  }
  return out.str();
}

}  // namespace vipa
