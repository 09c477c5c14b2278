#pragma once

// Overlap and surface metrics in percent, lesion-size strata, and the
// per-stratum comparison of two runs over the same samples.

#include <sattca/volgrid.hpp>

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace sattca {

/// 100 * 2|P & G| / (|P| + |G|); two empty masks score 100.
double dsc(const BinaryMask3D& pred, const BinaryMask3D& gt);

/// 100 * |P & G| / |G|. Throws UndefinedMetricError on an empty gt.
double recall(const BinaryMask3D& pred, const BinaryMask3D& gt);

/// Foreground voxels with at least one 6-neighbour outside the foreground
/// (off-grid counts as outside).
BinaryMask3D surface_voxels(const BinaryMask3D& mask);

/// Normalized surface dice at tolerance `tolerance_mm`. Both empty -> 100,
/// exactly one empty -> 0.
double nsd(const BinaryMask3D& pred, const BinaryMask3D& gt, double tolerance_mm,
           const Spacing3& spacing);

enum class ScaleBin : std::uint8_t { kMicro, kSmall, kMedium, kMass };
inline constexpr std::array<ScaleBin, 4> kAllBins{ScaleBin::kMicro, ScaleBin::kSmall,
                                                  ScaleBin::kMedium, ScaleBin::kMass};

/// Micro (0,10], Small (10,20], Medium (20,30), Mass [30,inf).
ScaleBin scale_bin(double diameter_mm);
std::string bin_name(ScaleBin b);

struct MetricConfig {
  double nsd_tolerance_mm = 1.0;
};

struct SampleMetrics {
  std::string id;
  double diameter_mm = 0.0;
  ScaleBin bin = ScaleBin::kMicro;
  double dsc = 0.0;
  double nsd = 0.0;
  double recall = 0.0;
};

SampleMetrics evaluate_sample(const std::string& id, double diameter_mm,
                              const BinaryMask3D& pred, const BinaryMask3D& gt,
                              const Spacing3& spacing, const MetricConfig& cfg = {});

struct BinStats {
  ScaleBin bin = ScaleBin::kMicro;
  std::size_t n = 0;
  double dsc = 0.0;
  double nsd = 0.0;
  double recall = 0.0;
};

struct MetricReport {
  std::string label;
  MetricConfig config;
  std::vector<SampleMetrics> samples;

  /// Per-bin means; bins without samples have n == 0.
  std::array<BinStats, 4> bin_means() const;
  BinStats overall() const;
};

struct BinDelta {
  ScaleBin bin = ScaleBin::kMicro;
  std::size_t n = 0;
  double dsc = 0.0;
  double nsd = 0.0;
  double recall = 0.0;
};

struct DeltaReport {
  std::string from, to;
  /// nullopt for a bin that holds no samples.
  std::array<std::optional<BinDelta>, 4> bins;
  std::optional<BinDelta> overall;
};

/// Per-bin mean(b) - mean(a). Throws std::invalid_argument if the two reports
/// do not cover the same sample ids.
DeltaReport stratified_delta(const MetricReport& a, const MetricReport& b);

/// Text tables, fixed three-decimal formatting.
void write_mean_table(std::ostream& os, const MetricReport& r);
void write_delta_table(std::ostream& os, const DeltaReport& d);

/// Line-delimited JSON: one record per sample, per-bin means, deltas.
void write_sample_records(std::ostream& os, const MetricReport& r);
void write_delta_records(std::ostream& os, const DeltaReport& d);
/// Diameter against recall, one line per sample.
void write_scatter_records(std::ostream& os, const MetricReport& r);

}  // namespace sattca
