#pragma once

// Instance-level click adaptation: pre-segment, derive the click mask once,
// fit the normalization affine parameters to it for a fixed number of
// single-sample epochs, predict, then put the parameters back.

#include <sattca/clickgeom.hpp>
#include <sattca/objective.hpp>
#include <sattca/optim.hpp>
#include <sattca/segnet.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace sattca {

enum class AdaptMode : std::uint8_t { kNone, kTtca, kSattca };

std::string to_string(AdaptMode m);
/// Accepts "none", "ttca", "sattca" in any case.
AdaptMode parse_adapt_mode(const std::string& s);

struct AdaptationConfig {
  AdaptMode mode = AdaptMode::kSattca;
  int epochs = 10;
  double step_size = 1e-3;
  AdamWConfig optimizer{.weight_decay = 0.0};
  LossWeights weights;
  double threshold = 0.5;
  bool episodic = true;
  /// Keep only the largest connected component of the final mask.
  bool lcc_postprocess = false;
};

void validate(const AdaptationConfig& cfg);

struct EpochRecord {
  TtLossTerms terms;
  double total = 0.0;
  /// Predicted foreground (p > threshold) inside the click mask, measured on
  /// this epoch's forward pass before the update.
  std::size_t fg_in_mask = 0;
};

struct AdaptationTrace {
  std::string sample_id;
  AdaptMode mode = AdaptMode::kNone;
  std::vector<EpochRecord> epochs;
  std::size_t mask_voxels = 0;
  BBoxExtents extents;
  bool degenerate = true;
  double inference_ms = 0.0;  // the pre-segmentation forward pass alone
  double total_ms = 0.0;
  bool aborted = false;
  std::string failure;
  std::uint64_t frozen_checksum = 0;
};

struct AdaptResult {
  BinaryMask3D mask;
  AdaptationTrace trace;
};

/// Plain inference: forward, sigmoid, threshold.
BinaryMask3D predict_mask(const SegModel<float>& model, const RoiSample& sample,
                          double threshold = 0.5);

/// The click mask `mode` would train against for this pre-segmentation.
ClickMask click_mask_for_mode(AdaptMode mode, const Volume3D& preseg_probs,
                              const Spacing3& spacing, double threshold);

AdaptResult adapt_and_predict(SegModel<float>& model, const RoiSample& sample,
                              const AdaptationConfig& cfg);

/// Per-sample results in input order. With workers > 1 each worker adapts its
/// own copy of the model. A sample that throws yields an aborted trace with an
/// empty mask; the rest of the batch still runs.
std::vector<AdaptResult> batch_adapt(const SegModel<float>& model,
                                     const std::vector<RoiSample>& samples,
                                     const AdaptationConfig& cfg, int workers = 1);

/// Same, with a config per sample; all must share one mode.
std::vector<AdaptResult> batch_adapt(const SegModel<float>& model,
                                     const std::vector<RoiSample>& samples,
                                     const std::vector<AdaptationConfig>& cfgs,
                                     int workers = 1);

/// One JSON object per line.
std::string trace_to_json_line(const AdaptationTrace& t);
void write_traces(std::ostream& os, const std::vector<AdaptationTrace>& traces);

}  // namespace sattca
