#pragma once

// Supervised training, experiment orchestration over adaptation modes, and
// the nested run configuration shared by the command-line tool.

#include <sattca/adapt.hpp>
#include <sattca/evalmetrics.hpp>
#include <sattca/optim.hpp>
#include <sattca/phantom.hpp>
#include <sattca/segnet.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sattca {

// --- data -----------------------------------------------------------------

class CaseSource {
 public:
  virtual ~CaseSource() = default;
  virtual std::size_t size() const = 0;
  virtual RoiSample get(std::size_t i) const = 0;
};

/// Cases of one split read from a dataset directory.
class ManifestSource : public CaseSource {
 public:
  ManifestSource(std::filesystem::path root, std::vector<ManifestCase> cases);
  std::size_t size() const override { return cases_.size(); }
  RoiSample get(std::size_t i) const override;

 private:
  std::filesystem::path root_;
  std::vector<ManifestCase> cases_;
};

/// Cases regenerated on demand from the phantom config; nothing touches disk.
class PhantomSource : public CaseSource {
 public:
  PhantomSource(PhantomConfig cfg, Split split);
  std::size_t size() const override { return indices_.size(); }
  RoiSample get(std::size_t i) const override;
  double diameter(std::size_t i) const;

 private:
  PhantomConfig cfg_;
  std::vector<std::size_t> indices_;
};

class VectorSource : public CaseSource {
 public:
  explicit VectorSource(std::vector<RoiSample> samples) : samples_(std::move(samples)) {}
  std::size_t size() const override { return samples_.size(); }
  RoiSample get(std::size_t i) const override { return samples_.at(i); }

 private:
  std::vector<RoiSample> samples_;
};

std::vector<RoiSample> materialize(const CaseSource& src);

// --- training ---------------------------------------------------------------

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  AdamWConfig optimizer{};
  std::uint64_t seed = 0;
  /// Validate every n epochs (and always after the last).
  int val_every = 1;
};

void validate(const TrainConfig& cfg);

/// Full-scale schedule: 200 epochs, batch 32. The desk profile is 20 epochs, batch 4.
TrainConfig full_train_profile();
TrainConfig desk_train_profile();

struct TrainLogEntry {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_dsc = 0.0;
  /// NaN when this epoch was not validated.
  double val_dsc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  int best_epoch = -1;
  double best_val_dsc = 0.0;
  std::vector<TrainLogEntry> log;
};

using TrainCallback = std::function<void(const TrainLogEntry&)>;

/// Trains in place; on return `model` holds the parameters of the epoch with
/// the best validation DSC. Empty splits are std::invalid_argument, a
/// non-finite loss NumericalError.
TrainResult train(SegModel<float>& model, const CaseSource& train_set, const CaseSource& val_set,
                  const TrainConfig& cfg, const TrainCallback& on_epoch = {});

/// Mean DSC of plain inference over a source.
double mean_dsc(const SegModel<float>& model, const CaseSource& src, double threshold = 0.5);

// --- experiments ------------------------------------------------------------

struct ExperimentSpec {
  std::filesystem::path dataset;
  std::filesystem::path checkpoint;
  std::vector<AdaptMode> modes{AdaptMode::kNone, AdaptMode::kTtca, AdaptMode::kSattca};
  AdaptationConfig adapt;  // mode is overridden per entry of `modes`
  MetricConfig metrics;
  Split split = Split::kTest;
  std::filesystem::path output_dir;
  int workers = 1;
};

void validate(const ExperimentSpec& spec);

struct ModeRun {
  AdaptMode mode = AdaptMode::kNone;
  MetricReport report;
  std::vector<AdaptationTrace> traces;
  std::vector<BinaryMask3D> masks;  // kept only when requested
};

struct ExperimentResult {
  std::vector<ModeRun> runs;
  /// Pairwise against mode none, one per other mode.
  std::vector<DeltaReport> deltas;
  std::uint64_t frozen_checksum = 0;
};

struct RunOptions {
  bool keep_masks = false;
  /// Called after each mode finishes.
  std::function<void(const ModeRun&)> on_mode;
};

/// Evaluates each mode on `test` from the same frozen model.
ExperimentResult run_modes(const SegModel<float>& model, const CaseSource& test,
                           const ExperimentSpec& spec, const RunOptions& opts = {});

/// Loads dataset and checkpoint named in `spec`, runs every mode and writes
/// config.resolved, metrics.table, metrics.records, traces.log, scatter.records
/// and checkpoint under spec.output_dir. Finished modes are flushed before an
/// error propagates.
ExperimentResult run_experiment(const ExperimentSpec& spec);

/// Writes the four result files for whatever runs are present.
void write_experiment_outputs(const std::filesystem::path& dir, const ExperimentResult& r);

/// Mean per-sample wall time of adaptation and of plain inference.
struct OverheadSummary {
  AdaptMode mode = AdaptMode::kNone;
  std::size_t samples = 0;
  int epochs = 0;
  double mean_total_ms = 0.0;
  double mean_inference_ms = 0.0;
};
OverheadSummary summarize_overhead(const ModeRun& run, int epochs);

/// Reads the per-sample records of one run label back from metrics.records.
MetricReport read_report(const std::filesystem::path& records, const std::string& label);

// --- configuration ----------------------------------------------------------

/// Every tunable in one nested document.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train = desk_train_profile();
  PhantomConfig phantom;
  AdaptationConfig adapt;
  MetricConfig metrics;
  std::uint64_t model_seed = 0;
  int workers = 1;
};

/// Network defaults paired with the desk training profile.
NetworkConfig desk_network_profile();

std::string to_json_string(const RunConfig& cfg);
/// Unknown keys and ill-typed values are ConfigError. Missing keys keep
/// their defaults.
RunConfig run_config_from_json_string(const std::string& s, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& p, RunConfig base = {});
void validate(const RunConfig& cfg);

}  // namespace sattca
