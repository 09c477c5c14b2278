#pragma once

// Synthetic lung ROIs: one lesion at the grid center on noisy parenchyma,
// with a long-tailed diameter distribution. Large lesions carry a
// lower-density part-solid rim whose share grows with diameter.

#include <sattca/volgrid.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace sattca {

struct PhantomConfig {
  int cases = 100;
  /// Split weights train:val:test.
  std::array<int, 3> split_weights{7, 1, 2};

  double min_diameter_mm = 3.0;
  double max_diameter_mm = 60.0;
  double tail_threshold_mm = 30.0;
  /// Probability that a diameter is drawn above tail_threshold_mm.
  double tail_mass = 0.08;

  double lesion_hu = -50.0;
  double parenchyma_hu = -850.0;
  double noise_sigma_hu = 40.0;
  double part_solid_hu = -600.0;
  /// Part-solid share ramps from 0 at onset to its maximum at full.
  double part_solid_onset_mm = 15.0;
  double part_solid_full_mm = 50.0;
  double texture_wavelength_mm = 12.0;

  /// Low-order radial perturbation amplitude in [0, 0.5].
  double irregularity = 0.15;
  std::uint64_t seed = 0;

  friend bool operator==(const PhantomConfig&, const PhantomConfig&) = default;
};

void validate(const PhantomConfig& cfg);

struct PhantomCase {
  Volume3D hu;
  BinaryMask3D mask;
  double diameter_mm = 0.0;
  Index3 center;
};

/// Log-uniform within the head or the tail, the tail chosen with probability
/// tail_mass.
double sample_diameter(std::mt19937_64& rng, const PhantomConfig& cfg);

/// Throws std::invalid_argument when the diameter does not fit the ROI along D.
PhantomCase generate_case(std::mt19937_64& rng, const PhantomConfig& cfg, double diameter_mm);
PhantomCase generate_case(std::mt19937_64& rng, const PhantomConfig& cfg);

/// Case `index` of the dataset described by cfg, from its own sub-seed.
std::mt19937_64 case_rng(std::uint64_t seed, std::size_t index);
PhantomCase generate_indexed_case(const PhantomConfig& cfg, std::size_t index);

enum class Split : std::uint8_t { kTrain, kVal, kTest };
std::string to_string(Split s);
Split parse_split(const std::string& s);

/// Contiguous blocks: floor(n*w0/W) train, floor(n*w1/W) val, rest test.
std::array<std::size_t, 3> split_counts(const PhantomConfig& cfg);
Split split_of(const PhantomConfig& cfg, std::size_t index);

std::string case_id(std::size_t index);

struct ManifestCase {
  std::string id;
  std::string volume_path;  // relative to the dataset root
  std::string mask_path;
  Index3 center;
  double diameter_mm = 0.0;
  Split split = Split::kTrain;
};

struct DatasetManifest {
  int format_version = 1;
  Spacing3 spacing = Spacing3::Ones();
  std::string generator_config_hash;
  PhantomConfig config;
  std::vector<ManifestCase> cases;

  std::vector<ManifestCase> split(Split s) const;
};

inline constexpr const char* kManifestName = "manifest.json";

std::string config_hash(const PhantomConfig& cfg);
std::string phantom_config_to_json_string(const PhantomConfig& cfg);
PhantomConfig phantom_config_from_json_string(const std::string& s);

/// Writes every case plus manifest.json under root.
DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::filesystem::path& root);

void write_manifest(const std::filesystem::path& root, const DatasetManifest& m);
/// Throws FormatError on a malformed manifest.
DatasetManifest read_manifest(const std::filesystem::path& root);

/// Reads and preprocesses one case into a ROI sample.
RoiSample load_case(const std::filesystem::path& root, const ManifestCase& c);
RoiSample to_roi(const std::string& id, const PhantomCase& pc);

}  // namespace sattca
