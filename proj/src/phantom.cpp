#include <sattca/errors.hpp>
#include <sattca/phantom.hpp>
#include <sattca/volume_io.hpp>

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace sattca {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kTextureWaves = 8;

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

struct Wave {
  double kz, ky, kx, phase;
};

}  // namespace

void validate(const PhantomConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("PhantomConfig: " + m); };
  if (c.cases < 0) fail("cases must be >= 0");
  for (int w : c.split_weights)
    if (w < 0) fail("split weights must be >= 0");
  if (c.split_weights[0] + c.split_weights[1] + c.split_weights[2] <= 0)
    fail("split weights must not all be zero");
  if (!(c.min_diameter_mm >= 2.0 && c.max_diameter_mm <= 64.0 &&
        c.min_diameter_mm < c.tail_threshold_mm && c.tail_threshold_mm < c.max_diameter_mm))
    fail("need 2 <= min_diameter < tail_threshold < max_diameter <= 64");
  if (!(c.tail_mass >= 0.0 && c.tail_mass <= 1.0)) fail("tail_mass must lie in [0, 1]");
  if (!(c.noise_sigma_hu >= 0.0)) fail("noise_sigma_hu must be >= 0");
  if (!(c.irregularity >= 0.0 && c.irregularity <= 0.5)) fail("irregularity must lie in [0, 0.5]");
  if (!(c.part_solid_onset_mm < c.part_solid_full_mm)) fail("part-solid onset must precede full");
  if (!(c.texture_wavelength_mm > 0.0)) fail("texture_wavelength_mm must be > 0");
  for (double hu : {c.lesion_hu, c.parenchyma_hu, c.part_solid_hu})
    if (hu < kHuLow || hu > kHuHigh) fail("mean intensities must lie in the HU window");
}

double sample_diameter(std::mt19937_64& rng, const PhantomConfig& cfg) {
  std::bernoulli_distribution tail(cfg.tail_mass);
  if (tail(rng)) return log_uniform(rng, cfg.tail_threshold_mm, cfg.max_diameter_mm);
  return log_uniform(rng, cfg.min_diameter_mm, cfg.tail_threshold_mm);
}

PhantomCase generate_case(std::mt19937_64& rng, const PhantomConfig& cfg, double diameter_mm) {
  const Dims3 dims = kRoiDims;
  if (!(diameter_mm >= 2.0) || diameter_mm > dims.d)
    throw std::invalid_argument("generate_case: diameter " + std::to_string(diameter_mm) +
                                " mm does not fit a ROI of depth " + std::to_string(dims.d));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * kPi;

  // Shape: r(u) = R (1 - a sin^2(theta) (1 + g(phi)) / 2), so the poles along D
  // keep the full radius and no direction exceeds it.
  const double R = 0.5 * diameter_mm;
  const double a = cfg.irregularity;
  const double p2 = two_pi * unit(rng), p3 = two_pi * unit(rng);
  const double mix = 0.5 + 0.3 * unit(rng);

  std::vector<Wave> waves(kTextureWaves);
  const double kmag = two_pi / cfg.texture_wavelength_mm;
  for (auto& w : waves) {
    const double cz = 2.0 * unit(rng) - 1.0, az = two_pi * unit(rng);
    const double s = std::sqrt(1.0 - cz * cz);
    w = {kmag * cz, kmag * s * std::sin(az), kmag * s * std::cos(az), two_pi * unit(rng)};
  }
  const double share =
      std::clamp((diameter_mm - cfg.part_solid_onset_mm) /
                     (cfg.part_solid_full_mm - cfg.part_solid_onset_mm),
                 0.0, 1.0);
  const double q0 = 1.0 - 0.2 * share;  // inner radius fraction of the part-solid rim

  PhantomCase pc;
  pc.diameter_mm = diameter_mm;
  pc.center = dims.center();
  pc.mask = BinaryMask3D(dims);
  pc.hu = Volume3D(dims, isotropic_mm(1.0), static_cast<float>(cfg.parenchyma_hu));
  Eigen::ArrayXd lesion = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(dims.size()));

  const int reach = static_cast<int>(std::ceil(R)) + 1;
  for (int dz = -reach; dz <= reach; ++dz)
    for (int dy = -reach; dy <= reach; ++dy)
      for (int dx = -reach; dx <= reach; ++dx) {
        const Index3 v{pc.center.d + dz, pc.center.h + dy, pc.center.w + dx};
        if (!dims.contains(v)) continue;
        const double rho2 = double(dz) * dz + double(dy) * dy + double(dx) * dx;
        double r = R;
        if (a > 0.0 && rho2 > 0.0) {
          const double sin2 = (double(dy) * dy + double(dx) * dx) / rho2;
          const double phi = std::atan2(double(dy), double(dx));
          const double g = mix * std::cos(2.0 * phi + p2) + (1.0 - mix) * std::cos(3.0 * phi + p3);
          r = R * (1.0 - a * sin2 * 0.5 * (1.0 + g));
        }
        if (rho2 > r * r) continue;
        pc.mask.set(v);
        const std::size_t k = dims.linear(v);
        double hu = cfg.lesion_hu;
        if (share > 0.0) {
          double t = 0.0;
          for (const auto& w : waves) t += std::cos(w.kz * dz + w.ky * dy + w.kx * dx + w.phase);
          t /= std::sqrt(0.5 * kTextureWaves);
          const double q = std::sqrt(rho2) / std::max(r, 1e-9);
          const double wgt =
              std::min(1.0, 4.0 * share) * std::clamp((q - q0 - 0.12 * t) / 0.1 + 0.5, 0.0, 1.0);
          hu += wgt * (cfg.part_solid_hu - cfg.lesion_hu);
        }
        lesion[static_cast<Eigen::Index>(k)] = hu;
      }

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma_hu);
  auto& vox = pc.hu.voxels();
  for (Eigen::Index k = 0; k < vox.size(); ++k) {
    const double base = pc.mask.bits()[k] ? lesion[k] : cfg.parenchyma_hu;
    const double n = cfg.noise_sigma_hu > 0.0 ? noise(rng) : 0.0;
    vox[k] = static_cast<float>(std::clamp(base + n, kHuLow, kHuHigh));
  }
  return pc;
}

PhantomCase generate_case(std::mt19937_64& rng, const PhantomConfig& cfg) {
  const double d = sample_diameter(rng, cfg);
  return generate_case(rng, cfg, d);
}

std::mt19937_64 case_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

PhantomCase generate_indexed_case(const PhantomConfig& cfg, std::size_t index) {
  auto rng = case_rng(cfg.seed, index);
  return generate_case(rng, cfg);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

std::array<std::size_t, 3> split_counts(const PhantomConfig& cfg) {
  const std::size_t n = static_cast<std::size_t>(cfg.cases);
  const auto& w = cfg.split_weights;
  const std::size_t total = static_cast<std::size_t>(w[0] + w[1] + w[2]);
  const std::size_t tr = n * static_cast<std::size_t>(w[0]) / total;
  const std::size_t va = n * static_cast<std::size_t>(w[1]) / total;
  return {tr, va, n - tr - va};
}

Split split_of(const PhantomConfig& cfg, std::size_t index) {
  const auto c = split_counts(cfg);
  if (index < c[0]) return Split::kTrain;
  if (index < c[0] + c[1]) return Split::kVal;
  return Split::kTest;
}

std::string case_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", index);
  return buf;
}

std::vector<ManifestCase> DatasetManifest::split(Split s) const {
  std::vector<ManifestCase> out;
  for (const auto& c : cases)
    if (c.split == s) out.push_back(c);
  return out;
}

namespace {

json config_json(const PhantomConfig& c) {
  return json{{"cases", c.cases},
              {"split_weights", c.split_weights},
              {"min_diameter_mm", c.min_diameter_mm},
              {"max_diameter_mm", c.max_diameter_mm},
              {"tail_threshold_mm", c.tail_threshold_mm},
              {"tail_mass", c.tail_mass},
              {"lesion_hu", c.lesion_hu},
              {"parenchyma_hu", c.parenchyma_hu},
              {"noise_sigma_hu", c.noise_sigma_hu},
              {"part_solid_hu", c.part_solid_hu},
              {"part_solid_onset_mm", c.part_solid_onset_mm},
              {"part_solid_full_mm", c.part_solid_full_mm},
              {"texture_wavelength_mm", c.texture_wavelength_mm},
              {"irregularity", c.irregularity},
              {"seed", c.seed}};
}

PhantomConfig config_from(const json& j) {
  PhantomConfig c;
  c.cases = j.value("cases", c.cases);
  c.split_weights = j.value("split_weights", c.split_weights);
  c.min_diameter_mm = j.value("min_diameter_mm", c.min_diameter_mm);
  c.max_diameter_mm = j.value("max_diameter_mm", c.max_diameter_mm);
  c.tail_threshold_mm = j.value("tail_threshold_mm", c.tail_threshold_mm);
  c.tail_mass = j.value("tail_mass", c.tail_mass);
  c.lesion_hu = j.value("lesion_hu", c.lesion_hu);
  c.parenchyma_hu = j.value("parenchyma_hu", c.parenchyma_hu);
  c.noise_sigma_hu = j.value("noise_sigma_hu", c.noise_sigma_hu);
  c.part_solid_hu = j.value("part_solid_hu", c.part_solid_hu);
  c.part_solid_onset_mm = j.value("part_solid_onset_mm", c.part_solid_onset_mm);
  c.part_solid_full_mm = j.value("part_solid_full_mm", c.part_solid_full_mm);
  c.texture_wavelength_mm = j.value("texture_wavelength_mm", c.texture_wavelength_mm);
  c.irregularity = j.value("irregularity", c.irregularity);
  c.seed = j.value("seed", c.seed);
  return c;
}

}  // namespace

std::string phantom_config_to_json_string(const PhantomConfig& cfg) {
  return config_json(cfg).dump();
}

PhantomConfig phantom_config_from_json_string(const std::string& s) {
  return config_from(json::parse(s));
}

std::string config_hash(const PhantomConfig& cfg) {
  const std::string s = phantom_config_to_json_string(cfg);
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::filesystem::path& root) {
  validate(cfg);
  std::filesystem::create_directories(root / "cases");
  DatasetManifest m;
  m.config = cfg;
  m.generator_config_hash = config_hash(cfg);
  for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.cases); ++i) {
    const PhantomCase pc = generate_indexed_case(cfg, i);
    ManifestCase mc;
    mc.id = case_id(i);
    mc.volume_path = "cases/" + mc.id + ".svol";
    mc.mask_path = "cases/" + mc.id + ".smsk";
    mc.center = pc.center;
    mc.diameter_mm = pc.diameter_mm;
    mc.split = split_of(cfg, i);
    write_volume(root / mc.volume_path, pc.hu);
    write_mask(root / mc.mask_path, pc.mask, pc.hu.spacing());
    m.cases.push_back(std::move(mc));
  }
  write_manifest(root, m);
  return m;
}

void write_manifest(const std::filesystem::path& root, const DatasetManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["spacing_mm"] = {m.spacing[0], m.spacing[1], m.spacing[2]};
  j["generator_config_hash"] = m.generator_config_hash;
  j["generator_config"] = config_json(m.config);
  auto& arr = j["cases"] = json::array();
  for (const auto& c : m.cases)
    arr.push_back({{"id", c.id},
                   {"volume", c.volume_path},
                   {"mask", c.mask_path},
                   {"center", {c.center.d, c.center.h, c.center.w}},
                   {"diameter_mm", c.diameter_mm},
                   {"split", to_string(c.split)}});
  std::ofstream os(root / kManifestName, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write manifest under " + root.string());
  os << j.dump(2) << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto bytes = read_file_bytes(root / kManifestName);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest: ") + e.what(), e.byte);
  }
  try {
    DatasetManifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1) throw FormatError("manifest: unsupported format version", 0);
    const auto sp = j.at("spacing_mm").get<std::vector<double>>();
    if (sp.size() != 3) throw FormatError("manifest: spacing_mm needs three values", 0);
    m.spacing = Spacing3(sp[0], sp[1], sp[2]);
    m.generator_config_hash = j.at("generator_config_hash").get<std::string>();
    m.config = config_from(j.at("generator_config"));
    for (const auto& c : j.at("cases")) {
      ManifestCase mc;
      mc.id = c.at("id").get<std::string>();
      mc.volume_path = c.at("volume").get<std::string>();
      mc.mask_path = c.at("mask").get<std::string>();
      const auto ctr = c.at("center").get<std::vector<int>>();
      if (ctr.size() != 3) throw FormatError("manifest: center needs three values", 0);
      mc.center = {ctr[0], ctr[1], ctr[2]};
      mc.diameter_mm = c.at("diameter_mm").get<double>();
      mc.split = parse_split(c.at("split").get<std::string>());
      m.cases.push_back(std::move(mc));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what(), 0);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("manifest: ") + e.what(), 0);
  }
}

RoiSample to_roi(const std::string& id, const PhantomCase& pc) {
  return make_roi(id, pc.hu, pc.mask, pc.diameter_mm);
}

RoiSample load_case(const std::filesystem::path& root, const ManifestCase& c) {
  const Volume3D hu = read_volume(root / c.volume_path);
  DecodedMask m = read_mask(root / c.mask_path);
  if (m.mask.dims() != hu.dims())
    throw FormatError("case " + c.id + ": mask dims " + to_string(m.mask.dims()) +
                          " differ from volume dims " + to_string(hu.dims()),
                      0);
  return make_roi(c.id, hu, std::move(m.mask), c.diameter_mm);
}

}  // namespace sattca
