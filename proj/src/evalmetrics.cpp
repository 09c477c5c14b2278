#include <sattca/errors.hpp>
#include <sattca/evalmetrics.hpp>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace sattca {

namespace {

void require_same(const BinaryMask3D& a, const BinaryMask3D& b, const char* who) {
  if (a.dims() != b.dims())
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + to_string(a.dims()) +
                                " vs " + to_string(b.dims()));
}

std::size_t overlap(const BinaryMask3D& a, const BinaryMask3D& b) {
  return static_cast<std::size_t>((a.bits() * b.bits()).cast<std::size_t>().sum());
}

std::vector<Index3> voxel_list(const BinaryMask3D& m) {
  std::vector<Index3> out;
  for (std::size_t k = 0; k < m.size(); ++k)
    if (m.bits()[static_cast<Eigen::Index>(k)]) out.push_back(m.dims().unravel(k));
  return out;
}

/// Surface voxels of `from` lying within tol of some surface voxel of `to`.
std::size_t within_tolerance(const std::vector<Index3>& from, const BinaryMask3D& to,
                             double tol, const Spacing3& sp) {
  const int rd = static_cast<int>(std::floor(tol / sp[0]));
  const int rh = static_cast<int>(std::floor(tol / sp[1]));
  const int rw = static_cast<int>(std::floor(tol / sp[2]));
  const double tol2 = tol * tol;
  const Dims3& dims = to.dims();
  std::size_t hits = 0;
  for (const Index3& p : from) {
    bool found = false;
    for (int dz = -rd; dz <= rd && !found; ++dz) {
      const int z = p.d + dz;
      if (z < 0 || z >= dims.d) continue;
      const double ez = dz * sp[0];
      for (int dy = -rh; dy <= rh && !found; ++dy) {
        const int y = p.h + dy;
        if (y < 0 || y >= dims.h) continue;
        const double ey = dy * sp[1];
        for (int dx = -rw; dx <= rw; ++dx) {
          const int x = p.w + dx;
          if (x < 0 || x >= dims.w) continue;
          const double ex = dx * sp[2];
          if (ez * ez + ey * ey + ex * ex <= tol2 && to(z, y, x)) {
            found = true;
            break;
          }
        }
      }
    }
    hits += found;
  }
  return hits;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

double dsc(const BinaryMask3D& pred, const BinaryMask3D& gt) {
  require_same(pred, gt, "dsc");
  const std::size_t np = pred.count(), ng = gt.count();
  if (np + ng == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(overlap(pred, gt)) / static_cast<double>(np + ng);
}

double recall(const BinaryMask3D& pred, const BinaryMask3D& gt) {
  require_same(pred, gt, "recall");
  const std::size_t ng = gt.count();
  if (ng == 0) throw UndefinedMetricError("recall: ground truth is empty");
  return 100.0 * static_cast<double>(overlap(pred, gt)) / static_cast<double>(ng);
}

BinaryMask3D surface_voxels(const BinaryMask3D& m) {
  const Dims3& d = m.dims();
  BinaryMask3D out(d);
  auto bg = [&](int z, int y, int x) {
    return z < 0 || y < 0 || x < 0 || z >= d.d || y >= d.h || x >= d.w || !m(z, y, x);
  };
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.h; ++y)
      for (int x = 0; x < d.w; ++x) {
        if (!m(z, y, x)) continue;
        if (bg(z - 1, y, x) || bg(z + 1, y, x) || bg(z, y - 1, x) || bg(z, y + 1, x) ||
            bg(z, y, x - 1) || bg(z, y, x + 1))
          out.set(z, y, x);
      }
  return out;
}

double nsd(const BinaryMask3D& pred, const BinaryMask3D& gt, double tolerance_mm,
           const Spacing3& spacing) {
  require_same(pred, gt, "nsd");
  if (tolerance_mm < 0.0) throw std::invalid_argument("nsd: tolerance must be >= 0");
  const bool pe = pred.empty(), ge = gt.empty();
  if (pe && ge) return 100.0;
  if (pe || ge) return 0.0;
  const BinaryMask3D sp = surface_voxels(pred), sg = surface_voxels(gt);
  const auto lp = voxel_list(sp), lg = voxel_list(sg);
  const std::size_t hits = within_tolerance(lp, sg, tolerance_mm, spacing) +
                           within_tolerance(lg, sp, tolerance_mm, spacing);
  return 100.0 * static_cast<double>(hits) / static_cast<double>(lp.size() + lg.size());
}

ScaleBin scale_bin(double diameter_mm) {
  if (!(diameter_mm > 0.0))
    throw std::invalid_argument("scale_bin: diameter must be positive, got " +
                                std::to_string(diameter_mm));
  if (diameter_mm <= 10.0) return ScaleBin::kMicro;
  if (diameter_mm <= 20.0) return ScaleBin::kSmall;
  if (diameter_mm < 30.0) return ScaleBin::kMedium;
  return ScaleBin::kMass;
}

std::string bin_name(ScaleBin b) {
  switch (b) {
    case ScaleBin::kMicro: return "Micro";
    case ScaleBin::kSmall: return "Small";
    case ScaleBin::kMedium: return "Medium";
    case ScaleBin::kMass: return "Mass";
  }
  return "?";
}

SampleMetrics evaluate_sample(const std::string& id, double diameter_mm,
                              const BinaryMask3D& pred, const BinaryMask3D& gt,
                              const Spacing3& spacing, const MetricConfig& cfg) {
  SampleMetrics s;
  s.id = id;
  s.diameter_mm = diameter_mm;
  s.bin = scale_bin(diameter_mm);
  s.dsc = dsc(pred, gt);
  s.nsd = nsd(pred, gt, cfg.nsd_tolerance_mm, spacing);
  s.recall = recall(pred, gt);
  return s;
}

std::array<BinStats, 4> MetricReport::bin_means() const {
  std::array<BinStats, 4> out;
  std::array<std::vector<double>, 4> d, n, r;
  for (const auto& s : samples) {
    const auto k = static_cast<std::size_t>(s.bin);
    d[k].push_back(s.dsc);
    n[k].push_back(s.nsd);
    r[k].push_back(s.recall);
  }
  for (std::size_t k = 0; k < 4; ++k)
    out[k] = {kAllBins[k], d[k].size(), mean_of(d[k]), mean_of(n[k]), mean_of(r[k])};
  return out;
}

BinStats MetricReport::overall() const {
  std::vector<double> d, n, r;
  for (const auto& s : samples) {
    d.push_back(s.dsc);
    n.push_back(s.nsd);
    r.push_back(s.recall);
  }
  return {ScaleBin::kMicro, samples.size(), mean_of(d), mean_of(n), mean_of(r)};
}

DeltaReport stratified_delta(const MetricReport& a, const MetricReport& b) {
  std::unordered_map<std::string, ScaleBin> ids;
  for (const auto& s : a.samples) ids.emplace(s.id, s.bin);
  if (ids.size() != a.samples.size())
    throw std::invalid_argument("stratified_delta: duplicate sample id in '" + a.label + "'");
  std::set<std::string> seen;
  for (const auto& s : b.samples) {
    auto it = ids.find(s.id);
    if (it == ids.end() || !seen.insert(s.id).second)
      throw std::invalid_argument("stratified_delta: sample sets differ at '" + s.id + "'");
    if (it->second != s.bin)
      throw std::invalid_argument("stratified_delta: sample '" + s.id +
                                  "' falls in different bins");
  }
  if (seen.size() != ids.size())
    throw std::invalid_argument("stratified_delta: sample sets differ in size");

  DeltaReport out;
  out.from = a.label;
  out.to = b.label;
  const auto ma = a.bin_means(), mb = b.bin_means();
  for (std::size_t k = 0; k < 4; ++k) {
    if (ma[k].n == 0) continue;
    out.bins[k] = BinDelta{kAllBins[k], ma[k].n, mb[k].dsc - ma[k].dsc, mb[k].nsd - ma[k].nsd,
                           mb[k].recall - ma[k].recall};
  }
  if (!a.samples.empty()) {
    const auto oa = a.overall(), ob = b.overall();
    out.overall = BinDelta{ScaleBin::kMicro, oa.n, ob.dsc - oa.dsc, ob.nsd - oa.nsd,
                           ob.recall - oa.recall};
  }
  return out;
}

void write_mean_table(std::ostream& os, const MetricReport& r) {
  char line[160];
  os << "# " << r.label << "  (NSD tolerance " << fmt3(r.config.nsd_tolerance_mm) << " mm)\n";
  std::snprintf(line, sizeof line, "%-8s %5s %9s %9s %9s\n", "bin", "n", "DSC", "NSD", "Recall");
  os << line;
  auto row = [&](const std::string& name, const BinStats& s) {
    if (s.n == 0)
      std::snprintf(line, sizeof line, "%-8s %5zu %9s %9s %9s\n", name.c_str(), s.n, "-", "-",
                    "-");
    else
      std::snprintf(line, sizeof line, "%-8s %5zu %9.3f %9.3f %9.3f\n", name.c_str(), s.n, s.dsc,
                    s.nsd, s.recall);
    os << line;
  };
  for (const auto& s : r.bin_means()) row(bin_name(s.bin), s);
  row("All", r.overall());
}

void write_delta_table(std::ostream& os, const DeltaReport& d) {
  char line[160];
  os << "# " << d.to << " - " << d.from << "\n";
  std::snprintf(line, sizeof line, "%-8s %5s %9s %9s %9s\n", "bin", "n", "dDSC", "dNSD",
                "dRecall");
  os << line;
  auto row = [&](const std::string& name, const std::optional<BinDelta>& b) {
    if (!b)
      std::snprintf(line, sizeof line, "%-8s %5d %9s %9s %9s\n", name.c_str(), 0, "-", "-", "-");
    else
      std::snprintf(line, sizeof line, "%-8s %5zu %+9.3f %+9.3f %+9.3f\n", name.c_str(), b->n,
                    b->dsc, b->nsd, b->recall);
    os << line;
  };
  for (std::size_t k = 0; k < 4; ++k) row(bin_name(kAllBins[k]), d.bins[k]);
  row("All", d.overall);
}

void write_sample_records(std::ostream& os, const MetricReport& r) {
  for (const auto& s : r.samples) {
    nlohmann::json j{{"kind", "sample"},   {"run", r.label},     {"id", s.id},
                     {"diameter_mm", s.diameter_mm}, {"bin", bin_name(s.bin)},
                     {"dsc", s.dsc},       {"nsd", s.nsd},       {"recall", s.recall},
                     {"nsd_tolerance_mm", r.config.nsd_tolerance_mm}};
    os << j.dump() << '\n';
  }
  for (const auto& b : r.bin_means()) {
    nlohmann::json j{{"kind", "bin_mean"}, {"run", r.label}, {"bin", bin_name(b.bin)}, {"n", b.n}};
    if (b.n) {
      j["dsc"] = b.dsc;
      j["nsd"] = b.nsd;
      j["recall"] = b.recall;
    }
    os << j.dump() << '\n';
  }
}

void write_delta_records(std::ostream& os, const DeltaReport& d) {
  for (std::size_t k = 0; k < 4; ++k) {
    nlohmann::json j{{"kind", "delta"}, {"from", d.from}, {"to", d.to},
                     {"bin", bin_name(kAllBins[k])}};
    if (const auto& b = d.bins[k]) {
      j["n"] = b->n;
      j["d_dsc"] = b->dsc;
      j["d_nsd"] = b->nsd;
      j["d_recall"] = b->recall;
    } else {
      j["n"] = 0;
      j["absent"] = true;
    }
    os << j.dump() << '\n';
  }
}

void write_scatter_records(std::ostream& os, const MetricReport& r) {
  for (const auto& s : r.samples) {
    nlohmann::json j{{"run", r.label}, {"id", s.id}, {"diameter_mm", s.diameter_mm},
                     {"recall", s.recall}};
    os << j.dump() << '\n';
  }
}

}  // namespace sattca
