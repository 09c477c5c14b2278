#include <sattca/clickgeom.hpp>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace sattca {

BinaryMask3D largest_component(const BinaryMask3D& mask) {
  const Dims3& dims = mask.dims();
  const std::size_t n = dims.size();
  BinaryMask3D out(dims);
  if (mask.empty()) return out;

  std::vector<std::int32_t> label(n, 0);
  std::vector<std::size_t> queue;
  queue.reserve(1024);
  std::int32_t next = 0;
  std::int32_t best_label = 0;
  std::size_t best_size = 0;

  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!mask.bits()[static_cast<Eigen::Index>(seed)] || label[seed] != 0) continue;
    const std::int32_t id = ++next;
    label[seed] = id;
    queue.clear();
    queue.push_back(seed);
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const Index3 p = dims.unravel(queue[head]);
      for (int dz = -1; dz <= 1; ++dz) {
        const int z = p.d + dz;
        if (z < 0 || z >= dims.d) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          const int y = p.h + dy;
          if (y < 0 || y >= dims.h) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const int x = p.w + dx;
            if (x < 0 || x >= dims.w) continue;
            const std::size_t k = dims.linear(z, y, x);
            if (mask.bits()[static_cast<Eigen::Index>(k)] && label[k] == 0) {
              label[k] = id;
              queue.push_back(k);
            }
          }
        }
      }
    }
    // Raster-order seeding means earlier labels own smaller first voxels, so
    // a strict comparison implements the tie rule.
    if (queue.size() > best_size) {
      best_size = queue.size();
      best_label = id;
    }
  }

  for (std::size_t k = 0; k < n; ++k)
    if (label[k] == best_label) out.bits()[static_cast<Eigen::Index>(k)] = 1;
  return out;
}

BBoxExtents bbox_extents(const BinaryMask3D& mask, const Spacing3& spacing) {
  const Dims3& dims = mask.dims();
  Index3 lo{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(),
            std::numeric_limits<int>::max()};
  Index3 hi{-1, -1, -1};
  std::size_t k = 0;
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x, ++k) {
        if (!mask.bits()[static_cast<Eigen::Index>(k)]) continue;
        lo = {std::min(lo.d, z), std::min(lo.h, y), std::min(lo.w, x)};
        hi = {std::max(hi.d, z), std::max(hi.h, y), std::max(hi.w, x)};
      }
  if (hi.d < 0) return {};
  return {(hi.d - lo.d + 1) * spacing[0], (hi.h - lo.h + 1) * spacing[1],
          (hi.w - lo.w + 1) * spacing[2]};
}

double scale_map_r(double extent_mm) {
  if (!(extent_mm >= 0.0))
    throw std::invalid_argument("scale_map_r: extent must be nonnegative");
  return std::min(kQuadraticGain * extent_mm * extent_mm, kLinearGain * extent_mm);
}

ClickMaskSpec make_click_spec(const BBoxExtents& extents, const Index3& center) {
  ClickMaskSpec spec;
  spec.center = center;
  spec.degenerate = extents.max() < kDegenerateExtentMm;
  if (!spec.degenerate)
    spec.semi_axes_mm << scale_map_r(extents.d), scale_map_r(extents.h), scale_map_r(extents.w);
  return spec;
}

BinaryMask3D single_voxel_mask(const Dims3& dims, const Index3& center) {
  if (!dims.contains(center))
    throw std::invalid_argument("single_voxel_mask: center outside grid");
  BinaryMask3D out(dims);
  out.set(center);
  return out;
}

namespace {

// ((offset * spacing) / semi_axis)^2, infinite off the center plane of a
// collapsed axis.
double axis_term(int offset, double spacing, double semi_axis) {
  const double t = offset * spacing;
  if (semi_axis == 0.0) return offset == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return (t * t) / (semi_axis * semi_axis);
}

}  // namespace

BinaryMask3D rasterize_ellipsoid(const ClickMaskSpec& spec, const Dims3& dims,
                                 const Spacing3& spacing) {
  if (!dims.contains(spec.center))
    throw std::invalid_argument("rasterize_ellipsoid: center outside grid");
  if (spec.degenerate) return single_voxel_mask(dims, spec.center);
  if ((spec.semi_axes_mm < 0.0).any())
    throw std::invalid_argument("rasterize_ellipsoid: negative semi-axis");

  BinaryMask3D out(dims);
  const Index3 c = spec.center;
  const double rw = spec.semi_axes_mm[2];
  for (int z = 0; z < dims.d; ++z) {
    const double tz = axis_term(z - c.d, spacing[0], spec.semi_axes_mm[0]);
    if (tz > 1.0) continue;
    for (int y = 0; y < dims.h; ++y) {
      const double tzy = tz + axis_term(y - c.h, spacing[1], spec.semi_axes_mm[1]);
      if (tzy > 1.0) continue;
      // Analytic half-width along w, then nudge both ends so the row agrees
      // exactly with the per-voxel inequality.
      const auto inside = [&](int x) {
        return tzy + axis_term(x - c.w, spacing[2], rw) <= 1.0;
      };
      int half = rw == 0.0 ? 0 : static_cast<int>(std::floor(rw * std::sqrt(1.0 - tzy) / spacing[2]));
      while (half > 0 && !inside(c.w + half)) --half;
      while (inside(c.w + half + 1)) ++half;
      const int x0 = std::max(0, c.w - half);
      const int x1 = std::min(dims.w - 1, c.w + half);
      for (int x = x0; x <= x1; ++x) out.set(z, y, x);
    }
  }
  return out;
}

ClickMask click_mask_from_binary(const BinaryMask3D& presegmentation, const Spacing3& spacing) {
  const Dims3& dims = presegmentation.dims();
  ClickMask result;
  const BinaryMask3D main = largest_component(presegmentation);
  result.extents = bbox_extents(main, spacing);
  result.spec = make_click_spec(result.extents, dims.center());
  result.mask = rasterize_ellipsoid(result.spec, dims, spacing);
  return result;
}

}  // namespace sattca
