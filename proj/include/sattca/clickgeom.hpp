#pragma once

// From a pre-segmentation to the click supervision mask: main connected
// component, its axis-projected bounding box, the scale mapping of box side
// to ellipsoid semi-axis, and filled-ellipsoid rasterization.

#include <sattca/volgrid.hpp>

#include <algorithm>
#include <utility>

namespace sattca {

/// Physical bounding-box side lengths in mm along (d, h, w).
struct BBoxExtents {
  double d = 0.0;
  double h = 0.0;
  double w = 0.0;

  double max() const { return std::max({d, h, w}); }
};

struct ClickMaskSpec {
  Eigen::Array3d semi_axes_mm = Eigen::Array3d::Zero();  // (R(d), R(h), R(w))
  bool degenerate = true;
  Index3 center;
};

/// Box sides below this length (all three) collapse the mask to one voxel.
inline constexpr double kDegenerateExtentMm = 7.0;
inline constexpr double kQuadraticGain = 0.02;
inline constexpr double kLinearGain = 0.8;

/// Largest 26-connected foreground component. Ties go to the component that
/// holds the lexicographically smallest (d, h, w) voxel.
BinaryMask3D largest_component(const BinaryMask3D& mask);

/// (max index - min index + 1) * spacing per axis; zeros for an empty mask.
BBoxExtents bbox_extents(const BinaryMask3D& mask, const Spacing3& spacing);

/// min(0.02 x^2, 0.8 x). Quadratic up to 40 mm, linear beyond.
double scale_map_r(double extent_mm);

ClickMaskSpec make_click_spec(const BBoxExtents& extents, const Index3& center);

/// Filled ellipsoid sum(((i - c) * s / R)^2) <= 1 around spec.center, clipped
/// to the grid. A zero semi-axis keeps only the center plane of that axis.
BinaryMask3D rasterize_ellipsoid(const ClickMaskSpec& spec, const Dims3& dims,
                                 const Spacing3& spacing);

/// Single-voxel mask at `center`, the TTCA click and the empty-prediction
/// fallback.
BinaryMask3D single_voxel_mask(const Dims3& dims, const Index3& center);

struct ClickMask {
  BinaryMask3D mask;
  ClickMaskSpec spec;
  BBoxExtents extents;
};

ClickMask click_mask_from_binary(const BinaryMask3D& presegmentation, const Spacing3& spacing);

/// threshold -> largest_component -> bbox_extents -> make_click_spec ->
/// rasterize_ellipsoid, centered on the grid click.
template <typename Scalar>
ClickMask click_mask_from_prediction(const Volume<Scalar>& prob_map, const Spacing3& spacing,
                                     double thr = 0.5) {
  return click_mask_from_binary(threshold(prob_map, thr), spacing);
}

}  // namespace sattca
