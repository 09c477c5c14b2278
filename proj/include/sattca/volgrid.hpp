#pragma once

// Dense 3D grids, HU preprocessing, ROI cropping and the crop pyramid that
// feeds the multi-scale encoder.
//
// All grids are slice-major: d is the outermost axis, w the innermost, so the
// linear index of (d, h, w) is (d * H + h) * W + w.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace sattca {

struct Index3 {
  int d = 0;
  int h = 0;
  int w = 0;

  friend bool operator==(const Index3&, const Index3&) = default;
};

struct Dims3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  bool positive() const { return d > 0 && h > 0 && w > 0; }
  bool contains(const Index3& i) const {
    return i.d >= 0 && i.h >= 0 && i.w >= 0 && i.d < d && i.h < h && i.w < w;
  }
  std::size_t linear(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * h + y) * static_cast<std::size_t>(w) + x;
  }
  std::size_t linear(const Index3& i) const { return linear(i.d, i.h, i.w); }
  Index3 unravel(std::size_t k) const {
    const int x = static_cast<int>(k % w);
    k /= w;
    const int y = static_cast<int>(k % h);
    return {static_cast<int>(k / h), y, x};
  }
  /// Floor of the half extents; the click position of a ROI of these dims.
  Index3 center() const { return {d / 2, h / 2, w / 2}; }

  friend bool operator==(const Dims3&, const Dims3&) = default;
};

/// Millimetres per voxel along (d, h, w).
using Spacing3 = Eigen::Array3d;

inline Spacing3 isotropic_mm(double s = 1.0) { return Spacing3::Constant(s); }

std::string to_string(const Dims3& d);

template <typename Scalar>
class Volume {
 public:
  using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Volume() = default;

  Volume(Dims3 dims, Spacing3 spacing, Scalar fill = Scalar(0))
      : dims_(dims), spacing_(spacing) {
    validate();
    voxels_ = Buffer::Constant(static_cast<Eigen::Index>(dims.size()), fill);
  }

  Volume(Dims3 dims, Spacing3 spacing, Buffer voxels)
      : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)) {
    validate();
    if (static_cast<std::size_t>(voxels_.size()) != dims_.size())
      throw std::invalid_argument("Volume: buffer length " +
                                  std::to_string(voxels_.size()) +
                                  " does not match dims " + to_string(dims_));
  }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  const Buffer& voxels() const { return voxels_; }
  Buffer& voxels() { return voxels_; }
  std::size_t size() const { return dims_.size(); }

  Scalar& operator()(int z, int y, int x) { return voxels_[dims_.linear(z, y, x)]; }
  Scalar operator()(int z, int y, int x) const {
    return voxels_[dims_.linear(z, y, x)];
  }
  Scalar& at(const Index3& i) { return voxels_[dims_.linear(i)]; }
  Scalar at(const Index3& i) const { return voxels_[dims_.linear(i)]; }

  template <typename Other>
  Volume<Other> cast() const {
    return Volume<Other>(dims_, spacing_, voxels_.template cast<Other>().eval());
  }

 private:
  void validate() const {
    if (!dims_.positive())
      throw std::invalid_argument("Volume: dims must be positive, got " +
                                  to_string(dims_));
    if ((spacing_ <= 0.0).any())
      throw std::invalid_argument("Volume: spacing must be strictly positive");
  }

  Dims3 dims_{};
  Spacing3 spacing_ = Spacing3::Ones();
  Buffer voxels_;
};

using Volume3D = Volume<float>;

class BinaryMask3D {
 public:
  using Bits = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

  BinaryMask3D() = default;
  explicit BinaryMask3D(Dims3 dims, bool fill = false);
  BinaryMask3D(Dims3 dims, Bits bits);

  const Dims3& dims() const { return dims_; }
  const Bits& bits() const { return bits_; }
  Bits& bits() { return bits_; }
  std::size_t size() const { return dims_.size(); }
  std::size_t count() const;
  bool empty() const { return count() == 0; }

  bool operator()(int z, int y, int x) const { return bits_[dims_.linear(z, y, x)] != 0; }
  bool at(const Index3& i) const { return bits_[dims_.linear(i)] != 0; }
  void set(const Index3& i, bool v = true) { bits_[dims_.linear(i)] = v ? 1 : 0; }
  void set(int z, int y, int x, bool v = true) { bits_[dims_.linear(z, y, x)] = v ? 1 : 0; }

  /// 0/1 indicator in the requested scalar type.
  template <typename Scalar>
  Eigen::Array<Scalar, Eigen::Dynamic, 1> indicator() const {
    return bits_.cast<Scalar>();
  }

  friend bool operator==(const BinaryMask3D& a, const BinaryMask3D& b) {
    return a.dims_ == b.dims_ && (a.bits_ == b.bits_).all();
  }

 private:
  Dims3 dims_{};
  Bits bits_;
};

/// Foreground where value > threshold.
template <typename Scalar>
BinaryMask3D threshold(const Volume<Scalar>& vol, double thr) {
  BinaryMask3D out(vol.dims());
  out.bits() = (vol.voxels() > Scalar(thr)).template cast<std::uint8_t>();
  return out;
}

inline constexpr Dims3 kRoiDims{64, 96, 96};
inline constexpr double kHuLow = -1350.0;
inline constexpr double kHuHigh = 150.0;

/// One preprocessed lesion ROI with its click at the grid center.
struct RoiSample {
  std::string id;
  Volume3D image;
  std::optional<BinaryMask3D> gt;
  Index3 click;
  double lesion_diameter_mm = 0.0;
};

template <typename Scalar>
struct InputPyramid {
  Volume<Scalar> level0;
  Volume<Scalar> level1;
  Volume<Scalar> level2;
};

template <typename Scalar>
Volume<Scalar> clip_hu(const Volume<Scalar>& vol, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clip_hu: requires lo < hi");
  Volume<Scalar> out = vol;
  out.voxels() = vol.voxels().max(Scalar(lo)).min(Scalar(hi));
  return out;
}

/// (v - min) / (max - min); a constant volume maps to all zeros.
template <typename Scalar>
Volume<Scalar> minmax_normalize(const Volume<Scalar>& vol) {
  Volume<Scalar> out = vol;
  const Scalar lo = vol.voxels().minCoeff();
  const Scalar hi = vol.voxels().maxCoeff();
  if (!(hi > lo)) {
    out.voxels().setZero();
    return out;
  }
  out.voxels() = ((vol.voxels() - lo) / (hi - lo)).min(Scalar(1)).max(Scalar(0));
  return out;
}

template <typename Scalar>
Volume<Scalar> preprocess_hu(const Volume<Scalar>& raw) {
  return minmax_normalize(clip_hu(raw, kHuLow, kHuHigh));
}

/// Window of `shape` whose center voxel (shape / 2, floored) lands on
/// `center` in the source. Out-of-bounds voxels take the source minimum.
template <typename Scalar>
Volume<Scalar> crop_centered(const Volume<Scalar>& vol, const Index3& center,
                             const Dims3& shape) {
  if (!shape.positive())
    throw std::invalid_argument("crop_centered: shape must be positive");
  const Scalar pad = vol.voxels().minCoeff();
  Volume<Scalar> out(shape, vol.spacing(), pad);
  const Dims3& src = vol.dims();
  const Index3 start{center.d - shape.d / 2, center.h - shape.h / 2,
                     center.w - shape.w / 2};
  const int x0 = std::max(0, -start.w);
  const int x1 = std::min(shape.w, src.w - start.w);
  if (x1 <= x0) return out;
  for (int z = 0; z < shape.d; ++z) {
    const int sz = start.d + z;
    if (sz < 0 || sz >= src.d) continue;
    for (int y = 0; y < shape.h; ++y) {
      const int sy = start.h + y;
      if (sy < 0 || sy >= src.h) continue;
      const Scalar* from = vol.voxels().data() + src.linear(sz, sy, start.w + x0);
      Scalar* to = out.voxels().data() + shape.linear(z, y, x0);
      std::copy(from, from + (x1 - x0), to);
    }
  }
  return out;
}

/// Three nested centered crops at full, half and quarter extent. No
/// resampling: each level keeps the voxel size and narrows the context.
template <typename Scalar>
InputPyramid<Scalar> make_pyramid(const Volume<Scalar>& level0) {
  const Dims3& d = level0.dims();
  if (d.d % 4 || d.h % 4 || d.w % 4)
    throw std::invalid_argument("make_pyramid: level0 dims must be divisible by 4, got " +
                                to_string(d));
  InputPyramid<Scalar> p;
  p.level0 = level0;
  p.level1 = crop_centered(level0, d.center(), Dims3{d.d / 2, d.h / 2, d.w / 2});
  p.level2 = crop_centered(p.level1, p.level1.dims().center(),
                           Dims3{d.d / 4, d.h / 4, d.w / 4});
  return p;
}

InputPyramid<float> build_pyramid(const RoiSample& roi);

/// Preprocess a raw-HU volume into a ROI sample clicked at its center.
RoiSample make_roi(std::string id, const Volume3D& raw_hu,
                   std::optional<BinaryMask3D> gt, double lesion_diameter_mm);

}  // namespace sattca
