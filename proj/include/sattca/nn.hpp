#pragma once

// Dense feature maps and the handful of layers the segmentation network is
// built from. A feature map is a (voxels x channels) column-major matrix, so
// every channel is one contiguous slice-major grid.

#include <sattca/volgrid.hpp>

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace sattca::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <typename S>
struct Feature {
  Dims3 dims;
  Mat<S> data;  // dims.size() x channels

  Eigen::Index channels() const { return data.cols(); }
};

template <typename S>
Feature<S> from_volume(const Volume<S>& v) {
  Feature<S> f;
  f.dims = v.dims();
  f.data = v.voxels().matrix();
  return f;
}

/// Channel concatenation; the gradient split is done by column ranges.
template <typename S>
Feature<S> concat(const std::vector<const Feature<S>*>& parts) {
  Feature<S> out;
  out.dims = parts.front()->dims;
  Eigen::Index cols = 0;
  for (const auto* p : parts) cols += p->channels();
  out.data.resize(static_cast<Eigen::Index>(out.dims.size()), cols);
  Eigen::Index at = 0;
  for (const auto* p : parts) {
    out.data.middleCols(at, p->channels()) = p->data;
    at += p->channels();
  }
  return out;
}

inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

inline Dims3 conv_out_dims(const Dims3& in, int kernel, int stride) {
  const int pad = kernel / 2;
  auto o = [&](int n) { return (n + 2 * pad - kernel) / stride + 1; };
  return {o(in.d), o(in.h), o(in.w)};
}

/// Patch matrix for a cubic kernel with zero padding kernel/2. Column
/// ci * k^3 + (kd * k + kh) * k + kw holds input channel ci shifted by the
/// kernel offset, sampled on the output grid. Writes into `cols`, reusing its
/// storage when the shape is unchanged.
template <typename S>
void im2col(const Feature<S>& x, int k, int stride, Dims3& out_dims, Mat<S>& cols) {
  const int pad = k / 2;
  const Dims3 in = x.dims;
  out_dims = conv_out_dims(in, k, stride);
  const Dims3 od = out_dims;
  const Eigen::Index n_out = static_cast<Eigen::Index>(od.size());
  const int k3 = k * k * k;
  cols.resize(n_out, x.channels() * k3);
  for (Eigen::Index ci = 0; ci < x.channels(); ++ci) {
    const S* src = x.data.col(ci).data();
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          S* dst = cols.col(ci * k3 + (kd * k + kh) * k + kw).data();
          // Valid output x-range for this kernel column.
          const int lo = std::max(0, ceil_div(pad - kw, stride));
          const int hi = std::min(od.w, floor_div(in.w - 1 + pad - kw, stride) + 1);
          for (int oz = 0; oz < od.d; ++oz) {
            const int iz = oz * stride + kd - pad;
            for (int oy = 0; oy < od.h; ++oy) {
              S* row = dst + od.linear(oz, oy, 0);
              const int iy = oy * stride + kh - pad;
              if (iz < 0 || iz >= in.d || iy < 0 || iy >= in.h || hi <= lo) {
                std::fill(row, row + od.w, S(0));
                continue;
              }
              const S* srow = src + in.linear(iz, iy, 0);
              std::fill(row, row + lo, S(0));
              if (stride == 1) {
                const S* s0 = srow + (lo + kw - pad);
                std::copy(s0, s0 + (hi - lo), row + lo);
              } else {
                for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox * stride + kw - pad];
              }
              std::fill(row + hi, row + od.w, S(0));
            }
          }
        }
  }
}

template <typename S>
Mat<S> im2col(const Feature<S>& x, int k, int stride, Dims3& out_dims) {
  Mat<S> cols;
  im2col(x, k, stride, out_dims, cols);
  return cols;
}

/// Adjoint of im2col: scatter-add patch gradients back onto the input grid.
template <typename S>
Mat<S> col2im(const Mat<S>& dcols, const Dims3& in, Eigen::Index channels, int k, int stride) {
  const int pad = k / 2;
  const Dims3 od = conv_out_dims(in, k, stride);
  const int k3 = k * k * k;
  Mat<S> dx = Mat<S>::Zero(static_cast<Eigen::Index>(in.size()), channels);
  for (Eigen::Index ci = 0; ci < channels; ++ci) {
    S* dst = dx.col(ci).data();
    for (int kd = 0; kd < k; ++kd)
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw) {
          const S* src = dcols.col(ci * k3 + (kd * k + kh) * k + kw).data();
          const int lo = std::max(0, ceil_div(pad - kw, stride));
          const int hi = std::min(od.w, floor_div(in.w - 1 + pad - kw, stride) + 1);
          if (hi <= lo) continue;
          for (int oz = 0; oz < od.d; ++oz) {
            const int iz = oz * stride + kd - pad;
            if (iz < 0 || iz >= in.d) continue;
            for (int oy = 0; oy < od.h; ++oy) {
              const int iy = oy * stride + kh - pad;
              if (iy < 0 || iy >= in.h) continue;
              const S* row = src + od.linear(oz, oy, 0);
              S* drow = dst + in.linear(iz, iy, 0);
              if (stride == 1) {
                S* d0 = drow + (lo + kw - pad);
                for (int ox = lo; ox < hi; ++ox) d0[ox - lo] += row[ox];
              } else {
                for (int ox = lo; ox < hi; ++ox) drow[ox * stride + kw - pad] += row[ox];
              }
            }
          }
        }
  }
  return dx;
}

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

enum class ParamKind : std::uint8_t { kNormAffine, kFrozen };

template <typename S>
struct Parameter {
  std::string name;
  ParamKind kind = ParamKind::kFrozen;
  Mat<S> value;
  Mat<S> grad;
};

/// conv(k, stride) -> instance norm (learnable per-channel scale/shift) ->
/// leaky ReLU. The conv has no bias; the norm shift subsumes it.
struct BlockSpec {
  int cin = 1;
  int cout = 1;
  int kernel = 3;
  int stride = 1;
  std::size_t weight = 0;  // parameter indices
  std::size_t gamma = 0;
  std::size_t beta = 0;
};

template <typename S>
struct BlockCache {
  Dims3 in_dims;
  Mat<S> cols;  // im2col patches, or the raw input for 1x1 kernels
  Mat<S> xhat;
  RowVec<S> inv_std;
};

/// Which parameter gradients a backward pass must produce.
enum class GradScope : std::uint8_t { kAll, kNormAffineOnly };

template <typename S>
Mat<S>& scratch_matrix(int slot) {
  thread_local Mat<S> buffers[2];
  return buffers[slot];
}

/// Takes the input by value so 1x1 blocks can keep it as their patch matrix
/// without a copy.
template <typename S>
Feature<S> block_forward(const BlockSpec& b, const std::vector<Parameter<S>>& params,
                         Feature<S> x, BlockCache<S>* cache) {
  Feature<S> out;
  Mat<S> local_z;
  Mat<S>& z = cache ? cache->xhat : local_z;
  const Mat<S>& w = params[b.weight].value;
  if (b.kernel == 1 && b.stride == 1) {
    out.dims = x.dims;
    z.noalias() = x.data * w;
    if (cache) cache->cols = std::move(x.data);
  } else {
    Mat<S>& cols = cache ? cache->cols : scratch_matrix<S>(0);
    im2col(x, b.kernel, b.stride, out.dims, cols);
    z.noalias() = cols * w;
  }
  const Eigen::Index n = z.rows();
  RowVec<S> inv_std(b.cout);
  out.data.resize(n, b.cout);
  const S slope = S(kLeakySlope);
  for (int c = 0; c < b.cout; ++c) {
    auto zc = z.col(c).array();
    const S mean = zc.mean();
    zc -= mean;
    const S inv = S(1) / std::sqrt(zc.square().mean() + S(kNormEps));
    zc *= inv;
    inv_std[c] = inv;
    const S g = params[b.gamma].value(0, c);
    const S be = params[b.beta].value(0, c);
    auto oc = out.data.col(c).array();
    oc = zc * g + be;
    oc = oc.max(oc * slope);
  }
  if (cache) {
    cache->in_dims = x.dims;
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

/// Accumulates parameter gradients; returns d(input) when `want_input`.
template <typename S>
Mat<S> block_backward(const BlockSpec& b, std::vector<Parameter<S>>& params,
                      const BlockCache<S>& c, const Mat<S>& dy, GradScope scope,
                      bool want_input) {
  const Eigen::Index n = dy.rows();
  Mat<S> dz(n, b.cout);
  const S slope = S(kLeakySlope);
  for (int ch = 0; ch < b.cout; ++ch) {
    const S g = params[b.gamma].value(0, ch);
    const S be = params[b.beta].value(0, ch);
    const auto xh = c.xhat.col(ch).array();
    auto d = dz.col(ch).array();
    d = dy.col(ch).array() * (slope + (S(1) - slope) * ((xh * g + be) > S(0)).template cast<S>());
    const S sum_d = d.sum();
    const S sum_dx = (d * xh).sum();
    params[b.gamma].grad(0, ch) += sum_dx;
    params[b.beta].grad(0, ch) += sum_d;
    // d(pre-norm) = gamma * inv_std * (dpre - mean(dpre) - xhat * mean(dpre * xhat))
    d = (d - sum_d / S(n) - xh * (sum_dx / S(n))) * (g * c.inv_std[ch]);
  }

  if (scope == GradScope::kAll) params[b.weight].grad.noalias() += c.cols.transpose() * dz;
  if (!want_input) return {};
  const Mat<S>& w = params[b.weight].value;
  if (b.kernel == 1 && b.stride == 1) return dz * w.transpose();
  Mat<S>& dcols = scratch_matrix<S>(1);
  dcols.noalias() = dz * w.transpose();
  return col2im(dcols, c.in_dims, b.cin, b.kernel, b.stride);
}

/// Transposed convolution, kernel 2, stride 2, no bias. Weight layout is
/// cin x (8 * cout) with child offset j = (a * 2 + b) * 2 + c.
struct UpSpec {
  int cin = 1;
  int cout = 1;
  std::size_t weight = 0;
};

template <typename S>
struct UpCache {
  Mat<S> x;
  Dims3 in_dims;
};

template <typename S>
Feature<S> up_forward(const UpSpec& u, const std::vector<Parameter<S>>& params,
                      const Feature<S>& x, UpCache<S>* cache) {
  const Dims3 in = x.dims;
  const Dims3 od{in.d * 2, in.h * 2, in.w * 2};
  const Mat<S> z = x.data * params[u.weight].value;  // n_in x 8cout
  Feature<S> out;
  out.dims = od;
  out.data.resize(static_cast<Eigen::Index>(od.size()), u.cout);
  for (int co = 0; co < u.cout; ++co) {
    S* dst = out.data.col(co).data();
    for (int j = 0; j < 8; ++j) {
      const int a = j >> 2, bb = (j >> 1) & 1, cc = j & 1;
      const S* src = z.col(j * u.cout + co).data();
      for (int iz = 0; iz < in.d; ++iz)
        for (int iy = 0; iy < in.h; ++iy) {
          const S* s = src + in.linear(iz, iy, 0);
          S* d = dst + od.linear(2 * iz + a, 2 * iy + bb, cc);
          for (int ix = 0; ix < in.w; ++ix) d[2 * ix] = s[ix];
        }
    }
  }
  if (cache) {
    cache->x = x.data;
    cache->in_dims = in;
  }
  return out;
}

template <typename S>
Mat<S> up_backward(const UpSpec& u, std::vector<Parameter<S>>& params, const UpCache<S>& c,
                   const Mat<S>& dy, GradScope scope) {
  const Dims3 in = c.in_dims;
  const Dims3 od{in.d * 2, in.h * 2, in.w * 2};
  Mat<S> dz(static_cast<Eigen::Index>(in.size()), 8 * u.cout);
  for (int co = 0; co < u.cout; ++co) {
    const S* src = dy.col(co).data();
    for (int j = 0; j < 8; ++j) {
      const int a = j >> 2, bb = (j >> 1) & 1, cc = j & 1;
      S* dst = dz.col(j * u.cout + co).data();
      for (int iz = 0; iz < in.d; ++iz)
        for (int iy = 0; iy < in.h; ++iy) {
          const S* s = src + od.linear(2 * iz + a, 2 * iy + bb, cc);
          S* d = dst + in.linear(iz, iy, 0);
          for (int ix = 0; ix < in.w; ++ix) d[ix] = s[2 * ix];
        }
    }
  }
  if (scope == GradScope::kAll) params[u.weight].grad.noalias() += c.x.transpose() * dz;
  return dz * params[u.weight].value.transpose();
}

}  // namespace sattca::nn
