#include <sattca/errors.hpp>
#include <sattca/volume_io.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sattca {

std::string to_string(const Dims3& d) {
  return std::to_string(d.d) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

BinaryMask3D::BinaryMask3D(Dims3 dims, bool fill) : dims_(dims) {
  if (!dims.positive())
    throw std::invalid_argument("BinaryMask3D: dims must be positive, got " + to_string(dims));
  bits_ = Bits::Constant(static_cast<Eigen::Index>(dims.size()), fill ? 1 : 0);
}

BinaryMask3D::BinaryMask3D(Dims3 dims, Bits bits) : dims_(dims), bits_(std::move(bits)) {
  if (!dims.positive())
    throw std::invalid_argument("BinaryMask3D: dims must be positive, got " + to_string(dims));
  if (static_cast<std::size_t>(bits_.size()) != dims.size())
    throw std::invalid_argument("BinaryMask3D: bit count does not match dims");
  bits_ = (bits_ != 0).cast<std::uint8_t>();
}

std::size_t BinaryMask3D::count() const {
  return static_cast<std::size_t>((bits_ != 0).count());
}

InputPyramid<float> build_pyramid(const RoiSample& roi) {
  if (roi.image.dims() != kRoiDims)
    throw std::invalid_argument("build_pyramid: ROI must be " + to_string(kRoiDims) +
                                ", got " + to_string(roi.image.dims()));
  return make_pyramid(roi.image);
}

RoiSample make_roi(std::string id, const Volume3D& raw_hu, std::optional<BinaryMask3D> gt,
                   double lesion_diameter_mm) {
  if (gt && gt->dims() != raw_hu.dims())
    throw std::invalid_argument("make_roi: mask dims do not match volume");
  RoiSample roi;
  roi.id = std::move(id);
  roi.image = preprocess_hu(raw_hu);
  roi.gt = std::move(gt);
  roi.click = raw_hu.dims().center();
  roi.lesion_diameter_mm = lesion_diameter_mm;
  return roi;
}

namespace {

constexpr char kVolumeMagic[4] = {'S', 'V', 'O', 'L'};
constexpr char kMaskMagic[4] = {'S', 'M', 'S', 'K'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::size_t pos() const { return pos_; }
  const std::uint8_t* here() const { return bytes_.data() + pos_; }
  void skip(std::size_t n) { pos_ += n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void put_header(std::vector<std::uint8_t>& out, const char (&magic)[4], const Dims3& d,
                const Spacing3& s) {
  out.insert(out.end(), magic, magic + 4);
  put_u32(out, kVolumeFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(d.d));
  put_u32(out, static_cast<std::uint32_t>(d.h));
  put_u32(out, static_cast<std::uint32_t>(d.w));
  for (int i = 0; i < 3; ++i) put_f32(out, static_cast<float>(s[i]));
}

struct Header {
  Dims3 dims;
  Spacing3 spacing;
};

Header get_header(Reader& r, const char (&magic)[4]) {
  r.need(4, "magic");
  if (std::memcmp(r.here(), magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected ") + std::string(magic, 4), 0);
  r.skip(4);
  const std::size_t version_at = r.pos();
  const std::uint32_t version = r.u32("version");
  if (version != kVolumeFormatVersion)
    throw FormatError("unsupported format version " + std::to_string(version), version_at);
  Header h;
  const std::size_t dims_at = r.pos();
  const std::uint32_t d = r.u32("dims"), hh = r.u32("dims"), w = r.u32("dims");
  if (d == 0 || hh == 0 || w == 0 || d > (1u << 16) || hh > (1u << 16) || w > (1u << 16))
    throw FormatError("invalid dims", dims_at);
  h.dims = Dims3{static_cast<int>(d), static_cast<int>(hh), static_cast<int>(w)};
  const std::size_t spacing_at = r.pos();
  for (int i = 0; i < 3; ++i) h.spacing[i] = r.f32("spacing");
  if (!(h.spacing > 0.0).all() || !h.spacing.isFinite().all())
    throw FormatError("invalid spacing", spacing_at);
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const Volume3D& vol) {
  std::vector<std::uint8_t> out;
  out.reserve(kVolumeHeaderBytes + 4 * vol.size());
  put_header(out, kVolumeMagic, vol.dims(), vol.spacing());
  for (Eigen::Index i = 0; i < vol.voxels().size(); ++i) put_f32(out, vol.voxels()[i]);
  return out;
}

Volume3D decode_volume(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const Header h = get_header(r, kVolumeMagic);
  const std::size_t n = h.dims.size();
  r.need(4 * n, "voxel payload");
  Volume3D::Buffer buf(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) buf[static_cast<Eigen::Index>(i)] = r.f32("voxel");
  if (r.remaining() != 0) throw FormatError("trailing bytes after payload", r.pos());
  return Volume3D(h.dims, h.spacing, std::move(buf));
}

std::vector<std::uint8_t> encode_mask(const BinaryMask3D& mask, const Spacing3& spacing) {
  std::vector<std::uint8_t> out;
  out.reserve(kVolumeHeaderBytes + mask.size());
  put_header(out, kMaskMagic, mask.dims(), spacing);
  for (Eigen::Index i = 0; i < mask.bits().size(); ++i) out.push_back(mask.bits()[i] ? 1 : 0);
  return out;
}

DecodedMask decode_mask(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const Header h = get_header(r, kMaskMagic);
  const std::size_t n = h.dims.size();
  r.need(n, "mask payload");
  BinaryMask3D::Bits bits(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t b = r.here()[i];
    if (b > 1) throw FormatError("mask payload byte is not 0/1", r.pos() + i);
    bits[static_cast<Eigen::Index>(i)] = b;
  }
  r.skip(n);
  if (r.remaining() != 0) throw FormatError("trailing bytes after payload", r.pos());
  return DecodedMask{BinaryMask3D(h.dims, std::move(bits)), h.spacing};
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_volume(const std::filesystem::path& path, const Volume3D& vol) {
  write_file_bytes(path, encode_volume(vol));
}

Volume3D read_volume(const std::filesystem::path& path) {
  return decode_volume(read_file_bytes(path));
}

void write_mask(const std::filesystem::path& path, const BinaryMask3D& mask,
                const Spacing3& spacing) {
  write_file_bytes(path, encode_mask(mask, spacing));
}

DecodedMask read_mask(const std::filesystem::path& path) {
  return decode_mask(read_file_bytes(path));
}

}  // namespace sattca
