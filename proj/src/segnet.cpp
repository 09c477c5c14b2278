#include <sattca/errors.hpp>
#include <sattca/segnet.hpp>
#include <sattca/volume_io.hpp>

#include "json.hpp"

#include <bit>
#include <cstring>
#include <random>

namespace sattca {

using nlohmann::json;

void validate(const NetworkConfig& cfg) {
  if (cfg.depth < 2 || cfg.depth > 6)
    throw std::invalid_argument("NetworkConfig: depth must be in [2, 6]");
  if (cfg.base_channels < 1 || cfg.base_channels > 64)
    throw std::invalid_argument("NetworkConfig: base_channels must be in [1, 64]");
  if (cfg.ms_enabled && cfg.depth <= kFusionStage)
    throw std::invalid_argument(
        "NetworkConfig: the multi-scale encoder fuses at the quarter-resolution stage and "
        "needs depth >= 3");
  if (cfg.pointwise_decoder_stages < 0 || cfg.pointwise_decoder_stages > cfg.depth - 1)
    throw std::invalid_argument("NetworkConfig: pointwise_decoder_stages out of range");
}

namespace {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;

// Per-parameter stream so a parameter's initial value depends only on the
// model seed and its name, not on which other layers exist.
std::mt19937_64 param_rng(std::uint64_t seed, const std::string& name) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(name.data(), name.size(), kFnvOffset)),
                    static_cast<std::uint32_t>(fnv1a(name.data(), name.size(), kFnvOffset) >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

template <typename S>
std::size_t SegModel<S>::add_param(std::string name, nn::ParamKind kind, nn::Mat<S> value) {
  nn::Parameter<S> p;
  p.name = std::move(name);
  p.kind = kind;
  p.grad = nn::Mat<S>::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  params_.push_back(std::move(p));
  const std::size_t id = params_.size() - 1;
  (kind == nn::ParamKind::kNormAffine ? registry_.norm_affine : registry_.frozen).push_back(id);
  return id;
}

template <typename S>
int SegModel<S>::add_block(const std::string& name, int cin, int cout, int kernel, int stride,
                           std::vector<std::size_t>* owned) {
  nn::BlockSpec b;
  b.cin = cin;
  b.cout = cout;
  b.kernel = kernel;
  b.stride = stride;
  const int fan_in = cin * kernel * kernel * kernel;
  nn::Mat<S> w(fan_in, cout);
  {
    auto rng = param_rng(seed_, name + ".conv.weight");
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = static_cast<S>(normal(rng));
  }
  b.weight = add_param(name + ".conv.weight", nn::ParamKind::kFrozen, std::move(w));
  b.gamma = add_param(name + ".norm.gamma", nn::ParamKind::kNormAffine, nn::Mat<S>::Ones(1, cout));
  b.beta = add_param(name + ".norm.beta", nn::ParamKind::kNormAffine, nn::Mat<S>::Zero(1, cout));
  if (owned) owned->insert(owned->end(), {b.weight, b.gamma, b.beta});
  blocks_.push_back(b);
  return static_cast<int>(blocks_.size()) - 1;
}

template <typename S>
SegModel<S>::SegModel(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  validate(cfg);
  const int depth = cfg.depth;
  const auto chan = [&](int s) { return cfg.base_channels << s; };

  enc_.resize(depth);
  enc_[0].push_back(add_block("enc0.0", 1, chan(0), 3, 1, nullptr));
  for (int s = 1; s < depth; ++s) {
    const std::string p = "enc" + std::to_string(s);
    enc_[s].push_back(add_block(p + ".0", chan(s - 1), chan(s), 3, 2, nullptr));
    if (s == depth - 1) enc_[s].push_back(add_block(p + ".1", chan(s), chan(s), 3, 1, nullptr));
  }
  if (cfg.ms_enabled) {
    lvl1_.push_back(add_block("ms1.0", 1, chan(0), 3, 1, &ms_params_));
    lvl1_.push_back(add_block("ms1.1", chan(0), chan(1), 3, 2, &ms_params_));
    lvl2_.push_back(add_block("ms2.0", 1, chan(1), 3, 1, &ms_params_));
    fuse_ = add_block("ms.fuse", chan(kFusionStage) + 2 * chan(1), chan(kFusionStage), 1, 1,
                      &ms_params_);
  }
  dec_.assign(depth - 1, -1);
  up_.assign(depth - 1, -1);
  for (int s = depth - 2; s >= 0; --s) {
    nn::UpSpec u;
    u.cin = chan(s + 1);
    u.cout = chan(s);
    const std::string name = "up" + std::to_string(s) + ".weight";
    nn::Mat<S> w(u.cin, 8 * u.cout);
    auto rng = param_rng(seed_, name);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / u.cin));
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = static_cast<S>(normal(rng));
    u.weight = add_param(name, nn::ParamKind::kFrozen, std::move(w));
    ups_.push_back(u);
    up_[s] = static_cast<int>(ups_.size()) - 1;
    const int k = s < cfg.pointwise_decoder_stages ? 1 : 3;
    dec_[s] = add_block("dec" + std::to_string(s), 2 * chan(s), chan(s), k, 1, nullptr);
  }
  head_cin_ = chan(0);
  nn::Mat<S> hw(head_cin_, 1);
  {
    auto rng = param_rng(seed_, "head.weight");
    std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / head_cin_));
    for (Eigen::Index r = 0; r < hw.rows(); ++r) hw(r, 0) = static_cast<S>(normal(rng));
  }
  head_w_ = add_param("head.weight", nn::ParamKind::kFrozen, std::move(hw));
  // Foreground is a small share of a ROI; start the logits at a 1% prior.
  head_b_ = add_param("head.bias", nn::ParamKind::kFrozen,
                      nn::Mat<S>::Constant(1, 1, static_cast<S>(std::log(0.01 / 0.99))));
}

template <typename S>
std::size_t SegModel<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <typename S>
std::size_t SegModel<S>::parameter_count(const std::vector<std::size_t>& which) const {
  std::size_t n = 0;
  for (std::size_t i : which) n += static_cast<std::size_t>(params_[i].value.size());
  return n;
}

template <typename S>
void SegModel<S>::validate_pyramid(const InputPyramid<S>& p) const {
  const Dims3 d = p.level0.dims();
  const int div = 1 << (cfg_.depth - 1);
  if (d.d % div || d.h % div || d.w % div)
    throw std::invalid_argument("forward: level0 dims " + to_string(d) +
                                " must be divisible by " + std::to_string(div));
  if (!cfg_.ms_enabled) return;
  if (d.d % 4 || d.h % 4 || d.w % 4)
    throw std::invalid_argument("forward: level0 dims must be divisible by 4");
  if (p.level1.dims() != Dims3{d.d / 2, d.h / 2, d.w / 2})
    throw std::invalid_argument("forward: level1 must be half of level0, got " +
                                to_string(p.level1.dims()));
  if (p.level2.dims() != Dims3{d.d / 4, d.h / 4, d.w / 4})
    throw std::invalid_argument("forward: level2 must be a quarter of level0, got " +
                                to_string(p.level2.dims()));
}

template <typename S>
Volume<S> SegModel<S>::forward(const InputPyramid<S>& pyramid, Tape<S>* tape) const {
  validate_pyramid(pyramid);
  if (tape) {
    tape->blocks.resize(blocks_.size());
    tape->ups.resize(ups_.size());
  }
  const auto run = [&](int id, nn::Feature<S> x) {
    return nn::block_forward(blocks_[id], params_, std::move(x), tape ? &tape->blocks[id] : nullptr);
  };

  const int depth = cfg_.depth;
  std::vector<nn::Feature<S>> skips(depth);
  nn::Feature<S> h = nn::from_volume(pyramid.level0);
  for (int s = 0; s < depth; ++s) {
    for (int id : enc_[s]) h = run(id, std::move(h));
    if (cfg_.ms_enabled && s == kFusionStage) {
      nn::Feature<S> l1 = nn::from_volume(pyramid.level1);
      for (int id : lvl1_) l1 = run(id, std::move(l1));
      nn::Feature<S> l2 = nn::from_volume(pyramid.level2);
      for (int id : lvl2_) l2 = run(id, std::move(l2));
      if (tape) tape->main_fusion_channels = static_cast<int>(h.channels());
      h = run(fuse_, nn::concat<S>({&h, &l1, &l2}));
    }
    skips[s] = h;
  }

  nn::Feature<S> u = std::move(skips[depth - 1]);
  for (int s = depth - 2; s >= 0; --s) {
    u = nn::up_forward(ups_[up_[s]], params_, u, tape ? &tape->ups[up_[s]] : nullptr);
    u = run(dec_[s], nn::concat<S>({&u, &skips[s]}));
  }
  nn::Mat<S> logits = u.data * params_[head_w_].value;
  logits.array() += params_[head_b_].value(0, 0);
  if (tape) tape->head_input = std::move(u.data);
  return Volume<S>(pyramid.level0.dims(), pyramid.level0.spacing(),
                   typename Volume<S>::Buffer(logits.col(0).array()));
}

template <typename S>
void SegModel<S>::backward(const Tape<S>& tape, const Volume<S>& dlogits, nn::GradScope scope) {
  const int depth = cfg_.depth;
  const auto chan = [&](int s) { return cfg_.base_channels << s; };
  const bool all = scope == nn::GradScope::kAll;
  const auto back = [&](int id, const nn::Mat<S>& dy, bool want_input) {
    return nn::block_backward(blocks_[id], params_, tape.blocks[id], dy, scope, want_input);
  };

  const nn::Mat<S> dlog = dlogits.voxels().matrix();
  if (all) {
    params_[head_w_].grad.noalias() += tape.head_input.transpose() * dlog;
    params_[head_b_].grad(0, 0) += dlog.sum();
  }
  nn::Mat<S> du = dlog * params_[head_w_].value.transpose();

  std::vector<nn::Mat<S>> dskip(depth);
  for (int s = 0; s <= depth - 2; ++s) {
    const nn::Mat<S> dcat = back(dec_[s], du, true);
    dskip[s] = dcat.rightCols(chan(s));
    du = nn::up_backward(ups_[up_[s]], params_, tape.ups[up_[s]],
                         nn::Mat<S>(dcat.leftCols(chan(s))), scope);
  }

  nn::Mat<S> dh = std::move(du);
  for (int s = depth - 1; s >= 0; --s) {
    if (cfg_.ms_enabled && s == kFusionStage) {
      const nn::Mat<S> dcat = back(fuse_, dh, true);
      const int cm = tape.main_fusion_channels;
      const int c1 = chan(1);
      back(lvl2_[0], dcat.rightCols(c1), false);
      const nn::Mat<S> d1 = back(lvl1_[1], dcat.middleCols(cm, c1), true);
      back(lvl1_[0], d1, false);
      dh = dcat.leftCols(cm);
    }
    for (auto it = enc_[s].rbegin(); it != enc_[s].rend(); ++it) {
      const bool first = s == 0 && std::next(it) == enc_[s].rend();
      dh = back(*it, dh, !first);
    }
    if (s > 0) dh += dskip[s - 1];
  }
}

template <typename S>
void SegModel<S>::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

template <typename S>
template <typename T>
SegModel<T> SegModel<S>::cast() const {
  SegModel<T> out(cfg_, seed_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params_[i].value = params_[i].value.template cast<T>();
    out.params_[i].grad = params_[i].grad.template cast<T>();
  }
  return out;
}

template <typename S>
std::uint64_t checksum(const SegModel<S>& model, const std::vector<std::size_t>& which) {
  std::uint64_t h = kFnvOffset;
  for (std::size_t i : which) {
    const auto& p = model.parameters()[i];
    h = fnv1a(p.name.data(), p.name.size(), h);
    const std::int64_t shape[2] = {p.value.rows(), p.value.cols()};
    h = fnv1a(shape, sizeof(shape), h);
    h = fnv1a(p.value.data(), sizeof(S) * static_cast<std::size_t>(p.value.size()), h);
  }
  return h;
}

template <typename S>
ParamSnapshot<S> snapshot_norm(const SegModel<S>& model) {
  ParamSnapshot<S> snap;
  snap.config = model.config();
  for (std::size_t i : model.registry().norm_affine) {
    snap.names.push_back(model.parameters()[i].name);
    snap.values.push_back(model.parameters()[i].value);
  }
  snap.frozen_checksum = frozen_checksum(model);
  return snap;
}

template <typename S>
void restore_norm(SegModel<S>& model, const ParamSnapshot<S>& snap) {
  const auto& ids = model.registry().norm_affine;
  if (!(snap.config == model.config()) || snap.values.size() != ids.size())
    throw std::invalid_argument("restore_norm: snapshot taken from a different architecture");
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& p = model.parameters()[ids[k]];
    if (p.name != snap.names[k] || p.value.rows() != snap.values[k].rows() ||
        p.value.cols() != snap.values[k].cols())
      throw std::invalid_argument("restore_norm: parameter " + p.name + " does not match snapshot");
  }
  for (std::size_t k = 0; k < ids.size(); ++k) model.parameters()[ids[k]].value = snap.values[k];
}

template class SegModel<float>;
template class SegModel<double>;
template SegModel<double> SegModel<float>::cast<double>() const;
template SegModel<float> SegModel<double>::cast<float>() const;
template SegModel<float> SegModel<float>::cast<float>() const;
template SegModel<double> SegModel<double>::cast<double>() const;
template std::uint64_t checksum(const SegModel<float>&, const std::vector<std::size_t>&);
template std::uint64_t checksum(const SegModel<double>&, const std::vector<std::size_t>&);
template ParamSnapshot<float> snapshot_norm(const SegModel<float>&);
template ParamSnapshot<double> snapshot_norm(const SegModel<double>&);
template void restore_norm(SegModel<float>&, const ParamSnapshot<float>&);
template void restore_norm(SegModel<double>&, const ParamSnapshot<double>&);

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json config_json(const NetworkConfig& c) {
  return json{{"base_channels", c.base_channels},
              {"depth", c.depth},
              {"norm_kind", "instance"},
              {"ms_enabled", c.ms_enabled},
              {"pointwise_decoder_stages", c.pointwise_decoder_stages}};
}

NetworkConfig config_from(const json& j) {
  NetworkConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  if (j.value("norm_kind", std::string("instance")) != "instance")
    throw std::invalid_argument("unsupported norm_kind");
  c.ms_enabled = j.at("ms_enabled").get<bool>();
  c.pointwise_decoder_stages = j.value("pointwise_decoder_stages", c.pointwise_decoder_stages);
  return c;
}

struct DecodedCheckpoint {
  NetworkConfig config;
  std::uint64_t seed = 0;
  std::vector<std::vector<float>> values;
  std::vector<std::string> names;
};

DecodedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const auto u32 = [&](std::size_t at) {
    if (bytes.size() < at + 4) throw FormatError("truncated checkpoint", at);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
    return v;
  };
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SCKP", 4) != 0)
    throw FormatError("bad checkpoint magic", 0);
  if (u32(4) != kCheckpointVersion) throw FormatError("unsupported checkpoint version", 4);
  const std::uint32_t hlen = u32(8);
  if (bytes.size() < 12 + static_cast<std::size_t>(hlen)) throw FormatError("truncated checkpoint header", 12);
  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what(), 12);
  }
  DecodedCheckpoint out;
  try {
    out.config = config_from(header.at("config"));
    out.seed = header.at("seed").get<std::uint64_t>();
    std::size_t at = 12 + hlen;
    for (const auto& p : header.at("params")) {
      const std::size_t n = p.at("rows").get<std::size_t>() * p.at("cols").get<std::size_t>();
      if (bytes.size() < at + 4 * n) throw FormatError("truncated checkpoint payload", at);
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(u32(at + 4 * i));
      at += 4 * n;
      out.names.push_back(p.at("name").get<std::string>());
      out.values.push_back(std::move(v));
    }
    if (at != bytes.size()) throw FormatError("trailing bytes in checkpoint", at);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what(), 12);
  }
  return out;
}

void apply(const DecodedCheckpoint& ck, SegModel<float>& model) {
  auto& params = model.parameters();
  if (ck.values.size() != params.size())
    throw std::invalid_argument("checkpoint parameter count does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ck.names[i] != params[i].name ||
        ck.values[i].size() != static_cast<std::size_t>(params[i].value.size()))
      throw std::invalid_argument("checkpoint parameter " + ck.names[i] + " does not match model");
    params[i].value = Eigen::Map<const nn::Mat<float>>(ck.values[i].data(), params[i].value.rows(),
                                                      params[i].value.cols());
  }
}

}  // namespace

std::string to_json_string(const NetworkConfig& cfg) { return config_json(cfg).dump(); }

NetworkConfig network_config_from_json_string(const std::string& s) {
  return config_from(json::parse(s));
}

void save_checkpoint(const std::filesystem::path& path, const SegModel<float>& model) {
  json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = config_json(model.config());
  header["seed"] = model.seed();
  header["params"] = json::array();
  for (const auto& p : model.parameters())
    header["params"].push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  const std::string h = header.dump();
  std::vector<std::uint8_t> out = {'S', 'C', 'K', 'P'};
  const auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(kCheckpointVersion);
  put(static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  for (const auto& p : model.parameters())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) put(std::bit_cast<std::uint32_t>(p.value.data()[i]));
  write_file_bytes(path, out);
}

SegModel<float> load_checkpoint(const std::filesystem::path& path) {
  const DecodedCheckpoint ck = decode_checkpoint(read_file_bytes(path));
  SegModel<float> model(ck.config, ck.seed);
  apply(ck, model);
  return model;
}

void load_checkpoint_into(const std::filesystem::path& path, SegModel<float>& model) {
  const DecodedCheckpoint ck = decode_checkpoint(read_file_bytes(path));
  if (!(ck.config == model.config()))
    throw std::invalid_argument("checkpoint config " + to_json_string(ck.config) +
                                " does not match model config " + to_json_string(model.config()));
  apply(ck, model);
}

}  // namespace sattca
