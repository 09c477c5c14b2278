#pragma once

// Multi-scale-input encoder-decoder for ROI segmentation.
//
// Main path: one conv block per resolution stage (stride-2 conv between
// stages, an extra block at the bottleneck), transposed-conv upsampling and
// skip concatenation on the way back, and a 1x1 logit head. With the
// multi-scale encoder on, the half-extent crop runs through a stem block and
// one stride-2 block, the quarter-extent crop through one stem block, and both
// are concatenated with the main path at its quarter-resolution stage and
// projected back by a 1x1 fusion block.

#include <sattca/nn.hpp>
#include <sattca/volgrid.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sattca {

enum class NormKind : std::uint8_t { kInstance };

struct NetworkConfig {
  int base_channels = 8;
  int depth = 4;
  NormKind norm_kind = NormKind::kInstance;
  bool ms_enabled = true;
  /// Decoder stages below this index (counted from full resolution) use 1x1
  /// kernels; the encoder already supplies the spatial context there.
  int pointwise_decoder_stages = 2;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Throws std::invalid_argument on an unsupported configuration.
void validate(const NetworkConfig& cfg);

/// Stage at which the crop paths join the main path (quarter resolution).
inline constexpr int kFusionStage = 2;

/// Partition of the model's parameters, as indices into parameters().
struct ParamRegistry {
  std::vector<std::size_t> norm_affine;
  std::vector<std::size_t> frozen;
};

template <typename S>
struct ParamSnapshot {
  NetworkConfig config;
  std::vector<std::string> names;
  std::vector<nn::Mat<S>> values;
  std::uint64_t frozen_checksum = 0;
};

/// Per-forward intermediate state needed by backward().
template <typename S>
struct Tape {
  std::vector<nn::BlockCache<S>> blocks;
  std::vector<nn::UpCache<S>> ups;
  nn::Mat<S> head_input;
  std::vector<int> skip_channels;
  int main_fusion_channels = 0;
};

template <typename S>
class SegModel {
 public:
  using Scalar = S;

  SegModel(const NetworkConfig& cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<nn::Parameter<S>>& parameters() { return params_; }
  const std::vector<nn::Parameter<S>>& parameters() const { return params_; }
  const ParamRegistry& registry() const { return registry_; }

  /// Indices of the parameters owned by the two crop paths and the fusion
  /// block; empty with the multi-scale encoder off.
  const std::vector<std::size_t>& multiscale_parameters() const { return ms_params_; }

  /// Conv blocks in forward order; Tape::blocks is indexed the same way.
  const std::vector<nn::BlockSpec>& blocks() const { return blocks_; }

  std::size_t parameter_count() const;
  std::size_t parameter_count(const std::vector<std::size_t>& which) const;

  /// Logits on the level0 grid. Level1/level2 are read only when the
  /// multi-scale encoder is enabled.
  Volume<S> forward(const InputPyramid<S>& pyramid, Tape<S>* tape = nullptr) const;

  /// Back-propagates d(loss)/d(logits) through the recorded forward pass,
  /// accumulating into Parameter::grad. Frozen-parameter gradients are skipped
  /// under GradScope::kNormAffineOnly.
  void backward(const Tape<S>& tape, const Volume<S>& dlogits, nn::GradScope scope);

  void zero_grad();

  template <typename T>
  SegModel<T> cast() const;

 private:
  template <typename T>
  friend class SegModel;

  std::size_t add_param(std::string name, nn::ParamKind kind, nn::Mat<S> value);
  int add_block(const std::string& name, int cin, int cout, int kernel, int stride,
                std::vector<std::size_t>* owned);
  void validate_pyramid(const InputPyramid<S>& p) const;

  NetworkConfig cfg_;
  std::uint64_t seed_ = 0;
  std::vector<nn::Parameter<S>> params_;
  ParamRegistry registry_;
  std::vector<std::size_t> ms_params_;

  std::vector<nn::BlockSpec> blocks_;
  std::vector<nn::UpSpec> ups_;
  std::vector<std::vector<int>> enc_;  // block ids per stage
  std::vector<int> lvl1_, lvl2_;
  int fuse_ = -1;
  std::vector<int> dec_;  // block id per decoder stage (index = stage)
  std::vector<int> up_;   // up id per decoder stage
  std::size_t head_w_ = 0, head_b_ = 0;
  int head_cin_ = 0;
};

template <typename S>
SegModel<S> build_model(const NetworkConfig& cfg, std::uint64_t seed) {
  return SegModel<S>(cfg, seed);
}

template <typename S>
Volume<S> forward(const SegModel<S>& model, const InputPyramid<S>& pyramid) {
  return model.forward(pyramid);
}

/// Numerically stable logistic.
template <typename S>
Volume<S> sigmoid(const Volume<S>& logits) {
  Volume<S> out = logits;
  out.voxels() = logits.voxels().unaryExpr([](S z) {
    if (z >= S(0)) return S(1) / (S(1) + std::exp(-z));
    const S e = std::exp(z);
    return e / (S(1) + e);
  });
  return out;
}

template <typename S>
Volume<S> predict_probs(const SegModel<S>& model, const InputPyramid<S>& pyramid) {
  return sigmoid(model.forward(pyramid));
}

/// FNV-1a over names, shapes and raw bytes of the given parameters.
template <typename S>
std::uint64_t checksum(const SegModel<S>& model, const std::vector<std::size_t>& which);

template <typename S>
std::uint64_t frozen_checksum(const SegModel<S>& model) {
  return checksum(model, model.registry().frozen);
}

template <typename S>
ParamSnapshot<S> snapshot_norm(const SegModel<S>& model);

/// Throws std::invalid_argument when the snapshot came from a different
/// architecture.
template <typename S>
void restore_norm(SegModel<S>& model, const ParamSnapshot<S>& snap);

// Checkpoint file: "SCKP", u32 version, u32 header length, JSON header
// (config, seed, parameter names and shapes), then every parameter in
// registration order as f32 LE.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const SegModel<float>& model);
SegModel<float> load_checkpoint(const std::filesystem::path& path);
/// Loads into an existing model; a config mismatch is std::invalid_argument.
void load_checkpoint_into(const std::filesystem::path& path, SegModel<float>& model);

std::string to_json_string(const NetworkConfig& cfg);
NetworkConfig network_config_from_json_string(const std::string& s);

}  // namespace sattca
