#include <sattca/adapt.hpp>

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace sattca {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::size_t count_inside(const Volume3D& probs, const BinaryMask3D& mask, double thr) {
  const auto fg = (probs.voxels() > float(thr)).cast<std::uint8_t>();
  return static_cast<std::size_t>((fg * mask.bits()).cast<std::size_t>().sum());
}

BinaryMask3D finish(const Volume3D& probs, const AdaptationConfig& cfg) {
  BinaryMask3D out = threshold(probs, cfg.threshold);
  if (cfg.lcc_postprocess) out = largest_component(out);
  return out;
}

}  // namespace

std::string to_string(AdaptMode m) {
  switch (m) {
    case AdaptMode::kNone: return "none";
    case AdaptMode::kTtca: return "ttca";
    case AdaptMode::kSattca: return "sattca";
  }
  return "?";
}

AdaptMode parse_adapt_mode(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "none") return AdaptMode::kNone;
  if (l == "ttca") return AdaptMode::kTtca;
  if (l == "sattca") return AdaptMode::kSattca;
  throw std::invalid_argument("unknown adaptation mode '" + s + "' (none, ttca, sattca)");
}

void validate(const AdaptationConfig& cfg) {
  if (cfg.epochs < 0) throw std::invalid_argument("adapt: epochs must be >= 0");
  if (!(cfg.step_size > 0.0)) throw std::invalid_argument("adapt: step_size must be > 0");
  if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0))
    throw std::invalid_argument("adapt: threshold must lie in (0, 1)");
  if (cfg.weights.sigma < 0.0 || cfg.weights.gamma < 0.0)
    throw std::invalid_argument("adapt: loss weights must be nonnegative");
}

BinaryMask3D predict_mask(const SegModel<float>& model, const RoiSample& sample,
                          double threshold_value) {
  return threshold(predict_probs(model, build_pyramid(sample)), threshold_value);
}

ClickMask click_mask_for_mode(AdaptMode mode, const Volume3D& preseg_probs,
                              const Spacing3& spacing, double thr) {
  if (mode == AdaptMode::kSattca) return click_mask_from_prediction(preseg_probs, spacing, thr);
  ClickMask cm;
  cm.spec.center = preseg_probs.dims().center();
  cm.spec.degenerate = true;
  cm.mask = single_voxel_mask(preseg_probs.dims(), cm.spec.center);
  if (mode == AdaptMode::kTtca)
    cm.extents = bbox_extents(largest_component(threshold(preseg_probs, thr)), spacing);
  return cm;
}

AdaptResult adapt_and_predict(SegModel<float>& model, const RoiSample& sample,
                              const AdaptationConfig& cfg) {
  validate(cfg);
  const auto t0 = Clock::now();
  AdaptResult res;
  AdaptationTrace& tr = res.trace;
  tr.sample_id = sample.id;
  tr.mode = cfg.mode;
  tr.frozen_checksum = frozen_checksum(model);

  const InputPyramid<float> pyr = build_pyramid(sample);
  const Volume3D preseg = predict_probs(model, pyr);
  tr.inference_ms = ms_since(t0);

  if (cfg.mode == AdaptMode::kNone || cfg.epochs == 0) {
    res.mask = finish(preseg, cfg);
    tr.total_ms = ms_since(t0);
    return res;
  }

  const ClickMask cm = click_mask_for_mode(cfg.mode, preseg, sample.image.spacing(), cfg.threshold);
  tr.mask_voxels = cm.mask.count();
  tr.extents = cm.extents;
  tr.degenerate = cm.spec.degenerate;

  const ParamSnapshot<float> snap = snapshot_norm(model);
  AdamW<float> opt(model, model.registry().norm_affine, cfg.optimizer);
  Tape<float> tape;
  bool ok = true;
  for (int e = 0; e < cfg.epochs; ++e) {
    const Volume3D probs = sigmoid(model.forward(pyr, &tape));
    EpochRecord rec;
    rec.terms = tt_loss_terms(probs, cm.mask, cfg.weights);
    rec.total = combine_tt(rec.terms, cfg.weights);
    rec.fg_in_mask = count_inside(probs, cm.mask, cfg.threshold);
    if (!std::isfinite(rec.total)) {
      ok = false;
      tr.failure = "non-finite adaptation loss at epoch " + std::to_string(e);
      break;
    }
    tr.epochs.push_back(rec);
    model.zero_grad();
    const Volume3D dz = chain_sigmoid(tt_loss_grad(probs, cm.mask, cfg.weights), probs);
    model.backward(tape, dz, nn::GradScope::kNormAffineOnly);
    opt.step(model, cfg.step_size);
  }

  Volume3D final_probs;
  if (ok) {
    final_probs = predict_probs(model, pyr);
    if (!final_probs.voxels().allFinite()) {
      ok = false;
      tr.failure = "non-finite prediction after adaptation";
    }
  }
  if (!ok) {
    tr.aborted = true;
    restore_norm(model, snap);
    res.mask = finish(preseg, cfg);
    tr.total_ms = ms_since(t0);
    return res;
  }
  res.mask = finish(final_probs, cfg);
  if (cfg.episodic) restore_norm(model, snap);
  tr.total_ms = ms_since(t0);
  return res;
}

std::vector<AdaptResult> batch_adapt(const SegModel<float>& model,
                                     const std::vector<RoiSample>& samples,
                                     const AdaptationConfig& cfg, int workers) {
  return batch_adapt(model, samples, std::vector<AdaptationConfig>(samples.size(), cfg), workers);
}

std::vector<AdaptResult> batch_adapt(const SegModel<float>& model,
                                     const std::vector<RoiSample>& samples,
                                     const std::vector<AdaptationConfig>& cfgs, int workers) {
  if (cfgs.size() != samples.size())
    throw std::invalid_argument("batch_adapt: one config per sample required");
  for (const auto& c : cfgs) {
    if (c.mode != cfgs.front().mode)
      throw std::invalid_argument("batch_adapt: mixed adaptation modes in one batch");
    if (!c.episodic) throw std::invalid_argument("batch_adapt: requires episodic adaptation");
    validate(c);
  }
  std::vector<AdaptResult> out(samples.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    SegModel<float> local = model;
    for (std::size_t i; (i = next.fetch_add(1)) < samples.size();) {
      try {
        out[i] = adapt_and_predict(local, samples[i], cfgs[i]);
      } catch (const std::exception& e) {
        out[i] = AdaptResult{};
        out[i].trace.sample_id = samples[i].id;
        out[i].trace.mode = cfgs[i].mode;
        out[i].trace.aborted = true;
        out[i].trace.failure = e.what();
        local = model;
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(samples.size())));
  if (n == 1) {
    work();
    return out;
  }
  std::vector<std::thread> pool;
  for (int k = 0; k < n; ++k) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  return out;
}

std::string trace_to_json_line(const AdaptationTrace& t) {
  nlohmann::json j;
  j["sample_id"] = t.sample_id;
  j["mode"] = to_string(t.mode);
  auto& ep = j["epochs"] = nlohmann::json::array();
  for (const auto& e : t.epochs)
    ep.push_back({{"bce", e.terms.bce},
                  {"dice", e.terms.dice},
                  {"entropy", e.terms.entropy},
                  {"total", e.total},
                  {"fg_in_mask", e.fg_in_mask}});
  j["mask_voxels"] = t.mask_voxels;
  j["bbox_mm"] = {t.extents.d, t.extents.h, t.extents.w};
  j["degenerate"] = t.degenerate;
  j["inference_ms"] = t.inference_ms;
  j["total_ms"] = t.total_ms;
  j["aborted"] = t.aborted;
  if (!t.failure.empty()) j["failure"] = t.failure;
  j["frozen_checksum"] = t.frozen_checksum;
  return j.dump();
}

void write_traces(std::ostream& os, const std::vector<AdaptationTrace>& traces) {
  for (const auto& t : traces) os << trace_to_json_line(t) << '\n';
}

}  // namespace sattca
