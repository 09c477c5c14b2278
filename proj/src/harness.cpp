#include <sattca/errors.hpp>
#include <sattca/harness.hpp>
#include <sattca/volume_io.hpp>

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace sattca {

using nlohmann::json;

// --- data -----------------------------------------------------------------

ManifestSource::ManifestSource(std::filesystem::path root, std::vector<ManifestCase> cases)
    : root_(std::move(root)), cases_(std::move(cases)) {}

RoiSample ManifestSource::get(std::size_t i) const { return load_case(root_, cases_.at(i)); }

PhantomSource::PhantomSource(PhantomConfig cfg, Split split) : cfg_(std::move(cfg)) {
  validate(cfg_);
  for (std::size_t i = 0; i < static_cast<std::size_t>(cfg_.cases); ++i)
    if (split_of(cfg_, i) == split) indices_.push_back(i);
}

RoiSample PhantomSource::get(std::size_t i) const {
  const std::size_t idx = indices_.at(i);
  return to_roi(case_id(idx), generate_indexed_case(cfg_, idx));
}

double PhantomSource::diameter(std::size_t i) const {
  auto rng = case_rng(cfg_.seed, indices_.at(i));
  return sample_diameter(rng, cfg_);
}

std::vector<RoiSample> materialize(const CaseSource& src) {
  std::vector<RoiSample> out;
  out.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out.push_back(src.get(i));
  return out;
}

// --- training ---------------------------------------------------------------

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(c.lr_max > 0.0 && c.lr_min > 0.0 && c.lr_min <= c.lr_max))
    throw ConfigError("train: need 0 < lr_min <= lr_max");
  if (c.val_every < 1) throw ConfigError("train.val_every must be >= 1");
}

TrainConfig full_train_profile() { return TrainConfig{}; }

TrainConfig desk_train_profile() {
  TrainConfig c;
  c.epochs = 20;
  c.batch_size = 4;
  return c;
}

NetworkConfig desk_network_profile() { return NetworkConfig{}; }

double mean_dsc(const SegModel<float>& model, const CaseSource& src, double thr) {
  if (src.size() == 0) throw std::invalid_argument("mean_dsc: empty source");
  double acc = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const RoiSample s = src.get(i);
    if (!s.gt) throw std::invalid_argument("mean_dsc: case " + s.id + " has no ground truth");
    acc += dsc(predict_mask(model, s, thr), *s.gt);
  }
  return acc / static_cast<double>(src.size());
}

TrainResult train(SegModel<float>& model, const CaseSource& train_set, const CaseSource& val_set,
                  const TrainConfig& cfg, const TrainCallback& on_epoch) {
  validate(cfg);
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training split");
  if (val_set.size() == 0) throw std::invalid_argument("train: empty validation split");

  std::vector<std::size_t> all(model.parameters().size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  AdamW<float> opt(model, all, cfg.optimizer);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<nn::Mat<float>> best;
  TrainResult res;
  Tape<float> tape;

  for (int e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr_at_epoch(e, cfg.epochs, cfg.lr_max, cfg.lr_min);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_acc = 0.0, dsc_acc = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      model.zero_grad();
      for (std::size_t k = b; k < end; ++k) {
        const RoiSample s = train_set.get(order[k]);
        if (!s.gt) throw std::invalid_argument("train: case " + s.id + " has no ground truth");
        const Volume3D probs = sigmoid(model.forward(build_pyramid(s), &tape));
        const double loss = train_loss(probs, *s.gt);
        if (!std::isfinite(loss))
          throw NumericalError("train: non-finite loss at epoch " + std::to_string(e) +
                               " on case " + s.id);
        loss_acc += loss;
        dsc_acc += dsc(threshold(probs, 0.5), *s.gt);
        model.backward(tape, chain_sigmoid(train_loss_grad(probs, *s.gt), probs),
                       nn::GradScope::kAll);
      }
      opt.step(model, lr, 1.0 / static_cast<double>(end - b));
    }
    TrainLogEntry entry;
    entry.epoch = e;
    entry.lr = lr;
    entry.train_loss = loss_acc / static_cast<double>(order.size());
    entry.train_dsc = dsc_acc / static_cast<double>(order.size());
    entry.val_dsc = std::numeric_limits<double>::quiet_NaN();
    if ((e + 1) % cfg.val_every == 0 || e + 1 == cfg.epochs) {
      entry.val_dsc = mean_dsc(model, val_set);
      if (res.best_epoch < 0 || entry.val_dsc > res.best_val_dsc) {
        res.best_epoch = e;
        res.best_val_dsc = entry.val_dsc;
        best.clear();
        for (const auto& p : model.parameters()) best.push_back(p.value);
      }
    }
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  for (std::size_t i = 0; i < best.size(); ++i) model.parameters()[i].value = best[i];
  return res;
}

// --- experiments ------------------------------------------------------------

void validate(const ExperimentSpec& spec) {
  if (spec.modes.empty()) throw ConfigError("experiment: at least one mode required");
  std::set<AdaptMode> seen;
  for (AdaptMode m : spec.modes)
    if (!seen.insert(m).second) throw ConfigError("experiment: duplicate mode " + to_string(m));
  if (spec.workers < 1) throw ConfigError("experiment: workers must be >= 1");
  if (spec.metrics.nsd_tolerance_mm < 0.0) throw ConfigError("metrics: tolerance must be >= 0");
  try {
    validate(spec.adapt);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ExperimentResult run_modes(const SegModel<float>& model, const CaseSource& test,
                           const ExperimentSpec& spec, const RunOptions& opts) {
  validate(spec);
  if (test.size() == 0) throw std::invalid_argument("run_modes: empty evaluation split");
  const std::vector<RoiSample> samples = materialize(test);
  for (const auto& s : samples)
    if (!s.gt) throw std::invalid_argument("run_modes: case " + s.id + " has no ground truth");

  ExperimentResult res;
  res.frozen_checksum = frozen_checksum(model);
  for (AdaptMode mode : spec.modes) {
    AdaptationConfig cfg = spec.adapt;
    cfg.mode = mode;
    cfg.episodic = true;
    auto results = batch_adapt(model, samples, cfg, spec.workers);
    ModeRun run;
    run.mode = mode;
    run.report.label = to_string(mode);
    run.report.config = spec.metrics;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const RoiSample& s = samples[i];
      BinaryMask3D& m = results[i].mask;
      if (m.dims() != s.gt->dims()) m = BinaryMask3D(s.gt->dims());
      run.report.samples.push_back(
          evaluate_sample(s.id, s.lesion_diameter_mm, m, *s.gt, s.image.spacing(), spec.metrics));
      run.traces.push_back(std::move(results[i].trace));
      if (opts.keep_masks) run.masks.push_back(std::move(m));
    }
    if (frozen_checksum(model) != res.frozen_checksum)
      throw std::logic_error("run_modes: frozen parameters changed during evaluation");
    res.runs.push_back(std::move(run));
    if (opts.on_mode) opts.on_mode(res.runs.back());
  }
  for (const auto& r : res.runs)
    if (r.mode != AdaptMode::kNone)
      for (const auto& base : res.runs)
        if (base.mode == AdaptMode::kNone) res.deltas.push_back(stratified_delta(base.report, r.report));
  return res;
}

OverheadSummary summarize_overhead(const ModeRun& run, int epochs) {
  OverheadSummary s;
  s.mode = run.mode;
  s.epochs = run.mode == AdaptMode::kNone ? 0 : epochs;
  s.samples = run.traces.size();
  for (const auto& t : run.traces) {
    s.mean_total_ms += t.total_ms;
    s.mean_inference_ms += t.inference_ms;
  }
  if (s.samples) {
    s.mean_total_ms /= static_cast<double>(s.samples);
    s.mean_inference_ms /= static_cast<double>(s.samples);
  }
  return s;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  return os;
}

json adapt_json(const AdaptationConfig& a) {
  return json{{"mode", to_string(a.mode)},
              {"epochs", a.epochs},
              {"step_size", a.step_size},
              {"optimizer",
               {{"beta1", a.optimizer.beta1},
                {"beta2", a.optimizer.beta2},
                {"eps", a.optimizer.eps},
                {"weight_decay", a.optimizer.weight_decay}}},
              {"weights",
               {{"sigma", a.weights.sigma},
                {"gamma", a.weights.gamma},
                {"smooth_eps", a.weights.smooth_eps},
                {"prob_clamp", a.weights.prob_clamp}}},
              {"threshold", a.threshold},
              {"episodic", a.episodic},
              {"lcc_postprocess", a.lcc_postprocess}};
}

json spec_json(const ExperimentSpec& s) {
  json modes = json::array();
  for (AdaptMode m : s.modes) modes.push_back(to_string(m));
  return json{{"dataset", s.dataset.string()},
              {"checkpoint", s.checkpoint.string()},
              {"modes", modes},
              {"adapt", adapt_json(s.adapt)},
              {"metrics", {{"nsd_tolerance_mm", s.metrics.nsd_tolerance_mm}}},
              {"split", to_string(s.split)},
              {"output_dir", s.output_dir.string()},
              {"workers", s.workers}};
}

}  // namespace

void write_experiment_outputs(const std::filesystem::path& dir, const ExperimentResult& r) {
  std::filesystem::create_directories(dir);
  {
    auto os = open_out(dir / "metrics.table");
    os << "frozen_checksum " << hex64(r.frozen_checksum) << "\n\n";
    for (const auto& run : r.runs) {
      write_mean_table(os, run.report);
      os << '\n';
    }
    for (const auto& d : r.deltas) {
      write_delta_table(os, d);
      os << '\n';
    }
  }
  {
    auto os = open_out(dir / "metrics.records");
    const double tol = r.runs.empty() ? 0.0 : r.runs.front().report.config.nsd_tolerance_mm;
    os << json{{"kind", "meta"},
               {"frozen_checksum", hex64(r.frozen_checksum)},
               {"nsd_tolerance_mm", tol},
               {"both_empty_dsc", 100.0},
               {"both_empty_nsd", 100.0},
               {"empty_gt_recall", "undefined"}}
              .dump()
       << '\n';
    for (const auto& run : r.runs) write_sample_records(os, run.report);
    for (const auto& d : r.deltas) write_delta_records(os, d);
  }
  {
    auto os = open_out(dir / "traces.log");
    for (const auto& run : r.runs) write_traces(os, run.traces);
  }
  {
    auto os = open_out(dir / "scatter.records");
    for (const auto& run : r.runs) write_scatter_records(os, run.report);
  }
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  validate(spec);
  const DatasetManifest manifest = read_manifest(spec.dataset);
  const SegModel<float> model = load_checkpoint(spec.checkpoint);
  ManifestSource test(spec.dataset, manifest.split(spec.split));

  std::filesystem::create_directories(spec.output_dir);
  {
    auto os = open_out(spec.output_dir / "config.resolved");
    json j{{"experiment", spec_json(spec)},
           {"network", json::parse(to_json_string(model.config()))},
           {"dataset_config_hash", manifest.generator_config_hash}};
    os << j.dump(2) << '\n';
  }
  save_checkpoint(spec.output_dir / "checkpoint", model);

  ExperimentResult partial;
  partial.frozen_checksum = frozen_checksum(model);
  RunOptions opts;
  opts.on_mode = [&](const ModeRun& run) {
    partial.runs.push_back(run);
    write_experiment_outputs(spec.output_dir, partial);
  };
  ExperimentResult res = run_modes(model, test, spec, opts);
  write_experiment_outputs(spec.output_dir, res);
  return res;
}

MetricReport read_report(const std::filesystem::path& records, const std::string& label) {
  std::ifstream is(records, std::ios::binary);
  if (!is) throw FormatError("cannot open " + records.string(), 0);
  MetricReport r;
  r.label = label;
  std::string line;
  std::uint64_t offset = 0;
  bool found = false;
  while (std::getline(is, line)) {
    const std::uint64_t at = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(records.filename().string() + ": " + e.what(), at + e.byte);
    }
    if (j.value("kind", "") == "meta") r.config.nsd_tolerance_mm = j.value("nsd_tolerance_mm", 1.0);
    if (j.value("kind", "") != "sample" || j.value("run", "") != label) continue;
    found = true;
    try {
      SampleMetrics s;
      s.id = j.at("id").get<std::string>();
      s.diameter_mm = j.at("diameter_mm").get<double>();
      s.bin = scale_bin(s.diameter_mm);
      s.dsc = j.at("dsc").get<double>();
      s.nsd = j.at("nsd").get<double>();
      s.recall = j.at("recall").get<double>();
      r.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw FormatError(records.filename().string() + ": " + e.what(), at);
    }
  }
  if (!found)
    throw ConfigError("no records for run '" + label + "' in " + records.string());
  return r;
}

// --- configuration ----------------------------------------------------------

namespace {

/// Reads keys of one JSON object into fields, rejecting any key left over.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + path_ + "." + it.key());
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json network_json(const NetworkConfig& n) {
  return json{{"base_channels", n.base_channels},
              {"depth", n.depth},
              {"norm_kind", "instance"},
              {"ms_enabled", n.ms_enabled},
              {"pointwise_decoder_stages", n.pointwise_decoder_stages}};
}

json optimizer_json(const AdamWConfig& o) {
  return json{{"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"weight_decay", o.weight_decay}};
}

void read_optimizer(const json& j, const std::string& path, AdamWConfig& o) {
  Section s(j, path);
  s.get("beta1", o.beta1);
  s.get("beta2", o.beta2);
  s.get("eps", o.eps);
  s.get("weight_decay", o.weight_decay);
  s.finish();
}

}  // namespace

std::string to_json_string(const RunConfig& c) {
  json j;
  j["network"] = network_json(c.network);
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr_max", c.train.lr_max},
                {"lr_min", c.train.lr_min},
                {"optimizer", optimizer_json(c.train.optimizer)},
                {"seed", c.train.seed},
                {"val_every", c.train.val_every}};
  j["phantom"] = json::parse(phantom_config_to_json_string(c.phantom));
  j["adapt"] = adapt_json(c.adapt);
  j["metrics"] = {{"nsd_tolerance_mm", c.metrics.nsd_tolerance_mm}};
  j["model_seed"] = c.model_seed;
  j["workers"] = c.workers;
  return j.dump(2);
}

RunConfig run_config_from_json_string(const std::string& text, RunConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  Section root(j, "config");
  if (root.has("network")) {
    Section s(root.at("network"), "network");
    s.get("base_channels", c.network.base_channels);
    s.get("depth", c.network.depth);
    std::string norm = "instance";
    s.get("norm_kind", norm);
    if (norm != "instance") throw ConfigError("network.norm_kind: only 'instance' is supported");
    s.get("ms_enabled", c.network.ms_enabled);
    s.get("pointwise_decoder_stages", c.network.pointwise_decoder_stages);
    s.finish();
  }
  if (root.has("train")) {
    Section s(root.at("train"), "train");
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("lr_max", c.train.lr_max);
    s.get("lr_min", c.train.lr_min);
    if (s.has("optimizer")) read_optimizer(s.at("optimizer"), s.path("optimizer"), c.train.optimizer);
    s.get("seed", c.train.seed);
    s.get("val_every", c.train.val_every);
    s.finish();
  }
  if (root.has("phantom")) {
    Section s(root.at("phantom"), "phantom");
    auto& p = c.phantom;
    s.get("cases", p.cases);
    s.get("split_weights", p.split_weights);
    s.get("min_diameter_mm", p.min_diameter_mm);
    s.get("max_diameter_mm", p.max_diameter_mm);
    s.get("tail_threshold_mm", p.tail_threshold_mm);
    s.get("tail_mass", p.tail_mass);
    s.get("lesion_hu", p.lesion_hu);
    s.get("parenchyma_hu", p.parenchyma_hu);
    s.get("noise_sigma_hu", p.noise_sigma_hu);
    s.get("part_solid_hu", p.part_solid_hu);
    s.get("part_solid_onset_mm", p.part_solid_onset_mm);
    s.get("part_solid_full_mm", p.part_solid_full_mm);
    s.get("texture_wavelength_mm", p.texture_wavelength_mm);
    s.get("irregularity", p.irregularity);
    s.get("seed", p.seed);
    s.finish();
  }
  if (root.has("adapt")) {
    Section s(root.at("adapt"), "adapt");
    auto& a = c.adapt;
    std::string mode = to_string(a.mode);
    s.get("mode", mode);
    try {
      a.mode = parse_adapt_mode(mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("adapt.mode: ") + e.what());
    }
    s.get("epochs", a.epochs);
    s.get("step_size", a.step_size);
    if (s.has("optimizer")) read_optimizer(s.at("optimizer"), s.path("optimizer"), a.optimizer);
    if (s.has("weights")) {
      Section w(s.at("weights"), s.path("weights"));
      w.get("sigma", a.weights.sigma);
      w.get("gamma", a.weights.gamma);
      w.get("smooth_eps", a.weights.smooth_eps);
      w.get("prob_clamp", a.weights.prob_clamp);
      w.finish();
    }
    s.get("threshold", a.threshold);
    s.get("episodic", a.episodic);
    s.get("lcc_postprocess", a.lcc_postprocess);
    s.finish();
  }
  if (root.has("metrics")) {
    Section s(root.at("metrics"), "metrics");
    s.get("nsd_tolerance_mm", c.metrics.nsd_tolerance_mm);
    s.finish();
  }
  root.get("model_seed", c.model_seed);
  root.get("workers", c.workers);
  root.finish();
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& p, RunConfig base) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return run_config_from_json_string(ss.str(), std::move(base));
}

void validate(const RunConfig& c) {
  try {
    validate(c.network);
    validate(c.train);
    validate(c.phantom);
    validate(c.adapt);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.metrics.nsd_tolerance_mm < 0.0) throw ConfigError("metrics.nsd_tolerance_mm must be >= 0");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
}

}  // namespace sattca
