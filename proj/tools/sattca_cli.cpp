// sattca: dataset synthesis, training, inference, click adaptation and
// stratified reporting from one binary.

#include <sattca/errors.hpp>
#include <sattca/harness.hpp>
#include <sattca/volume_io.hpp>

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace sattca;

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kDataFormat = 3,
  kNumerical = 4,
};

struct Common {
  std::string config_file;
  std::string out;
};

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::filesystem::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
}

RunConfig base_config(const Common& c) {
  return c.config_file.empty() ? RunConfig{} : load_run_config(c.config_file);
}

void write_resolved(const std::filesystem::path& dir, const RunConfig& cfg,
                    const nlohmann::json& extra = nlohmann::json::object()) {
  auto j = nlohmann::json::parse(to_json_string(cfg));
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_text(dir / "config.resolved", j.dump(2) + "\n");
}

std::vector<AdaptMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<AdaptMode> out;
  for (const auto& n : names) {
    try {
      out.push_back(parse_adapt_mode(n));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  return out;
}

Split split_arg(const std::string& s) {
  try {
    return parse_split(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

int cmd_synth(const Common& c, const std::optional<int>& cases, const std::optional<std::uint64_t>& seed,
              const std::optional<double>& tail) {
  RunConfig cfg = base_config(c);
  if (cases) cfg.phantom.cases = *cases;
  if (seed) cfg.phantom.seed = *seed;
  if (tail) cfg.phantom.tail_mass = *tail;
  validate(cfg);
  const auto m = generate_dataset(cfg.phantom, c.out);
  write_resolved(c.out, cfg);
  const auto n = split_counts(cfg.phantom);
  std::printf("wrote %zu cases to %s (train %zu, val %zu, test %zu), config hash %s\n",
              m.cases.size(), c.out.c_str(), n[0], n[1], n[2], m.generator_config_hash.c_str());
  return kOk;
}

int cmd_train(const Common& c, const std::string& data, const std::optional<int>& epochs,
              const std::optional<int>& batch, const std::optional<std::uint64_t>& seed,
              const std::optional<int>& base, const std::string& profile) {
  RunConfig cfg = base_config(c);
  if (profile == "full") cfg.train = full_train_profile();
  if (epochs) cfg.train.epochs = *epochs;
  if (batch) cfg.train.batch_size = *batch;
  if (seed) {
    cfg.train.seed = *seed;
    cfg.model_seed = *seed;
  }
  if (base) cfg.network.base_channels = *base;
  validate(cfg);
  const auto manifest = read_manifest(data);
  ManifestSource tr(data, manifest.split(Split::kTrain));
  ManifestSource va(data, manifest.split(Split::kVal));
  const std::filesystem::path dir = c.out;
  std::filesystem::create_directories(dir);
  write_resolved(dir, cfg, {{"dataset", data}, {"dataset_config_hash", manifest.generator_config_hash}});

  SegModel<float> model(cfg.network, cfg.model_seed);
  std::ofstream log(dir / "traces.log", std::ios::binary);
  const TrainResult res = train(model, tr, va, cfg.train, [&](const TrainLogEntry& e) {
    nlohmann::json j{{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss},
                     {"train_dsc", e.train_dsc}, {"seconds", e.seconds}};
    if (!std::isnan(e.val_dsc)) j["val_dsc"] = e.val_dsc;
    log << j.dump() << '\n' << std::flush;
    std::printf("epoch %3d  lr %.3e  loss %.4f  train DSC %.2f  val DSC %s  (%.1fs)\n", e.epoch,
                e.lr, e.train_loss, e.train_dsc,
                std::isnan(e.val_dsc) ? "-" : std::to_string(e.val_dsc).c_str(), e.seconds);
  });
  save_checkpoint(dir / "checkpoint", model);
  {
    std::ofstream tab(dir / "metrics.table", std::ios::binary);
    std::ofstream rec(dir / "metrics.records", std::ios::binary);
    char line[128];
    std::snprintf(line, sizeof line, "%5s %11s %9s %9s %9s\n", "epoch", "lr", "loss", "trainDSC",
                  "valDSC");
    tab << line;
    for (const auto& e : res.log) {
      std::snprintf(line, sizeof line, "%5d %11.4e %9.4f %9.3f %9.3f\n", e.epoch, e.lr,
                    e.train_loss, e.train_dsc, e.val_dsc);
      tab << line;
      nlohmann::json j{{"kind", "epoch"}, {"epoch", e.epoch}, {"lr", e.lr},
                       {"train_loss", e.train_loss}, {"train_dsc", e.train_dsc}};
      if (!std::isnan(e.val_dsc)) j["val_dsc"] = e.val_dsc;
      rec << j.dump() << '\n';
    }
    tab << "best epoch " << res.best_epoch << ", val DSC " << res.best_val_dsc << '\n';
    rec << nlohmann::json{{"kind", "best"}, {"epoch", res.best_epoch}, {"val_dsc", res.best_val_dsc}}.dump()
        << '\n';
  }
  std::ofstream(dir / "scatter.records", std::ios::binary);
  std::printf("best epoch %d, val DSC %.3f, checkpoint %s\n", res.best_epoch, res.best_val_dsc,
              (dir / "checkpoint").c_str());
  return kOk;
}

ExperimentSpec make_spec(const RunConfig& cfg, const std::string& data, const std::string& ckpt,
                         const std::vector<AdaptMode>& modes, Split split, const std::string& out) {
  ExperimentSpec spec;
  spec.dataset = data;
  spec.checkpoint = ckpt;
  spec.modes = modes;
  spec.adapt = cfg.adapt;
  spec.metrics = cfg.metrics;
  spec.split = split;
  spec.output_dir = out;
  spec.workers = cfg.workers;
  return spec;
}

void print_result(const ExperimentResult& r) {
  for (const auto& run : r.runs) write_mean_table(std::cout, run.report);
  for (const auto& d : r.deltas) write_delta_table(std::cout, d);
  for (const auto& run : r.runs) {
    if (run.mode == AdaptMode::kNone) continue;
    const auto o = summarize_overhead(run, 0);
    std::printf("%s: %.1f ms per sample including adaptation, %.1f ms plain inference\n",
                to_string(run.mode).c_str(), o.mean_total_ms, o.mean_inference_ms);
  }
}

/// predict and adapt: one mode, plus per-case predicted masks.
int cmd_single(const Common& c, const std::string& data, const std::string& ckpt, AdaptMode mode,
               Split split, const std::optional<int>& epochs) {
  RunConfig cfg = base_config(c);
  if (epochs) cfg.adapt.epochs = *epochs;
  cfg.adapt.mode = mode;
  validate(cfg);
  const ExperimentSpec spec = make_spec(cfg, data, ckpt, {mode}, split, c.out);
  const auto manifest = read_manifest(data);
  const SegModel<float> model = load_checkpoint(ckpt);
  ManifestSource src(data, manifest.split(split));
  std::filesystem::create_directories(spec.output_dir / "predictions");
  write_resolved(spec.output_dir, cfg,
                 {{"dataset", data}, {"checkpoint", ckpt}, {"split", to_string(split)},
                  {"mode", to_string(mode)}});
  save_checkpoint(spec.output_dir / "checkpoint", model);
  RunOptions opts;
  opts.keep_masks = true;
  const ExperimentResult r = run_modes(model, src, spec, opts);
  const auto& run = r.runs.front();
  for (std::size_t i = 0; i < run.masks.size(); ++i)
    write_mask(spec.output_dir / "predictions" / (run.report.samples[i].id + ".smsk"), run.masks[i],
               manifest.spacing);
  write_experiment_outputs(spec.output_dir, r);
  print_result(r);
  for (const auto& t : run.traces)
    if (t.aborted) {
      std::fprintf(stderr, "sample %s: %s\n", t.sample_id.c_str(), t.failure.c_str());
      return kNumerical;
    }
  return kOk;
}

int cmd_eval(const Common& c, const std::string& data, const std::string& ckpt,
             const std::vector<std::string>& modes, Split split, const std::optional<int>& epochs) {
  RunConfig cfg = base_config(c);
  if (epochs) cfg.adapt.epochs = *epochs;
  validate(cfg);
  const ExperimentSpec spec = make_spec(cfg, data, ckpt, parse_modes(modes), split, c.out);
  const ExperimentResult r = run_experiment(spec);
  // run_experiment wrote the spec; fold the full config in as well.
  std::ifstream is(spec.output_dir / "config.resolved");
  nlohmann::json extra = nlohmann::json::parse(is);
  write_resolved(spec.output_dir, cfg, extra);
  print_result(r);
  return kOk;
}

int cmd_report(const std::string& run_dir, const std::vector<std::string>& compare) {
  if (compare.size() != 2) throw ConfigError("report: --compare takes exactly two run labels");
  const auto modes = parse_modes(compare);
  const std::filesystem::path rec = std::filesystem::path(run_dir) / "metrics.records";
  const MetricReport a = read_report(rec, to_string(modes[0]));
  const MetricReport b = read_report(rec, to_string(modes[1]));
  const DeltaReport d = stratified_delta(a, b);
  write_mean_table(std::cout, a);
  write_mean_table(std::cout, b);
  write_delta_table(std::cout, d);
  std::ofstream os(std::filesystem::path(run_dir) /
                       ("report_" + to_string(modes[1]) + "_vs_" + to_string(modes[0]) + ".table"),
                   std::ios::binary);
  write_delta_table(os, d);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scale-aware test-time click adaptation toolkit"};
  bool dump_config = false;
  app.add_flag("--dump-config", dump_config, "Print the full default configuration and exit");

  Common common;
  auto add_common = [&](CLI::App* sub, bool need_out = true) {
    sub->add_option("--config", common.config_file, "JSON configuration file")->check(CLI::ExistingFile);
    auto* o = sub->add_option("--out", common.out, "Output directory");
    if (need_out) o->required();
  };

  std::optional<int> cases, epochs, batch, base;
  std::optional<std::uint64_t> seed;
  std::optional<double> tail;
  std::string data, ckpt, profile = "desk", split = "test", mode = "sattca", run_dir;
  std::vector<std::string> modes{"none", "ttca", "sattca"}, compare;

  auto* synth = app.add_subcommand("synth", "Generate a phantom dataset");
  add_common(synth);
  synth->add_option("--cases", cases, "Number of cases");
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--tail-mass", tail, "Fraction of lesions above 30 mm");

  auto* trn = app.add_subcommand("train", "Train a segmentation model");
  add_common(trn);
  trn->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--epochs", epochs);
  trn->add_option("--batch", batch);
  trn->add_option("--seed", seed, "Training and initialization seed");
  trn->add_option("--base-channels", base);
  trn->add_option("--profile", profile, "desk or full")->check(CLI::IsMember({"desk", "full"}));

  auto* pred = app.add_subcommand("predict", "Plain inference on one split");
  add_common(pred);
  auto* adp = app.add_subcommand("adapt", "Click adaptation on one split");
  add_common(adp);
  auto* evl = app.add_subcommand("eval", "Compare adaptation modes on one split");
  add_common(evl);
  for (auto* sub : {pred, adp, evl}) {
    sub->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    sub->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--split", split, "train, val or test");
  }
  adp->add_option("--mode", mode, "none, ttca or sattca");
  adp->add_option("--epochs", epochs, "Adaptation epochs");
  evl->add_option("--modes", modes, "Modes to compare");
  evl->add_option("--epochs", epochs, "Adaptation epochs");

  auto* rep = app.add_subcommand("report", "Stratified delta table between two runs");
  rep->add_option("--run", run_dir, "Directory written by eval")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--compare", compare, "Two run labels, baseline first")->required()->expected(2);

  app.require_subcommand(0, 1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  if (dump_config) {
    std::cout << to_json_string(RunConfig{}) << '\n';
    return kOk;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return kConfig;
  }

  try {
    if (*synth) return cmd_synth(common, cases, seed, tail);
    if (*trn) return cmd_train(common, data, epochs, batch, seed, base, profile);
    if (*pred) return cmd_single(common, data, ckpt, AdaptMode::kNone, split_arg(split), 0);
    if (*adp) return cmd_single(common, data, ckpt, parse_modes({mode}).front(), split_arg(split), epochs);
    if (*evl) return cmd_eval(common, data, ckpt, modes, split_arg(split), epochs);
    if (*rep) return cmd_report(run_dir, compare);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const FormatError& e) {
    std::cerr << "data format error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
