// adfq: generate, train, calibrate, quantize, evaluate and inspect toy ViTs.

#include <cstdio>
#include <iostream>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"

#include "adfq/calibration.hpp"
#include "adfq/config.hpp"
#include "adfq/gradcheck.hpp"
#include "adfq/log.hpp"
#include "adfq/pipeline.hpp"
#include "adfq/storage.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace adfq;

namespace {

constexpr int kUsageExit = 2;
constexpr int kGradcheckExit = 3;
constexpr int kInternalExit = 1;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> bits_w, bits_a;
  std::optional<int> iterations;
  bool paper_mode = false;
  std::vector<std::string> disable;
  std::string out, model, data, calib, bundle;
  std::optional<std::size_t> count;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON config file");
  cmd->add_option("--seed", o.seed, "Base seed");
  cmd->add_option("--bits-w", o.bits_w, "Weight bit width")->check(CLI::Range(2, 8));
  cmd->add_option("--bits-a", o.bits_a, "Activation bit width")->check(CLI::Range(2, 8));
  cmd->add_option("--iterations", o.iterations, "Optimization steps per module");
  cmd->add_flag("--paper-mode", o.paper_mode, "Published iteration count and calibration-set size");
  cmd->add_option("--disable", o.disable, "Disable components")->check(CLI::IsMember({"poq", "slq", "amo"}));
  cmd->add_option("--out", o.out, "Output path");
}

RunConfig resolve(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig::defaults(o.paper_mode) : load_run_config(o.config, o.paper_mode);
  if (o.seed) c.seed = *o.seed;
  if (o.bits_w) c.bits_w = *o.bits_w;
  if (o.bits_a) c.bits_a = *o.bits_a;
  if (o.iterations) c.optim.iterations = *o.iterations;
  for (const auto& d : o.disable) {
    if (d == "poq") c.policy.poq = false;
    if (d == "slq") c.policy.slq = false;
    if (d == "amo") c.policy.amo = false;
  }
  if (!o.model.empty()) c.paths.model = o.model;
  if (!o.data.empty()) c.paths.data = o.data;
  if (!o.calib.empty()) c.paths.calib = o.calib;
  if (!o.bundle.empty()) c.paths.bundle = o.bundle;
  if (!o.out.empty()) c.paths.out = o.out;
  c.optim.seed = mix_seed(c.seed, 5);
  c.train.seed = mix_seed(c.seed, 6);
  c.validate();
  return c;
}

fs::path require_out(const RunConfig& c) {
  if (c.paths.out.empty()) throw ConfigError("--out is required");
  const fs::path out = c.paths.out;
  for (const std::string& in : {c.paths.model, c.paths.data, c.paths.calib, c.paths.bundle}) {
    if (!in.empty() && fs::weakly_canonical(in) == fs::weakly_canonical(out)) {
      throw PreconditionError("output '" + out.string() + "' would overwrite an input");
    }
  }
  std::error_code ec;
  if (out.has_parent_path()) fs::create_directories(out.parent_path(), ec);
  if (ec) throw IoError("cannot create directory for '" + out.string() + "': " + ec.message());
  return out;
}

ViTModel need_model(const RunConfig& c) {
  if (c.paths.model.empty()) throw ConfigError("--model is required");
  ViTModel m = load_checkpoint(c.paths.model);
  return m;
}

Dataset calib_set(const RunConfig& c, const ViTConfig& model) {
  if (!c.paths.calib.empty()) return load_dataset(c.paths.calib);
  return gen_synthetic_dataset(model, c.calib_samples, c.calib_seed());
}

Dataset eval_set(const RunConfig& c, const ViTConfig& model) {
  if (!c.paths.data.empty()) return load_dataset(c.paths.data);
  return gen_synthetic_dataset(model, c.eval_samples, c.eval_seed());
}

void emit(const json& j) { std::cout << j.dump() << "\n"; }

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[32];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

int cmd_gen_model(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const ViTModel m = init_model(c.model, c.model_seed());
  save_checkpoint(m, out);
  emit({{"command", "gen-model"}, {"out", out.string()}, {"seed", c.seed}});
  return 0;
}

int cmd_gen_data(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const Dataset d = gen_synthetic_dataset(c.model, o.count.value_or(c.eval_samples), c.eval_seed());
  save_dataset(d, out);
  emit({{"command", "gen-data"}, {"out", out.string()}, {"count", d.size()}, {"provenance", d.provenance}});
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const ViTModel start = c.paths.model.empty() ? init_model(c.model, c.model_seed()) : load_checkpoint(c.paths.model);
  const Dataset d = c.paths.data.empty() ? gen_synthetic_dataset(start.config, c.train_samples, c.train_data_seed())
                                         : load_dataset(c.paths.data);
  const TrainResult r = train_toy(start, d, c.train);
  save_checkpoint(r.model, out);
  emit({{"command", "train-toy"},
        {"out", out.string()},
        {"epoch_loss", r.epoch_loss},
        {"train_accuracy", r.train_accuracy},
        {"val_accuracy", r.val_accuracy}});
  return 0;
}

int cmd_calibrate(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const ViTModel m = need_model(c);
  const Dataset calib = calib_set(c, m.config);
  const CalibStats stats = collect_stats(m, calib.images, c.policy);
  QuantBundle b = init_bundle(stats, m, c.policy, c.bits_w, c.bits_a);
  b.snap_to_storage_precision();
  OptimConfig none = c.optim;
  save_bundle(b, out, {{"config", echo_config(c.policy, c.bits_w, c.bits_a, none)}, {"stage", "calibration"},
                       {"calibration", calib.provenance}, {"traces", json::array()}});
  fs::path stats_path = out;
  stats_path.replace_extension(".stats.json");
  write_file_atomic(stats_path, stats_to_json(stats).dump(2) + "\n");
  emit({{"command", "calibrate"}, {"out", out.string()}, {"stats", stats_path.string()}});
  return 0;
}

int cmd_quantize(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const ViTModel m = need_model(c);
  const Dataset calib = calib_set(c, m.config);
  const QuantizeResult r = quantize_model(m, calib.images, c.policy, c.bits_w, c.bits_a, c.optim);
  save_bundle(r.bundle, out,
              {{"config", echo_config(c.policy, c.bits_w, c.bits_a, c.optim)},
               {"stage", c.policy.amo ? "optimized" : "calibration"},
               {"calibration", calib.provenance},
               {"traces", module_traces_to_json(r.modules)}});
  emit({{"command", "quantize"}, {"out", out.string()}, {"modules", r.modules.size()}});
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const ViTModel m = need_model(c);
  const Dataset data = eval_set(c, m.config);
  std::optional<QuantBundle> bundle;
  json info = json::object();
  if (!c.paths.bundle.empty()) {
    bundle = load_bundle(c.paths.bundle);
    info = load_bundle_info(c.paths.bundle);
  }
  EvalReport r = evaluate(m, bundle ? &*bundle : nullptr, data);
  r.config = info.contains("config") ? info.at("config") : echo_config(c.policy, c.bits_w, c.bits_a, c.optim);
  r.config["eval_data"] = data.provenance;
  r.config["seed"] = c.seed;
  if (info.contains("traces")) r.traces = info.at("traces");
  write_file_atomic(out, r.to_json().dump(2) + "\n");
  emit({{"command", "eval"},
        {"out", out.string()},
        {"top1_agreement", r.top1_agreement},
        {"cosine_mean", r.cosine_mean},
        {"logits_nmse", r.logits_nmse}});
  return 0;
}

int cmd_inspect(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const ViTModel m = need_model(c);
  const Dataset d = c.paths.data.empty() ? calib_set(c, m.config) : load_dataset(c.paths.data);
  const CalibStats stats = collect_stats(m, d.images, c.policy);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create '" + out.string() + "': " + ec.message());
  json ratios = json::array();
  for (std::size_t l = 0; l < stats.blocks.size(); ++l) {
    for (const SiteStats& s : stats.blocks[l]) {
      std::string csv = "bin_left,bin_right,count\n";
      const Histogram& h = s.histogram;
      for (Index b = 0; b < static_cast<Index>(h.counts.size()); ++b) {
        csv += fmt(h.bin_left(b)) + "," + fmt(h.bin_right(b)) + "," + std::to_string(h.counts[static_cast<std::size_t>(b)]) + "\n";
      }
      write_file_atomic(out / ("block" + std::to_string(l) + "_" + site_name(s.site) + ".csv"), csv);
      ratios.push_back({{"block", l},
                        {"site", site_name(s.site)},
                        {"alpha", std::isinf(s.outlier.alpha) ? json(nullptr) : json(s.outlier.alpha)},
                        {"outlier_ratio", s.outlier_ratio()},
                        {"outlier_count", s.outlier_count},
                        {"element_count", s.element_count}});
    }
  }
  write_file_atomic(out / "outlier_ratios.json", ratios.dump(2) + "\n");
  write_file_atomic(out / "stats.json", stats_to_json(stats).dump(2) + "\n");
  emit({{"command", "inspect"}, {"out", out.string()}, {"sites", ratios.size()}});
  return 0;
}

int cmd_ablate(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path out = require_out(c);
  const ViTModel m = need_model(c);
  const Dataset calib = calib_set(c, m.config);
  const Dataset data = eval_set(c, m.config);
  const AblationResult r = ablate(m, calib.images, data, c.policy, c.bits_w, c.bits_a, c.optim, c.alpha_sweep);
  std::string lines;
  for (const auto& row : r.rows) {
    json j = {{"kind", "toggles"}, {"poq", row.poq}, {"slq", row.slq}, {"amo", row.amo},
              {"top1_agreement", row.report.top1_agreement}, {"cosine_mean", row.report.cosine_mean},
              {"logits_nmse", row.report.logits_nmse}, {"report", row.report.to_json()}};
    lines += j.dump() + "\n";
    emit({{"kind", "toggles"}, {"poq", row.poq}, {"slq", row.slq}, {"amo", row.amo},
          {"top1_agreement", row.report.top1_agreement}});
  }
  for (const auto& s : r.sweep) {
    const json j = {{"kind", "alpha_sweep"}, {"layer", s.layer}, {"alpha", s.alpha},
                    {"outlier_ratio", s.outlier_ratio}, {"top1_agreement", s.top1_agreement}};
    lines += j.dump() + "\n";
    emit(j);
  }
  write_file_atomic(out, lines);
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const RunConfig c = resolve(o);
  const auto cases = gradient_audit(c.seed);
  std::map<std::string, std::pair<double, double>> worst;  // class -> (max error, tolerance)
  bool ok = true;
  for (const auto& k : cases) {
    auto& w = worst[k.op_class];
    w.first = std::max(w.first, k.error);
    w.second = k.tolerance;
    ok = ok && k.passed();
  }
  json rows = json::array();
  for (const auto& [cls, w] : worst) {
    std::cout << cls << " max_rel_err=" << fmt(w.first) << " tol=" << fmt(w.second, "%g")
              << (w.first <= w.second ? " ok" : " FAIL") << "\n";
    rows.push_back({{"op_class", cls}, {"max_rel_err", w.first}, {"tolerance", w.second}});
  }
  std::cout << "graphs=" << cases.size() << (ok ? " ok" : " FAIL") << "\n";
  if (!c.paths.out.empty()) write_file_atomic(require_out(c), rows.dump(2) + "\n");
  return ok ? 0 : kGradcheckExit;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-training quantization of toy Vision Transformers"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    const char* name;
    const char* help;
    int (*fn)(const Options&);
    CLI::App* app = nullptr;
  };
  std::vector<Command> commands = {
      {"gen-model", "Write a seeded random checkpoint", cmd_gen_model},
      {"gen-data", "Write a seeded synthetic dataset", cmd_gen_data},
      {"train-toy", "Train a checkpoint on the synthetic task", cmd_train},
      {"calibrate", "Collect statistics and write a calibration-only bundle", cmd_calibrate},
      {"quantize", "Calibrate and optimize a quantization bundle", cmd_quantize},
      {"eval", "Compare a bundle against full precision", cmd_eval},
      {"inspect", "Per-site histograms and outlier ratios", cmd_inspect},
      {"ablate", "Toggle grid and alpha sweep", cmd_ablate},
      {"gradcheck", "Finite-difference audit of every differentiable op", cmd_gradcheck},
  };
  for (auto& c : commands) {
    c.app = app.add_subcommand(c.name, c.help);
    add_common(c.app, o);
    c.app->add_option("--model", o.model, "Checkpoint manifest");
    c.app->add_option("--data", o.data, "Dataset manifest");
    c.app->add_option("--calib", o.calib, "Calibration dataset manifest");
    c.app->add_option("--bundle", o.bundle, "Bundle manifest");
    c.app->add_option("--count", o.count, "Sample count");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: kind=usage code=" << kUsageExit << " msg=" << e.what() << "\n";
    return kUsageExit;
  }

  try {
    for (const auto& c : commands) {
      if (c.app->parsed()) return c.fn(o);
    }
  } catch (const Error& e) {
    std::cerr << "error: kind=" << error_kind_name(e.kind()) << " code=" << e.exit_code() << " msg=" << e.what() << "\n";
    return e.exit_code();
  } catch (const json::exception& e) {
    std::cerr << "error: kind=format code=" << static_cast<int>(ErrorKind::Format) << " msg=" << e.what() << "\n";
    return static_cast<int>(ErrorKind::Format);
  } catch (const std::exception& e) {
    std::cerr << "error: kind=internal code=" << kInternalExit << " msg=" << e.what() << "\n";
    return kInternalExit;
  }
  return kInternalExit;
}
