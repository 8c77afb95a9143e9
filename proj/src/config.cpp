#include "adfq/config.hpp"

#include <cmath>
#include <set>

#include "adfq/storage.hpp"

namespace adfq {

using nlohmann::json;

RunConfig RunConfig::defaults(bool paper) {
  RunConfig c;
  c.paper_mode = paper;
  if (paper) {
    c.optim.iterations = kPaperIterations;
    c.calib_samples = kPaperCalibSamples;
  }
  return c;
}

void RunConfig::validate() const {
  model.validate();
  BitWidth{bits_w};
  BitWidth{bits_a};
  policy.validate();
  optim.validate();
  if (train.epochs < 0 || train.batch < 1 || !(train.lr > 0) || !(train.val_fraction >= 0 && train.val_fraction < 1)) {
    throw ConfigError("invalid training settings");
  }
  if (calib_samples == 0 || eval_samples == 0 || train_samples == 0) throw ConfigError("sample counts must be positive");
  for (double a : alpha_sweep) {
    if (!(a > 0)) throw ConfigError("alpha sweep values must be positive");
  }
}

namespace {

json alpha_json(double a) { return std::isinf(a) ? json(nullptr) : json(a); }

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(std::string("config key '") + key + "' must be a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(std::string("config key '") + key + "' must be an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
        throw ConfigError(std::string("config key '") + key + "' must be non-negative");
      }
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
  }
  out = v.get<T>();
}

void read_alpha(const json& j, const char* key, double& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (v.is_null()) {
    out = std::numeric_limits<double>::infinity();
  } else if (v.is_number()) {
    out = v.get<double>();
  } else {
    throw ConfigError(std::string("config key '") + key + "' must be a number or null");
  }
}

}  // namespace

json config_to_json(const RunConfig& c) {
  json overrides = json::object();
  for (const auto& [site, kind] : c.policy.overrides) overrides[site_name(site)] = quantizer_kind_name(kind);
  json sweep = json::array();
  for (double a : c.alpha_sweep) sweep.push_back(a);
  return {
      {"model", config_to_json(c.model)},
      {"bits_w", c.bits_w},
      {"bits_a", c.bits_a},
      {"alpha_qkv", alpha_json(c.policy.alpha_qkv)},
      {"alpha_fc1", alpha_json(c.policy.alpha_fc1)},
      {"outlier_rule", outlier_rule_name(c.policy.rule)},
      {"epsilon", c.policy.epsilon},
      {"toggles", {{"poq", c.policy.poq}, {"slq", c.policy.slq}, {"amo", c.policy.amo}}},
      {"site_overrides", std::move(overrides)},
      {"lambda", c.optim.lambda},
      {"lr_w", c.optim.lr_weights},
      {"lr_a", c.optim.lr_activations},
      {"iterations", c.optim.iterations},
      {"batch", c.optim.batch},
      {"beta_start", c.optim.beta_start},
      {"beta_end", c.optim.beta_end},
      {"quantized_inputs", c.optim.quantized_inputs},
      {"train",
       {{"samples", c.train_samples},
        {"epochs", c.train.epochs},
        {"lr", c.train.lr},
        {"batch", c.train.batch},
        {"val_fraction", c.train.val_fraction}}},
      {"calib_samples", c.calib_samples},
      {"eval_samples", c.eval_samples},
      {"alpha_sweep", std::move(sweep)},
      {"seed", c.seed},
      {"paper_mode", c.paper_mode},
      {"paths",
       {{"model", c.paths.model},
        {"data", c.paths.data},
        {"calib", c.paths.calib},
        {"bundle", c.paths.bundle},
        {"out", c.paths.out}}},
  };
}

RunConfig run_config_from_json(const json& j, bool force_paper_mode) {
  reject_unknown(j,
                 {"model", "bits_w", "bits_a", "alpha_qkv", "alpha_fc1", "outlier_rule", "epsilon", "toggles",
                  "site_overrides", "lambda", "lr_w", "lr_a", "iterations", "batch", "beta_start", "beta_end",
                  "quantized_inputs", "train", "calib_samples", "eval_samples", "alpha_sweep", "seed", "paper_mode",
                  "paths"},
                 "");
  bool paper = force_paper_mode;
  if (j.contains("paper_mode")) {
    bool p = false;
    read(j, "paper_mode", p);
    paper = paper || p;
  }
  RunConfig c = RunConfig::defaults(paper);

  if (j.contains("model")) c.model = config_from_json(j.at("model"));
  read(j, "bits_w", c.bits_w);
  read(j, "bits_a", c.bits_a);
  read_alpha(j, "alpha_qkv", c.policy.alpha_qkv);
  read_alpha(j, "alpha_fc1", c.policy.alpha_fc1);
  if (j.contains("outlier_rule")) {
    std::string r;
    read(j, "outlier_rule", r);
    c.policy.rule = parse_outlier_rule(r);
  }
  read(j, "epsilon", c.policy.epsilon);
  if (j.contains("toggles")) {
    const json& t = j.at("toggles");
    reject_unknown(t, {"poq", "slq", "amo"}, "toggles");
    read(t, "poq", c.policy.poq);
    read(t, "slq", c.policy.slq);
    read(t, "amo", c.policy.amo);
  }
  if (j.contains("site_overrides")) {
    const json& o = j.at("site_overrides");
    if (!o.is_object()) throw ConfigError("site_overrides must be an object");
    for (const auto& [site, kind] : o.items()) {
      if (!kind.is_string()) throw ConfigError("site override for '" + site + "' must be a quantizer name");
      c.policy.overrides[parse_site(site)] = parse_quantizer_kind(kind.get<std::string>());
    }
  }
  read(j, "lambda", c.optim.lambda);
  read(j, "lr_w", c.optim.lr_weights);
  read(j, "lr_a", c.optim.lr_activations);
  read(j, "iterations", c.optim.iterations);
  read(j, "batch", c.optim.batch);
  read(j, "beta_start", c.optim.beta_start);
  read(j, "beta_end", c.optim.beta_end);
  read(j, "quantized_inputs", c.optim.quantized_inputs);
  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t, {"samples", "epochs", "lr", "batch", "val_fraction"}, "train");
    read(t, "samples", c.train_samples);
    read(t, "epochs", c.train.epochs);
    read(t, "lr", c.train.lr);
    read(t, "batch", c.train.batch);
    read(t, "val_fraction", c.train.val_fraction);
  }
  read(j, "calib_samples", c.calib_samples);
  read(j, "eval_samples", c.eval_samples);
  if (j.contains("alpha_sweep")) {
    const json& s = j.at("alpha_sweep");
    if (!s.is_array()) throw ConfigError("alpha_sweep must be an array");
    c.alpha_sweep.clear();
    for (const auto& v : s) {
      if (!v.is_number()) throw ConfigError("alpha_sweep entries must be numbers");
      c.alpha_sweep.push_back(v.get<double>());
    }
  }
  read(j, "seed", c.seed);
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    reject_unknown(p, {"model", "data", "calib", "bundle", "out"}, "paths");
    read(p, "model", c.paths.model);
    read(p, "data", c.paths.data);
    read(p, "calib", c.paths.calib);
    read(p, "bundle", c.paths.bundle);
    read(p, "out", c.paths.out);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, bool force_paper_mode) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, force_paper_mode);
}

}  // namespace adfq
