#include "adfq/reconstruction.hpp"

#include <cmath>
#include <numeric>

#include "adfq/log.hpp"

namespace adfq {

using nlohmann::json;

void OptimConfig::validate() const {
  if (!(lr_weights >= 0) || !(lr_activations >= 0)) throw ConfigError("learning rates must be non-negative");
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  if (batch < 1) throw ConfigError("batch must be at least 1");
  if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
  if (!(beta_start > beta_end) || !(beta_end > 0)) throw ConfigError("beta schedule needs beta_start > beta_end > 0");
}

ad::Var loss_output(const Matrix& y_fp, const ad::Var& y_q) { return ad::squared_error(y_fp, y_q); }

ad::Var loss_round(const ad::Var& v, double beta) {
  if (!(beta > 0)) throw PreconditionError("loss_round: beta must be positive");
  return ad::round_loss(v, beta);
}

ad::Var loss_attention(const std::vector<Matrix>& p_fp, const std::vector<ad::Var>& p_q) {
  if (p_fp.empty() || p_fp.size() != p_q.size()) throw DimensionError("loss_attention: head counts differ");
  ad::Var total;
  Index rows = 0;
  for (std::size_t h = 0; h < p_fp.size(); ++h) {
    const ad::Var kl = ad::kl_rows_sum(p_fp[h], p_q[h]);
    total = total.valid() ? ad::add(total, kl) : kl;
    rows += p_fp[h].rows();
  }
  return ad::scale(total, 1.0 / static_cast<double>(rows));
}

double beta_at(int step, int total, double beta_start, double beta_end) {
  if (total < 1 || step < 0 || step >= total) throw PreconditionError("beta_at: step out of range");
  if (total == 1) return beta_start;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  if (step == total - 1) return beta_end;
  return beta_start + (beta_end - beta_start) * t;
}

std::size_t AdamState::add(std::string name, Index rows, Index cols, double lr, double floor) {
  slots.push_back({std::move(name), Matrix::Zero(rows, cols), Matrix::Zero(rows, cols), lr, floor});
  return slots.size() - 1;
}

void adam_step(AdamState& state, const std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
  if (params.size() != state.slots.size() || grads.size() != state.slots.size()) {
    throw DimensionError("adam_step: expected " + std::to_string(state.slots.size()) + " leaves");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& s = state.slots[i];
    if (grads[i].rows() != s.m.rows() || grads[i].cols() != s.m.cols() || params[i]->rows() != s.m.rows() ||
        params[i]->cols() != s.m.cols()) {
      throw DimensionError("adam_step: leaf '" + s.name + "' changed shape");
    }
    if (!grads[i].allFinite()) throw NumericalError("non-finite gradient for leaf '" + s.name + "'");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& s = state.slots[i];
    const Matrix& g = grads[i];
    s.m = state.beta1 * s.m + (1.0 - state.beta1) * g;
    s.v = state.beta2 * s.v + (1.0 - state.beta2) * g.cwiseProduct(g);
    Matrix& p = *params[i];
    for (Index k = 0; k < p.size(); ++k) {
      const double mhat = s.m.data()[k] / c1;
      const double vhat = s.v.data()[k] / c2;
      p.data()[k] = std::max(p.data()[k] - s.lr * mhat / (std::sqrt(vhat) + state.eps), s.floor);
    }
  }
}

const char* module_kind_name(ModuleKind k) noexcept { return k == ModuleKind::Mha ? "mha" : "mlp"; }

json trace_to_json(const std::vector<TraceEntry>& trace) {
  json out = json::array();
  for (const auto& e : trace) {
    out.push_back({{"step", e.step},
                   {"L_o", e.loss_output},
                   {"L_round", e.loss_round},
                   {"L_as", e.loss_attention},
                   {"beta", e.beta}});
  }
  return out;
}

namespace {

constexpr std::array<SiteKind, 5> kMhaSites = {SiteKind::QkvInput, SiteKind::Query, SiteKind::Key, SiteKind::Value,
                                               SiteKind::ProjInput};
constexpr std::array<SiteKind, 2> kMlpSites = {SiteKind::Fc1Input, SiteKind::Fc2Input};

struct ModuleLayout {
  std::vector<SiteKind> sites;
  std::vector<std::pair<WeightQuant*, const Matrix*>> weights;
};

ModuleLayout layout_for(ModuleKind kind, BlockQuant& slice, const BlockWeights& w) {
  ModuleLayout m;
  if (kind == ModuleKind::Mha) {
    for (SiteKind k : kMhaSites) {
      if (slice.site(k).uses_uniform()) m.sites.push_back(k);
    }
    m.weights = {{&slice.qkv, &w.qkv_w}, {&slice.proj, &w.proj_w}};
  } else {
    for (SiteKind k : kMlpSites) {
      if (slice.site(k).uses_uniform()) m.sites.push_back(k);
    }
    m.weights = {{&slice.fc1, &w.fc1_w}, {&slice.fc2, &w.fc2_w}};
  }
  return m;
}

struct ModuleOutput {
  ad::Var out;
  std::vector<ad::Var> probs;
};

ModuleOutput run_module(ModuleKind kind, const Matrix& input, const BlockVars& vars, const ViTConfig& config,
                        const QuantContext& q) {
  const ad::Var x = ad::constant(input);
  if (kind == ModuleKind::Mha) {
    MhaResult r = mha_forward(x, vars, config, &q);
    return {r.out, std::move(r.probs)};
  }
  return {mlp_forward(x, vars, config, &q), {}};
}

void check_sample(ModuleKind kind, const ModuleSample& s, const ViTConfig& config) {
  if (s.input.rows() != config.num_patches() || s.input.cols() != config.dim || s.output.rows() != s.input.rows() ||
      s.output.cols() != config.dim) {
    throw DimensionError("module sample does not match the model config");
  }
  if (kind == ModuleKind::Mha && static_cast<Index>(s.probs.size()) != config.heads) {
    throw DimensionError("attention module sample needs one probability matrix per head");
  }
}

}  // namespace

double module_hard_loss(ModuleKind kind, const BlockWeights& w, const ViTConfig& config, const BlockQuant& slice,
                        const std::vector<ModuleSample>& data) {
  if (data.empty()) throw PreconditionError("module_hard_loss: no samples");
  const BlockVars vars = block_vars(w, false);
  const QuantContext q = hard_context(slice, w);
  double total = 0.0;
  for (const auto& s : data) {
    check_sample(kind, s, config);
    const ModuleOutput o = run_module(kind, s.input, vars, config, q);
    total += loss_output(s.output, o.out).scalar();
    if (kind == ModuleKind::Mha) total += loss_attention(s.probs, o.probs).scalar();
  }
  return total / static_cast<double>(data.size());
}

ModuleResult optimize_module(ModuleKind kind, std::size_t block, const BlockWeights& w, const ViTConfig& config,
                             BlockQuant& slice, const std::vector<ModuleSample>& data, const OptimConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw PreconditionError("optimize_module: no calibration samples");
  for (const auto& s : data) check_sample(kind, s, config);

  ModuleResult result;
  result.block = block;
  result.kind = kind;
  result.hard_loss_before = module_hard_loss(kind, w, config, slice, data);

  const ModuleLayout layout = layout_for(kind, slice, w);
  const std::string prefix = "blocks." + std::to_string(block) + ".";

  // Trainable state lives here between steps; each step wraps it in fresh leaves.
  std::vector<Matrix> params;
  AdamState adam;
  for (const auto& [wq, wm] : layout.weights) {
    params.push_back(wq->v);
    adam.add(prefix + (wq == &slice.qkv ? "qkv" : wq == &slice.proj ? "proj" : wq == &slice.fc1 ? "fc1" : "fc2") + ".v",
             wq->v.rows(), wq->v.cols(), cfg.lr_weights);
  }
  for (SiteKind k : layout.sites) {
    params.push_back(slice.site(k).uniform.scale);
    adam.add(prefix + site_name(k) + ".scale", params.back().rows(), 1, cfg.lr_activations, kMinScale);
  }
  std::vector<Matrix*> param_ptrs;
  for (auto& p : params) param_ptrs.push_back(&p);

  const BlockVars vars = block_vars(w, false);
  Rng rng(mix_seed(cfg.seed, block * 2 + (kind == ModuleKind::Mha ? 0 : 1)));
  const auto n = static_cast<Index>(data.size());
  const Index batch = std::min<Index>(cfg.batch, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  double initial_loss = 0.0;

  for (int step = 0; step < cfg.iterations; ++step) {
    const double beta = beta_at(step, cfg.iterations, cfg.beta_start, cfg.beta_end);
    // batch without replacement: partial Fisher-Yates
    std::iota(order.begin(), order.end(), Index{0});
    for (Index i = 0; i < batch; ++i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i + rng.uniform_int(n - i))]);

    std::vector<ad::Var> leaves;
    for (const auto& p : params) leaves.push_back(ad::leaf(p));
    QuantContext q;
    q.spec = &slice;
    for (std::size_t i = 0; i < layout.sites.size(); ++i) q.act_scale[site_index(layout.sites[i])] = leaves[layout.weights.size() + i];
    ad::Var round_total;
    for (std::size_t i = 0; i < layout.weights.size(); ++i) {
      const auto& [wq, wm] = layout.weights[i];
      const ad::Var soft = ad::soft_weight(*wm, wq->params.scale, wq->effective_zero_point(), leaves[i], wq->params.bits);
      if (wq == &slice.qkv) q.qkv_w = soft;
      if (wq == &slice.proj) q.proj_w = soft;
      if (wq == &slice.fc1) q.fc1_w = soft;
      if (wq == &slice.fc2) q.fc2_w = soft;
      const ad::Var r = loss_round(leaves[i], beta);
      round_total = round_total.valid() ? ad::add(round_total, r) : r;
    }
    // Sites of the other module keep their calibrated constants.
    for (SiteKind k : kAllSites) {
      if (!q.act_scale[site_index(k)].valid() && slice.site(k).uses_uniform()) {
        q.act_scale[site_index(k)] = ad::constant(slice.site(k).uniform.scale);
      }
    }

    ad::Var recon;
    double lo = 0.0;
    double las = 0.0;
    for (Index b = 0; b < batch; ++b) {
      const ModuleSample& s = data[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
      const ModuleOutput o = run_module(kind, s.input, vars, config, q);
      ad::Var term = loss_output(s.output, o.out);
      lo += term.scalar();
      if (kind == ModuleKind::Mha) {
        const ad::Var as = loss_attention(s.probs, o.probs);
        las += as.scalar();
        term = ad::add(term, as);
      }
      recon = recon.valid() ? ad::add(recon, term) : term;
    }
    const double inv_batch = 1.0 / static_cast<double>(batch);
    const ad::Var loss = ad::add(ad::scale(recon, inv_batch), ad::scale(round_total, cfg.lambda));

    const double value = loss.scalar();
    if (!std::isfinite(value)) throw NumericalError("module " + prefix + module_kind_name(kind) + ": loss is not finite");
    if (step == 0) initial_loss = value;
    if (value > 1e6 * std::max(initial_loss, 1e-12)) {
      throw NumericalError("module " + prefix + module_kind_name(kind) + " diverged at step " + std::to_string(step) +
                           ": loss " + std::to_string(value) + " vs initial " + std::to_string(initial_loss));
    }
    result.trace.push_back({step, lo * inv_batch, round_total.scalar(), las * inv_batch, beta});

    ad::backward(loss);
    std::vector<Matrix> grads;
    for (const auto& l : leaves) grads.push_back(l.grad());
    adam_step(adam, param_ptrs, grads);
  }

  for (std::size_t i = 0; i < layout.weights.size(); ++i) {
    layout.weights[i].first->v = params[i];
    layout.weights[i].first->harden();
  }
  for (std::size_t i = 0; i < layout.sites.size(); ++i) {
    slice.site(layout.sites[i]).uniform.scale = params[layout.weights.size() + i].col(0);
  }
  result.hard_loss_after = module_hard_loss(kind, w, config, slice, data);
  log_info("module " + prefix + module_kind_name(kind) + ": hardened loss " + std::to_string(result.hard_loss_before) +
           " -> " + std::to_string(result.hard_loss_after));
  return result;
}

std::vector<ModuleResult> run_all_modules(const ViTModel& model, QuantBundle& bundle, const std::vector<Tensor>& calib,
                                          const OptimConfig& cfg) {
  cfg.validate();
  if (calib.empty()) throw PreconditionError("run_all_modules: calibration set is empty");
  if (static_cast<Index>(bundle.blocks.size()) != model.config.blocks) throw DimensionError("bundle does not match model");

  // FP references from one pass over the calibration set.
  std::vector<ForwardTrace> fp;
  {
    const InferenceSession session(model, nullptr);
    for (const auto& img : calib) fp.push_back(session.run(img, TapFilter::modules()).trace);
  }

  std::vector<ModuleResult> results;
  for (std::size_t l = 0; l < bundle.blocks.size(); ++l) {
    for (ModuleKind kind : {ModuleKind::Mha, ModuleKind::Mlp}) {
      std::vector<Matrix> quant_inputs;
      if (cfg.quantized_inputs) {
        const InferenceSession session(model, &bundle);
        for (const auto& img : calib) {
          const BlockTrace bt = session.run(img, TapFilter::modules()).trace.blocks[l];
          quant_inputs.push_back(kind == ModuleKind::Mha ? bt.mha_in : bt.mlp_in);
        }
      }
      std::vector<ModuleSample> data;
      for (std::size_t i = 0; i < fp.size(); ++i) {
        const BlockTrace& bt = fp[i].blocks[l];
        ModuleSample s;
        if (kind == ModuleKind::Mha) {
          s = {bt.mha_in, bt.mha_out, bt.probs};
        } else {
          s = {bt.mlp_in, bt.mlp_out, {}};
        }
        if (cfg.quantized_inputs) s.input = quant_inputs[i];
        data.push_back(std::move(s));
      }
      results.push_back(optimize_module(kind, l, model.blocks[l], model.config, bundle.blocks[l], data, cfg));
    }
  }
  return results;
}

}  // namespace adfq
