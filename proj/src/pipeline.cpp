#include "adfq/pipeline.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "adfq/log.hpp"
#include "adfq/storage.hpp"

namespace adfq {

using nlohmann::json;

// ---- data -----------------------------------------------------------------

void Dataset::validate(const ViTConfig& config) const {
  const std::vector<Index> want = {config.image_h, config.image_w, config.channels};
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != want) {
      throw DimensionError("image " + std::to_string(i) + " has shape " + shape_string(images[i].shape()) +
                           ", expected " + shape_string(want));
    }
  }
  if (labeled()) {
    if (labels.size() != images.size()) throw DimensionError("label count does not match image count");
    for (Index l : labels) {
      if (l < 0 || l >= config.num_classes) throw DomainError("label " + std::to_string(l) + " out of range");
    }
  }
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > images.size()) throw PreconditionError("dataset slice out of range");
  Dataset d;
  d.images.assign(images.begin() + static_cast<std::ptrdiff_t>(begin), images.begin() + static_cast<std::ptrdiff_t>(end));
  if (labeled()) d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
  d.provenance = provenance + "[" + std::to_string(begin) + ":" + std::to_string(end) + "]";
  return d;
}

std::pair<Index, Index> label_grid(Index num_classes) {
  if (num_classes < 1) throw PreconditionError("label_grid: need at least one class");
  Index rows = 1;
  for (Index r = 1; r * r <= num_classes; ++r) {
    if (num_classes % r == 0) rows = r;
  }
  return {rows, num_classes / rows};
}

namespace {

Index region_of(Index i, Index j, Index h, Index w, std::pair<Index, Index> grid) {
  return (i * grid.first / h) * grid.second + (j * grid.second / w);
}

}  // namespace

Index region_label(const Tensor& image, Index num_classes) {
  if (image.rank() != 3) throw DimensionError("region_label: expected an h x w x c image");
  const Index h = image.extent(0), w = image.extent(1), c = image.extent(2);
  const auto grid = label_grid(num_classes);
  if (grid.first > h || grid.second > w) throw PreconditionError("region_label: image smaller than label grid");
  Vector sums = Vector::Zero(num_classes);
  Vector counts = Vector::Zero(num_classes);
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      const Index r = region_of(i, j, h, w, grid);
      for (Index k = 0; k < c; ++k) sums[r] += image.at(i, j, k);
      counts[r] += static_cast<double>(c);
    }
  }
  Index best = 0;
  for (Index r = 1; r < num_classes; ++r) {
    if (sums[r] / counts[r] > sums[best] / counts[best]) best = r;
  }
  return best;
}

Dataset gen_synthetic_dataset(const ViTConfig& config, std::size_t count, std::uint64_t seed) {
  config.validate();
  if (count == 0) throw PreconditionError("gen_synthetic_dataset: count must be at least 1");
  const Index h = config.image_h, w = config.image_w, c = config.channels;
  const auto grid = label_grid(config.num_classes);
  Rng rng(seed);
  Dataset d;
  d.provenance = "synthetic:seed=" + std::to_string(seed);
  for (std::size_t s = 0; s < count; ++s) {
    Tensor img({h, w, c});
    for (Index i = 0; i < img.numel(); ++i) img.data()[i] = rng.uniform(0.0, 0.5);
    const Index target = rng.uniform_int(config.num_classes);
    const double boost = rng.uniform(0.1, 0.6);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        if (region_of(i, j, h, w, grid) != target) continue;
        for (Index k = 0; k < c; ++k) img.at(i, j, k) += boost;
      }
    }
    img.data() = img.data().unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
    d.labels.push_back(region_label(img, config.num_classes));
    d.images.push_back(std::move(img));
  }
  return d;
}

void save_dataset(const Dataset& data, const std::filesystem::path& manifest) {
  if (data.images.empty()) throw PreconditionError("save_dataset: empty dataset");
  const std::vector<Index> shape = data.images.front().shape();
  Container c;
  c.format = kDatasetFormat;
  c.meta["provenance"] = data.provenance;
  c.meta["count"] = data.size();
  NamedTensor images{"images", {static_cast<Index>(data.size())}, Vector(static_cast<Index>(data.size()) * data.images.front().numel())};
  images.shape.insert(images.shape.end(), shape.begin(), shape.end());
  Index off = 0;
  for (const auto& img : data.images) {
    if (img.shape() != shape) throw DimensionError("save_dataset: images differ in shape");
    images.data.segment(off, img.numel()) = img.data();
    off += img.numel();
  }
  c.tensors.push_back(std::move(images));
  if (data.labeled()) {
    Vector labels(static_cast<Index>(data.labels.size()));
    for (std::size_t i = 0; i < data.labels.size(); ++i) labels[static_cast<Index>(i)] = static_cast<double>(data.labels[i]);
    c.tensors.push_back({"labels", {labels.size()}, labels});
  }
  write_container(manifest, c);
}

Dataset load_dataset(const std::filesystem::path& manifest) {
  const Container c = read_container(manifest, kDatasetFormat);
  const NamedTensor& images = c.get("images");
  if (images.shape.size() != 4) throw FormatError("dataset 'images' must be N x h x w x c");
  Dataset d;
  d.provenance = c.meta.value("provenance", manifest.string());
  const Index n = images.shape[0];
  const std::vector<Index> shape(images.shape.begin() + 1, images.shape.end());
  const Index per = shape[0] * shape[1] * shape[2];
  for (Index i = 0; i < n; ++i) d.images.emplace_back(shape, Vector(images.data.segment(i * per, per)));
  for (const auto& t : c.tensors) {
    if (t.name != "labels") continue;
    if (t.shape != std::vector<Index>{n}) throw FormatError("dataset 'labels' must have one entry per image");
    for (Index i = 0; i < n; ++i) {
      const double v = t.data[i];
      if (v != std::floor(v) || v < 0) throw FormatError("dataset label " + std::to_string(i) + " is not a class index");
      d.labels.push_back(static_cast<Index>(v));
    }
  }
  return d;
}

// ---- training -------------------------------------------------------------

namespace {

Index argmax(const RowVector& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <typename F>
void for_each_var(ModelVars& v, F&& f) {
  f(v.patch_w);
  f(v.patch_b);
  f(v.pos);
  for (auto& b : v.blocks) {
    for (ad::Var* x : {&b.ln1_gamma, &b.ln1_beta, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_gamma, &b.ln2_beta,
                       &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b}) {
      f(*x);
    }
  }
  f(v.head_w);
  f(v.head_b);
}

}  // namespace

double accuracy(const ViTModel& model, const Dataset& data) {
  if (!data.labeled() || data.size() == 0) throw PreconditionError("accuracy: needs a labeled, nonempty dataset");
  const InferenceSession session(model, nullptr);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += argmax(session.run(data.images[i]).logits) == data.labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainResult train_toy(const ViTModel& model, const Dataset& data, const TrainConfig& cfg) {
  model.validate();
  data.validate(model.config);
  if (!data.labeled()) throw PreconditionError("train_toy: dataset has no labels");
  if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.lr > 0) || !(cfg.val_fraction >= 0 && cfg.val_fraction < 1)) {
    throw ConfigError("train_toy: invalid training config");
  }
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(data.size()) * cfg.val_fraction));
  const std::size_t n_train = data.size() - n_val;
  if (n_train == 0) throw PreconditionError("train_toy: no training samples");
  const Dataset train = data.slice(0, n_train);
  const Dataset val = data.slice(n_train, data.size());

  TrainResult result;
  result.model = model;
  ViTModel& work = result.model;

  std::vector<Matrix> params;
  AdamState adam;
  for_each_parameter(work, [&](const std::string& name, const auto& m) {
    params.emplace_back(m);
    adam.add(name, m.rows(), m.cols(), cfg.lr);
  });
  std::vector<Matrix*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  const auto write_back = [&] {
    std::size_t i = 0;
    for_each_parameter(work, [&](const std::string&, auto& m) { m = params[i++]; });
  };

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n_train);
  double initial = -1.0;
  // cosine decay over all steps keeps late epochs from bouncing
  const std::size_t per_epoch = (n_train + static_cast<std::size_t>(cfg.batch) - 1) / static_cast<std::size_t>(cfg.batch);
  const double total_steps = static_cast<double>(per_epoch) * cfg.epochs;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n_train; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(static_cast<Index>(i)))]);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(cfg.batch));
      ModelVars vars = model_vars(work, true);
      ad::Var total;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const ad::Var ce = ad::cross_entropy(model_forward_graph(train.images[idx], vars, work.config, nullptr), train.labels[idx]);
        total = total.valid() ? ad::add(total, ce) : ce;
      }
      const ad::Var loss = ad::scale(total, 1.0 / static_cast<double>(end - start));
      const double value = loss.scalar();
      if (initial < 0) initial = value;
      if (!std::isfinite(value) || value > 1e6 * std::max(initial, 1e-12)) {
        throw NumericalError("train_toy diverged at epoch " + std::to_string(epoch) + ": loss " + std::to_string(value));
      }
      epoch_total += total.scalar();
      ad::backward(loss);
      const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step++) / total_steps));
      for (auto& slot : adam.slots) slot.lr = lr;
      std::vector<Matrix> grads;
      for_each_var(vars, [&](const ad::Var& v) { grads.push_back(v.grad()); });
      adam_step(adam, ptrs, grads);
      write_back();
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(n_train));
    log_info("epoch " + std::to_string(epoch) + " loss " + std::to_string(result.epoch_loss.back()));
  }
  if (cfg.epochs > 0) {
    for (auto& p : params) p = p.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
    write_back();
  }
  result.train_accuracy = accuracy(work, train);
  result.val_accuracy = val.size() > 0 ? accuracy(work, val) : result.train_accuracy;
  return result;
}

// ---- quantization ---------------------------------------------------------

QuantizeResult quantize_model(const ViTModel& model, const std::vector<Tensor>& calib, const QuantPolicy& policy,
                              int bits_w, int bits_a, const OptimConfig& cfg) {
  model.validate();
  QuantizeResult r;
  r.stats = collect_stats(model, calib, policy);
  r.bundle = init_bundle(r.stats, model, policy, bits_w, bits_a);
  if (policy.amo) r.modules = run_all_modules(model, r.bundle, calib, cfg);
  r.bundle.snap_to_storage_precision();
  return r;
}

QuantBundle naive_baseline_bundle(const ViTModel& model, const std::vector<Tensor>& calib, int bits_w, int bits_a) {
  if (calib.empty()) throw PreconditionError("naive_baseline_bundle: calibration set is empty");
  const BitWidth kw(bits_w), ka(bits_a);
  const auto blocks = static_cast<std::size_t>(model.config.blocks);
  std::vector<std::array<double, kSitesPerBlock>> lo(blocks), hi(blocks);
  for (auto& a : lo) a.fill(std::numeric_limits<double>::infinity());
  for (auto& a : hi) a.fill(-std::numeric_limits<double>::infinity());
  const InferenceSession session(model, nullptr);
  for (const auto& img : calib) {
    const ForwardResult r = session.run(img, TapFilter::all_sites());
    for (std::size_t l = 0; l < blocks; ++l) {
      for (std::size_t k = 0; k < kSitesPerBlock; ++k) {
        const Matrix& x = *r.trace.blocks[l].site_input[k];
        for (Index i = 0; i < x.size(); ++i) {
          lo[l][k] = std::min(lo[l][k], x.data()[i]);
          hi[l][k] = std::max(hi[l][k], x.data()[i]);
        }
      }
    }
  }
  QuantBundle b;
  b.bits_w = bits_w;
  b.bits_a = bits_a;
  for (std::size_t l = 0; l < blocks; ++l) {
    BlockQuant q;
    for (SiteKind k : kAllSites) {
      ActQuant& a = q.site(k);
      const std::size_t i = site_index(k);
      if (k == SiteKind::AttnProbs) {
        a.kind = QuantizerKind::Log2;
        a.log2 = log2_from_max(hi[l][i], ka);
      } else {
        a.kind = QuantizerKind::Uniform;
        a.uniform = uq_from_minmax(Vector::Constant(1, lo[l][i]), Vector::Constant(1, hi[l][i]), ka, Granularity::PerTensor);
      }
    }
    const BlockWeights& w = model.blocks[l];
    q.qkv = init_weight_quant(w.qkv_w, kw);
    q.proj = init_weight_quant(w.proj_w, kw);
    q.fc1 = init_weight_quant(w.fc1_w, kw);
    q.fc2 = init_weight_quant(w.fc2_w, kw);
    b.blocks.push_back(std::move(q));
  }
  b.snap_to_storage_precision();
  return b;
}

// ---- evaluation -----------------------------------------------------------

json EvalReport::to_json() const {
  json s = json::array();
  for (const auto& e : sites) {
    s.push_back({{"block", e.block},
                 {"site", site_name(e.site)},
                 {"kind", quantizer_kind_name(e.kind)},
                 {"mse", e.mse},
                 {"nmse", e.nmse},
                 {"outlier_ratio", e.outlier_ratio}});
  }
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"schema", kReportSchemaId},
          {"samples", samples},
          {"logits_nmse", logits_nmse},
          {"cosine_mean", cosine_mean},
          {"top1_agreement", top1_agreement},
          {"fp_accuracy", opt(fp_accuracy)},
          {"quant_accuracy", opt(quant_accuracy)},
          {"sites", std::move(s)},
          {"config", config},
          {"traces", traces}};
}

EvalReport evaluate(const ViTModel& model, const QuantBundle* bundle, const Dataset& data) {
  if (data.size() == 0) throw PreconditionError("evaluate: dataset is empty");
  data.validate(model.config);
  const InferenceSession fp(model, nullptr);
  std::optional<InferenceSession> quant;
  if (bundle != nullptr) quant.emplace(model, bundle);
  TapFilter filter = TapFilter::all_sites();
  filter.site_outputs = true;

  struct Acc {
    double err = 0.0, ref = 0.0;
    std::uint64_t outliers = 0, count = 0;
  };
  const std::size_t blocks = bundle != nullptr ? bundle->blocks.size() : 0;
  std::vector<std::array<Acc, kSitesPerBlock>> acc(blocks);

  EvalReport r;
  r.samples = data.size();
  double diff_sq = 0.0, ref_sq = 0.0, cos_sum = 0.0;
  std::size_t agree = 0, fp_hits = 0, q_hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const RowVector a = fp.run(data.images[i]).logits;
    RowVector b = a;
    if (quant) {
      const ForwardResult qr = quant->run(data.images[i], filter);
      b = qr.logits;
      for (std::size_t l = 0; l < blocks; ++l) {
        for (SiteKind k : kAllSites) {
          const std::size_t s = site_index(k);
          const Matrix& x = *qr.trace.blocks[l].site_input[s];
          const Matrix& y = *qr.trace.blocks[l].site_output[s];
          Acc& e = acc[l][s];
          e.err += (x - y).squaredNorm();
          e.ref += x.squaredNorm();
          e.count += static_cast<std::uint64_t>(x.size());
          const ActQuant& aq = bundle->blocks[l].site(k);
          if (aq.kind == QuantizerKind::OutlierPerPatch) e.outliers += static_cast<std::uint64_t>(outlier_count(x, aq.outlier));
        }
      }
    }
    diff_sq += (a - b).squaredNorm();
    ref_sq += a.squaredNorm();
    const double na = a.norm(), nb = b.norm();
    double cosv = 1.0;
    if (na > 0 && nb > 0) {
      cosv = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
    } else if (na > 0 || nb > 0) {
      cosv = 0.0;
    }
    cos_sum += cosv;
    const Index ia = argmax(a), ib = argmax(b);
    agree += ia == ib ? 1 : 0;
    if (data.labeled()) {
      fp_hits += ia == data.labels[i] ? 1 : 0;
      q_hits += ib == data.labels[i] ? 1 : 0;
    }
  }
  const auto n = static_cast<double>(data.size());
  r.logits_nmse = ref_sq > 0 ? diff_sq / ref_sq : (diff_sq > 0 ? std::numeric_limits<double>::infinity() : 0.0);
  r.cosine_mean = cos_sum / n;
  r.top1_agreement = static_cast<double>(agree) / n;
  if (data.labeled()) {
    r.fp_accuracy = static_cast<double>(fp_hits) / n;
    r.quant_accuracy = static_cast<double>(q_hits) / n;
  }
  for (std::size_t l = 0; l < blocks; ++l) {
    for (SiteKind k : kAllSites) {
      const Acc& e = acc[l][site_index(k)];
      r.sites.push_back({l, k, bundle->blocks[l].site(k).kind, e.err / static_cast<double>(e.count),
                         e.ref > 0 ? e.err / e.ref : 0.0, static_cast<double>(e.outliers) / static_cast<double>(e.count)});
    }
  }
  return r;
}

json module_traces_to_json(const std::vector<ModuleResult>& modules) {
  json out = json::array();
  for (const auto& m : modules) {
    out.push_back({{"block", m.block},
                   {"module", module_kind_name(m.kind)},
                   {"hard_loss_before", m.hard_loss_before},
                   {"hard_loss_after", m.hard_loss_after},
                   {"trace", trace_to_json(m.trace)}});
  }
  return out;
}

json echo_config(const QuantPolicy& policy, int bits_w, int bits_a, const OptimConfig& cfg) {
  const auto alpha = [](double a) { return std::isinf(a) ? json(nullptr) : json(a); };
  json overrides = json::object();
  for (const auto& [site, kind] : policy.overrides) overrides[site_name(site)] = quantizer_kind_name(kind);
  return {{"bits_w", bits_w},
          {"bits_a", bits_a},
          {"alpha_qkv", alpha(policy.alpha_qkv)},
          {"alpha_fc1", alpha(policy.alpha_fc1)},
          {"outlier_rule", outlier_rule_name(policy.rule)},
          {"epsilon", policy.epsilon},
          {"toggles", {{"poq", policy.poq}, {"slq", policy.slq}, {"amo", policy.amo}}},
          {"site_overrides", std::move(overrides)},
          {"lambda", cfg.lambda},
          {"lr_w", cfg.lr_weights},
          {"lr_a", cfg.lr_activations},
          {"iterations", cfg.iterations},
          {"batch", cfg.batch},
          {"beta_start", cfg.beta_start},
          {"beta_end", cfg.beta_end},
          {"quantized_inputs", cfg.quantized_inputs},
          {"optim_seed", cfg.seed},
          {"attention_loss_target", "softmax probabilities per head, row-wise KL"}};
}

// ---- ablation -------------------------------------------------------------

AblationResult ablate(const ViTModel& model, const std::vector<Tensor>& calib, const Dataset& eval_data,
                      const QuantPolicy& base, int bits_w, int bits_a, const OptimConfig& cfg,
                      const std::vector<double>& alpha_sweep) {
  AblationResult out;
  for (int mask = 0; mask < 8; ++mask) {
    QuantPolicy p = base;
    p.poq = (mask & 4) == 0;
    p.slq = (mask & 2) == 0;
    p.amo = (mask & 1) == 0;
    const QuantizeResult q = quantize_model(model, calib, p, bits_w, bits_a, cfg);
    AblationRow row{p.poq, p.slq, p.amo, evaluate(model, &q.bundle, eval_data)};
    row.report.config = echo_config(p, bits_w, bits_a, cfg);
    row.report.traces = module_traces_to_json(q.modules);
    log_info("ablation poq=" + std::to_string(p.poq) + " slq=" + std::to_string(p.slq) + " amo=" +
             std::to_string(p.amo) + " agreement " + std::to_string(row.report.top1_agreement));
    out.rows.push_back(std::move(row));
  }
  for (SiteKind layer : {SiteKind::QkvInput, SiteKind::Fc1Input}) {
    for (double alpha : alpha_sweep) {
      QuantPolicy p = base;
      p.poq = true;
      (layer == SiteKind::QkvInput ? p.alpha_qkv : p.alpha_fc1) = alpha;
      const CalibStats stats = collect_stats(model, calib, p);
      QuantBundle b = init_bundle(stats, model, p, bits_w, bits_a);
      b.snap_to_storage_precision();
      std::uint64_t outliers = 0, elements = 0;
      for (const auto& blk : stats.blocks) {
        outliers += blk[site_index(layer)].outlier_count;
        elements += blk[site_index(layer)].element_count;
      }
      out.sweep.push_back({layer == SiteKind::QkvInput ? "qkv" : "fc1", alpha,
                           elements > 0 ? static_cast<double>(outliers) / static_cast<double>(elements) : 0.0,
                           evaluate(model, &b, eval_data).top1_agreement});
    }
  }
  return out;
}

}  // namespace adfq
