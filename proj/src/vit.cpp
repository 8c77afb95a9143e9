#include "adfq/vit.hpp"

#include <cmath>

namespace adfq {

namespace {

double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

template <typename M>
void snap(M& m) {
  m = m.unaryExpr([](double v) { return to_float_precision(v); });
}

void expect_shape(const std::string& name, Index rows, Index cols, Index want_rows, Index want_cols) {
  if (rows != want_rows || cols != want_cols) {
    throw DimensionError("tensor '" + name + "' has shape " + detail::dims(rows, cols) + ", expected " +
                         detail::dims(want_rows, want_cols));
  }
}

}  // namespace

void ViTConfig::validate() const {
  if (image_h <= 0 || image_w <= 0 || channels <= 0 || patch_h <= 0 || patch_w <= 0) {
    throw ConfigError("image and patch extents must be positive");
  }
  if (image_h % patch_h != 0 || image_w % patch_w != 0) throw ConfigError("image size must be divisible by patch size");
  if (dim <= 0 || heads <= 0 || dim % heads != 0) throw ConfigError("embed dim must be a positive multiple of heads");
  if (blocks < 0) throw ConfigError("block count must be non-negative");
  if (mlp_dim <= 0) throw ConfigError("mlp dim must be positive");
  if (num_classes <= 0) throw ConfigError("class count must be positive");
  if (!(ln_eps > 0)) throw ConfigError("layernorm eps must be positive");
}

void ViTModel::validate() const {
  config.validate();
  const Index d = config.dim;
  const Index n = config.num_patches();
  if (static_cast<Index>(blocks.size()) != config.blocks) {
    throw DimensionError("model has " + std::to_string(blocks.size()) + " blocks, config says " +
                         std::to_string(config.blocks));
  }
  expect_shape("patch.weight", patch_w.rows(), patch_w.cols(), config.patch_dim(), d);
  expect_shape("patch.bias", patch_b.rows(), patch_b.cols(), 1, d);
  expect_shape("pos_embed", pos.rows(), pos.cols(), n, d);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    expect_shape(p + "ln1.gamma", b.ln1_gamma.rows(), b.ln1_gamma.cols(), 1, d);
    expect_shape(p + "ln1.beta", b.ln1_beta.rows(), b.ln1_beta.cols(), 1, d);
    expect_shape(p + "qkv.weight", b.qkv_w.rows(), b.qkv_w.cols(), d, 3 * d);
    expect_shape(p + "qkv.bias", b.qkv_b.rows(), b.qkv_b.cols(), 1, 3 * d);
    expect_shape(p + "proj.weight", b.proj_w.rows(), b.proj_w.cols(), d, d);
    expect_shape(p + "proj.bias", b.proj_b.rows(), b.proj_b.cols(), 1, d);
    expect_shape(p + "ln2.gamma", b.ln2_gamma.rows(), b.ln2_gamma.cols(), 1, d);
    expect_shape(p + "ln2.beta", b.ln2_beta.rows(), b.ln2_beta.cols(), 1, d);
    expect_shape(p + "fc1.weight", b.fc1_w.rows(), b.fc1_w.cols(), d, config.mlp_dim);
    expect_shape(p + "fc1.bias", b.fc1_b.rows(), b.fc1_b.cols(), 1, config.mlp_dim);
    expect_shape(p + "fc2.weight", b.fc2_w.rows(), b.fc2_w.cols(), config.mlp_dim, d);
    expect_shape(p + "fc2.bias", b.fc2_b.rows(), b.fc2_b.cols(), 1, d);
  }
  expect_shape("head.weight", head_w.rows(), head_w.cols(), d, config.num_classes);
  expect_shape("head.bias", head_b.rows(), head_b.cols(), 1, config.num_classes);
}

bool ViTModel::all_finite() const {
  bool ok = true;
  for_each_parameter(*this, [&ok](const std::string&, const auto& m) { ok = ok && m.allFinite(); });
  return ok;
}

ViTModel zero_model(const ViTConfig& config) {
  config.validate();
  const Index d = config.dim;
  ViTModel m;
  m.config = config;
  m.patch_w = Matrix::Zero(config.patch_dim(), d);
  m.patch_b = RowVector::Zero(d);
  m.pos = Matrix::Zero(config.num_patches(), d);
  for (Index l = 0; l < config.blocks; ++l) {
    BlockWeights b;
    b.ln1_gamma = RowVector::Ones(d);
    b.ln1_beta = RowVector::Zero(d);
    b.qkv_w = Matrix::Zero(d, 3 * d);
    b.qkv_b = RowVector::Zero(3 * d);
    b.proj_w = Matrix::Zero(d, d);
    b.proj_b = RowVector::Zero(d);
    b.ln2_gamma = RowVector::Ones(d);
    b.ln2_beta = RowVector::Zero(d);
    b.fc1_w = Matrix::Zero(d, config.mlp_dim);
    b.fc1_b = RowVector::Zero(config.mlp_dim);
    b.fc2_w = Matrix::Zero(config.mlp_dim, d);
    b.fc2_b = RowVector::Zero(d);
    m.blocks.push_back(std::move(b));
  }
  m.head_w = Matrix::Zero(d, config.num_classes);
  m.head_b = RowVector::Zero(config.num_classes);
  return m;
}

ViTModel init_model(const ViTConfig& config, std::uint64_t seed) {
  ViTModel m = zero_model(config);
  Rng rng(seed);
  const Index d = config.dim;
  const auto fan_in = [](Index n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  m.patch_w = rng.normal_matrix(config.patch_dim(), d, fan_in(config.patch_dim()));
  m.pos = rng.normal_matrix(config.num_patches(), d, 0.1);
  for (auto& b : m.blocks) {
    b.qkv_w = rng.normal_matrix(d, 3 * d, fan_in(d));
    b.proj_w = rng.normal_matrix(d, d, fan_in(d));
    b.fc1_w = rng.normal_matrix(d, config.mlp_dim, fan_in(d));
    b.fc2_w = rng.normal_matrix(config.mlp_dim, d, fan_in(config.mlp_dim));
  }
  m.head_w = rng.normal_matrix(d, config.num_classes, fan_in(d));
  for_each_parameter(m, [](const std::string&, auto& t) { snap(t); });
  return m;
}

Matrix extract_patches(const Tensor& image, const ViTConfig& config) {
  if (image.rank() != 3 || image.extent(0) != config.image_h || image.extent(1) != config.image_w ||
      image.extent(2) != config.channels) {
    throw DimensionError("image shape " + shape_string(image.shape()) + " does not match config [" +
                         std::to_string(config.image_h) + "," + std::to_string(config.image_w) + "," +
                         std::to_string(config.channels) + "]");
  }
  const Index grid_w = config.image_w / config.patch_w;
  Matrix patches(config.num_patches(), config.patch_dim());
  for (Index p = 0; p < patches.rows(); ++p) {
    const Index r0 = (p / grid_w) * config.patch_h;
    const Index c0 = (p % grid_w) * config.patch_w;
    Index k = 0;
    for (Index r = 0; r < config.patch_h; ++r) {
      for (Index c = 0; c < config.patch_w; ++c) {
        for (Index ch = 0; ch < config.channels; ++ch) patches(p, k++) = image.at(r0 + r, c0 + c, ch);
      }
    }
  }
  return patches;
}

Matrix patch_embed(const Tensor& image, const ViTModel& model) {
  Matrix x = gemm(extract_patches(image, model.config), model.patch_w);
  x.rowwise() += model.patch_b;
  x += model.pos;
  return x;
}

BlockVars block_vars(const BlockWeights& w, bool trainable) {
  auto v = [trainable](const auto& m) { return ad::leaf(Matrix(m), trainable); };
  return {v(w.ln1_gamma), v(w.ln1_beta), v(w.qkv_w), v(w.qkv_b), v(w.proj_w), v(w.proj_b),
          v(w.ln2_gamma), v(w.ln2_beta), v(w.fc1_w), v(w.fc1_b), v(w.fc2_w), v(w.fc2_b)};
}

ModelVars model_vars(const ViTModel& model, bool trainable) {
  auto v = [trainable](const auto& m) { return ad::leaf(Matrix(m), trainable); };
  ModelVars mv{v(model.patch_w), v(model.patch_b), v(model.pos), v(model.head_w), v(model.head_b), {}};
  for (const auto& b : model.blocks) mv.blocks.push_back(block_vars(b, trainable));
  return mv;
}

QuantContext hard_context(const BlockQuant& spec, const BlockWeights& w) {
  QuantContext q;
  q.spec = &spec;
  for (SiteKind k : kAllSites) {
    const ActQuant& a = spec.site(k);
    if (a.uses_uniform()) q.act_scale[site_index(k)] = ad::constant(a.uniform.scale);
  }
  q.qkv_w = ad::constant(spec.qkv.dequantized(w.qkv_w));
  q.proj_w = ad::constant(spec.proj.dequantized(w.proj_w));
  q.fc1_w = ad::constant(spec.fc1.dequantized(w.fc1_w));
  q.fc2_w = ad::constant(spec.fc2.dequantized(w.fc2_w));
  return q;
}

namespace {

ad::Var quantize_site(SiteKind kind, const ad::Var& x, const QuantContext& q) {
  const ActQuant& a = q.spec->site(kind);
  switch (a.kind) {
    case QuantizerKind::Uniform:
      return ad::fake_quant_uniform(x, q.act_scale[site_index(kind)], a.uniform.zero_point, a.uniform.bits,
                                    a.uniform.granularity, q.tape);
    case QuantizerKind::Log2:
    case QuantizerKind::ShiftLog2:
      return ad::fake_quant_log2(x, a.log2, q.tape);
    case QuantizerKind::OutlierPerPatch:
      break;
  }
  throw PreconditionError(std::string("site ") + site_name(kind) + ": outlier-aware quantizer must feed a linear layer");
}

ad::Var linear_site(SiteKind kind, const ad::Var& x, const ad::Var& w, const ad::Var& b, const QuantContext& q) {
  const ActQuant& a = q.spec->site(kind);
  if (a.kind == QuantizerKind::OutlierPerPatch) {
    return ad::poq_linear(x, q.act_scale[site_index(kind)], a.uniform.zero_point, a.uniform.bits, a.outlier, w, b,
                          q.tape);
  }
  return ad::add_row(ad::matmul(quantize_site(kind, x, q), w), b);
}

void record_site(BlockTrace* trace, const TapFilter& filter, const QuantContext* q, SiteKind kind, const Matrix& in) {
  if (trace == nullptr || !filter.sites.test(site_index(kind))) return;
  trace->site_input[site_index(kind)] = in;
  if (filter.site_outputs && q != nullptr) trace->site_output[site_index(kind)] = q->spec->site(kind).fake_quant(in);
}

Matrix stack_rows(const std::vector<ad::Var>& parts) {
  Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  Matrix out(rows, parts.front().cols());
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return out;
}

}  // namespace

MhaResult mha_forward(const ad::Var& x, const BlockVars& w, const ViTConfig& config, const QuantContext* q,
                      BlockTrace* trace, const TapFilter& filter) {
  const Index d = config.dim;
  const Index dh = config.head_dim();
  if (x.cols() != d) throw DimensionError("mha_forward: input width " + std::to_string(x.cols()) + " != dim");
  const ad::Var x_ln = ad::layernorm(x, w.ln1_gamma, w.ln1_beta, config.ln_eps);
  record_site(trace, filter, q, SiteKind::QkvInput, x_ln.value());
  const ad::Var qkv = q ? linear_site(SiteKind::QkvInput, x_ln, q->qkv_w, w.qkv_b, *q)
                        : ad::add_row(ad::matmul(x_ln, w.qkv_w), w.qkv_b);

  ad::Var query = ad::slice_cols(qkv, 0, d);
  ad::Var key = ad::slice_cols(qkv, d, d);
  ad::Var value = ad::slice_cols(qkv, 2 * d, d);
  record_site(trace, filter, q, SiteKind::Query, query.value());
  record_site(trace, filter, q, SiteKind::Key, key.value());
  record_site(trace, filter, q, SiteKind::Value, value.value());
  if (q) {
    query = quantize_site(SiteKind::Query, query, *q);
    key = quantize_site(SiteKind::Key, key, *q);
    value = quantize_site(SiteKind::Value, value, *q);
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  MhaResult result;
  std::vector<ad::Var> fp_probs;
  std::vector<ad::Var> heads;
  for (Index h = 0; h < config.heads; ++h) {
    const ad::Var qh = ad::slice_cols(query, h * dh, dh);
    const ad::Var kh = ad::slice_cols(key, h * dh, dh);
    const ad::Var vh = ad::slice_cols(value, h * dh, dh);
    const ad::Var probs = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
    fp_probs.push_back(probs);
    const ad::Var used = q ? quantize_site(SiteKind::AttnProbs, probs, *q) : probs;
    result.probs.push_back(used);
    heads.push_back(ad::matmul(used, vh));
  }
  if (trace != nullptr && filter.sites.test(site_index(SiteKind::AttnProbs))) {
    record_site(trace, filter, q, SiteKind::AttnProbs, stack_rows(fp_probs));
  }

  const ad::Var attn = ad::concat_cols(heads);
  record_site(trace, filter, q, SiteKind::ProjInput, attn.value());
  result.out = q ? linear_site(SiteKind::ProjInput, attn, q->proj_w, w.proj_b, *q)
                 : ad::add_row(ad::matmul(attn, w.proj_w), w.proj_b);
  if (trace != nullptr && filter.module_io) {
    trace->mha_in = x.value();
    trace->mha_out = result.out.value();
    trace->probs.clear();
    for (const auto& p : result.probs) trace->probs.push_back(p.value());
  }
  return result;
}

ad::Var mlp_forward(const ad::Var& x, const BlockVars& w, const ViTConfig& config, const QuantContext* q,
                    BlockTrace* trace, const TapFilter& filter) {
  if (x.cols() != config.dim) throw DimensionError("mlp_forward: input width " + std::to_string(x.cols()) + " != dim");
  const ad::Var x_ln = ad::layernorm(x, w.ln2_gamma, w.ln2_beta, config.ln_eps);
  record_site(trace, filter, q, SiteKind::Fc1Input, x_ln.value());
  const ad::Var hidden = q ? linear_site(SiteKind::Fc1Input, x_ln, q->fc1_w, w.fc1_b, *q)
                           : ad::add_row(ad::matmul(x_ln, w.fc1_w), w.fc1_b);
  const ad::Var act = ad::gelu(hidden);
  record_site(trace, filter, q, SiteKind::Fc2Input, act.value());
  const ad::Var out = q ? linear_site(SiteKind::Fc2Input, act, q->fc2_w, w.fc2_b, *q)
                        : ad::add_row(ad::matmul(act, w.fc2_w), w.fc2_b);
  if (trace != nullptr && filter.module_io) {
    trace->mlp_in = x.value();
    trace->mlp_out = out.value();
  }
  return out;
}

ad::Var model_forward_graph(const Tensor& image, const ModelVars& vars, const ViTConfig& config,
                            const std::vector<QuantContext>* quant, ForwardTrace* trace, const TapFilter& filter) {
  if (quant != nullptr && static_cast<Index>(quant->size()) != config.blocks) {
    throw DimensionError("quantization contexts do not match block count");
  }
  const ad::Var patches = ad::constant(extract_patches(image, config));
  ad::Var x = ad::add(ad::add_row(ad::matmul(patches, vars.patch_w), vars.patch_b), vars.pos);
  if (trace != nullptr) {
    trace->x0 = x.value();
    trace->blocks.assign(static_cast<std::size_t>(config.blocks), BlockTrace{});
  }
  for (Index l = 0; l < config.blocks; ++l) {
    const auto li = static_cast<std::size_t>(l);
    BlockTrace* bt = trace != nullptr ? &trace->blocks[li] : nullptr;
    const QuantContext* q = quant != nullptr ? &(*quant)[li] : nullptr;
    const MhaResult mha = mha_forward(x, vars.blocks[li], config, q, bt, filter);
    const ad::Var mid = ad::add(x, mha.out);
    const ad::Var mlp = mlp_forward(mid, vars.blocks[li], config, q, bt, filter);
    x = ad::add(mid, mlp);
  }
  return ad::add_row(ad::matmul(ad::mean_rows(x), vars.head_w), vars.head_b);
}

InferenceSession::InferenceSession(const ViTModel& model, const QuantBundle* bundle)
    : model_(&model), vars_(model_vars(model, false)) {
  model.validate();
  if (bundle != nullptr) {
    if (static_cast<Index>(bundle->blocks.size()) != model.config.blocks) {
      throw DimensionError("bundle has " + std::to_string(bundle->blocks.size()) + " blocks, model has " +
                           std::to_string(model.config.blocks));
    }
    std::vector<QuantContext> contexts;
    for (std::size_t l = 0; l < bundle->blocks.size(); ++l) {
      contexts.push_back(hard_context(bundle->blocks[l], model.blocks[l]));
    }
    quant_ = std::move(contexts);
  }
}

ForwardResult InferenceSession::run(const Tensor& image, const TapFilter& filter) const {
  ForwardResult r;
  const ad::Var logits = model_forward_graph(image, vars_, model_->config, quant_ ? &*quant_ : nullptr,
                                             filter.any() ? &r.trace : nullptr, filter);
  r.logits = logits.value().row(0);
  return r;
}

ForwardResult model_forward(const Tensor& image, const ViTModel& model, const QuantBundle* bundle,
                            const TapFilter& filter) {
  return InferenceSession(model, bundle).run(image, filter);
}

}  // namespace adfq
