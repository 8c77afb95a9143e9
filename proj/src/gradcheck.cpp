#include "adfq/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "adfq/autodiff.hpp"
#include "adfq/calibration.hpp"
#include "adfq/reconstruction.hpp"
#include "adfq/vit.hpp"

namespace adfq {

namespace {

using ad::Var;
using Leaves = std::vector<Var>;

struct Audit {
  std::vector<GradAuditCase> cases;

  void run(const std::string& op_class, const std::string& name, bool ste, const ad::GraphFn& f,
           const std::vector<Matrix>& leaves) {
    const ad::GradCheckResult r = ad::check_gradients(f, leaves);
    cases.push_back({op_class, name, ste, r.max_error, ste ? kSteTolerance : kSmoothTolerance});
  }
};

// Pushes x/s away from rounding ties so the audit point is not on a kink.
Matrix guard_ties(Matrix x, double s) {
  for (Index i = 0; i < x.size(); ++i) {
    const double u = x.data()[i] / s;
    if (std::abs(u - std::floor(u) - 0.5) < 0.05) x.data()[i] += 0.1 * s;
  }
  return x;
}

Matrix stochastic_rows(Rng& rng, Index r, Index c, bool with_zeros) {
  Matrix p = rng.uniform_matrix(r, c, 0.05, 1.0);
  if (with_zeros) {
    for (Index i = 0; i < r; ++i) p(i, rng.uniform_int(c)) = 0.0;
  }
  for (Index i = 0; i < r; ++i) p.row(i) /= p.row(i).sum();
  return p;
}

void smooth_cases(Audit& a, Rng& rng, int rep) {
  const std::string tag = "#" + std::to_string(rep);
  const Index r = 2 + rng.uniform_int(3), k = 2 + rng.uniform_int(3), c = 2 + rng.uniform_int(4);

  {
    const Matrix ref = rng.normal_matrix(r, c);
    a.run("matmul", "matmul" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) { return ad::squared_error(ref, ad::matmul(l[0], l[1])); },
          {rng.normal_matrix(r, k), rng.normal_matrix(k, c)});
  }
  {
    const Matrix ref = rng.normal_matrix(r, c);
    a.run("add_sub", "add_sub" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) {
            return ad::squared_error(ref, ad::sub(ad::add(l[0], l[1]), ad::scale(l[1], 0.3)));
          },
          {rng.normal_matrix(r, c), rng.normal_matrix(r, c)});
  }
  {
    const Matrix ref = rng.normal_matrix(r, c);
    a.run("add_row", "add_row" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) { return ad::squared_error(ref, ad::add_row(l[0], l[1])); },
          {rng.normal_matrix(r, c), rng.normal_matrix(1, c)});
  }
  {
    const Matrix ref = rng.normal_matrix(c, r);
    a.run("transpose_scale", "transpose_scale" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) {
            return ad::squared_error(ref, ad::scale(ad::transpose(l[0]), 1.7));
          },
          {rng.normal_matrix(r, c)});
  }
  {
    const Matrix ref = rng.normal_matrix(r, 5);
    a.run("slice_concat", "slice_concat" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) {
            return ad::squared_error(ref, ad::concat_cols({ad::slice_cols(l[0], 0, 2), ad::slice_cols(l[0], 3, 3)}));
          },
          {rng.normal_matrix(r, 6)});
  }
  {
    const Matrix ref = rng.normal_matrix(r, c + 2);
    a.run("layernorm", "layernorm" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) {
            return ad::squared_error(ref, ad::layernorm(l[0], l[1], l[2], kLayerNormEps));
          },
          {rng.normal_matrix(r, c + 2, 2.0), rng.normal_matrix(1, c + 2), rng.normal_matrix(1, c + 2)});
  }
  {
    const Matrix ref = rng.normal_matrix(r, c);
    a.run("gelu", "gelu" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) { return ad::squared_error(ref, ad::gelu(l[0])); },
          {rng.normal_matrix(r, c, 2.0)});
  }
  {
    const Matrix ref = stochastic_rows(rng, r, c, false);
    a.run("softmax_rows", "softmax_rows" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) { return ad::squared_error(ref, ad::softmax_rows(l[0])); },
          {rng.normal_matrix(r, c, 2.0)});
  }
  {
    a.run("mean_sum", "mean_sum" + tag, false,
          [](const Leaves& l, ad::RoundingTape*) { return ad::sum(ad::gelu(ad::mean_rows(l[0]))); },
          {rng.normal_matrix(r, c)});
  }
  {
    const Matrix ref = stochastic_rows(rng, r, c, rep % 2 == 0);
    a.run("kl_rows", "kl_rows" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) { return ad::kl_rows_sum(ref, ad::softmax_rows(l[0])); },
          {rng.normal_matrix(r, c)});
  }
  {
    const Index label = rng.uniform_int(c);
    a.run("cross_entropy", "cross_entropy" + tag, false,
          [label](const Leaves& l, ad::RoundingTape*) { return ad::cross_entropy(l[0], label); },
          {rng.normal_matrix(1, c, 2.0)});
  }
  {
    const Matrix ref = rng.uniform_matrix(r, c, 0, 1);
    a.run("rectified_sigmoid", "rectified_sigmoid" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) { return ad::squared_error(ref, ad::rectified_sigmoid(l[0])); },
          {rng.uniform_matrix(r, c, -2.0, 2.0)});
  }
  {
    const double beta = rng.uniform(2.0, 10.0);
    a.run("round_loss", "round_loss" + tag, false,
          [beta](const Leaves& l, ad::RoundingTape*) { return ad::round_loss(l[0], beta); },
          {rng.uniform_matrix(r, c, -2.0, 2.0)});
  }
  {
    // random chain through several kernels
    const Index n = 3, d = 4, h = 6;
    const Matrix ref = rng.normal_matrix(n, d);
    a.run("composite", "composite" + tag, false,
          [ref](const Leaves& l, ad::RoundingTape*) {
            const Var x = ad::layernorm(l[0], l[1], l[2], kLayerNormEps);
            const Var hidden = ad::gelu(ad::add_row(ad::matmul(x, l[3]), l[4]));
            const Var att = ad::softmax_rows(ad::matmul(x, ad::transpose(x)));
            return ad::squared_error(ref, ad::add(ad::matmul(att, ad::matmul(hidden, l[5])), l[0]));
          },
          {rng.normal_matrix(n, d), rng.normal_matrix(1, d), rng.normal_matrix(1, d), rng.normal_matrix(d, h),
           rng.normal_matrix(1, h), rng.normal_matrix(h, d)});
  }
}

void ste_cases(Audit& a, Rng& rng, int rep) {
  const std::string tag = "#" + std::to_string(rep);
  const Index r = 3 + rng.uniform_int(3), c = 3 + rng.uniform_int(3);
  const BitWidth k(rep % 2 == 0 ? 4 : 3);

  for (Granularity g : {Granularity::PerTensor, Granularity::PerPatch, Granularity::PerChannel}) {
    const Matrix x0 = rng.normal_matrix(r, c, 2.0);
    const UniformParams p = uq_calibrate(x0, k, g);
    // shrink scales a little so some elements clamp
    Matrix s = p.scale * 0.8;
    const Matrix x = guard_ties(x0, s.minCoeff());
    const Matrix ref = rng.normal_matrix(r, c);
    const Vector z = p.zero_point;
    a.run("fake_quant_uniform", std::string("fake_quant_uniform/") + granularity_name(g) + tag, true,
          [ref, z, k, g](const Leaves& l, ad::RoundingTape* t) {
            return ad::squared_error(ref, ad::fake_quant_uniform(l[0], l[1], z, k, g, t));
          },
          {x, s});
  }
  {
    const Matrix x = rng.uniform_matrix(r, c, 0.01, 3.0);
    const Log2Params p = log2_from_max(x.maxCoeff(), k);
    const Matrix ref = rng.normal_matrix(r, c);
    a.run("fake_quant_log2", "fake_quant_log2" + tag, true,
          [ref, p](const Leaves& l, ad::RoundingTape* t) { return ad::squared_error(ref, ad::fake_quant_log2(l[0], p, t)); },
          {x});
  }
  {
    const Matrix x = ad::rectified_sigmoid(ad::constant(rng.normal_matrix(r, c))).value() * 3.0 - Matrix::Constant(r, c, 0.2);
    const Log2Params p = shift_log2_from_minmax(x.minCoeff(), x.maxCoeff(), k);
    const Matrix ref = rng.normal_matrix(r, c);
    a.run("fake_quant_shift_log2", "fake_quant_shift_log2" + tag, true,
          [ref, p](const Leaves& l, ad::RoundingTape* t) { return ad::squared_error(ref, ad::fake_quant_log2(l[0], p, t)); },
          {x});
  }
  {
    const Matrix w = rng.normal_matrix(r, c);
    const WeightQuant wq = init_weight_quant(w, k);
    const Matrix ref = rng.normal_matrix(r, c);
    const double beta = rng.uniform(2.0, 10.0);
    a.run("soft_weight", "soft_weight" + tag, true,
          [ref, w, wq, k, beta](const Leaves& l, ad::RoundingTape*) {
            const Var sw = ad::soft_weight(w, wq.params.scale, wq.effective_zero_point(), l[0], k);
            return ad::add(ad::squared_error(ref, sw), ad::scale(ad::round_loss(l[0], beta), 0.01));
          },
          {wq.v});
  }
  {
    Matrix x = rng.normal_matrix(r, c);
    x(0, 0) = 6.0;
    x(r - 1, c - 1) = -7.5;
    const OutlierConfig cfg{4.0, OutlierRule::Magnitude};
    const UniformParams p = uq_calibrate(outlier_split(x, cfg).dense, k, Granularity::PerPatch);
    const Matrix xs = guard_ties(x, p.scale.minCoeff());
    const Index out = 2 + rng.uniform_int(3);
    const Matrix ref = rng.normal_matrix(r, out);
    const Vector z = p.zero_point;
    a.run("poq_linear", "poq_linear" + tag, true,
          [ref, z, k, cfg](const Leaves& l, ad::RoundingTape* t) {
            return ad::squared_error(ref, ad::poq_linear(l[0], l[1], z, k, cfg, l[2], l[3], t));
          },
          {xs, p.scale, rng.normal_matrix(c, out), rng.normal_matrix(1, out)});
  }
}

// Miniature block: n = 2 tokens, d = 4, two heads, mlp width 8.
ViTConfig mini_config() {
  ViTConfig c;
  c.image_h = 2;
  c.image_w = 1;
  c.channels = 1;
  c.patch_h = 1;
  c.patch_w = 1;
  c.dim = 4;
  c.heads = 2;
  c.blocks = 1;
  c.mlp_dim = 8;
  c.num_classes = 2;
  return c;
}

void module_cases(Audit& a, Rng& rng, int rep) {
  const std::string tag = "#" + std::to_string(rep);
  const ViTConfig cfg = mini_config();
  const ViTModel model = init_model(cfg, rng.next_u64());
  std::vector<Tensor> calib;
  for (int i = 0; i < 4; ++i) calib.emplace_back(std::vector<Index>{2, 1, 1}, Vector(rng.uniform_matrix(2, 1, -1, 1).reshaped()));
  QuantPolicy policy;
  policy.alpha_qkv = 1.0;
  policy.alpha_fc1 = 1.0;
  policy.poq = rep % 2 == 0;
  policy.slq = rep % 3 != 1;
  const QuantBundle bundle = init_bundle(collect_stats(model, calib, policy), model, policy, 4, 4);
  const BlockQuant& spec = bundle.blocks[0];
  const BlockWeights& w = model.blocks[0];
  const BlockVars vars = block_vars(w, false);

  const Tensor probe({2, 1, 1}, Vector(rng.uniform_matrix(2, 1, -1, 1).reshaped()));
  const BlockTrace fp = model_forward(probe, model, nullptr, TapFilter::modules()).trace.blocks[0];
  const double lambda = 0.01, beta = rng.uniform(2.0, 10.0);

  const auto uniform_sites = [&spec](std::initializer_list<SiteKind> sites) {
    std::vector<SiteKind> out;
    for (SiteKind k : sites) {
      if (spec.site(k).uses_uniform()) out.push_back(k);
    }
    return out;
  };

  {
    const std::vector<SiteKind> sites =
        uniform_sites({SiteKind::QkvInput, SiteKind::Query, SiteKind::Key, SiteKind::Value, SiteKind::ProjInput});
    std::vector<Matrix> leaves = {fp.mha_in, spec.qkv.v, spec.proj.v};
    for (SiteKind k : sites) leaves.push_back(spec.site(k).uniform.scale);
    // pull the module output a little away from the FP reference so L_o is not degenerate
    const Matrix ref = fp.mha_out + rng.normal_matrix(fp.mha_out.rows(), fp.mha_out.cols(), 0.05);
    const std::vector<Matrix> probs = fp.probs;
    a.run("module_mha", "module_mha" + tag, true,
          [&, sites, ref, probs](const Leaves& l, ad::RoundingTape* t) {
            QuantContext q;
            q.spec = &spec;
            q.tape = t;
            for (SiteKind k : kAllSites) {
              if (spec.site(k).uses_uniform()) q.act_scale[site_index(k)] = ad::constant(spec.site(k).uniform.scale);
            }
            for (std::size_t i = 0; i < sites.size(); ++i) q.act_scale[site_index(sites[i])] = l[3 + i];
            q.qkv_w = ad::soft_weight(w.qkv_w, spec.qkv.params.scale, spec.qkv.effective_zero_point(), l[1], spec.qkv.params.bits);
            q.proj_w = ad::soft_weight(w.proj_w, spec.proj.params.scale, spec.proj.effective_zero_point(), l[2], spec.proj.params.bits);
            const MhaResult r = mha_forward(l[0], vars, cfg, &q);
            const Var rec = ad::add(loss_output(ref, r.out), loss_attention(probs, r.probs));
            return ad::add(rec, ad::scale(ad::add(loss_round(l[1], beta), loss_round(l[2], beta)), lambda));
          },
          leaves);
  }
  {
    const std::vector<SiteKind> sites = uniform_sites({SiteKind::Fc1Input, SiteKind::Fc2Input});
    std::vector<Matrix> leaves = {fp.mlp_in, spec.fc1.v, spec.fc2.v};
    for (SiteKind k : sites) leaves.push_back(spec.site(k).uniform.scale);
    const Matrix ref = fp.mlp_out + rng.normal_matrix(fp.mlp_out.rows(), fp.mlp_out.cols(), 0.05);
    a.run("module_mlp", "module_mlp" + tag, true,
          [&, sites, ref](const Leaves& l, ad::RoundingTape* t) {
            QuantContext q;
            q.spec = &spec;
            q.tape = t;
            for (SiteKind k : kAllSites) {
              if (spec.site(k).uses_uniform()) q.act_scale[site_index(k)] = ad::constant(spec.site(k).uniform.scale);
            }
            for (std::size_t i = 0; i < sites.size(); ++i) q.act_scale[site_index(sites[i])] = l[3 + i];
            q.fc1_w = ad::soft_weight(w.fc1_w, spec.fc1.params.scale, spec.fc1.effective_zero_point(), l[1], spec.fc1.params.bits);
            q.fc2_w = ad::soft_weight(w.fc2_w, spec.fc2.params.scale, spec.fc2.effective_zero_point(), l[2], spec.fc2.params.bits);
            const Var out = mlp_forward(l[0], vars, cfg, &q);
            return ad::add(loss_output(ref, out),
                           ad::scale(ad::add(loss_round(l[1], beta), loss_round(l[2], beta)), lambda));
          },
          leaves);
  }
}

}  // namespace

std::vector<GradAuditCase> gradient_audit(std::uint64_t seed, int repeats) {
  Audit a;
  Rng rng(seed);
  for (int rep = 0; rep < repeats; ++rep) {
    smooth_cases(a, rng, rep);
    ste_cases(a, rng, rep);
    module_cases(a, rng, rep);
  }
  return std::move(a.cases);
}

}  // namespace adfq
