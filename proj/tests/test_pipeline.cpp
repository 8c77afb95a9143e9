#include "doctest.h"

#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include "adfq/pipeline.hpp"
#include "adfq/storage.hpp"
#include "schema_check.hpp"

using namespace adfq;
using nlohmann::json;

namespace {

ViTConfig four_class() {
  ViTConfig c;
  c.image_h = 16;
  c.image_w = 16;
  c.patch_h = 4;
  c.patch_w = 4;
  c.dim = 32;
  c.heads = 2;
  c.blocks = 2;
  c.mlp_dim = 64;
  c.num_classes = 4;
  return c;
}

// trained once, shared by the quantization cases
const TrainResult& trained() {
  static const TrainResult r = [] {
    const ViTConfig c = four_class();
    TrainConfig t;
    t.epochs = 5;
    t.seed = 7;
    return train_toy(init_model(c, 1), gen_synthetic_dataset(c, 2000, 2), t);
  }();
  return r;
}

json report_schema() {
  std::ifstream in(ADFQ_SOURCE_DIR "/docs/eval_report.schema.json");
  return json::parse(in);
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("label grid") {
  CHECK(label_grid(4) == std::pair<Index, Index>{2, 2});
  CHECK(label_grid(10) == std::pair<Index, Index>{2, 5});
  CHECK(label_grid(7) == std::pair<Index, Index>{1, 7});
  CHECK(label_grid(1) == std::pair<Index, Index>{1, 1});
  CHECK_THROWS_AS(label_grid(0), PreconditionError);
}

TEST_CASE("one bright quadrant gives its label") {
  for (Index q = 0; q < 4; ++q) {
    Tensor img({8, 8, 3});
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 8; ++j)
        for (Index k = 0; k < 3; ++k) img.at(i, j, k) = ((i / 4) * 2 + (j / 4) == q) ? 1.0 : 0.1;
    CHECK(region_label(img, 4) == q);
  }
  Tensor flat({8, 8, 3});
  CHECK(region_label(flat, 4) == 0);  // ties go to the first region
}

TEST_CASE("synthetic data is deterministic and labels follow the rule") {
  const ViTConfig c = four_class();
  const Dataset a = gen_synthetic_dataset(c, 50, 11), b = gen_synthetic_dataset(c, 50, 11);
  CHECK(a == b);
  CHECK_FALSE(a == gen_synthetic_dataset(c, 50, 12));
  CHECK_NOTHROW(a.validate(c));
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.labels[i] == region_label(a.images[i], 4));
  CHECK_THROWS_AS(gen_synthetic_dataset(c, 0, 1), PreconditionError);
}

TEST_CASE("synthetic label distribution is close to uniform") {
  for (Index classes : {Index{4}, Index{10}}) {
    ViTConfig c = four_class();
    c.num_classes = classes;
    c.image_w = 20;  // five columns for ten classes
    c.patch_w = 4;
    const Dataset d = gen_synthetic_dataset(c, 10000, 13);
    std::map<Index, int> count;
    for (Index l : d.labels) ++count[l];
    const double expect = 1.0 / static_cast<double>(classes);
    for (Index k = 0; k < classes; ++k) {
      INFO("classes " << classes << " label " << k << " count " << count[k]);
      CHECK(std::abs(count[k] / 10000.0 - expect) <= 0.02);
    }
  }
}

TEST_CASE("dataset validation and slicing") {
  const ViTConfig c = four_class();
  Dataset d = gen_synthetic_dataset(c, 6, 1);
  const Dataset s = d.slice(2, 5);
  CHECK(s.size() == 3u);
  CHECK(s.images[0] == d.images[2]);
  CHECK_THROWS_AS(d.slice(4, 9), PreconditionError);
  d.labels[0] = 4;
  CHECK_THROWS_AS(d.validate(c), DomainError);
  d.labels[0] = 0;
  d.images[1] = Tensor({8, 8, 3});
  CHECK_THROWS_AS(d.validate(c), DimensionError);
}

TEST_CASE("training with zero epochs leaves the model bit-identical") {
  const ViTConfig c = four_class();
  const ViTModel m = init_model(c, 3);
  TrainConfig t;
  t.epochs = 0;
  const TrainResult r = train_toy(m, gen_synthetic_dataset(c, 20, 1), t);
  CHECK(r.model == m);
  CHECK(r.epoch_loss.empty());
  Dataset unlabeled = gen_synthetic_dataset(c, 20, 1);
  unlabeled.labels.clear();
  CHECK_THROWS_AS(train_toy(m, unlabeled, t), PreconditionError);
}

TEST_CASE("toy training learns the quadrant task") {
  const TrainResult& r = trained();
  REQUIRE(r.epoch_loss.size() == 5u);
  for (std::size_t e = 1; e < r.epoch_loss.size(); ++e) {
    INFO("epoch " << e << " " << r.epoch_loss[e - 1] << " -> " << r.epoch_loss[e]);
    CHECK(r.epoch_loss[e] < r.epoch_loss[e - 1]);
  }
  INFO("val accuracy " << r.val_accuracy);
  CHECK(r.val_accuracy >= 0.8);
}

TEST_CASE("training is deterministic") {
  const ViTConfig c = four_class();
  TrainConfig t;
  t.epochs = 1;
  const Dataset d = gen_synthetic_dataset(c, 64, 5);
  const ViTModel m = init_model(c, 5);
  CHECK(train_toy(m, d, t).model == train_toy(m, d, t).model);
}

TEST_CASE("evaluate against itself is the identity") {
  const ViTModel& m = trained().model;
  const Dataset d = gen_synthetic_dataset(m.config, 32, 21);
  const EvalReport r = evaluate(m, nullptr, d);
  CHECK(r.samples == 32u);
  CHECK(r.logits_nmse == 0.0);
  CHECK(r.cosine_mean == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.top1_agreement == 1.0);
  REQUIRE(r.fp_accuracy.has_value());
  CHECK(*r.fp_accuracy == *r.quant_accuracy);
  CHECK(schema::validate(r.to_json(), report_schema()).empty());
  CHECK_THROWS_AS(evaluate(m, nullptr, Dataset{}), PreconditionError);
}

TEST_CASE("8-bit calibration-only bundle agrees with full precision") {
  const ViTModel& m = trained().model;
  const Dataset calib = gen_synthetic_dataset(m.config, 32, 31);
  const Dataset held = gen_synthetic_dataset(m.config, 256, 32);
  QuantPolicy p;
  p.amo = false;
  const QuantizeResult q = quantize_model(m, calib.images, p, 8, 8, OptimConfig{});
  CHECK(q.modules.empty());
  const EvalReport r = evaluate(m, &q.bundle, held);
  INFO("agreement " << r.top1_agreement);
  CHECK(r.top1_agreement >= 0.95);
  const auto errs = schema::validate(r.to_json(), report_schema());
  for (const auto& e : errs) INFO(e);
  CHECK(errs.empty());
  CHECK(r.sites.size() == 2u * kSitesPerBlock);
  for (const auto& s : r.sites) {
    CHECK(s.outlier_ratio >= 0.0);
    CHECK(s.outlier_ratio <= 1.0);
  }
}

TEST_CASE("second stage raises 4-bit agreement over calibration only") {
  const ViTModel& m = trained().model;
  const Dataset calib = gen_synthetic_dataset(m.config, 32, 41);
  const Dataset held = gen_synthetic_dataset(m.config, 256, 42);
  OptimConfig cfg;
  cfg.iterations = 150;
  QuantPolicy off;
  off.amo = false;
  const QuantBundle stage1 = quantize_model(m, calib.images, off, 4, 4, cfg).bundle;
  const double a_off = evaluate(m, &stage1, held).top1_agreement;
  const QuantizeResult full = quantize_model(m, calib.images, QuantPolicy{}, 4, 4, cfg);
  CHECK(full.modules.size() == 4u);
  const double a_full = evaluate(m, &full.bundle, held).top1_agreement;
  INFO("calibration only " << a_off << " full " << a_full);
  CHECK(a_full > a_off);
}

TEST_CASE("quantize and evaluate are deterministic") {
  const ViTModel& m = trained().model;
  const Dataset calib = gen_synthetic_dataset(m.config, 16, 51);
  const Dataset held = gen_synthetic_dataset(m.config, 32, 52);
  OptimConfig cfg;
  cfg.iterations = 10;
  const QuantizeResult a = quantize_model(m, calib.images, QuantPolicy{}, 4, 4, cfg);
  const QuantizeResult b = quantize_model(m, calib.images, QuantPolicy{}, 4, 4, cfg);
  CHECK(a.bundle == b.bundle);
  CHECK(a.modules == b.modules);
  CHECK(evaluate(m, &a.bundle, held).to_json().dump() == evaluate(m, &b.bundle, held).to_json().dump());
  // storage precision
  QuantBundle snapped = a.bundle;
  snapped.snap_to_storage_precision();
  CHECK(snapped == a.bundle);
}

TEST_CASE("all components disabled is the naive baseline") {
  const ViTModel& m = trained().model;
  const Dataset calib = gen_synthetic_dataset(m.config, 16, 61);
  QuantPolicy p;
  p.poq = p.slq = p.amo = false;
  for (int k : {4, 8}) {
    const QuantBundle a = quantize_model(m, calib.images, p, k, k, OptimConfig{}).bundle;
    QuantBundle n = naive_baseline_bundle(m, calib.images, k, k);
    n.snap_to_storage_precision();
    CHECK(a == n);
  }
  const QuantBundle n = naive_baseline_bundle(m, calib.images, 4, 4);
  for (const auto& b : n.blocks) {
    for (SiteKind s : kAllSites) {
      const ActQuant& a = b.site(s);
      if (s == SiteKind::AttnProbs) {
        CHECK(a.kind == QuantizerKind::Log2);
      } else {
        CHECK(a.kind == QuantizerKind::Uniform);
        CHECK(a.uniform.granularity == Granularity::PerTensor);
      }
    }
    CHECK(b.fc1.params.granularity == Granularity::PerChannel);
  }
}

TEST_CASE("ablation harness") {
  const ViTModel& m = trained().model;
  const Dataset calib = gen_synthetic_dataset(m.config, 16, 71);
  const Dataset held = gen_synthetic_dataset(m.config, 64, 72);
  OptimConfig cfg;
  cfg.iterations = 5;
  const std::vector<double> sweep = {2, 5, 10, 20};
  const AblationResult r = ablate(m, calib.images, held, QuantPolicy{}, 4, 4, cfg, sweep);
  REQUIRE(r.rows.size() == 8u);
  CHECK((r.rows[0].poq && r.rows[0].slq && r.rows[0].amo));
  std::set<std::tuple<bool, bool, bool>> seen;
  for (const auto& row : r.rows) seen.insert({row.poq, row.slq, row.amo});
  CHECK(seen.size() == 8u);
  for (const auto& row : r.rows) {
    if (row.poq || row.slq || row.amo) continue;
    const QuantBundle n = [&] {
      QuantBundle b = naive_baseline_bundle(m, calib.images, 4, 4);
      b.snap_to_storage_precision();
      return b;
    }();
    const EvalReport base = evaluate(m, &n, held);
    CHECK(row.report.logits_nmse == base.logits_nmse);
    CHECK(row.report.top1_agreement == base.top1_agreement);
  }
  REQUIRE(r.sweep.size() == 2 * sweep.size());
  for (std::size_t i = 1; i < r.sweep.size(); ++i) {
    if (r.sweep[i].layer != r.sweep[i - 1].layer) continue;
    CHECK(r.sweep[i].alpha > r.sweep[i - 1].alpha);
    CHECK(r.sweep[i].outlier_ratio <= r.sweep[i - 1].outlier_ratio);
  }
}

TEST_CASE("report config echo") {
  QuantPolicy p;
  p.overrides[SiteKind::Value] = QuantizerKind::Uniform;
  OptimConfig cfg;
  const json j = echo_config(p, 4, 6, cfg);
  CHECK(j["bits_w"] == 4);
  CHECK(j["bits_a"] == 6);
  CHECK(j["alpha_qkv"] == 5.0);
  CHECK(j["alpha_fc1"] == 10.0);
  CHECK(j["lambda"] == 0.01);
  CHECK(j["lr_w"] == 3e-3);
  CHECK(j["lr_a"] == 4e-5);
  CHECK(j["toggles"]["amo"] == true);
  CHECK(j["site_overrides"]["value"] == "uniform");
}

}  // TEST_SUITE
