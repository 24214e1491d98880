#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mripipe/models.hpp"
#include "mripipe/training.hpp"
#include "test_helpers.hpp"

using namespace mripipe;

namespace {

SequenceVolume standardized_volume(int n, uint64_t seed, int side = kSliceSide) {
  SequenceVolume v;
  v.voxels = Tensor({n, side, side});
  Rng rng(seed);
  for (auto& x : v.voxels.data) x = rng.uniform();
  v.stage = Stage::standardized;
  return v;
}

/// Central-difference check of analytic parameter grads against a scalar
/// loss closure. Probes a deterministic sample of coordinates per tensor.
void check_param_grads(std::vector<nn::ParamView> params, const std::function<double()>& loss,
                       const std::function<void()>& run_backward, double tol, int probes_per_tensor,
                       uint64_t seed) {
  for (auto& p : params) p.grad->zero();
  run_backward();

  Rng rng(seed);
  for (auto& p : params) {
    for (int probe = 0; probe < probes_per_tensor; ++probe) {
      const std::size_t idx = static_cast<std::size_t>(rng.below(p.value->size()));
      const double orig = p.value->data[idx];
      const double h = std::max(1e-6, 1e-6 * std::abs(orig));
      p.value->data[idx] = orig + h;
      const double up = loss();
      p.value->data[idx] = orig - h;
      const double down = loss();
      p.value->data[idx] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad->data[idx];
      INFO(p.name, " idx=", idx, " analytic=", analytic, " numeric=", numeric);
      if (std::max(std::abs(numeric), std::abs(analytic)) < 1e-8) {
        CHECK(true);  // both below finite-difference noise: a zero gradient
        continue;
      }
      const double denom = std::max(std::abs(numeric), std::abs(analytic));
      CHECK(std::abs(numeric - analytic) / denom <= tol);
    }
  }
}

/// Scalar readout loss sum(y * r) with fixed random r, shared by the layer
/// battery below.
Tensor random_like(const std::vector<int>& shape, uint64_t seed) {
  Tensor t(shape);
  Rng rng(seed);
  for (auto& x : t.data) x = rng.uniform(-1.0, 1.0);
  return t;
}

double dot_readout(const Tensor& y, const Tensor& r) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += y.data[i] * r.data[i];
  return acc;
}

/// Mock feature extractor emitting a fixed (n_slices, d) matrix.
class FixedBackbone final : public FeatureExtractor {
 public:
  explicit FixedBackbone(Tensor features)
      : spec_{"fixed-test", features.dim(1), Family::convolutional, true},
        features_(std::move(features)) {}

  const BackboneSpec& spec() const override { return spec_; }
  void forward(const Tensor&, bool, Tensor& features) override { features = features_; }
  void backward(const Tensor& dfeatures) override { last_dfeatures = dfeatures; }
  std::vector<nn::ParamView> parameters() override { return {}; }
  void init_weights(Rng&) override {}
  std::string target_layer_id() const override { return "fixed"; }
  Tensor target_activation(int) const override { return {}; }
  Tensor target_activation_grad(int) const override { return {}; }

  Tensor last_dfeatures;

 private:
  BackboneSpec spec_;
  Tensor features_;
};

void zero_head(SliceModel& model) {
  for (auto& p : model.parameters())
    if (p.name.rfind("head.", 0) == 0) p.value->zero();
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("registry exposes buildable backbones and screen-only stubs") {
  CHECK(find_backbone("tiny-test-cnn").family == Family::convolutional);
  CHECK(find_backbone("vit-class").family == Family::attention);
  CHECK(find_backbone("swin-class").family == Family::attention);
  CHECK(find_backbone("alexnet-class").family == Family::convolutional);
  CHECK_FALSE(find_backbone("resnet50-class").buildable);
  CHECK_THROWS_AS(find_backbone("not-a-backbone"), PipelineError);

  Rng rng(1);
  CHECK_THROWS_WITH_AS(build_backbone("densenet-class", rng), doctest::Contains("screen-only"),
                       PipelineError);
}

TEST_CASE("slice pooling is an elementwise max over slices") {
  Tensor features({2, 3});
  features.at(0, 0) = 1;  features.at(0, 1) = -2; features.at(0, 2) = 3;
  features.at(1, 0) = 0;  features.at(1, 1) = 5;  features.at(1, 2) = -1;
  SliceModel model(std::make_unique<FixedBackbone>(features), 0.0, 7);
  const auto v = standardized_volume(2, 3, /*side=*/16);
  model.forward(v, false, nullptr);
  CHECK(model.pooled_vector().at(0) == 1.0);
  CHECK(model.pooled_vector().at(1) == 5.0);
  CHECK(model.pooled_vector().at(2) == 3.0);
}

TEST_CASE("zeroed classifier gives probability one half") {
  Tensor features({2, 3});
  for (auto& x : features.data) x = 0.3;
  SliceModel model(std::make_unique<FixedBackbone>(features), 0.0, 7);
  zero_head(model);
  CHECK(model.forward(standardized_volume(2, 4, 16), false, nullptr) == 0.5);
}

TEST_CASE("forward_scan is bitwise permutation invariant and max-idempotent") {
  const auto spec = find_backbone("tiny-test-cnn");
  auto model = build_slice_model(spec, 0.25, {}, 42);

  auto v = standardized_volume(5, 91);
  const double base = forward_scan(*model, v);
  const Tensor base_pooled = model->pooled_vector();

  // Reverse the slice order.
  SequenceVolume perm = v;
  const int n = v.n_slices(), hw = v.height() * v.width();
  for (int s = 0; s < n; ++s)
    std::copy(v.voxels.ptr() + static_cast<std::size_t>(s) * hw,
              v.voxels.ptr() + static_cast<std::size_t>(s + 1) * hw,
              perm.voxels.ptr() + static_cast<std::size_t>(n - 1 - s) * hw);
  CHECK(forward_scan(*model, perm) == base);  // bit-for-bit

  // Duplicating an existing slice never changes the pooled vector.
  SequenceVolume dup = v;
  dup.voxels = Tensor({n + 1, v.height(), v.width()});
  std::copy(v.voxels.data.begin(), v.voxels.data.end(), dup.voxels.data.begin());
  std::copy(v.voxels.ptr() + static_cast<std::size_t>(2) * hw,
            v.voxels.ptr() + static_cast<std::size_t>(3) * hw,
            dup.voxels.ptr() + static_cast<std::size_t>(n) * hw);
  CHECK(forward_scan(*model, dup) == base);
  for (std::size_t i = 0; i < base_pooled.size(); ++i)
    CHECK(model->pooled_vector().data[i] == base_pooled.data[i]);
}

TEST_CASE("model outputs stay strictly inside (0,1)") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 5);
  for (uint64_t s = 0; s < 4; ++s) {
    const double p = forward_scan(*model, standardized_volume(3, 100 + s));
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
}

TEST_CASE("build_slice_model rejects dropout outside the sampled range") {
  CHECK_THROWS_AS(build_slice_model(find_backbone("alexnet-class"), 0.6, {}, 3), PipelineError);
}

TEST_CASE("checkpoint round trip restores backbone weights and re-randomizes the head") {
  testutil::TempDir dir("models_ckpt");
  auto donor = build_slice_model(find_backbone("tiny-test-cnn"), 0.1, {}, 11);
  const std::string path = dir.file("donor.ckpt");
  save_checkpoint(path, checkpoint_header_for(*donor, InitKind::domain_pretrained, "cfg"),
                  donor->parameters());

  InitStrategy init{InitKind::domain_pretrained, path};
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.1, init, 999);
  CHECK(model->provenance() == InitKind::domain_pretrained);

  auto donor_params = donor->parameters();
  auto model_params = model->parameters();
  REQUIRE(donor_params.size() == model_params.size());
  for (std::size_t i = 0; i < donor_params.size(); ++i) {
    if (donor_params[i].name.rfind("backbone.", 0) == 0) {
      CHECK(model_params[i].value->data == donor_params[i].value->data);
    } else if (donor_params[i].name == "head.w") {
      // Head weights come from a fresh stream; biases start at zero in both.
      CHECK(model_params[i].value->data != donor_params[i].value->data);
    }
  }

  // Same checkpoint loaded as a generic init records that provenance.
  InitStrategy generic{InitKind::generic_pretrained, path};
  auto model2 = build_slice_model(find_backbone("tiny-test-cnn"), 0.1, generic, 999);
  CHECK(model2->provenance() == InitKind::generic_pretrained);
}

TEST_CASE("checkpoint with mismatched feature_dim or backbone is rejected") {
  testutil::TempDir dir("models_ckpt_bad");
  auto donor = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 21);

  nlohmann::ordered_json header = donor->architecture_header();
  header["feature_dim"] = 512;
  const std::string bad_dim = dir.file("bad_dim.ckpt");
  save_checkpoint(bad_dim, header, donor->parameters());
  auto victim = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 22);
  CHECK_THROWS_WITH_AS(load_pretrained(*victim, bad_dim, InitKind::domain_pretrained),
                       doctest::Contains("feature_dim"), PipelineError);

  auto attn_donor = build_slice_model(find_backbone("tiny-test-attn"), 0.0, {}, 23);
  const std::string wrong_backbone = dir.file("wrong_backbone.ckpt");
  save_checkpoint(wrong_backbone,
                  checkpoint_header_for(*attn_donor, InitKind::domain_pretrained, "cfg"),
                  attn_donor->parameters());
  CHECK_THROWS_WITH_AS(load_pretrained(*victim, wrong_backbone, InitKind::domain_pretrained),
                       doctest::Contains("does not match"), PipelineError);
}

TEST_CASE("layer gradients match central finite differences") {
  const double tol = 1e-6;

  SUBCASE("conv2d") {
    nn::Conv2d conv(2, 3, 3, 2, 1);
    Rng rng(31);
    conv.init(rng);
    const Tensor x = random_like({2, 9, 9}, 32);
    const Tensor r = random_like({3, 5, 5}, 33);
    Tensor y;
    auto loss = [&] {
      conv.forward(x, y);
      return dot_readout(y, r);
    };
    std::vector<nn::ParamView> params;
    conv.collect(params, "conv");
    check_param_grads(params, loss, [&] {
      loss();
      conv.backward(x, r, nullptr);
    }, tol, 6, 34);
  }

  SUBCASE("conv3d") {
    nn::Conv3d conv(2, 3, {3, 3, 3}, {1, 2, 2}, {1, 1, 1});
    Rng rng(41);
    conv.init(rng);
    const Tensor x = random_like({2, 4, 7, 7}, 42);
    Tensor y;
    conv.forward(x, y);
    const Tensor r = random_like(y.shape, 43);
    auto loss = [&] {
      conv.forward(x, y);
      return dot_readout(y, r);
    };
    std::vector<nn::ParamView> params;
    conv.collect(params, "conv3");
    check_param_grads(params, loss, [&] {
      loss();
      conv.backward(x, r, nullptr);
    }, tol, 6, 44);

    // Input grads via the same probe trick.
    Tensor dx;
    conv.forward(x, y);
    conv.gw.zero();
    conv.gb.zero();
    conv.backward(x, r, &dx);
    Rng probe(45);
    Tensor xm = x;
    for (int i = 0; i < 8; ++i) {
      const std::size_t idx = static_cast<std::size_t>(probe.below(x.size()));
      const double h = 1e-6;
      xm.data[idx] = x.data[idx] + h;
      conv.forward(xm, y);
      const double up = dot_readout(y, r);
      xm.data[idx] = x.data[idx] - h;
      conv.forward(xm, y);
      const double down = dot_readout(y, r);
      xm.data[idx] = x.data[idx];
      const double numeric = (up - down) / (2 * h);
      CHECK(std::abs(numeric - dx.data[idx]) <=
            tol * std::max({std::abs(numeric), std::abs(dx.data[idx]), 1e-8}));
    }
  }

  SUBCASE("batchnorm3d") {
    nn::BatchNorm3d bn(3);
    Rng rng(51);
    for (auto& g : bn.gamma.data) g = rng.uniform(0.5, 1.5);
    const Tensor x = random_like({3, 2, 4, 4}, 52);
    const Tensor r = random_like({3, 2, 4, 4}, 53);
    nn::BatchNorm3d::Cache cache;
    Tensor y;
    // Freeze running stats so repeated probe forwards stay consistent.
    auto loss = [&] {
      nn::BatchNorm3d::Cache c2;
      nn::BatchNorm3d probe_bn = bn;
      Tensor y2;
      probe_bn.forward(x, y2, true, c2);
      return dot_readout(y2, r);
    };
    std::vector<nn::ParamView> params;
    bn.collect(params, "bn");
    check_param_grads(params, loss, [&] {
      nn::BatchNorm3d run_bn = bn;
      Tensor y2;
      nn::BatchNorm3d::Cache c2;
      run_bn.forward(x, y2, true, c2);
      Tensor dx;
      run_bn.backward(r, c2, dx);
      bn.ggamma = run_bn.ggamma;
      bn.gbeta = run_bn.gbeta;
    }, tol, 3, 54);
  }

  SUBCASE("transformer block") {
    nn::TransformerBlock block(8, 16);
    Rng rng(61);
    block.init(rng);
    const Tensor x = random_like({5, 8}, 62);
    const Tensor r = random_like({5, 8}, 63);
    nn::TransformerBlock::Cache cache;
    Tensor y;
    auto loss = [&] {
      nn::TransformerBlock::Cache c2;
      Tensor y2;
      block.forward(x, y2, c2);
      return dot_readout(y2, r);
    };
    std::vector<nn::ParamView> params;
    block.collect(params, "block");
    check_param_grads(params, loss, [&] {
      block.forward(x, y, cache);
      Tensor dx;
      block.backward(x, r, cache, dx);
    }, 1e-5, 4, 64);
  }
}

TEST_CASE("whole slice-model gradients agree with finite differences") {
  const ClassWeights w{1.4, 0.8};
  for (const char* arch : {"tiny-test-cnn", "tiny-test-attn"}) {
    CAPTURE(arch);
    auto model = build_slice_model(find_backbone(arch), 0.0, {}, 77);
    const auto v = standardized_volume(2, 78);
    const int label = 1;
    auto loss = [&] {
      const double p = model->forward(v, true, nullptr);
      return weighted_bce(p, label, w);
    };
    auto backward = [&] {
      const double p = model->forward(v, true, nullptr);
      model->zero_grad();
      model->backward(w.w_pos * (p - 1.0));
    };
    // rel. err budget 1e-4; double precision lands far below it.
    check_param_grads(model->parameters(), loss, backward, 1e-4, 2, 79);
  }
}

TEST_CASE("volume3d architecture contract") {
  // Full-width model: the published channel ladder plus the 4096-4096-1 head.
  Volume3DModel model(0.2, 5, /*fc_width=*/4096);
  const auto ch = Volume3DModel::conv_channels();
  CHECK(ch == std::array<int, 5>{96, 256, 384, 384, 256});
  for (auto& p : model.parameters()) {
    if (p.name == "conv0.w") CHECK(p.value->shape[0] == 96);
    if (p.name == "conv1.w") CHECK(p.value->shape[0] == 256);
    if (p.name == "conv2.w") CHECK(p.value->shape[0] == 384);
    if (p.name == "conv3.w") CHECK(p.value->shape[0] == 384);
    if (p.name == "conv4.w") CHECK(p.value->shape[0] == 256);
  }

  // Independent oracle: closed-form per-layer parameter count of the
  // classifier block (pooled 256*1*6*6 input, two 4096 layers, scalar out).
  const long pooled = 256L * 1 * 6 * 6;
  const long oracle = (pooled * 4096 + 4096) + (4096L * 4096 + 4096) + (4096L * 1 + 1);
  CHECK(model.classifier_parameter_count() == oracle);
}

TEST_CASE("volume3d forward contract and classifier gradient check") {
  // Desk-scale head width keeps the finite-difference probes cheap; the conv
  // tower is the published geometry.
  Volume3DModel model(0.0, 9, /*fc_width=*/64);

  SequenceVolume tiny = standardized_volume(8, 91);
  CHECK_THROWS_WITH_AS(model.forward(tiny, false, nullptr), doctest::Contains("15"),
                       PipelineError);

  SequenceVolume v = standardized_volume(Volume3DModel::min_slices(), 92);
  const double p = model.forward(v, true, nullptr);
  CHECK(p > 0.0);
  CHECK(p < 1.0);

  const ClassWeights w{1.0, 1.0};
  const int label = 1;
  model.zero_grad();
  model.backward(w.w_pos * (p - 1.0), /*through_convs=*/false);

  auto params = model.parameters();
  Rng probe(93);
  int checked = 0;
  for (auto& prm : params) {
    if (prm.name.rfind("classifier.", 0) != 0) continue;
    for (int k = 0; k < 3; ++k) {
      const std::size_t idx = static_cast<std::size_t>(probe.below(prm.value->size()));
      const double orig = prm.value->data[idx];
      const double h = std::max(1e-6, 1e-6 * std::abs(orig));
      prm.value->data[idx] = orig + h;
      const double up = weighted_bce(model.head_forward_from_cache(), label, w);
      prm.value->data[idx] = orig - h;
      const double down = weighted_bce(model.head_forward_from_cache(), label, w);
      prm.value->data[idx] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = prm.grad->data[idx];
      CHECK(std::abs(numeric - analytic) <=
            1e-4 * std::max({std::abs(numeric), std::abs(analytic), 1e-8}));
      ++checked;
    }
  }
  CHECK(checked >= 9);
}

TEST_CASE("volume3d accepts any admissible depth") {
  Volume3DModel model(0.0, 13, /*fc_width=*/32);
  for (int depth : {15, 24}) {
    const double p = model.forward(standardized_volume(depth, 200 + static_cast<uint64_t>(depth)),
                                   false, nullptr);
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
}

}  // TEST_SUITE
