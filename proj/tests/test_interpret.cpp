#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mripipe/interpret.hpp"
#include "mripipe/training.hpp"
#include "test_helpers.hpp"

using namespace mripipe;

namespace {

constexpr int kBlobLo = 60, kBlobHi = 160;  // planted bright block bounds

SequenceVolume blob_volume(int slices, bool positive, uint64_t seed) {
  SequenceVolume v;
  v.voxels = Tensor({slices, kSliceSide, kSliceSide});
  Rng rng(seed);
  for (auto& x : v.voxels.data) x = 0.15 + 0.1 * rng.uniform();
  if (positive) {
    for (int s = 0; s < slices; ++s)
      for (int y = kBlobLo; y < kBlobHi; ++y)
        for (int x = kBlobLo; x < kBlobHi; ++x) v.voxels.at(s, y, x) = 0.95;
  }
  v.stage = Stage::standardized;
  return v;
}

Dataset blob_dataset(int n_pos, int n_neg, uint64_t seed) {
  Dataset out;
  Rng rng(seed);
  for (int i = 0; i < n_pos + n_neg; ++i) {
    const bool positive = i < n_pos;
    out.push_back({std::make_shared<SequenceVolume>(blob_volume(2, positive, rng.next())),
                   positive ? 1 : 0, "b" + std::to_string(i)});
  }
  return out;
}

std::unique_ptr<SliceModel> trained_blob_model(const char* arch, uint64_t seed) {
  auto model = build_slice_model(find_backbone(arch), 0.0, {}, seed);
  HyperParams hp;
  hp.learning_rate = 3e-3;
  hp.weight_decay = 1e-5;
  const auto result =
      train(*model, blob_dataset(5, 5, seed + 1), blob_dataset(2, 2, seed + 2), hp, {12, 10}, seed);
  apply_best_weights(*model, result);
  return model;
}

double mass_inside_blob(const Heatmap& h) {
  double inside = 0.0, total = 0.0;
  for (int y = 0; y < kSliceSide; ++y)
    for (int x = 0; x < kSliceSide; ++x) {
      const double v = h.values.at(y, x);
      total += v;
      if (y >= kBlobLo && y < kBlobHi && x >= kBlobLo && x < kBlobHi) inside += v;
    }
  return total > 0 ? inside / total : 0.0;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("interpret") {

TEST_CASE("gradcam localizes a planted bright blob on a trained conv model") {
  auto model = trained_blob_model("tiny-test-cnn", 9001);
  const auto v = blob_volume(3, true, 4242);
  REQUIRE(forward_scan(*model, v) > 0.5);  // correctly classified positive

  const auto heat = gradcam(*model, v, 1);
  CHECK(heat.values.shape == std::vector<int>{224, 224});
  CHECK_FALSE(heat.zero_gradient);

  // Argmax lands inside the blob's bounding box.
  int best_y = 0, best_x = 0;
  double best = -1.0;
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x)
      if (heat.values.at(y, x) > best) {
        best = heat.values.at(y, x);
        best_y = y;
        best_x = x;
      }
  CHECK(best_y >= kBlobLo);
  CHECK(best_y < kBlobHi);
  CHECK(best_x >= kBlobLo);
  CHECK(best_x < kBlobHi);
  CHECK(mass_inside_blob(heat) >= 0.5);
}

TEST_CASE("heatmaps are normalized to [0,1] and 224x224 for any slice count") {
  auto model = trained_blob_model("tiny-test-cnn", 9002);
  for (int slices : {2, 5}) {
    const auto heat = gradcam(*model, blob_volume(slices, true, 77), 0);
    CHECK(heat.values.shape == std::vector<int>{224, 224});
    double lo = 1e9, hi = -1e9;
    for (double x : heat.values.data) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
    if (!heat.zero_gradient) CHECK(hi == 1.0);
  }
}

TEST_CASE("backbone dispatch records the family-specific target layer") {
  auto conv_model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 5);
  const auto conv_heat = gradcam(*conv_model, blob_volume(2, true, 11), 0);
  CHECK(conv_heat.target_layer == "backbone.conv1.relu");

  auto attn_model = build_slice_model(find_backbone("tiny-test-attn"), 0.0, {}, 6);
  const auto attn_heat = gradcam(*attn_model, blob_volume(2, true, 12), 0);
  CHECK(attn_heat.target_layer == "backbone.block0.tokens");
  CHECK(attn_heat.values.shape == std::vector<int>{224, 224});
}

TEST_CASE("zero gradient produces an all-zero heatmap with a warning") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 7);
  for (auto& p : model->parameters())
    if (p.name.rfind("head.", 0) == 0) p.value->zero();
  const auto heat = gradcam(*model, blob_volume(2, true, 13), 0);
  CHECK(heat.zero_gradient);
  for (double x : heat.values.data) CHECK(x == 0.0);
}

TEST_CASE("gradcam validates the slice index") {
  auto model = build_slice_model(find_backbone("tiny-test-cnn"), 0.0, {}, 8);
  CHECK_THROWS_AS(gradcam(*model, blob_volume(2, true, 14), 5), PipelineError);
}

TEST_CASE("overlay with a zero heatmap reproduces the grayscale base image") {
  testutil::TempDir dir("overlay_zero");
  Heatmap zero;
  zero.values = Tensor({8, 8});
  Tensor base({8, 8});
  Rng rng(15);
  for (auto& x : base.data) x = rng.uniform();

  overlay(zero, base, dir.file("zero.bmp"));

  // Expected bytes: pure grayscale under the same BMP encoding.
  std::vector<unsigned char> rgb(8 * 8 * 3);
  for (int i = 0; i < 64; ++i) {
    const auto g = static_cast<unsigned char>(std::lround(255.0 * base.data[static_cast<std::size_t>(i)]));
    rgb[static_cast<std::size_t>(i) * 3 + 0] = g;
    rgb[static_cast<std::size_t>(i) * 3 + 1] = g;
    rgb[static_cast<std::size_t>(i) * 3 + 2] = g;
  }
  write_bmp(dir.file("gray.bmp"), rgb, 8, 8);
  CHECK(slurp(dir.file("zero.bmp")) == slurp(dir.file("gray.bmp")));
}

TEST_CASE("overlay bytes are deterministic and saturate on an all-ones map") {
  testutil::TempDir dir("overlay_ones");
  Heatmap ones;
  ones.values = Tensor({4, 4});
  std::fill(ones.values.data.begin(), ones.values.data.end(), 1.0);
  Tensor base({4, 4});
  std::fill(base.data.begin(), base.data.end(), 0.2);

  overlay(ones, base, dir.file("a.bmp"));
  overlay(ones, base, dir.file("b.bmp"));
  const std::string a = slurp(dir.file("a.bmp"));
  CHECK(a == slurp(dir.file("b.bmp")));
  CHECK(!a.empty());

  // Uniform inputs give one uniform warm color: 0.5*gray + 0.5*(1, 1, 0).
  const auto r = static_cast<unsigned char>(std::lround(255.0 * (0.5 * 0.2 + 0.5)));
  const auto b = static_cast<unsigned char>(std::lround(255.0 * (0.5 * 0.2)));
  // BMP pixel data starts at offset 54, stored BGR.
  CHECK(static_cast<unsigned char>(a[54]) == b);
  CHECK(static_cast<unsigned char>(a[56]) == r);

  Tensor wrong({5, 5});
  CHECK_THROWS_AS(overlay(ones, wrong, dir.file("c.bmp")), PipelineError);
}

}  // TEST_SUITE
