#include "mripipe/backbones.hpp"

#include <algorithm>
#include <cmath>

namespace mripipe {

std::string to_string(Family f) {
  return f == Family::convolutional ? "convolutional" : "attention";
}

Family family_from_string(const std::string& s) {
  if (s == "convolutional") return Family::convolutional;
  if (s == "attention") return Family::attention;
  fail_validation("unknown backbone family \"" + s + "\"");
}

const std::vector<BackboneSpec>& backbone_registry() {
  static const std::vector<BackboneSpec> registry = {
      {"tiny-test-cnn", 64, Family::convolutional, true},
      {"tiny-test-attn", 32, Family::attention, true},
      {"alexnet-class", 128, Family::convolutional, true},
      {"vit-class", 48, Family::attention, true},
      {"swin-class", 40, Family::attention, true},
      // Screened-out architectures: registry entries only.
      {"densenet-class", 1024, Family::convolutional, false},
      {"efficientnet-class", 1280, Family::convolutional, false},
      {"resnet34-class", 512, Family::convolutional, false},
      {"resnet50-class", 2048, Family::convolutional, false},
      {"swin2-class", 768, Family::attention, false},
  };
  return registry;
}

const BackboneSpec& find_backbone(const std::string& identifier) {
  for (const auto& spec : backbone_registry())
    if (spec.identifier == identifier) return spec;
  fail_validation("unknown backbone identifier \"" + identifier + "\"");
}

namespace {

using nn::Conv2d;
using nn::MaxPool2d;
using nn::ParamView;

void check_slice_shape(const Tensor& volume) {
  if (volume.ndim() != 3 || volume.dim(1) != kSliceSide || volume.dim(2) != kSliceSide)
    fail_validation("backbone expects (n, 224, 224) input, got a different spatial shape");
  if (volume.dim(0) < 1) fail_validation("backbone expects at least one slice");
}

/// Single-channel slice replicated to the 3-channel natural-image contract.
Tensor replicate_channels(const Tensor& volume, int slice) {
  const int h = volume.dim(1), w = volume.dim(2);
  Tensor x({3, h, w});
  const double* src = volume.ptr() + static_cast<std::size_t>(slice) * h * w;
  for (int c = 0; c < 3; ++c)
    std::copy(src, src + static_cast<std::size_t>(h) * w,
              x.ptr() + static_cast<std::size_t>(c) * h * w);
  return x;
}

// ---------------------------------------------------------------------------
// Convolutional backbones: conv stages (conv + relu [+ 3x2 max pool]) followed
// by a 2x2 adaptive average pool flattened into the feature vector.
// ---------------------------------------------------------------------------

class ConvBackbone final : public FeatureExtractor {
 public:
  struct StageSpec {
    int out_ch, k, stride, pad;
    bool pool_after;
  };

  ConvBackbone(BackboneSpec spec, const std::vector<StageSpec>& stages) : spec_(std::move(spec)) {
    int in_ch = 3;
    for (const auto& st : stages) {
      convs_.emplace_back(in_ch, st.out_ch, st.k, st.stride, st.pad);
      norms_.emplace_back(st.out_ch);
      pool_after_.push_back(st.pool_after);
      in_ch = st.out_ch;
    }
    const int expected = in_ch * head_pool_.oh * head_pool_.ow;
    if (expected != spec_.feature_dim)
      fail_validation("ConvBackbone: stage layout yields feature_dim " + std::to_string(expected) +
                      ", registry says " + std::to_string(spec_.feature_dim));
  }

  const BackboneSpec& spec() const override { return spec_; }

  void init_weights(Rng& rng) override {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      Rng r = rng.fork("conv" + std::to_string(i));
      convs_[i].init(r);
    }
  }

  void forward(const Tensor& volume, bool training, Tensor& features) override {
    (void)training;
    check_slice_shape(volume);
    const int n = volume.dim(0);
    slices_.assign(static_cast<std::size_t>(n), SliceCache{});
    if (features.shape != std::vector<int>{n, spec_.feature_dim})
      features = Tensor({n, spec_.feature_dim});

    parallel_for(n, 2, [&](int s) {
      SliceCache& c = slices_[static_cast<std::size_t>(s)];
      c.input3 = replicate_channels(volume, s);
      const Tensor* cur = &c.input3;
      c.conv_out.resize(convs_.size());
      c.norm_out.resize(convs_.size());
      c.normc.resize(convs_.size());
      c.relu_out.resize(convs_.size());
      c.pool_out.resize(convs_.size());
      c.poolc.resize(convs_.size());
      for (std::size_t i = 0; i < convs_.size(); ++i) {
        convs_[i].forward(*cur, c.conv_out[i]);
        norms_[i].forward(c.conv_out[i], c.norm_out[i], c.normc[i]);
        nn::relu_forward(c.norm_out[i], c.relu_out[i]);
        if (pool_after_[i]) {
          pool_.forward(c.relu_out[i], c.pool_out[i], c.poolc[i]);
          cur = &c.pool_out[i];
        } else {
          cur = &c.relu_out[i];
        }
      }
      head_pool_.forward(*cur, c.pooled);
      double* feat = features.ptr() + static_cast<std::size_t>(s) * spec_.feature_dim;
      std::copy(c.pooled.data.begin(), c.pooled.data.end(), feat);
    });
  }

  void backward(const Tensor& dfeatures) override {
    const int n = dfeatures.dim(0);
    for (int s = 0; s < n; ++s) {
      SliceCache& c = slices_[static_cast<std::size_t>(s)];
      Tensor dpooled(c.pooled.shape);
      const double* df = dfeatures.ptr() + static_cast<std::size_t>(s) * spec_.feature_dim;
      std::copy(df, df + spec_.feature_dim, dpooled.data.begin());

      const std::size_t last = convs_.size() - 1;
      const Tensor& head_in = pool_after_[last] ? c.pool_out[last] : c.relu_out[last];
      Tensor dcur;
      head_pool_.backward(head_in, dpooled, dcur);

      for (std::size_t i = convs_.size(); i-- > 0;) {
        if (pool_after_[i]) {
          Tensor drelu;
          pool_.backward(c.relu_out[i], dcur, c.poolc[i], drelu);
          dcur = std::move(drelu);
        }
        if (i == last) c.target_grad = dcur;  // grad at the Grad-CAM target
        Tensor dnorm;
        nn::relu_backward(c.norm_out[i], dcur, dnorm);
        Tensor dconv;
        norms_[i].backward(dnorm, c.normc[i], dconv);
        const Tensor& input = i == 0 ? c.input3 : (pool_after_[i - 1] ? c.pool_out[i - 1]
                                                                      : c.relu_out[i - 1]);
        if (i == 0) {
          convs_[i].backward(input, dconv, nullptr);
        } else {
          Tensor dx;
          convs_[i].backward(input, dconv, &dx);
          dcur = std::move(dx);
        }
      }
    }
  }

  std::vector<ParamView> parameters() override {
    std::vector<ParamView> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(out, "backbone.conv" + std::to_string(i));
      norms_[i].collect(out, "backbone.norm" + std::to_string(i));
    }
    return out;
  }

  std::string target_layer_id() const override {
    return "backbone.conv" + std::to_string(convs_.size() - 1) + ".relu";
  }

  Tensor target_activation(int slice) const override {
    return slices_.at(static_cast<std::size_t>(slice)).relu_out.back();
  }

  Tensor target_activation_grad(int slice) const override {
    const auto& g = slices_.at(static_cast<std::size_t>(slice)).target_grad;
    if (g.size() == 0)
      fail_validation("target_activation_grad: backward has not run for this volume");
    return g;
  }

 private:
  struct SliceCache {
    Tensor input3;
    std::vector<Tensor> conv_out, norm_out, relu_out, pool_out;
    std::vector<nn::InstanceNorm2d::Cache> normc;
    std::vector<MaxPool2d::Cache> poolc;
    Tensor pooled;
    Tensor target_grad;
  };

  BackboneSpec spec_;
  std::vector<Conv2d> convs_;
  std::vector<nn::InstanceNorm2d> norms_;
  std::vector<bool> pool_after_;
  MaxPool2d pool_{3, 2};
  nn::AdaptiveAvgPool2d head_pool_{2, 2};
  std::vector<SliceCache> slices_;
};

// ---------------------------------------------------------------------------
// Attention backbones: patch embedding, learned positional embedding, pre-norm
// transformer blocks, mean pooling over the token grid.
// ---------------------------------------------------------------------------

class TokenBackbone final : public FeatureExtractor {
 public:
  TokenBackbone(BackboneSpec spec, int patch, int n_blocks, int hidden)
      : spec_(std::move(spec)),
        patch_(3, spec_.feature_dim, patch, patch, 0),
        grid_(kSliceSide / patch),
        pos_emb_(Tensor({grid_ * grid_, spec_.feature_dim})),
        gpos_(Tensor({grid_ * grid_, spec_.feature_dim})) {
    if (kSliceSide % patch != 0)
      fail_validation("TokenBackbone: patch size must divide 224");
    for (int b = 0; b < n_blocks; ++b) blocks_.emplace_back(spec_.feature_dim, hidden);
  }

  const BackboneSpec& spec() const override { return spec_; }

  void init_weights(Rng& rng) override {
    {
      Rng r = rng.fork("patch");
      patch_.init(r);
    }
    {
      Rng r = rng.fork("pos");
      for (auto& x : pos_emb_.data) x = 0.02 * r.normal();
    }
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Rng r = rng.fork("block" + std::to_string(b));
      blocks_[b].init(r);
    }
  }

  void forward(const Tensor& volume, bool training, Tensor& features) override {
    (void)training;
    check_slice_shape(volume);
    const int n = volume.dim(0);
    const int tokens = grid_ * grid_;
    const int d = spec_.feature_dim;
    slices_.assign(static_cast<std::size_t>(n), SliceCache{});
    if (features.shape != std::vector<int>{n, d}) features = Tensor({n, d});

    parallel_for(n, 2, [&](int s) {
      SliceCache& c = slices_[static_cast<std::size_t>(s)];
      c.input3 = replicate_channels(volume, s);
      patch_.forward(c.input3, c.patch_out);  // (d, grid, grid)
      c.tokens0 = Tensor({tokens, d});
      for (int t = 0; t < tokens; ++t)
        for (int i = 0; i < d; ++i)
          c.tokens0.at(t, i) = c.patch_out.data[static_cast<std::size_t>(i) * tokens + t] +
                               pos_emb_.at(t, i);
      c.block_out.resize(blocks_.size());
      c.blockc.resize(blocks_.size());
      const Tensor* cur = &c.tokens0;
      for (std::size_t b = 0; b < blocks_.size(); ++b) {
        blocks_[b].forward(*cur, c.block_out[b], c.blockc[b]);
        cur = &c.block_out[b];
      }
      double* feat = features.ptr() + static_cast<std::size_t>(s) * d;
      for (int i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int t = 0; t < tokens; ++t) acc += cur->at(t, i);
        feat[i] = acc / tokens;
      }
    });
  }

  void backward(const Tensor& dfeatures) override {
    const int n = dfeatures.dim(0);
    const int tokens = grid_ * grid_;
    const int d = spec_.feature_dim;
    for (int s = 0; s < n; ++s) {
      SliceCache& c = slices_[static_cast<std::size_t>(s)];
      Tensor dtokens({tokens, d});
      const double* df = dfeatures.ptr() + static_cast<std::size_t>(s) * d;
      for (int t = 0; t < tokens; ++t)
        for (int i = 0; i < d; ++i) dtokens.at(t, i) = df[i] / tokens;
      c.target_grad = dtokens;  // grad at the final block's token outputs

      for (std::size_t b = blocks_.size(); b-- > 0;) {
        const Tensor& input = b == 0 ? c.tokens0 : c.block_out[b - 1];
        Tensor dx;
        blocks_[b].backward(input, dtokens, c.blockc[b], dx);
        dtokens = std::move(dx);
      }
      for (int t = 0; t < tokens; ++t)
        for (int i = 0; i < d; ++i) gpos_.at(t, i) += dtokens.at(t, i);
      Tensor dpatch({d, grid_, grid_});
      for (int t = 0; t < tokens; ++t)
        for (int i = 0; i < d; ++i)
          dpatch.data[static_cast<std::size_t>(i) * tokens + t] = dtokens.at(t, i);
      patch_.backward(c.input3, dpatch, nullptr);
    }
  }

  std::vector<ParamView> parameters() override {
    std::vector<ParamView> out;
    patch_.collect(out, "backbone.patch");
    out.push_back({"backbone.pos_emb", &pos_emb_, &gpos_});
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      blocks_[b].collect(out, "backbone.block" + std::to_string(b));
    return out;
  }

  std::string target_layer_id() const override {
    return "backbone.block" + std::to_string(blocks_.size() - 1) + ".tokens";
  }

  Tensor target_activation(int slice) const override {
    return tokens_to_grid(slices_.at(static_cast<std::size_t>(slice)).block_out.back());
  }

  Tensor target_activation_grad(int slice) const override {
    const auto& g = slices_.at(static_cast<std::size_t>(slice)).target_grad;
    if (g.size() == 0)
      fail_validation("target_activation_grad: backward has not run for this volume");
    return tokens_to_grid(g);
  }

 private:
  /// (tokens, d) -> (d, grid, grid); no class/global token exists to exclude.
  Tensor tokens_to_grid(const Tensor& tokens) const {
    const int d = spec_.feature_dim;
    Tensor grid({d, grid_, grid_});
    for (int t = 0; t < grid_ * grid_; ++t)
      for (int i = 0; i < d; ++i)
        grid.data[static_cast<std::size_t>(i) * grid_ * grid_ + t] = tokens.at(t, i);
    return grid;
  }

  struct SliceCache {
    Tensor input3, patch_out, tokens0;
    std::vector<Tensor> block_out;
    std::vector<nn::TransformerBlock::Cache> blockc;
    Tensor target_grad;
  };

  BackboneSpec spec_;
  Conv2d patch_;
  int grid_;
  Tensor pos_emb_, gpos_;
  std::vector<nn::TransformerBlock> blocks_;
  std::vector<SliceCache> slices_;
};

}  // namespace

std::unique_ptr<FeatureExtractor> build_backbone(const BackboneSpec& spec, Rng& init_rng) {
  if (!spec.buildable)
    fail_validation("backbone \"" + spec.identifier +
                    "\" is a screen-only registry entry and cannot be built");
  std::unique_ptr<FeatureExtractor> bb;
  if (spec.identifier == "tiny-test-cnn") {
    bb = std::make_unique<ConvBackbone>(
        spec, std::vector<ConvBackbone::StageSpec>{{8, 8, 8, 0, false}, {16, 3, 2, 1, false}});
  } else if (spec.identifier == "alexnet-class") {
    bb = std::make_unique<ConvBackbone>(
        spec, std::vector<ConvBackbone::StageSpec>{
                  {12, 11, 4, 2, true}, {24, 5, 1, 2, true}, {32, 3, 1, 1, false}});
  } else if (spec.identifier == "tiny-test-attn") {
    bb = std::make_unique<TokenBackbone>(spec, /*patch=*/32, /*blocks=*/1, /*hidden=*/64);
  } else if (spec.identifier == "vit-class") {
    bb = std::make_unique<TokenBackbone>(spec, /*patch=*/16, /*blocks=*/2, /*hidden=*/96);
  } else if (spec.identifier == "swin-class") {
    bb = std::make_unique<TokenBackbone>(spec, /*patch=*/28, /*blocks=*/2, /*hidden=*/80);
  } else {
    fail_validation("no implementation registered for backbone \"" + spec.identifier + "\"");
  }
  bb->init_weights(init_rng);
  return bb;
}

std::unique_ptr<FeatureExtractor> build_backbone(const std::string& identifier, Rng& init_rng) {
  return build_backbone(find_backbone(identifier), init_rng);
}

}  // namespace mripipe
