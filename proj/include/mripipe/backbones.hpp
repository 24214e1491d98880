#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mripipe/nn.hpp"
#include "mripipe/volume.hpp"

namespace mripipe {

constexpr int kSliceSide = 224;

enum class Family { convolutional, attention };
std::string to_string(Family f);
Family family_from_string(const std::string& s);

struct BackboneSpec {
  std::string identifier;
  int feature_dim = 0;
  Family family = Family::convolutional;
  bool buildable = true;  // screen-only registry entries are not buildable
};

/// Registered 2D feature extractors. Published architecture names are filled
/// by compatible desk-scale implementations of the same family; names that
/// were screened out stay as non-buildable registry entries.
const std::vector<BackboneSpec>& backbone_registry();
const BackboneSpec& find_backbone(const std::string& identifier);

/// Per-slice 2D feature extractor with cross-slice state for one volume at a
/// time. Instances are not thread-safe; concurrent inference uses one
/// instance per worker.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual const BackboneSpec& spec() const = 0;

  /// volume: (n_slices, 224, 224), single channel (replicated to the 3-channel
  /// input contract internally). features: (n_slices, feature_dim).
  virtual void forward(const Tensor& volume, bool training, Tensor& features) = 0;

  /// dfeatures: (n_slices, feature_dim). Accumulates parameter grads and
  /// captures per-slice target-activation grads for Grad-CAM.
  virtual void backward(const Tensor& dfeatures) = 0;

  virtual std::vector<nn::ParamView> parameters() = 0;
  virtual void init_weights(Rng& rng) = 0;

  /// Grad-CAM target: convolutional backbones expose the last conv stage's
  /// activation, attention backbones the final block's token grid, both as
  /// (C, gh, gw) per slice.
  virtual std::string target_layer_id() const = 0;
  virtual Tensor target_activation(int slice) const = 0;
  virtual Tensor target_activation_grad(int slice) const = 0;
};

std::unique_ptr<FeatureExtractor> build_backbone(const BackboneSpec& spec, Rng& init_rng);
std::unique_ptr<FeatureExtractor> build_backbone(const std::string& identifier, Rng& init_rng);

}  // namespace mripipe
