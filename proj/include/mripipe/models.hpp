#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mripipe/backbones.hpp"

namespace mripipe {

enum class InitKind { generic_pretrained, domain_pretrained, random };
std::string to_string(InitKind k);
InitKind init_kind_from_string(const std::string& s);

struct InitStrategy {
  InitKind kind = InitKind::random;
  std::string checkpoint_path;  // required for pretrained kinds
};

/// Common trainer-facing surface for slice models and the volumetric CNN.
class ScanClassifier {
 public:
  virtual ~ScanClassifier() = default;

  /// Returns the sigmoid probability. `dropout_rng` is only consumed when
  /// training is true; inference never draws randomness.
  virtual double forward(const SequenceVolume& v, bool training, Rng* dropout_rng) = 0;

  /// Propagates d(loss)/d(logit) from the last forward call.
  virtual void backward(double dloss_dlogit) = 0;

  virtual std::vector<nn::ParamView> parameters() = 0;
  /// Non-trainable state (e.g. batch-norm running stats); included in
  /// snapshots and checkpoints, never touched by the optimizer.
  virtual std::vector<nn::ParamView> buffers() { return {}; }
  virtual double last_logit() const = 0;
  virtual nlohmann::ordered_json architecture_header() const = 0;

  void zero_grad();
  std::vector<nn::ParamView> state();  // parameters followed by buffers
  std::vector<Tensor> snapshot_weights();
  void restore_weights(const std::vector<Tensor>& snapshot);
};

/// 2D backbone per slice, elementwise max over slices, dropout, linear
/// classifier, sigmoid.
class SliceModel final : public ScanClassifier {
 public:
  SliceModel(std::unique_ptr<FeatureExtractor> backbone, double dropout_rate, uint64_t seed);

  double forward(const SequenceVolume& v, bool training, Rng* dropout_rng) override;
  void backward(double dloss_dlogit) override;
  std::vector<nn::ParamView> parameters() override;
  double last_logit() const override { return logit_; }
  nlohmann::ordered_json architecture_header() const override;

  const FeatureExtractor& backbone() const { return *backbone_; }
  FeatureExtractor& backbone() { return *backbone_; }
  double dropout_rate() const { return dropout_rate_; }
  uint64_t build_seed() const { return seed_; }

  /// Cross-slice max-pooled feature vector from the last forward.
  const Tensor& pooled_vector() const { return pooled_; }

  InitKind provenance() const { return provenance_; }
  void set_provenance(InitKind k) { provenance_ = k; }

  void reinit_head();

 private:
  std::unique_ptr<FeatureExtractor> backbone_;
  double dropout_rate_;
  uint64_t seed_;
  nn::Linear head_;
  InitKind provenance_ = InitKind::random;

  Tensor features_, pooled_, dropout_mask_;
  std::vector<int> argmax_slice_;
  int n_slices_ = 0;
  bool training_mode_ = false;
  double logit_ = 0.0, prob_ = 0.5;
};

/// The volumetric CNN: five conv stages {96,256,384,384,256} with ReLU + batch
/// norm, max pooling after stages 1, 2 and 5, adaptive average pooling to
/// 1x6x6, two 4096-wide fully connected layers, dropout, sigmoid.
class Volume3DModel final : public ScanClassifier {
 public:
  explicit Volume3DModel(double dropout_rate, uint64_t seed, int fc_width = 4096);
  ~Volume3DModel() override;

  double forward(const SequenceVolume& v, bool training, Rng* dropout_rng) override;
  void backward(double dloss_dlogit) override { backward(dloss_dlogit, true); }
  /// through_convs=false stops after the fully connected stack, for cheap
  /// classifier-weight gradient checks.
  void backward(double dloss_dlogit, bool through_convs);
  std::vector<nn::ParamView> parameters() override;
  std::vector<nn::ParamView> buffers() override;
  double last_logit() const override { return logit_; }
  nlohmann::ordered_json architecture_header() const override;

  static int min_slices();
  static std::array<int, 5> conv_channels() { return {96, 256, 384, 384, 256}; }
  long classifier_parameter_count() const;
  int fc_width() const { return fc_width_; }
  double dropout_rate() const { return dropout_rate_; }

  /// Classifier-only forward from cached pooled features; exact shortcut used
  /// by finite-difference probes of head weights.
  double head_forward_from_cache() const;

 private:
  double dropout_rate_;
  uint64_t seed_;
  int fc_width_;

  std::vector<nn::Conv3d> convs_;
  std::vector<nn::BatchNorm3d> norms_;
  nn::MaxPool3d pool_;
  nn::AdaptiveAvgPool3d head_pool_{1, 6, 6};
  nn::Linear fc1_, fc2_, fc3_;

  struct Cache;
  std::unique_ptr<Cache> cache_;
  double logit_ = 0.0;
};

/// Checkpoint container: JSON header plus a raw little-endian float64 blob.
struct CheckpointData {
  nlohmann::ordered_json header;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const nlohmann::ordered_json& header,
                     const std::vector<nn::ParamView>& params);
CheckpointData load_checkpoint(const std::string& path);

nlohmann::ordered_json checkpoint_header_for(const SliceModel& model, InitKind provenance,
                                             const std::string& config_hash);

std::unique_ptr<SliceModel> build_slice_model(const BackboneSpec& spec, double dropout,
                                              const InitStrategy& init, uint64_t seed);
std::unique_ptr<Volume3DModel> build_3d_cnn(double dropout, const InitStrategy& init,
                                            uint64_t seed, int fc_width = 4096);

/// Architecture names accepted by the pipeline: every buildable backbone plus
/// the volumetric CNN.
std::unique_ptr<ScanClassifier> build_scan_classifier(const std::string& architecture,
                                                      double dropout, const InitStrategy& init,
                                                      uint64_t seed);
bool architecture_is_slice_model(const std::string& architecture);

/// Replaces backbone weights from a checkpoint (identifier and feature_dim
/// must match), re-randomizes the classifier head, records provenance.
void load_pretrained(SliceModel& model, const std::string& checkpoint_path, InitKind kind);

/// Restores every parameter tensor (backbone and head) from a checkpoint;
/// used to reload trained bundles for inference.
void restore_from_checkpoint(ScanClassifier& model, const std::string& checkpoint_path);

double forward_scan(SliceModel& model, const SequenceVolume& v);

/// Trained artifact for one view-modality.
struct ModelBundle {
  std::string architecture;
  View view = View::sagittal;
  Modality modality = Modality::standard_mri;
  InitKind provenance = InitKind::random;
  double dropout = 0.0;
  std::string checkpoint_path;
  nlohmann::ordered_json hyperparams;  // the training configuration it was built with

  nlohmann::ordered_json to_json() const;
  static ModelBundle from_json(const nlohmann::ordered_json& j);
};

}  // namespace mripipe
