#pragma once

#include <string>

#include "mripipe/models.hpp"

namespace mripipe {

struct Heatmap {
  Tensor values;  // (224, 224), min-max normalized into [0,1]
  std::string target_layer;
  int slice = 0;
  double raw_min = 0.0, raw_max = 0.0;  // bounds before normalization
  bool zero_gradient = false;           // emitted all-zero with a warning

  nlohmann::ordered_json metadata() const;
};

/// Grad-CAM for the positive-class logit: channel weights are the spatially
/// averaged activation gradients, the map is the rectified weighted sum of
/// channels, bilinearly upsampled to 224x224 and min-max normalized.
Heatmap gradcam(SliceModel& model, const SequenceVolume& v, int slice);

/// Alpha-blended warm colormap over the grayscale slice, written as a 24-bit
/// BMP. A zero heatmap reproduces the base image exactly.
void overlay(const Heatmap& h, const Tensor& slice_image, const std::string& out_path);

Tensor upsample_bilinear_2d(const Tensor& map_2d, int oh, int ow);

void write_bmp(const std::string& path, const std::vector<unsigned char>& rgb, int height,
               int width);

}  // namespace mripipe
