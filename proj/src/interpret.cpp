#include "mripipe/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace mripipe {

nlohmann::ordered_json Heatmap::metadata() const {
  return nlohmann::ordered_json{{"target_layer", target_layer},
                                {"slice", slice},
                                {"raw_min", raw_min},
                                {"raw_max", raw_max},
                                {"zero_gradient", zero_gradient},
                                {"shape", values.shape}};
}

Tensor upsample_bilinear_2d(const Tensor& map_2d, int oh, int ow) {
  const int h = map_2d.dim(0), w = map_2d.dim(1);
  Tensor out({oh, ow});
  const double sy = static_cast<double>(h) / oh;
  const double sx = static_cast<double>(w) / ow;
  for (int y = 0; y < oh; ++y) {
    const double src_y = (y + 0.5) * sy - 0.5;
    const int y0 = static_cast<int>(std::floor(src_y));
    const double fy = src_y - y0;
    for (int x = 0; x < ow; ++x) {
      const double src_x = (x + 0.5) * sx - 0.5;
      const int x0 = static_cast<int>(std::floor(src_x));
      const double fx = src_x - x0;
      auto px = [&](int yy, int xx) {
        yy = std::clamp(yy, 0, h - 1);
        xx = std::clamp(xx, 0, w - 1);
        return map_2d.at(yy, xx);
      };
      const double top = px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx;
      const double bot = px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx;
      out.at(y, x) = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

Heatmap gradcam(SliceModel& model, const SequenceVolume& v, int slice) {
  if (slice < 0 || slice >= v.n_slices())
    fail_validation("gradcam: slice " + std::to_string(slice) + " out of range for " +
                    std::to_string(v.n_slices()) + " slices");

  model.forward(v, /*training=*/false, nullptr);
  model.zero_grad();
  model.backward(1.0);  // d(logit)/d(activations)

  const Tensor activation = model.backbone().target_activation(slice);
  const Tensor grad = model.backbone().target_activation_grad(slice);
  const int channels = activation.dim(0);
  const int gh = activation.dim(1), gw = activation.dim(2);

  Heatmap heat;
  heat.target_layer = model.backbone().target_layer_id();
  heat.slice = slice;

  // Channel weights: spatial mean of the gradient.
  Tensor coarse({gh, gw});
  bool any_grad = false;
  for (int c = 0; c < channels; ++c) {
    double alpha = 0.0;
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x) alpha += grad.at(c, y, x);
    alpha /= static_cast<double>(gh * gw);
    if (alpha != 0.0) any_grad = true;
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x) coarse.at(y, x) += alpha * activation.at(c, y, x);
  }
  for (auto& x : coarse.data) x = std::max(0.0, x);

  Tensor up = upsample_bilinear_2d(coarse, kSliceSide, kSliceSide);
  const double lo = *std::min_element(up.data.begin(), up.data.end());
  const double hi = *std::max_element(up.data.begin(), up.data.end());
  heat.raw_min = lo;
  heat.raw_max = hi;
  if (!any_grad || hi <= lo) {
    heat.values = Tensor({kSliceSide, kSliceSide});
    heat.zero_gradient = true;
    return heat;
  }
  for (auto& x : up.data) x = (x - lo) / (hi - lo);
  heat.values = std::move(up);
  return heat;
}

void write_bmp(const std::string& path, const std::vector<unsigned char>& rgb, int height,
               int width) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3)
    fail_validation("write_bmp: buffer size does not match dimensions");
  const int row_bytes = width * 3;
  const int padded = (row_bytes + 3) / 4 * 4;
  const uint32_t data_size = static_cast<uint32_t>(padded) * static_cast<uint32_t>(height);
  const uint32_t file_size = 54 + data_size;

  std::ofstream out(path, std::ios::binary);
  if (!out) fail_validation("write_bmp: cannot open " + path);
  auto put16 = [&](uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  auto put32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };

  out.write("BM", 2);
  put32(file_size);
  put32(0);
  put32(54);
  put32(40);
  put32(static_cast<uint32_t>(width));
  put32(static_cast<uint32_t>(height));
  put16(1);
  put16(24);
  put32(0);
  put32(data_size);
  put32(2835);
  put32(2835);
  put32(0);
  put32(0);

  std::vector<unsigned char> row(static_cast<std::size_t>(padded), 0);
  for (int y = height - 1; y >= 0; --y) {  // bottom-up, BGR
    for (int x = 0; x < width; ++x) {
      const std::size_t src = (static_cast<std::size_t>(y) * width + x) * 3;
      row[static_cast<std::size_t>(x) * 3 + 0] = rgb[src + 2];
      row[static_cast<std::size_t>(x) * 3 + 1] = rgb[src + 1];
      row[static_cast<std::size_t>(x) * 3 + 2] = rgb[src + 0];
    }
    out.write(reinterpret_cast<const char*>(row.data()), padded);
  }
}

void overlay(const Heatmap& h, const Tensor& slice_image, const std::string& out_path) {
  if (slice_image.ndim() != 2 || !h.values.same_shape(slice_image))
    fail_validation("overlay: heatmap and slice dimensions differ");
  const int height = slice_image.dim(0), width = slice_image.dim(1);

  std::vector<unsigned char> rgb(static_cast<std::size_t>(height) * width * 3);
  constexpr double kAlpha = 0.5;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double gray = std::clamp(slice_image.at(y, x), 0.0, 1.0);
      const double hv = std::clamp(h.values.at(y, x), 0.0, 1.0);
      // Warm ramp red -> yellow; blend weight scales with heat so zero heat
      // reproduces the base image byte-for-byte.
      const double cr = 1.0, cg = hv, cb = 0.0;
      const double a = kAlpha * hv;
      const double r = (1 - a) * gray + a * cr;
      const double g = (1 - a) * gray + a * cg;
      const double b = (1 - a) * gray + a * cb;
      const std::size_t at = (static_cast<std::size_t>(y) * width + x) * 3;
      rgb[at + 0] = static_cast<unsigned char>(std::lround(255.0 * r));
      rgb[at + 1] = static_cast<unsigned char>(std::lround(255.0 * g));
      rgb[at + 2] = static_cast<unsigned char>(std::lround(255.0 * b));
    }
  }
  write_bmp(out_path, rgb, height, width);
}

}  // namespace mripipe
