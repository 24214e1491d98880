#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace mripipe {

/// Dense row-major tensor of doubles. Hot loops index through ptr() directly;
/// the at() helpers are for tests and cold paths.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel(shape), 0.0) {}

  static std::size_t numel(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return s.empty() ? 0 : n;
  }

  std::size_t size() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  void zero() { std::fill(data.begin(), data.end(), 0.0); }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }

  double& at(int i, int j) {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape[1]) +
                static_cast<std::size_t>(j)];
  }
  double at(int i, int j) const {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape[1]) +
                static_cast<std::size_t>(j)];
  }

  double& at(int i, int j, int k) {
    const std::size_t s1 = static_cast<std::size_t>(shape[1]);
    const std::size_t s2 = static_cast<std::size_t>(shape[2]);
    return data[(static_cast<std::size_t>(i) * s1 + static_cast<std::size_t>(j)) * s2 +
                static_cast<std::size_t>(k)];
  }
  double at(int i, int j, int k) const {
    const std::size_t s1 = static_cast<std::size_t>(shape[1]);
    const std::size_t s2 = static_cast<std::size_t>(shape[2]);
    return data[(static_cast<std::size_t>(i) * s1 + static_cast<std::size_t>(j)) * s2 +
                static_cast<std::size_t>(k)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace mripipe
