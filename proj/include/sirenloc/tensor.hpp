#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "sirenloc/core.hpp"

namespace sirenloc::nn {

/// Named dense tensor of doubles, row-major.
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Ordered collection of named tensors. The declaration order is the
/// checkpoint order and the order gradients are laid out in.
class Params {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    tensors_.push_back({std::move(name), std::move(shape), std::vector<double>(n, 0.0)});
    return tensors_.size() - 1;
  }

  std::size_t count() const { return tensors_.size(); }
  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name == name) return i;
    }
    throw InvalidInput("no tensor named " + name);
  }
  const Tensor& at(const std::string& name) const { return tensors_[index_of(name)]; }
  Tensor& at(const std::string& name) { return tensors_[index_of(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  /// Same layout, all zeros.
  Params zeros_like() const {
    Params p = *this;
    for (auto& t : p.tensors_) std::fill(t.values.begin(), t.values.end(), 0.0);
    return p;
  }

  void set_zero() {
    for (auto& t : tensors_) std::fill(t.values.begin(), t.values.end(), 0.0);
  }

  bool all_finite() const {
    for (const auto& t : tensors_) {
      for (double v : t.values) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  friend bool operator==(const Params&, const Params&) = default;

 private:
  std::vector<Tensor> tensors_;
};

}  // namespace sirenloc::nn
