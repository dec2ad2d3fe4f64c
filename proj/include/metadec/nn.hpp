#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "metadec/ops.hpp"

namespace metadec {

using Rng = std::mt19937_64;

/// Named trainable parameters and non-trainable buffers of a model, in
/// registration order.
template <typename T>
class ParameterStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init);
  Tensor<T>& add_buffer(const std::string& name, Tensor<T> init);

  const std::vector<std::pair<std::string, Var<T>>>& parameters() const { return params_; }
  std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }

  Var<T> get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t parameter_count() const;
  void zero_grad() const;

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, Tensor<T>> buffers_;
};

/// Draws are made in double and then cast, so float and double models built
/// from the same seed start from the same values.
template <typename T>
Tensor<T> normal_tensor(const Shape& shape, double stddev, Rng& rng);
template <typename T>
Tensor<T> uniform_tensor(const Shape& shape, double bound, Rng& rng);

/// Conv weight [Co, Ci, k, k] with He-normal scale sqrt(2 / (Ci k^2)).
template <typename T>
Tensor<T> he_conv(int co, int ci, int k, Rng& rng);
/// Linear weight [out, in], Xavier-uniform.
template <typename T>
Tensor<T> xavier_linear(int out, int in, Rng& rng);

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore<T>& store, const std::string& name, int channels);
  Var<T> operator()(const Var<T>& x, bool training) const;

 private:
  Var<T> gamma_, beta_;
  Tensor<T>* running_mean_ = nullptr;
  Tensor<T>* running_var_ = nullptr;
};

/// Linear layer with bias, registered as "<name>.weight" / "<name>.bias".
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int in, int out, Rng& rng);
  Var<T> operator()(const Var<T>& x) const { return ops::linear<T>(x, weight, bias); }

  Var<T> weight;
  Var<T> bias;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, int width);
  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm<T>(x, gamma, beta); }

  Var<T> gamma;
  Var<T> beta;
};

}  // namespace metadec
