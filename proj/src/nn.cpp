#include "metadec/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace metadec {

template <typename T>
Var<T> ParameterStore<T>::add(const std::string& name, Tensor<T> init) {
  if (index_.count(name) || buffers_.count(name)) {
    throw std::logic_error("duplicate parameter name " + name);
  }
  auto v = Var<T>::leaf(std::move(init));
  index_[name] = params_.size();
  params_.emplace_back(name, v);
  return v;
}

template <typename T>
Tensor<T>& ParameterStore<T>::add_buffer(const std::string& name, Tensor<T> init) {
  if (index_.count(name) || buffers_.count(name)) {
    throw std::logic_error("duplicate buffer name " + name);
  }
  return buffers_.emplace(name, std::move(init)).first->second;
}

template <typename T>
Var<T> ParameterStore<T>::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].second;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() const {
  for (const auto& [name, v] : params_) v.zero_grad();
}

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  Tensor<T> t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(const Shape& shape, double bound, Rng& rng) {
  Tensor<T> t(shape);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> he_conv(int co, int ci, int k, Rng& rng) {
  return normal_tensor<T>({co, ci, k, k}, std::sqrt(2.0 / (ci * k * k)), rng);
}

template <typename T>
Tensor<T> xavier_linear(int out, int in, Rng& rng) {
  return uniform_tensor<T>({out, in}, std::sqrt(6.0 / (in + out)), rng);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(ParameterStore<T>& store, const std::string& name, int channels)
    : gamma_(store.add(name + ".gamma", Tensor<T>({channels}, T(1)))),
      beta_(store.add(name + ".beta", Tensor<T>({channels}))),
      running_mean_(&store.add_buffer(name + ".running_mean", Tensor<T>({channels}))),
      running_var_(&store.add_buffer(name + ".running_var", Tensor<T>({channels}, T(1)))) {}

template <typename T>
Var<T> BatchNorm2d<T>::operator()(const Var<T>& x, bool training) const {
  return ops::batch_norm<T>(x, gamma_, beta_, *running_mean_, *running_var_, training);
}

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, const std::string& name, int in, int out, Rng& rng)
    : weight(store.add(name + ".weight", xavier_linear<T>(out, in, rng))),
      bias(store.add(name + ".bias", Tensor<T>({out}))) {}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterStore<T>& store, const std::string& name, int width)
    : gamma(store.add(name + ".gamma", Tensor<T>({width}, T(1)))),
      beta(store.add(name + ".beta", Tensor<T>({width}))) {}

#define METADEC_INSTANTIATE(T)                                              \
  template class ParameterStore<T>;                                         \
  template class BatchNorm2d<T>;                                            \
  template class Linear<T>;                                                 \
  template class LayerNorm<T>;                                              \
  template Tensor<T> normal_tensor<T>(const Shape&, double, Rng&);          \
  template Tensor<T> uniform_tensor<T>(const Shape&, double, Rng&);         \
  template Tensor<T> he_conv<T>(int, int, int, Rng&);                       \
  template Tensor<T> xavier_linear<T>(int, int, Rng&);

METADEC_INSTANTIATE(float)
METADEC_INSTANTIATE(double)

#undef METADEC_INSTANTIATE

}  // namespace metadec
