#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "iternet/tensor.hpp"

namespace iternet {

/// Trainable tensor with its gradient accumulator and Adam moments.
template <typename T>
struct ParamEntry {
  basic_tensor<T> value;
  basic_tensor<T> grad;
  basic_tensor<T> m;
  basic_tensor<T> v;

  explicit ParamEntry(basic_tensor<T> init)
      : value(std::move(init)),
        grad(value.shape()),
        m(value.shape()),
        v(value.shape()) {}
};

/// Named parameters. Shared modules read the same entry from every call
/// site, so their gradients accumulate here.
template <typename T>
class ParamStore {
 public:
  using Entries = std::map<std::string, ParamEntry<T>>;

  ParamEntry<T>& add(const std::string& name, basic_tensor<T> value) {
    auto [it, inserted] = entries_.emplace(name, ParamEntry<T>(std::move(value)));
    if (!inserted) {
      throw std::invalid_argument("param store: duplicate name '" + name + "'");
    }
    return it->second;
  }

  bool contains(const std::string& name) const {
    return entries_.count(name) != 0;
  }

  ParamEntry<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw std::out_of_range("param store: unknown parameter '" + name + "'");
    }
    return it->second;
  }
  const ParamEntry<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  const basic_tensor<T>& value(const std::string& name) const {
    return at(name).value;
  }
  const basic_tensor<T>& grad(const std::string& name) const {
    return at(name).grad;
  }

  Entries& entries() noexcept { return entries_; }
  const Entries& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.grad.fill(T{0});
  }

  /// Copy of the values (fresh gradients and moments) in another precision.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>());
    return out;
  }

 private:
  Entries entries_;
};

/// He-uniform bound sqrt(6 / fan_in) for an (O, I, kh, kw) kernel.
template <typename T>
basic_tensor<T> he_uniform(const Shape& kernel_shape, std::mt19937_64& rng) {
  const std::size_t fan_in = shape_size(kernel_shape) / kernel_shape.at(0);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  basic_tensor<T> out(kernel_shape);
  for (auto& x : out.values()) x = static_cast<T>(dist(rng));
  return out;
}

}  // namespace iternet
