#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mcw2v/errors.hpp"

namespace mcw2v {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? " x " : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Most of the library works on rank-2 tensors
// (rows = frames, cols = features); a vector is a 1 x n matrix.
template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw Error(Errc::ShapeMismatch, "shape " + shape_str(shape_) + " does not match " +
                                           std::to_string(data_.size()) + " elements");
    }
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor scalar(S v) { return Tensor({1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> values() { return data_; }
  std::span<const S> values() const { return data_; }
  std::vector<S>& storage() { return data_; }
  const std::vector<S>& storage() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  S& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const S& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<S> row(std::size_t r) { return std::span<S>(data_).subspan(r * cols(), cols()); }
  std::span<const S> row(std::size_t r) const {
    return std::span<const S>(data_).subspan(r * cols(), cols());
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, std::vector<T>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<S> data_;
};

// A named trainable tensor with its gradient accumulator.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
};

// Ordered collection of parameters. Addresses are stable for the lifetime of
// the store, so model modules keep plain pointers into it.
template <typename S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter<S>& add(const std::string& name, Tensor<S> init) {
    if (index_.count(name)) throw Error(Errc::ConfigError, "duplicate parameter " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->grad = Tensor<S>(init.shape());
    p->value = std::move(init);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(Errc::ConfigError, "unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(Errc::ConfigError, "unknown parameter " + name);
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(S(0));
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

using Rng = std::mt19937_64;

namespace init {

template <typename S>
Tensor<S> uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
Tensor<S> normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<S> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(dist(rng));
  return t;
}

// Glorot/Xavier uniform for an [in x out] weight.
template <typename S>
Tensor<S> xavier(std::size_t in, std::size_t out, Rng& rng) {
  return uniform<S>({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

}  // namespace init

}  // namespace mcw2v
