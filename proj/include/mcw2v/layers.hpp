#pragma once

#include <string>

#include "mcw2v/autograd.hpp"

namespace mcw2v {

// y = x W + b with W [in x out] and b [1 x out].
template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<S>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true)
      : in_(in), out_(out) {
    weight_ = &store.add(name + ".w", init::xavier<S>(in, out, rng));
    if (with_bias) bias_ = &store.add(name + ".b", Tensor<S>({1, out}));
  }

  ag::Var<S> operator()(ag::Var<S> x, bool trainable = true) const {
    if (x.cols() != in_) {
      throw Error(Errc::DimensionMismatch, weight_->name + ": input " + shape_str(x.value().shape()) +
                                               ", expected " + std::to_string(in_) + " columns");
    }
    auto& g = *x.graph;
    ag::Var<S> y = ag::matmul(x, g.param(*weight_, trainable));
    return bias_ ? ag::add(y, g.param(*bias_, trainable)) : y;
  }

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  Parameter<S>& weight() const { return *weight_; }
  Parameter<S>* bias() const { return bias_; }

 private:
  Parameter<S>* weight_ = nullptr;
  Parameter<S>* bias_ = nullptr;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<S>& store, const std::string& name, std::size_t dim) {
    gain_ = &store.add(name + ".gain", Tensor<S>({1, dim}, S(1)));
    bias_ = &store.add(name + ".bias", Tensor<S>({1, dim}));
  }

  ag::Var<S> operator()(ag::Var<S> x) const {
    auto& g = *x.graph;
    return ag::layer_norm(x, g.param(*gain_), g.param(*bias_));
  }

 private:
  Parameter<S>* gain_ = nullptr;
  Parameter<S>* bias_ = nullptr;
};

}  // namespace mcw2v
