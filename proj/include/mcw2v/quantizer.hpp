#pragma once

// Contrastive-target quantizers. Each variant maps the clean multi-channel
// features of a frame to one target vector q_t through linear layers:
//
//   joint    one linear layer over [amp_1..amp_C ; phase_1..phase_C]
//   feature  amplitude and phase quantizers (each with its own activation)
//            feeding a joint linear layer
//   channel  per-channel quantizers, weighted by an additive attention over
//            channels, feeding a joint linear layer

#include <string>
#include <string_view>
#include <vector>

#include "mcw2v/layers.hpp"

namespace mcw2v {

enum class QuantizerMethod { Joint, Feature, Channel };

inline QuantizerMethod parse_quantizer_method(std::string_view s) {
  if (s == "joint") return QuantizerMethod::Joint;
  if (s == "feature") return QuantizerMethod::Feature;
  if (s == "channel") return QuantizerMethod::Channel;
  throw Error(Errc::ConfigError, "unknown quantizer method '" + std::string(s) + "' (joint|feature|channel)");
}

inline std::string_view to_string(QuantizerMethod m) {
  switch (m) {
    case QuantizerMethod::Joint: return "joint";
    case QuantizerMethod::Feature: return "feature";
    case QuantizerMethod::Channel: return "channel";
  }
  return "?";
}

inline ag::Activation parse_activation(std::string_view s) {
  if (s == "swish") return ag::Activation::Swish;
  if (s == "relu") return ag::Activation::Relu;
  if (s == "none") return ag::Activation::None;
  throw Error(Errc::ConfigError, "unknown activation '" + std::string(s) + "' (swish|relu|none)");
}

inline std::string_view to_string(ag::Activation a) {
  switch (a) {
    case ag::Activation::Swish: return "swish";
    case ag::Activation::Relu: return "relu";
    case ag::Activation::None: return "none";
  }
  return "?";
}

struct QuantizerConfig {
  QuantizerMethod method = QuantizerMethod::Feature;
  ag::Activation amp_activation = ag::Activation::Swish;
  ag::Activation phase_activation = ag::Activation::None;
  std::size_t target_dim = 256;
  std::size_t bins = 257;  // F; per-channel input is 3F
  std::size_t channels = 2;
  std::size_t attention_dim = 128;
  bool share_channel_quantizer = true;
};

template <typename S>
class QuantizerBank {
 public:
  QuantizerBank(ParamStore<S>& store, const QuantizerConfig& cfg, Rng& rng, const std::string& prefix = "quantizer")
      : cfg_(cfg) {
    const std::size_t F = cfg.bins, C = cfg.channels, D = cfg.target_dim;
    switch (cfg.method) {
      case QuantizerMethod::Joint:
        joint_ = Linear<S>(store, prefix + ".joint", C * 3 * F, D, rng);
        break;
      case QuantizerMethod::Feature:
        amp_ = Linear<S>(store, prefix + ".amp", C * F, D, rng);
        phase_ = Linear<S>(store, prefix + ".phase", C * 2 * F, D, rng);
        joint_ = Linear<S>(store, prefix + ".joint", 2 * D, D, rng);
        break;
      case QuantizerMethod::Channel: {
        const std::size_t n = cfg.share_channel_quantizer ? 1 : C;
        for (std::size_t c = 0; c < n; ++c)
          channel_.emplace_back(store, prefix + ".channel" + std::to_string(c), 3 * F, D, rng);
        const std::size_t A = cfg.attention_dim;
        att_w_ = &store.add(prefix + ".att.w", init::xavier<S>(A, 1, rng));
        att_u_ = &store.add(prefix + ".att.U", init::xavier<S>(3 * F, A, rng));
        att_h_ = &store.add(prefix + ".att.H", init::xavier<S>(3 * F, A, rng));
        att_b_ = &store.add(prefix + ".att.b", Tensor<S>({1, A}));
        joint_ = Linear<S>(store, prefix + ".joint", C * D, D, rng);
        break;
      }
    }
  }

  const QuantizerConfig& config() const { return cfg_; }

  // `inputs` holds the per-channel [T x 3F] rows [amp | cos | sin]. With
  // trainable == false the parameters enter the graph as constants.
  ag::Var<S> operator()(const std::vector<ag::Var<S>>& inputs, bool trainable = true) const {
    check_inputs(inputs);
    switch (cfg_.method) {
      case QuantizerMethod::Joint: return quantize_joint(inputs, trainable);
      case QuantizerMethod::Feature: return quantize_featurewise(inputs, trainable);
      case QuantizerMethod::Channel: return quantize_channelwise(inputs, trainable);
    }
    return inputs[0];
  }

  ag::Var<S> quantize_joint(const std::vector<ag::Var<S>>& inputs, bool trainable = true) const {
    return joint_(ag::concat_cols(amplitude_parts(inputs, true)), trainable);
  }

  ag::Var<S> quantize_featurewise(const std::vector<ag::Var<S>>& inputs, bool trainable = true) const {
    ag::Var<S> qa = amplitude_quantized(inputs, trainable);
    ag::Var<S> qp = phase_quantized(inputs, trainable);
    return joint_(ag::concat_cols(std::vector<ag::Var<S>>{qa, qp}), trainable);
  }

  // q^amplitude of the feature-wise method.
  ag::Var<S> amplitude_quantized(const std::vector<ag::Var<S>>& inputs, bool trainable = true) const {
    return ag::activate(amp_(ag::concat_cols(amplitude_parts(inputs, false)), trainable), cfg_.amp_activation);
  }

  // q^phase of the feature-wise method.
  ag::Var<S> phase_quantized(const std::vector<ag::Var<S>>& inputs, bool trainable = true) const {
    std::vector<ag::Var<S>> parts;
    const std::size_t F = cfg_.bins;
    for (const auto& x : inputs) parts.push_back(ag::slice_cols(x, F, 3 * F));
    return ag::activate(phase_(ag::concat_cols(parts), trainable), cfg_.phase_activation);
  }

  // a [T x C]: score_c(t) = w^T tanh(U X_c(t) + H mean_{j != c} X_j(t) + b),
  // normalized with a softmax over channels.
  ag::Var<S> channel_attention(const std::vector<ag::Var<S>>& inputs, bool trainable = true) const {
    if (inputs.size() < 2) throw Error(Errc::SingleChannel, "channel attention needs at least two channels");
    if (!att_w_) throw Error(Errc::ConfigError, "channel attention only exists for the channel method");
    auto& g = *inputs[0].graph;
    ag::Var<S> w = g.param(*att_w_, trainable), u = g.param(*att_u_, trainable);
    ag::Var<S> h = g.param(*att_h_, trainable), b = g.param(*att_b_, trainable);
    std::vector<ag::Var<S>> scores;
    for (std::size_t c = 0; c < inputs.size(); ++c) {
      std::vector<ag::Var<S>> others;
      for (std::size_t j = 0; j < inputs.size(); ++j)
        if (j != c) others.push_back(inputs[j]);
      ag::Var<S> pre = ag::add(ag::add(ag::matmul(inputs[c], u), ag::matmul(ag::average(others), h)), b);
      scores.push_back(ag::matmul(ag::tanh(pre), w));
    }
    return ag::softmax_rows(ag::concat_cols(scores));
  }

  ag::Var<S> quantize_channelwise(const std::vector<ag::Var<S>>& inputs, bool trainable = true) const {
    if (inputs.size() < 2) throw Error(Errc::SingleChannel, "channel-wise quantization needs at least two channels");
    ag::Var<S> weights = channel_attention(inputs, trainable);
    std::vector<ag::Var<S>> weighted;
    for (std::size_t c = 0; c < inputs.size(); ++c) {
      const Linear<S>& quant = channel_[cfg_.share_channel_quantizer ? 0 : c];
      weighted.push_back(ag::mul(quant(inputs[c], trainable), ag::slice_cols(weights, c, c + 1)));
    }
    return joint_(ag::concat_cols(weighted), trainable);
  }

 private:
  void check_inputs(const std::vector<ag::Var<S>>& inputs) const {
    if (inputs.size() != cfg_.channels) {
      throw Error(Errc::DimensionMismatch, "quantizer built for " + std::to_string(cfg_.channels) +
                                               " channels, got " + std::to_string(inputs.size()));
    }
    for (const auto& x : inputs)
      if (x.cols() != 3 * cfg_.bins)
        throw Error(Errc::DimensionMismatch, "quantizer input " + shape_str(x.value().shape()));
  }

  // Amplitude blocks of every channel, followed by the phase blocks when
  // with_phase is set.
  std::vector<ag::Var<S>> amplitude_parts(const std::vector<ag::Var<S>>& inputs, bool with_phase) const {
    const std::size_t F = cfg_.bins;
    std::vector<ag::Var<S>> parts;
    for (const auto& x : inputs) parts.push_back(ag::slice_cols(x, 0, F));
    if (with_phase)
      for (const auto& x : inputs) parts.push_back(ag::slice_cols(x, F, 3 * F));
    return parts;
  }

  QuantizerConfig cfg_;
  Linear<S> joint_, amp_, phase_;
  std::vector<Linear<S>> channel_;
  Parameter<S>* att_w_ = nullptr;
  Parameter<S>* att_u_ = nullptr;
  Parameter<S>* att_h_ = nullptr;
  Parameter<S>* att_b_ = nullptr;
};

}  // namespace mcw2v
