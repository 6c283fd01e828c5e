#pragma once

// Multi-channel Conformer audio encoder: a shared input projection, then per
// layer one channel-wise Conformer block (weights shared by all channels)
// followed by cross-channel attention, and a final average over channels.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mcw2v/layers.hpp"

namespace mcw2v {

struct EncoderConfig {
  std::size_t layers = 8;
  std::size_t heads = 8;
  std::size_t head_dim = 32;
  std::size_t hidden = 256;
  std::size_t ffn_dim = 512;
  std::size_t conv_kernel = 7;
  std::size_t input_dim = 771;
  std::size_t rel_pos_dim = 32;
  double dropout = 0.0;

  void validate() const {
    if (heads * head_dim != hidden) {
      throw Error(Errc::ConfigError, "heads x head_dim must equal hidden (" + std::to_string(heads) + " x " +
                                         std::to_string(head_dim) + " != " + std::to_string(hidden) + ")");
    }
    if (conv_kernel % 2 == 0) throw Error(Errc::ConfigError, "conv_kernel must be odd");
    if (layers == 0) throw Error(Errc::ConfigError, "encoder needs at least one layer");
  }
};

// Sinusoidal encodings of relative offsets -(n-1) .. n-1, one per row.
template <typename S>
Tensor<S> relative_sinusoids(std::size_t n, std::size_t dim) {
  Tensor<S> p({2 * n - 1, dim});
  for (std::size_t row = 0; row < 2 * n - 1; ++row) {
    const double offset = static_cast<double>(row) - static_cast<double>(n - 1);
    for (std::size_t m = 0; m < dim; m += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(m) / static_cast<double>(dim));
      p(row, m) = static_cast<S>(std::sin(offset * freq));
      if (m + 1 < dim) p(row, m + 1) = static_cast<S>(std::cos(offset * freq));
    }
  }
  return p;
}

template <typename S>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& store, const std::string& name, const EncoderConfig& cfg, Rng& rng,
                     bool relative_bias)
      : heads_(cfg.heads), head_dim_(cfg.head_dim), rel_dim_(cfg.rel_pos_dim) {
    const std::size_t inner = cfg.heads * cfg.head_dim;
    q_ = Linear<S>(store, name + ".q", cfg.hidden, inner, rng);
    k_ = Linear<S>(store, name + ".k", cfg.hidden, inner, rng);
    v_ = Linear<S>(store, name + ".v", cfg.hidden, inner, rng);
    o_ = Linear<S>(store, name + ".o", inner, cfg.hidden, rng);
    if (relative_bias) rel_ = &store.add(name + ".rel_pos", init::normal<S>({cfg.rel_pos_dim, cfg.heads}, 0.02, rng));
  }

  // Queries from `query`, keys and values from `memory`; both [T x hidden].
  ag::Var<S> operator()(ag::Var<S> query, ag::Var<S> memory) const {
    auto& g = *query.graph;
    const std::size_t steps = query.rows();
    ag::Var<S> q = q_(query), k = k_(memory), v = v_(memory);
    std::vector<ag::Var<S>> bias_rows;
    if (rel_) {
      ag::Var<S> table = ag::matmul(g.constant(relative_sinusoids<S>(steps, rel_dim_)), g.param(*rel_));
      ag::Var<S> per_head = ag::transpose(table);  // [heads x (2T - 1)]
      for (std::size_t h = 0; h < heads_; ++h) bias_rows.push_back(ag::slice_rows(per_head, h, h + 1));
    }
    const S scale = S(1) / std::sqrt(static_cast<S>(head_dim_));
    std::vector<ag::Var<S>> outs;
    outs.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t lo = h * head_dim_, hi = lo + head_dim_;
      ag::Var<S> scores = ag::scale(ag::matmul(ag::slice_cols(q, lo, hi), ag::transpose(ag::slice_cols(k, lo, hi))), scale);
      if (rel_) scores = ag::add(scores, ag::toeplitz(bias_rows[h], steps));
      outs.push_back(ag::matmul(ag::softmax_rows(scores), ag::slice_cols(v, lo, hi)));
    }
    return o_(heads_ == 1 ? outs[0] : ag::concat_cols(outs));
  }

 private:
  Linear<S> q_, k_, v_, o_;
  Parameter<S>* rel_ = nullptr;
  std::size_t heads_ = 0;
  std::size_t head_dim_ = 0;
  std::size_t rel_dim_ = 0;
};

// Macaron Conformer block: half-step FFN, self-attention, convolution module,
// half-step FFN, final layer norm; residual connections throughout.
template <typename S>
class ConformerBlock {
 public:
  ConformerBlock() = default;
  ConformerBlock(ParamStore<S>& store, const std::string& name, const EncoderConfig& cfg, Rng& rng)
      : dropout_(cfg.dropout) {
    const std::size_t h = cfg.hidden;
    ff1_norm_ = LayerNorm<S>(store, name + ".ff1.norm", h);
    ff1_in_ = Linear<S>(store, name + ".ff1.in", h, cfg.ffn_dim, rng);
    ff1_out_ = Linear<S>(store, name + ".ff1.out", cfg.ffn_dim, h, rng);
    att_norm_ = LayerNorm<S>(store, name + ".att.norm", h);
    att_ = MultiHeadAttention<S>(store, name + ".att", cfg, rng, true);
    conv_norm_ = LayerNorm<S>(store, name + ".conv.norm", h);
    conv_pw1_ = Linear<S>(store, name + ".conv.pw1", h, 2 * h, rng);
    conv_dw_ = &store.add(name + ".conv.dw.w",
                          init::uniform<S>({cfg.conv_kernel, h}, 1.0 / std::sqrt(static_cast<double>(cfg.conv_kernel)), rng));
    conv_dw_b_ = &store.add(name + ".conv.dw.b", Tensor<S>({1, h}));
    conv_mid_norm_ = LayerNorm<S>(store, name + ".conv.mid_norm", h);
    conv_pw2_ = Linear<S>(store, name + ".conv.pw2", h, h, rng);
    ff2_norm_ = LayerNorm<S>(store, name + ".ff2.norm", h);
    ff2_in_ = Linear<S>(store, name + ".ff2.in", h, cfg.ffn_dim, rng);
    ff2_out_ = Linear<S>(store, name + ".ff2.out", cfg.ffn_dim, h, rng);
    out_norm_ = LayerNorm<S>(store, name + ".out_norm", h);
  }

  ag::Var<S> operator()(ag::Var<S> x, std::uint64_t dropout_seed = 0) const {
    auto& g = *x.graph;
    auto drop = [&](ag::Var<S> v, std::uint64_t salt) { return ag::dropout(v, dropout_, dropout_seed * 8 + salt); };

    x = ag::add(x, ag::scale(drop(ff1_out_(ag::swish(ff1_in_(ff1_norm_(x)))), 1), S(0.5)));
    ag::Var<S> a = att_norm_(x);
    x = ag::add(x, drop(att_(a, a), 2));
    ag::Var<S> c = ag::glu(conv_pw1_(conv_norm_(x)));
    c = ag::depthwise_conv1d(c, g.param(*conv_dw_), g.param(*conv_dw_b_));
    c = conv_pw2_(ag::swish(conv_mid_norm_(c)));
    x = ag::add(x, drop(c, 3));
    x = ag::add(x, ag::scale(drop(ff2_out_(ag::swish(ff2_in_(ff2_norm_(x)))), 4), S(0.5)));
    return out_norm_(x);
  }

 private:
  LayerNorm<S> ff1_norm_;
  Linear<S> ff1_in_, ff1_out_;
  LayerNorm<S> att_norm_;
  MultiHeadAttention<S> att_;
  LayerNorm<S> conv_norm_;
  Linear<S> conv_pw1_;
  Parameter<S>* conv_dw_ = nullptr;
  Parameter<S>* conv_dw_b_ = nullptr;
  LayerNorm<S> conv_mid_norm_;
  Linear<S> conv_pw2_;
  LayerNorm<S> ff2_norm_;
  Linear<S> ff2_in_, ff2_out_;
  LayerNorm<S> out_norm_;
  double dropout_ = 0.0;
};

// Channel i queries its own stream; keys and values come from the mean of
// all other channels' streams. Output is residual-added per channel.
template <typename S>
class CrossChannelAttention {
 public:
  CrossChannelAttention() = default;
  CrossChannelAttention(ParamStore<S>& store, const std::string& name, const EncoderConfig& cfg, Rng& rng) {
    query_norm_ = LayerNorm<S>(store, name + ".q_norm", cfg.hidden);
    memory_norm_ = LayerNorm<S>(store, name + ".kv_norm", cfg.hidden);
    att_ = MultiHeadAttention<S>(store, name + ".att", cfg, rng, false);
  }

  std::vector<ag::Var<S>> operator()(const std::vector<ag::Var<S>>& streams) const {
    if (streams.size() < 2) throw Error(Errc::SingleChannel, "cross-channel attention needs at least two channels");
    std::vector<ag::Var<S>> out;
    out.reserve(streams.size());
    for (std::size_t i = 0; i < streams.size(); ++i) {
      std::vector<ag::Var<S>> others;
      for (std::size_t j = 0; j < streams.size(); ++j)
        if (j != i) others.push_back(streams[j]);
      ag::Var<S> memory = ag::average(others);
      out.push_back(ag::add(streams[i], att_(query_norm_(streams[i]), memory_norm_(memory))));
    }
    return out;
  }

 private:
  LayerNorm<S> query_norm_, memory_norm_;
  MultiHeadAttention<S> att_;
};

template <typename S>
struct EncoderOutput {
  ag::Var<S> fused;                     // [T x hidden]
  std::vector<ag::Var<S>> per_channel;  // C x [T x hidden]
};

template <typename S>
class MultiChannelEncoder {
 public:
  MultiChannelEncoder(ParamStore<S>& store, const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "encoder")
      : cfg_(cfg) {
    cfg.validate();
    input_ = Linear<S>(store, prefix + ".input", cfg.input_dim, cfg.hidden, rng);
    mask_embedding_ = &store.add(prefix + ".mask_emb", init::uniform<S>({1, cfg.hidden}, 1.0, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      blocks_.emplace_back(store, prefix + ".block" + std::to_string(l), cfg, rng);
      cross_.emplace_back(store, prefix + ".cross" + std::to_string(l), cfg, rng);
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  const ConformerBlock<S>& block(std::size_t l) const { return blocks_.at(l); }
  const CrossChannelAttention<S>& cross(std::size_t l) const { return cross_.at(l); }

  // Shared projection of every channel's [T x input_dim] features; rows in
  // `masked` are replaced by the learned mask embedding in every channel.
  std::vector<ag::Var<S>> input_proj(const std::vector<ag::Var<S>>& inputs,
                                     std::span<const std::size_t> masked = {}) const {
    if (inputs.empty()) throw Error(Errc::DimensionMismatch, "no input channels");
    const std::size_t steps = inputs[0].rows();
    std::vector<ag::Var<S>> out;
    for (const auto& x : inputs) {
      if (x.rows() != steps) throw Error(Errc::DimensionMismatch, "channels differ in frame count");
      out.push_back(input_(x));
    }
    if (masked.empty()) return out;

    auto& g = *inputs[0].graph;
    Tensor<S> keep({steps, 1}, S(1));
    Tensor<S> hit({steps, 1});
    for (std::size_t t : masked) {
      if (t >= steps) throw Error(Errc::DimensionMismatch, "masked frame " + std::to_string(t) + " out of range");
      keep[t] = S(0);
      hit[t] = S(1);
    }
    ag::Var<S> keep_v = g.constant(std::move(keep));
    ag::Var<S> fill = ag::matmul(g.constant(std::move(hit)), g.param(*mask_embedding_));
    for (auto& x : out) x = ag::add(ag::mul(x, keep_v), fill);
    return out;
  }

  EncoderOutput<S> encode(const std::vector<ag::Var<S>>& inputs, std::span<const std::size_t> masked = {},
                          std::uint64_t dropout_seed = 0) const {
    std::vector<ag::Var<S>> streams = input_proj(inputs, masked);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      for (std::size_t c = 0; c < streams.size(); ++c)
        streams[c] = blocks_[l](streams[c], dropout_seed * 1024 + l * 16 + c);
      streams = cross_[l](streams);
    }
    return {ag::average(streams), streams};
  }

 private:
  EncoderConfig cfg_;
  Linear<S> input_;
  Parameter<S>* mask_embedding_ = nullptr;
  std::vector<ConformerBlock<S>> blocks_;
  std::vector<CrossChannelAttention<S>> cross_;
};

}  // namespace mcw2v
