#pragma once

// Finite-difference checks of every trainable block at reduced dimensions.
// Block outputs are reduced to a scalar through a fixed random projection, so
// that no direction of the output gradient is trivially zero.

#include <functional>
#include <string>
#include <vector>

#include "mcw2v/contrastive.hpp"
#include "mcw2v/encoder.hpp"
#include "mcw2v/gradcheck.hpp"
#include "mcw2v/quantizer.hpp"
#include "mcw2v/transducer.hpp"

namespace mcw2v {

struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult()> run;
};

inline constexpr double kGradCheckTolerance = 1e-4;

namespace detail {

inline EncoderConfig tiny_encoder(std::size_t input_dim) {
  EncoderConfig c;
  c.layers = 2;
  c.heads = 2;
  c.head_dim = 4;
  c.hidden = 8;
  c.ffn_dim = 12;
  c.conv_kernel = 3;
  c.input_dim = input_dim;
  c.rel_pos_dim = 4;
  return c;
}

inline QuantizerConfig tiny_quantizer(QuantizerMethod m) {
  QuantizerConfig q;
  q.method = m;
  q.target_dim = 6;
  q.bins = 4;
  q.channels = 2;
  q.attention_dim = 5;
  return q;
}

inline TransducerConfig tiny_transducer() {
  TransducerConfig t;
  t.vocab_size = 4;
  t.encoder_dim = 8;
  t.label_hidden = 6;
  t.proj_dim = 7;
  t.joint_dim = 5;
  return t;
}

// sum(x * w) for a fixed weight tensor shaped like x.
inline ag::Var<double> project(ag::Var<double> x, const Tensor<double>& w) {
  return ag::sum(ag::mul(x, x.graph->constant(w)));
}

inline std::vector<ag::Var<double>> constants(ag::Graph<double>& g, const std::vector<Tensor<double>>& ts) {
  std::vector<ag::Var<double>> out;
  for (const auto& t : ts) out.push_back(g.constant(t));
  return out;
}

inline std::vector<Tensor<double>> random_channels(std::size_t channels, std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<Tensor<double>> out;
  for (std::size_t c = 0; c < channels; ++c) out.push_back(init::normal<double>({rows, cols}, 1.0, rng));
  return out;
}

}  // namespace detail

inline std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed = 7) {
  using detail::project;
  std::vector<GradCheckCase> cases;
  constexpr std::size_t T = 5;

  cases.push_back({"conformer", [=] {
                     Rng rng(seed);
                     ParamStore<double> store;
                     const EncoderConfig cfg = detail::tiny_encoder(8);
                     ConformerBlock<double> block(store, "block", cfg, rng);
                     const Tensor<double> x = init::normal<double>({T, cfg.hidden}, 1.0, rng);
                     const Tensor<double> w = init::normal<double>({T, cfg.hidden}, 1.0, rng);
                     return finite_diff_check(store, [&](ag::Graph<double>& g) { return project(block(g.constant(x)), w); });
                   }});

  cases.push_back({"cross_attention", [=] {
                     Rng rng(seed + 1);
                     ParamStore<double> store;
                     const EncoderConfig cfg = detail::tiny_encoder(8);
                     CrossChannelAttention<double> cross(store, "cross", cfg, rng);
                     const auto xs = detail::random_channels(3, T, cfg.hidden, rng);
                     const auto ws = detail::random_channels(3, T, cfg.hidden, rng);
                     return finite_diff_check(store, [&](ag::Graph<double>& g) {
                       const auto out = cross(detail::constants(g, xs));
                       std::vector<ag::Var<double>> terms;
                       for (std::size_t c = 0; c < out.size(); ++c) terms.push_back(project(out[c], ws[c]));
                       return ag::sum(ag::concat_cols(terms));
                     });
                   }});

  const std::pair<const char*, QuantizerMethod> methods[] = {{"quantizer_joint", QuantizerMethod::Joint},
                                                             {"quantizer_feature", QuantizerMethod::Feature},
                                                             {"quantizer_channel", QuantizerMethod::Channel}};
  for (const auto& [name, method] : methods) {
    cases.push_back({name, [=, method = method] {
                       Rng rng(seed + 2 + static_cast<std::uint64_t>(method));
                       ParamStore<double> store;
                       const QuantizerConfig cfg = detail::tiny_quantizer(method);
                       QuantizerBank<double> bank(store, cfg, rng);
                       const auto xs = detail::random_channels(cfg.channels, T, 3 * cfg.bins, rng);
                       const Tensor<double> w = init::normal<double>({T, cfg.target_dim}, 1.0, rng);
                       return finite_diff_check(store,
                                                [&](ag::Graph<double>& g) { return project(bank(detail::constants(g, xs)), w); });
                     }});
  }

  cases.push_back({"channel_attention", [=] {
                     Rng rng(seed + 6);
                     ParamStore<double> store;
                     QuantizerConfig cfg = detail::tiny_quantizer(QuantizerMethod::Channel);
                     cfg.channels = 3;
                     QuantizerBank<double> bank(store, cfg, rng);
                     const auto xs = detail::random_channels(cfg.channels, T, 3 * cfg.bins, rng);
                     const Tensor<double> w = init::normal<double>({T, cfg.channels}, 1.0, rng);
                     return finite_diff_check(store, [&](ag::Graph<double>& g) {
                       return project(bank.channel_attention(detail::constants(g, xs)), w);
                     });
                   }});

  cases.push_back({"joint", [=] {
                     Rng rng(seed + 7);
                     ParamStore<double> store;
                     const TransducerConfig cfg = detail::tiny_transducer();
                     JointNetwork<double> joint(store, cfg, rng);
                     const Tensor<double> f = init::normal<double>({3, cfg.encoder_dim}, 1.0, rng);
                     const Tensor<double> p = init::normal<double>({3, cfg.label_hidden}, 1.0, rng);
                     const Tensor<double> w = init::normal<double>({9, cfg.vocab_size + 1}, 1.0, rng);
                     return finite_diff_check(
                         store, [&](ag::Graph<double>& g) { return project(joint(g.constant(f), g.constant(p)), w); });
                   }});

  cases.push_back({"label_encoder", [=] {
                     Rng rng(seed + 8);
                     ParamStore<double> store;
                     const TransducerConfig cfg = detail::tiny_transducer();
                     LabelEncoder<double> label(store, cfg, rng);
                     const TokenSequence y{2, 0, 3, 3};
                     const Tensor<double> w = init::normal<double>({y.size() + 1, cfg.label_hidden}, 1.0, rng);
                     return finite_diff_check(store, [&](ag::Graph<double>& g) { return project(label.encode(g, y), w); });
                   }});

  cases.push_back({"contrastive", [=] {
                     Rng rng(seed + 9);
                     ParamStore<double> store;
                     constexpr std::size_t M = 6, D = 5;
                     Parameter<double>& f = store.add("f", init::normal<double>({M, D}, 1.0, rng));
                     Parameter<double>& q = store.add("q", init::normal<double>({M, D}, 1.0, rng));
                     MaskSpec mask;
                     mask.frames = M;
                     for (std::size_t i = 0; i < M; ++i) mask.masked.push_back(i);
                     const auto distractors = sample_distractors(mask, 3, seed);
                     return finite_diff_check(store, [&](ag::Graph<double>& g) {
                       return contrastive_loss(g.param(f), g.param(q), distractors);
                     });
                   }});

  cases.push_back({"rnnt", [=] {
                     Rng rng(seed + 10);
                     ParamStore<double> store;
                     constexpr std::size_t frames = 4, V = 3;
                     const TokenSequence y{1, 0, 2};
                     Parameter<double>& logits = store.add("logits", init::normal<double>({frames * (y.size() + 1), V + 1}, 1.0, rng));
                     return finite_diff_check(store, [&](ag::Graph<double>& g) {
                       return rnnt_loss(ag::log_softmax_rows(g.param(logits)), frames, y);
                     });
                   }});

  cases.push_back({"encoder", [=] {
                     Rng rng(seed + 11);
                     ParamStore<double> store;
                     const EncoderConfig cfg = detail::tiny_encoder(9);
                     MultiChannelEncoder<double> encoder(store, cfg, rng);
                     const auto xs = detail::random_channels(2, T, cfg.input_dim, rng);
                     const Tensor<double> w = init::normal<double>({T, cfg.hidden}, 1.0, rng);
                     const std::vector<std::size_t> masked{1, 2};
                     return finite_diff_check(store, [&](ag::Graph<double>& g) {
                       return project(encoder.encode(detail::constants(g, xs), masked).fused, w);
                     });
                   }});

  return cases;
}

}  // namespace mcw2v
