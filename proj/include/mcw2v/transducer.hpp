#pragma once

// Neural transducer pieces: LSTM label encoder, joint network, the exact
// RNN-T loss by forward-backward over the T x (U+1) alignment lattice, a
// brute-force alignment enumerator used as its oracle, and greedy decoding.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mcw2v/layers.hpp"

namespace mcw2v {

using TokenSequence = std::vector<std::size_t>;

namespace detail {

template <typename S>
S log_add(S a, S b) {
  if (a == -std::numeric_limits<S>::infinity()) return b;
  if (b == -std::numeric_limits<S>::infinity()) return a;
  const S m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline void check_tokens(const TokenSequence& y, std::size_t vocab) {
  for (std::size_t tok : y)
    if (tok >= vocab)
      throw Error(Errc::TokenOutOfRange, "token " + std::to_string(tok) + " outside vocabulary of " + std::to_string(vocab));
}

}  // namespace detail

// Log-probability lattice laid out as [(T * (U+1)) x (V+1)], row t * (U+1) + u.
// The blank symbol is the last column.
template <typename S>
struct RnntResult {
  S loss = S(0);
  Tensor<S> grad;  // d loss / d log_probs, same layout as the lattice
};

template <typename S>
RnntResult<S> rnnt_forward_backward(const Tensor<S>& log_probs, std::size_t frames, const TokenSequence& y,
                                    bool with_grad = true) {
  const std::size_t U = y.size(), U1 = U + 1;
  if (frames == 0) throw Error(Errc::ImpossibleAlignment, "no frames to align " + std::to_string(U) + " tokens");
  if (log_probs.rank() != 2 || log_probs.rows() != frames * U1) {
    throw Error(Errc::LatticeMismatch, "lattice " + shape_str(log_probs.shape()) + " does not match T=" +
                                           std::to_string(frames) + ", U+1=" + std::to_string(U1));
  }
  const std::size_t V1 = log_probs.cols();
  if (V1 < 2) throw Error(Errc::LatticeMismatch, "lattice needs at least one label and the blank");
  const std::size_t blank = V1 - 1;
  detail::check_tokens(y, blank);
  const S ninf = -std::numeric_limits<S>::infinity();
  auto lp = [&](std::size_t t, std::size_t u, std::size_t k) { return log_probs(t * U1 + u, k); };

  std::vector<S> alpha(frames * U1, ninf), beta(frames * U1, ninf);
  auto A = [&](std::size_t t, std::size_t u) -> S& { return alpha[t * U1 + u]; };
  auto B = [&](std::size_t t, std::size_t u) -> S& { return beta[t * U1 + u]; };

  A(0, 0) = S(0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      if (t == 0 && u == 0) continue;
      S acc = ninf;
      if (t > 0) acc = detail::log_add(acc, A(t - 1, u) + lp(t - 1, u, blank));
      if (u > 0) acc = detail::log_add(acc, A(t, u - 1) + lp(t, u - 1, y[u - 1]));
      A(t, u) = acc;
    }
  }
  const S log_p = A(frames - 1, U) + lp(frames - 1, U, blank);

  RnntResult<S> r;
  r.loss = -log_p;
  if (!with_grad) return r;

  B(frames - 1, U) = lp(frames - 1, U, blank);
  for (std::size_t t = frames; t-- > 0;) {
    for (std::size_t u = U1; u-- > 0;) {
      if (t == frames - 1 && u == U) continue;
      S acc = ninf;
      if (t + 1 < frames) acc = detail::log_add(acc, B(t + 1, u) + lp(t, u, blank));
      if (u < U) acc = detail::log_add(acc, B(t, u + 1) + lp(t, u, y[u]));
      B(t, u) = acc;
    }
  }

  r.grad = Tensor<S>(log_probs.shape());
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      const S a = A(t, u);
      if (a == ninf) continue;
      if (t + 1 < frames) {
        r.grad(t * U1 + u, blank) = -std::exp(a + lp(t, u, blank) + B(t + 1, u) - log_p);
      } else if (u == U) {
        r.grad(t * U1 + u, blank) = -std::exp(a + lp(t, u, blank) - log_p);
      }
      if (u < U) r.grad(t * U1 + u, y[u]) = -std::exp(a + lp(t, u, y[u]) + B(t, u + 1) - log_p);
    }
  }
  return r;
}

// -log P(y | x) as a graph node over the lattice log-probabilities.
template <typename S>
ag::Var<S> rnnt_loss(ag::Var<S> log_probs, std::size_t frames, const TokenSequence& y) {
  auto& g = *log_probs.graph;
  RnntResult<S> r = rnnt_forward_backward(log_probs.value(), frames, y, g.grad_enabled());
  const std::size_t li = log_probs.id;
  return g.record(Tensor<S>::scalar(r.loss), {log_probs},
                  [li, grad = std::move(r.grad)](ag::Graph<S>& gr, std::size_t self) {
                    const S up = gr.grad(self)[0];
                    Tensor<S>& gl = gr.grad_acc(li);
                    for (std::size_t i = 0; i < grad.size(); ++i) gl[i] += up * grad[i];
                  });
}

struct BruteForceResult {
  double loss = 0.0;
  std::size_t paths = 0;
};

inline constexpr std::size_t kBruteForceLimit = 12;

// Enumerates every alignment: interleavings of T-1 blank moves and U label
// moves from (0, 0) to (T-1, U), each closed by the final blank.
template <typename S>
BruteForceResult rnnt_loss_bruteforce(const Tensor<S>& log_probs, std::size_t frames, const TokenSequence& y) {
  const std::size_t U = y.size(), U1 = U + 1;
  if (frames == 0) throw Error(Errc::ImpossibleAlignment, "no frames");
  if (frames + U > kBruteForceLimit) {
    throw Error(Errc::TooLarge, "T+U=" + std::to_string(frames + U) + " exceeds " + std::to_string(kBruteForceLimit));
  }
  if (log_probs.rows() != frames * U1) throw Error(Errc::LatticeMismatch, "lattice " + shape_str(log_probs.shape()));
  const std::size_t blank = log_probs.cols() - 1;
  detail::check_tokens(y, blank);

  BruteForceResult res;
  long double total = 0.0L;
  std::function<void(std::size_t, std::size_t, long double)> walk = [&](std::size_t t, std::size_t u, long double lp) {
    if (t == frames - 1 && u == U) {
      total += std::exp(lp + static_cast<long double>(log_probs(t * U1 + u, blank)));
      ++res.paths;
      return;
    }
    if (t + 1 < frames) walk(t + 1, u, lp + static_cast<long double>(log_probs(t * U1 + u, blank)));
    if (u < U) walk(t, u + 1, lp + static_cast<long double>(log_probs(t * U1 + u, y[u])));
  };
  walk(0, 0, 0.0L);
  res.loss = static_cast<double>(-std::log(total));
  return res;
}

struct TransducerConfig {
  std::size_t vocab_size = 16;  // V, blank excluded; blank id = V
  std::size_t encoder_dim = 256;
  std::size_t label_hidden = 256;
  std::size_t proj_dim = 512;
  std::size_t joint_dim = 256;
  std::size_t max_symbols_per_frame = 10;

  std::size_t blank() const { return vocab_size; }
};

template <typename S>
struct LabelState {
  ag::LstmState<S> lstm;
  ag::Var<S> output() const { return lstm.h; }
};

// Unidirectional LSTM over [SOS, y_1, ..., y_U], SOS being the blank id.
// Row u of the output is the state after consuming y_1..y_u.
template <typename S>
class LabelEncoder {
 public:
  LabelEncoder(ParamStore<S>& store, const TransducerConfig& cfg, Rng& rng, const std::string& prefix = "label")
      : cfg_(cfg) {
    const std::size_t H = cfg.label_hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(H));
    embed_ = &store.add(prefix + ".embed", init::normal<S>({cfg.vocab_size + 1, H}, 1.0, rng));
    w_x_ = &store.add(prefix + ".lstm.w_x", init::uniform<S>({H, 4 * H}, bound, rng));
    w_h_ = &store.add(prefix + ".lstm.w_h", init::uniform<S>({H, 4 * H}, bound, rng));
    Tensor<S> b = init::uniform<S>({1, 4 * H}, bound, rng);
    for (std::size_t j = H; j < 2 * H; ++j) b[j] += S(1);  // forget gate
    b_ = &store.add(prefix + ".lstm.b", std::move(b));
  }

  ag::Var<S> encode(ag::Graph<S>& g, const TokenSequence& y) const {
    detail::check_tokens(y, cfg_.vocab_size);
    std::vector<std::size_t> ids{cfg_.blank()};
    ids.insert(ids.end(), y.begin(), y.end());
    ag::Var<S> xp = ag::add(ag::matmul(ag::embedding(g.param(*embed_), ids), g.param(*w_x_)), g.param(*b_));
    ag::Var<S> w_h = g.param(*w_h_);
    ag::LstmState<S> state = zero_state(g);
    std::vector<ag::Var<S>> rows;
    for (std::size_t u = 0; u < ids.size(); ++u) {
      state = ag::lstm_step(ag::slice_rows(xp, u, u + 1), state, w_h);
      rows.push_back(state.h);
    }
    return rows.size() == 1 ? rows[0] : ag::concat_rows(rows);
  }

  // Consumes one token (SOS = blank) on top of `prev`.
  LabelState<S> step(ag::Graph<S>& g, std::size_t token, const LabelState<S>* prev) const {
    if (token > cfg_.vocab_size) throw Error(Errc::TokenOutOfRange, "token " + std::to_string(token));
    ag::Var<S> x = ag::add(ag::matmul(ag::embedding(g.param(*embed_), {token}), g.param(*w_x_)), g.param(*b_));
    ag::LstmState<S> state = prev ? prev->lstm : zero_state(g);
    return {ag::lstm_step(x, state, g.param(*w_h_))};
  }

 private:
  ag::LstmState<S> zero_state(ag::Graph<S>& g) const {
    return {g.constant(Tensor<S>({1, cfg_.label_hidden})), g.constant(Tensor<S>({1, cfg_.label_hidden}))};
  }

  TransducerConfig cfg_;
  Parameter<S>* embed_ = nullptr;
  Parameter<S>* w_x_ = nullptr;
  Parameter<S>* w_h_ = nullptr;
  Parameter<S>* b_ = nullptr;
};

// J(t, u) = tanh(W [proj_e(f_t); proj_p(g_u)] + b); logits = O J, returned
// log-softmaxed. W is held as its encoder and label halves.
template <typename S>
class JointNetwork {
 public:
  JointNetwork(ParamStore<S>& store, const TransducerConfig& cfg, Rng& rng, const std::string& prefix = "joint")
      : cfg_(cfg) {
    proj_enc_ = Linear<S>(store, prefix + ".proj_enc", cfg.encoder_dim, cfg.proj_dim, rng);
    proj_label_ = Linear<S>(store, prefix + ".proj_label", cfg.label_hidden, cfg.proj_dim, rng);
    w_enc_ = Linear<S>(store, prefix + ".w_enc", cfg.proj_dim, cfg.joint_dim, rng, false);
    w_label_ = Linear<S>(store, prefix + ".w_label", cfg.proj_dim, cfg.joint_dim, rng);
    out_ = Linear<S>(store, prefix + ".out", cfg.joint_dim, cfg.vocab_size + 1, rng, false);
  }

  // Encoder side W_e proj_e(f): [T x joint_dim].
  ag::Var<S> encoder_side(ag::Var<S> f) const { return w_enc_(proj_enc_(f)); }
  // Label side W_p proj_p(g) + b: [(U+1) x joint_dim].
  ag::Var<S> label_side(ag::Var<S> g) const { return w_label_(proj_label_(g)); }

  // Log-probabilities for every (t, u) pair given precomputed sides.
  ag::Var<S> combine(ag::Var<S> enc_side, ag::Var<S> label_side) const {
    const std::size_t T = enc_side.rows(), U1 = label_side.rows();
    std::vector<std::size_t> ti(T * U1), ui(T * U1);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t u = 0; u < U1; ++u) {
        ti[t * U1 + u] = t;
        ui[t * U1 + u] = u;
      }
    ag::Var<S> e = T == 1 && U1 == 1 ? enc_side : ag::gather_rows(enc_side, std::move(ti));
    ag::Var<S> p = T == 1 && U1 == 1 ? label_side : ag::gather_rows(label_side, std::move(ui));
    return ag::log_softmax_rows(out_(ag::tanh(ag::add(e, p))));
  }

  // TransducerLattice [(T * (U+1)) x (V+1)].
  ag::Var<S> operator()(ag::Var<S> f, ag::Var<S> g) const {
    if (f.cols() != cfg_.encoder_dim || g.cols() != cfg_.label_hidden) {
      throw Error(Errc::ShapeMismatch, "joint inputs " + shape_str(f.value().shape()) + " and " +
                                           shape_str(g.value().shape()));
    }
    return combine(encoder_side(f), label_side(g));
  }

 private:
  TransducerConfig cfg_;
  Linear<S> proj_enc_, proj_label_, w_enc_, w_label_, out_;
};

// Standard transducer greedy search. `best(t)` returns the arg-max symbol at
// frame t for the current label state; `advance(token)` feeds an emitted token
// to the label encoder. At most max_per_frame symbols are emitted per frame.
template <typename BestFn, typename AdvanceFn>
TokenSequence greedy_search(std::size_t frames, std::size_t blank, std::size_t max_per_frame, BestFn&& best,
                            AdvanceFn&& advance) {
  TokenSequence out;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t n = 0; n < max_per_frame; ++n) {
      const std::size_t tok = best(t);
      if (tok == blank) break;
      out.push_back(tok);
      advance(tok);
    }
  }
  return out;
}

}  // namespace mcw2v
