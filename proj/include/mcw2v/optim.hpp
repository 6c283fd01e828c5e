#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "mcw2v/dsp.hpp"
#include "mcw2v/tensor.hpp"

namespace mcw2v {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::size_t warmup_steps = 4000;
  std::size_t model_dim = 256;
  double lr_scale = 1.0;
};

// Transformer schedule: dim^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double noam_lr(std::size_t step, std::size_t model_dim, std::size_t warmup, double scale = 1.0) {
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  return scale / std::sqrt(static_cast<double>(model_dim)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(static_cast<double>(warmup), -1.5));
}

template <typename S>
double global_grad_norm(const ParamStore<S>& store) {
  double sq = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i)
    for (S g : store[i].grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename S>
double clip_gradients(ParamStore<S>& store, double max_norm = 5.0) {
  const double norm = global_grad_norm(store);
  if (!std::isfinite(norm)) throw Error(Errc::NonFiniteGradient, "gradient norm is not finite");
  if (norm > max_norm) {
    const S factor = static_cast<S>(max_norm / norm);
    for (std::size_t i = 0; i < store.size(); ++i)
      for (S& g : store[i].grad.values()) g *= factor;
  }
  return norm;
}

template <typename S>
class Adam {
 public:
  Adam(const ParamStore<S>& store, AdamOptions opts) : opts_(opts) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_.emplace_back(store[i].value.shape());
      v_.emplace_back(store[i].value.shape());
    }
  }

  std::size_t step() const { return step_; }
  const AdamOptions& options() const { return opts_; }
  double current_lr() const { return noam_lr(std::max<std::size_t>(step_, 1), opts_.model_dim, opts_.warmup_steps, opts_.lr_scale); }

  // One bias-corrected Adam update with the scheduled learning rate.
  // Returns the learning rate used.
  double update(ParamStore<S>& store) {
    if (store.size() != m_.size()) throw Error(Errc::ShapeMismatch, "optimizer built for a different store");
    ++step_;
    const double lr = noam_lr(step_, opts_.model_dim, opts_.warmup_steps, opts_.lr_scale);
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      Parameter<S>& p = store[i];
      if (p.grad.shape() != m_[i].shape()) throw Error(Errc::ShapeMismatch, "optimizer state mismatch for " + p.name);
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        const double m = opts_.beta1 * m_[i][j] + (1.0 - opts_.beta1) * g;
        const double v = opts_.beta2 * v_[i][j] + (1.0 - opts_.beta2) * g * g;
        m_[i][j] = m;
        v_[i][j] = v;
        const double mhat = m / c1, vhat = v / c2;
        p.value[j] = static_cast<S>(p.value[j] - lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
    return lr;
  }

 private:
  AdamOptions opts_;
  std::vector<Tensor<double>> m_, v_;
  std::size_t step_ = 0;
};

struct AugmentPolicy {
  std::size_t freq_masks = 2;
  std::size_t max_freq_width = 27;
  std::size_t time_masks = 2;
  std::size_t max_time_width = 20;
};

// Frequency and time masks on the amplitude features, at identical positions
// in every channel. Masked cells take the per-utterance amplitude mean; phase
// features are left alone.
inline FeatureTensor spec_augment(const FeatureTensor& in, const AugmentPolicy& policy, std::uint64_t seed) {
  FeatureTensor out = in;
  if (in.amplitude.empty()) return out;
  double mean = 0.0;
  for (float v : in.amplitude) mean += v;
  const auto fill = static_cast<float>(mean / static_cast<double>(in.amplitude.size()));
  Rng rng(seed);
  auto draw = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  for (std::size_t m = 0; m < policy.freq_masks; ++m) {
    const std::size_t w = draw(0, std::min(policy.max_freq_width, in.bins));
    if (w == 0) continue;
    const std::size_t k0 = draw(0, in.bins - w);
    for (std::size_t c = 0; c < in.channels; ++c)
      for (std::size_t t = 0; t < in.frames; ++t)
        for (std::size_t k = k0; k < k0 + w; ++k) out.amp(c, t, k) = fill;
  }
  for (std::size_t m = 0; m < policy.time_masks; ++m) {
    const std::size_t w = draw(0, std::min(policy.max_time_width, in.frames));
    if (w == 0) continue;
    const std::size_t t0 = draw(0, in.frames - w);
    for (std::size_t c = 0; c < in.channels; ++c)
      for (std::size_t t = t0; t < t0 + w; ++t)
        for (std::size_t k = 0; k < in.bins; ++k) out.amp(c, t, k) = fill;
  }
  return out;
}

// Levenshtein distance between two symbol sequences.
template <typename T>
std::size_t edit_distance(const std::vector<T>& ref, const std::vector<T>& hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

template <typename T>
double edit_distance_rate(const std::vector<T>& ref, const std::vector<T>& hyp) {
  if (ref.empty()) throw Error(Errc::EmptyReference, "error rate needs a non-empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

inline std::vector<char> chars_of(const std::string& s) { return {s.begin(), s.end()}; }

inline std::vector<std::string> words_of(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> w;
  for (std::string tok; is >> tok;) w.push_back(tok);
  return w;
}

inline double cer(const std::string& ref, const std::string& hyp) { return edit_distance_rate(chars_of(ref), chars_of(hyp)); }
inline double wer(const std::string& ref, const std::string& hyp) { return edit_distance_rate(words_of(ref), words_of(hyp)); }

// Relative error-rate reduction (base - new) / base, in percent. A perfect
// baseline yields 0 when the candidate is also perfect and -inf otherwise.
inline double relative_reduction(double base, double candidate) {
  if (base == candidate) return 0.0;
  if (base == 0.0) return -INFINITY;
  return 100.0 * (base - candidate) / base;
}

}  // namespace mcw2v
