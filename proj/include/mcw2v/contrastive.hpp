#pragma once

// Time masking, distractor sampling and the cosine-similarity contrastive
// loss used for self-supervised pre-training.

#include <algorithm>
#include <cmath>
#include <vector>

#include "mcw2v/autograd.hpp"

namespace mcw2v {

struct MaskSpec {
  std::vector<std::size_t> masked;  // sorted, unique, in [0, frames)
  std::size_t frames = 0;
  std::size_t span_length = 10;
  double target_ratio = 0.5;

  double coverage() const { return frames ? static_cast<double>(masked.size()) / frames : 0.0; }
};

// Draws uniform span starts and marks span_length frames (clipped at the end)
// until at least target_ratio of the frames are covered.
inline MaskSpec sample_mask(std::size_t frames, std::uint64_t seed, std::size_t span_length = 10,
                            double target_ratio = 0.5) {
  MaskSpec spec;
  spec.frames = frames;
  spec.span_length = span_length;
  spec.target_ratio = target_ratio;
  if (frames == 0) return spec;
  std::vector<char> hit(frames, 0);
  std::size_t covered = 0;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> start(0, frames - 1);
  const double need = target_ratio * static_cast<double>(frames);
  while (static_cast<double>(covered) < need || covered == 0) {
    const std::size_t s = start(rng);
    for (std::size_t t = s; t < std::min(frames, s + std::max<std::size_t>(span_length, 1)); ++t) {
      if (!hit[t]) {
        hit[t] = 1;
        ++covered;
      }
    }
  }
  for (std::size_t t = 0; t < frames; ++t)
    if (hit[t]) spec.masked.push_back(t);
  return spec;
}

// For every masked position i (index into mask.masked), up to K positions
// drawn uniformly without replacement from the other masked positions.
// Returned indices refer to positions within mask.masked.
inline std::vector<std::vector<std::size_t>> sample_distractors(const MaskSpec& mask, std::size_t k,
                                                                std::uint64_t seed) {
  const std::size_t m = mask.masked.size();
  const std::size_t count = m == 0 ? 0 : std::min(k, m - 1);
  std::vector<std::vector<std::size_t>> out(m);
  Rng rng(seed);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < m; ++i) {
    pool.clear();
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) pool.push_back(j);
    // Partial Fisher-Yates: the first `count` entries are a uniform sample.
    for (std::size_t j = 0; j < count; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
      std::swap(pool[j], pool[pick(rng)]);
    }
    out[i].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
  }
  return out;
}

inline constexpr double kCosineEps = 1e-8;

// Mean over rows t of
//   -log( exp(sim(f_t, q_t)) / sum_{c in {t} u D_t} exp(sim(f_t, q_c)) )
// with sim the cosine similarity a.b / (|a||b| + 1e-8). f and q are [M x D];
// distractors[t] lists row indices of q. No temperature.
template <typename S>
ag::Var<S> contrastive_loss(ag::Var<S> f, ag::Var<S> q, const std::vector<std::vector<std::size_t>>& distractors) {
  const Tensor<S>& fv = f.value();
  const Tensor<S>& qv = q.value();
  const std::size_t m = fv.rows(), d = fv.cols();
  if (m == 0) throw Error(Errc::EmptyMask, "no masked frames");
  if (qv.rows() != m || qv.cols() != d || distractors.size() != m) {
    throw Error(Errc::ShapeMismatch, "contrastive_loss: f " + shape_str(fv.shape()) + ", q " + shape_str(qv.shape()) +
                                         ", " + std::to_string(distractors.size()) + " distractor lists");
  }
  std::vector<S> fn(m), qn(m);
  for (std::size_t i = 0; i < m; ++i) {
    S a = S(0), b = S(0);
    for (std::size_t j = 0; j < d; ++j) {
      a += fv(i, j) * fv(i, j);
      b += qv(i, j) * qv(i, j);
    }
    fn[i] = std::sqrt(a);
    qn[i] = std::sqrt(b);
  }
  auto dot = [&](std::size_t i, std::size_t c) {
    S acc = S(0);
    for (std::size_t j = 0; j < d; ++j) acc += fv(i, j) * qv(c, j);
    return acc;
  };

  // Candidate list per row: the target first, then its distractors.
  std::vector<std::vector<std::size_t>> cand(m);
  std::vector<std::vector<S>> prob(m);
  S total = S(0);
  for (std::size_t i = 0; i < m; ++i) {
    cand[i].push_back(i);
    for (std::size_t c : distractors[i]) {
      if (c >= m) throw Error(Errc::ShapeMismatch, "distractor index out of range");
      cand[i].push_back(c);
    }
    std::vector<S> sims(cand[i].size());
    for (std::size_t k = 0; k < cand[i].size(); ++k) {
      const std::size_t c = cand[i][k];
      sims[k] = dot(i, c) / (fn[i] * qn[c] + static_cast<S>(kCosineEps));
    }
    const S mx = *std::max_element(sims.begin(), sims.end());
    S acc = S(0);
    for (S s : sims) acc += std::exp(s - mx);
    const S lse = mx + std::log(acc);
    total += lse - sims[0];
    prob[i].resize(sims.size());
    for (std::size_t k = 0; k < sims.size(); ++k) prob[i][k] = std::exp(sims[k] - lse);
  }
  const S inv_m = S(1) / static_cast<S>(m);

  const std::size_t fi = f.id, qi = q.id;
  return f.graph->record(
      Tensor<S>::scalar(total * inv_m), {f, q},
      [fi, qi, m, d, inv_m, fn = std::move(fn), qn = std::move(qn), cand = std::move(cand),
       prob = std::move(prob)](ag::Graph<S>& g, std::size_t self) {
        const S up = g.grad(self)[0] * inv_m;
        const Tensor<S>& fv = g.value(fi);
        const Tensor<S>& qv = g.value(qi);
        const bool need_f = g.requires_grad({&g, fi});
        const bool need_q = g.requires_grad({&g, qi});
        Tensor<S>* gf = need_f ? &g.grad_acc(fi) : nullptr;
        Tensor<S>* gq = need_q ? &g.grad_acc(qi) : nullptr;
        const S eps = static_cast<S>(kCosineEps);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t k = 0; k < cand[i].size(); ++k) {
            const std::size_t c = cand[i][k];
            // d loss_i / d sim_ik
            const S w = up * (prob[i][k] - (k == 0 ? S(1) : S(0)));
            if (w == S(0)) continue;
            S ab = S(0);
            for (std::size_t j = 0; j < d; ++j) ab += fv(i, j) * qv(c, j);
            const S den = fn[i] * qn[c] + eps;
            // d sim / d a = b / den - ab * |b| * (a / |a|) / den^2, symmetric for b.
            if (gf) {
              const S coef = fn[i] > S(0) ? ab * qn[c] / (fn[i] * den * den) : S(0);
              for (std::size_t j = 0; j < d; ++j) (*gf)(i, j) += w * (qv(c, j) / den - coef * fv(i, j));
            }
            if (gq) {
              const S coef = qn[c] > S(0) ? ab * fn[i] / (qn[c] * den * den) : S(0);
              for (std::size_t j = 0; j < d; ++j) (*gq)(c, j) += w * (fv(i, j) / den - coef * qv(c, j));
            }
          }
        }
      });
}

}  // namespace mcw2v
