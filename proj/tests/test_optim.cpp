#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mcw2v/optim.hpp"

using namespace mcw2v;

TEST(NoamSchedule, ReferenceValues) {
  EXPECT_NEAR(noam_lr(4000, 256, 4000), 9.882e-4, 1e-7);
  EXPECT_NEAR(noam_lr(1, 256, 4000), 2.47e-7, 1e-9);
  EXPECT_NEAR(noam_lr(16000, 256, 4000), 0.0625 / std::sqrt(16000.0), 1e-12);
  EXPECT_DOUBLE_EQ(noam_lr(100, 256, 4000, 0.5), 0.5 * noam_lr(100, 256, 4000));
}

TEST(NoamSchedule, RisesThenDecays) {
  for (std::size_t s = 1; s < 400; ++s) ASSERT_LT(noam_lr(s, 64, 400), noam_lr(s + 1, 64, 400));
  for (std::size_t s = 400; s < 2000; ++s) ASSERT_GT(noam_lr(s, 64, 400), noam_lr(s + 1, 64, 400));
  // Both branches agree at the warmup step.
  EXPECT_NEAR(400 * std::pow(400.0, -1.5), 1.0 / std::sqrt(400.0), 1e-15);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  ParamStore<double> store;
  Parameter<double>& p = store.add("w", Tensor<double>({1, 3}, 1.0));
  AdamOptions o;
  o.model_dim = 256;
  o.warmup_steps = 4000;
  Adam<double> adam(store, o);
  p.grad[0] = 0.3;
  p.grad[1] = -2.0;
  p.grad[2] = 0.0;
  const double lr = adam.update(store);
  EXPECT_DOUBLE_EQ(lr, noam_lr(1, 256, 4000));
  // Bias-corrected m/sqrt(v) = g/|g| on the first step.
  EXPECT_NEAR(p.value[0], 1.0 - lr * 0.3 / (0.3 + 1e-9), 1e-15);
  EXPECT_NEAR(p.value[1], 1.0 + lr * 2.0 / (2.0 + 1e-9), 1e-15);
  EXPECT_DOUBLE_EQ(p.value[2], 1.0);
  EXPECT_EQ(adam.step(), 1u);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  ParamStore<double> store;
  Parameter<double>& p = store.add("w", Tensor<double>({1, 1}, 0.0));
  AdamOptions o;
  Adam<double> adam(store, o);
  p.grad[0] = 1.0;
  const double lr1 = adam.update(store);
  p.grad[0] = -0.5;
  const double lr2 = adam.update(store);
  const double m = 0.9 * 0.1 + 0.1 * -0.5;
  const double v = 0.98 * 0.02 + 0.02 * 0.25;
  const double step2 = lr2 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.98 * 0.98)) + 1e-9);
  EXPECT_NEAR(p.value[0], -lr1 * 1.0 / (1.0 + 1e-9) - step2, 1e-15);
}

TEST(GradientClipping, RescalesToMaxNorm) {
  ParamStore<double> store;
  Parameter<double>& a = store.add("a", Tensor<double>({1, 2}));
  Parameter<double>& b = store.add("b", Tensor<double>({1, 1}));
  a.grad[0] = 3.0;
  a.grad[1] = 4.0;
  b.grad[0] = 12.0;
  EXPECT_DOUBLE_EQ(clip_gradients(store, 5.0), 13.0);
  EXPECT_NEAR(global_grad_norm(store), 5.0, 1e-12);
  EXPECT_NEAR(a.grad[0] / b.grad[0], 0.25, 1e-12);
  // Below the threshold nothing changes.
  EXPECT_NEAR(clip_gradients(store, 10.0), 5.0, 1e-12);
  EXPECT_NEAR(global_grad_norm(store), 5.0, 1e-12);
}

TEST(GradientClipping, NonFiniteThrows) {
  ParamStore<double> store;
  store.add("a", Tensor<double>({1, 1})).grad[0] = NAN;
  try {
    clip_gradients(store);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteGradient);
  }
}

namespace {

FeatureTensor ramp_features(std::size_t C, std::size_t T, std::size_t F) {
  FeatureTensor f;
  f.channels = C;
  f.frames = T;
  f.bins = F;
  f.amplitude.resize(C * T * F);
  f.phase.resize(C * T * 2 * F);
  for (std::size_t i = 0; i < f.amplitude.size(); ++i) f.amplitude[i] = static_cast<float>(i % 17) - 3.0f;
  for (std::size_t i = 0; i < f.phase.size(); ++i) f.phase[i] = std::cos(static_cast<float>(i));
  return f;
}

}  // namespace

TEST(SpecAugment, ZeroWidthsIsIdentity) {
  const FeatureTensor f = ramp_features(2, 30, 20);
  const FeatureTensor out = spec_augment(f, {2, 0, 2, 0}, 3);
  EXPECT_EQ(out.amplitude, f.amplitude);
  EXPECT_EQ(out.phase, f.phase);
}

TEST(SpecAugment, MasksAmplitudeOnlyWithUtteranceMean) {
  const FeatureTensor f = ramp_features(2, 40, 30);
  double mean = 0.0;
  for (float v : f.amplitude) mean += v;
  const auto fill = static_cast<float>(mean / static_cast<double>(f.amplitude.size()));
  const FeatureTensor out = spec_augment(f, {2, 8, 2, 6}, 11);
  EXPECT_EQ(out.phase, f.phase);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < f.amplitude.size(); ++i) {
    if (out.amplitude[i] != f.amplitude[i]) {
      ++changed;
      EXPECT_EQ(out.amplitude[i], fill);
    }
  }
  EXPECT_GT(changed, 0u);
  // Identical positions in every channel.
  for (std::size_t t = 0; t < f.frames; ++t)
    for (std::size_t k = 0; k < f.bins; ++k)
      EXPECT_EQ(out.amp(0, t, k) == fill, out.amp(1, t, k) == fill);
}

TEST(SpecAugment, DeterministicPerSeed) {
  const FeatureTensor f = ramp_features(2, 40, 30);
  EXPECT_EQ(spec_augment(f, {}, 5).amplitude, spec_augment(f, {}, 5).amplitude);
}

namespace {

// Textbook recursive definition on suffixes, memoized so the exhaustive
// sweep stays fast.
std::size_t recursive_distance(const std::string& a, const std::string& b) {
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<std::size_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size()) return b.size() - j;
    if (j == b.size()) return a.size() - i;
    int& m = memo[i][j];
    if (m < 0)
      m = static_cast<int>(std::min({d(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1), d(i + 1, j) + 1, d(i, j + 1) + 1}));
    return static_cast<std::size_t>(m);
  };
  return d(0, 0);
}

std::vector<std::string> all_strings(std::size_t max_len) {
  std::vector<std::string> out{""};
  std::vector<std::string> frontier{""};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::string> next;
    for (const auto& s : frontier)
      for (char c : {'a', 'b', 'c'}) next.push_back(s + c);
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace

TEST(EditDistance, MatchesRecursiveReferenceExhaustively) {
  // Every pair of strings of length <= 6 over {a, b, c}.
  const auto strings = all_strings(6);
  ASSERT_EQ(strings.size(), 1093u);
  for (const auto& a : strings)
    for (const auto& b : strings)
      ASSERT_EQ(edit_distance(chars_of(a), chars_of(b)), recursive_distance(a, b)) << a << "|" << b;
}

TEST(EditDistance, RatesAndExamples) {
  EXPECT_DOUBLE_EQ(cer("abc", "abc"), 0.0);
  EXPECT_DOUBLE_EQ(cer("abc", "abd"), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(cer("ab", ""), 1.0);
  EXPECT_DOUBLE_EQ(wer("the cat sat", "the bat sat"), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(wer("a b", "a  b"), 0.0);
  try {
    cer("", "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyReference);
  }
}

TEST(RelativeReduction, Definition) {
  EXPECT_DOUBLE_EQ(relative_reduction(0.2, 0.1), 50.0);
  EXPECT_DOUBLE_EQ(relative_reduction(0.2, 0.3), -50.0);
  EXPECT_DOUBLE_EQ(relative_reduction(0.25, 0.25), 0.0);
  EXPECT_DOUBLE_EQ(relative_reduction(0.0, 0.0), 0.0);
}
