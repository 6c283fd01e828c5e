#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>

#include "mcw2v/io.hpp"

using namespace mcw2v;

namespace {

MultiChannelWave make_wave(std::size_t channels, std::size_t n, const std::function<double(std::size_t, std::size_t)>& fn,
                           int sr = 16000) {
  MultiChannelWave w;
  w.sample_rate_hz = sr;
  w.samples = Tensor<double>({channels, n});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < n; ++i) w.samples(c, i) = fn(c, i);
  return w;
}

double tone(double hz, double i, double phase = 0.0) { return std::sin(2.0 * std::numbers::pi * hz * i / 16000.0 + phase); }

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mcw2v_test_dsp";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Framing, GeometryAt16k) {
  const FrameGeometry g = frame_geometry(16000);
  EXPECT_EQ(g.win, 400u);
  EXPECT_EQ(g.hop, 160u);
  EXPECT_EQ(num_frames(16000, g), 98u);
  EXPECT_EQ(num_frames(399, g), 0u);
  EXPECT_EQ(num_frames(400, g), 1u);
}

TEST(Framing, Errors) {
  try {
    frame_geometry(44100);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SampleRateUnsupported);
  }
  try {
    stft(make_wave(2, 399, [](auto, auto) { return 0.0; }));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::WaveTooShort);
  }
  try {
    extract_features(make_wave(1, 1000, [](auto, auto) { return 0.0; }));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SingleChannel);
  }
}

TEST(Stft, MatchesDirectDft) {
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 0.3);
  const auto w = make_wave(2, 1200, [&](auto, auto) { return n(rng); });
  const ComplexSpectrogram spec = stft(w);
  ASSERT_EQ(spec.frames, 6u);
  ASSERT_EQ(spec.bins, 257u);
  const auto window = hann_window(400);
  double worst = 0.0;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t t = 0; t < spec.frames; ++t) {
      for (std::size_t k = 0; k < spec.bins; ++k) {
        std::complex<double> acc = 0.0;
        for (std::size_t i = 0; i < 400; ++i) {
          const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * i) / 512.0;
          acc += window[i] * w.samples(c, t * 160 + i) * std::polar(1.0, ang);
        }
        worst = std::max(worst, std::abs(acc - spec.at(c, t, k)));
      }
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Stft, SinePeaksAtItsBin) {
  // 1 kHz sits exactly on bin 1000 / (16000 / 512) = 32.
  const auto w = make_wave(2, 16000, [](auto, std::size_t i) { return tone(1000.0, static_cast<double>(i)); });
  const FeatureTensor f = extract_features(w);
  for (std::size_t t = 0; t < f.frames; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < f.bins; ++k)
      if (f.amp(0, t, k) > f.amp(0, t, best)) best = k;
    ASSERT_EQ(best, 32u);
  }
}

TEST(Stft, ConstantSignalGivesWindowSpectrum) {
  // Zero padding 400 -> 512 means a constant does not land in bin 0 alone:
  // the spectrum is the window's DFT, whose main lobe covers bins 0..2.
  const double a = 0.25;
  const auto w = make_wave(2, 400, [&](auto, auto) { return a; });
  const ComplexSpectrogram spec = stft(w);
  const auto window = hann_window(400);
  double sum = 0.0;
  for (double v : window) sum += v;
  EXPECT_NEAR(spec.at(0, 0, 0).real(), a * sum, 1e-9);
  EXPECT_NEAR(spec.at(0, 0, 0).imag(), 0.0, 1e-9);
  double total = 0.0, lobe = 0.0;
  for (std::size_t k = 0; k < spec.bins; ++k) {
    const double e = std::norm(spec.at(0, 0, k));
    total += e;
    if (k <= 2) lobe += e;
  }
  EXPECT_GT(lobe / total, 0.999);
  for (std::size_t k = 1; k < spec.bins; ++k) EXPECT_LT(std::abs(spec.at(0, 0, k)), std::abs(spec.at(0, 0, 0)));
}

TEST(Features, LayoutAndUnitCircle) {
  Rng rng(2);
  std::normal_distribution<double> n(0.0, 0.1);
  const auto w = make_wave(3, 4000, [&](auto, auto) { return n(rng); });
  const FeatureTensor f = extract_features(w);
  EXPECT_EQ(f.channels, 3u);
  EXPECT_EQ(f.frames, 23u);
  EXPECT_EQ(f.dim(), 771u);
  double worst = 0.0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < f.frames; ++t)
      for (std::size_t k = 0; k < f.bins; ++k) {
        const double cs = f.ph(c, t, k), sn = f.ph(c, t, f.bins + k);
        worst = std::max(worst, std::abs(cs * cs + sn * sn - 1.0));
      }
  EXPECT_LE(worst, 1e-6);
  const Tensor<double> m = f.channel_matrix<double>(1);
  EXPECT_EQ(m.shape(), (Shape{23, 771}));
  EXPECT_EQ(m(4, 10), f.amp(1, 4, 10));
  EXPECT_EQ(m(4, 257 + 10), f.ph(1, 4, 10));
  EXPECT_EQ(m(4, 514 + 10), f.ph(1, 4, 257 + 10));
}

TEST(Features, IdenticalChannelsHaveZeroPhaseDifference) {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 0.2);
  std::vector<double> x(3000);
  for (auto& v : x) v = n(rng);
  const FeatureTensor f = extract_features(make_wave(2, x.size(), [&](auto, std::size_t i) { return x[i]; }));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < f.frames; ++t)
      for (std::size_t k = 0; k < f.bins; ++k) {
        ASSERT_NEAR(f.ph(c, t, k), 1.0, 1e-6);
        ASSERT_NEAR(f.ph(c, t, f.bins + k), 0.0, 1e-6);
      }
}

TEST(Features, DelayShowsUpAsPhaseDifference) {
  // A stationary tone delayed by d samples in channel 1 gives
  // angle(X_0 conj(X_1)) = omega * d at the tone bin.
  const double hz = 1000.0, d = 3.0;
  const auto w = make_wave(2, 4000, [&](std::size_t c, std::size_t i) {
    return tone(hz, static_cast<double>(i) - (c == 1 ? d : 0.0));
  });
  const FeatureTensor f = extract_features(w);
  const double omega = 2.0 * std::numbers::pi * hz / 16000.0;
  for (std::size_t t = 0; t < f.frames; ++t) {
    EXPECT_NEAR(f.ph(0, t, 32), std::cos(omega * d), 1e-5);
    EXPECT_NEAR(f.ph(0, t, f.bins + 32), std::sin(omega * d), 1e-5);
    // Channel 1 is paired with channel 0: the opposite angle.
    EXPECT_NEAR(f.ph(1, t, f.bins + 32), -std::sin(omega * d), 1e-5);
  }
}

TEST(Features, SilenceUsesFloorAndUnitPhase) {
  const FeatureTensor f = extract_features(make_wave(2, 800, [](auto, auto) { return 0.0; }));
  for (float v : f.amplitude) ASSERT_FLOAT_EQ(v, static_cast<float>(std::log(1e-10)));
  for (std::size_t t = 0; t < f.frames; ++t)
    for (std::size_t k = 0; k < f.bins; ++k) {
      ASSERT_EQ(f.ph(0, t, k), 1.0f);
      ASSERT_EQ(f.ph(0, t, f.bins + k), 0.0f);
    }
}

TEST(Features, CyclicPartnerWithThreeChannels) {
  const double hz = 1000.0;
  const double delays[] = {0.0, 1.0, 3.0};
  const auto w = make_wave(3, 2000, [&](std::size_t c, std::size_t i) { return tone(hz, static_cast<double>(i) - delays[c]); });
  const FeatureTensor f = extract_features(w);
  const double omega = 2.0 * std::numbers::pi * hz / 16000.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double expected = omega * (delays[(c + 1) % 3] - delays[c]);
    EXPECT_NEAR(f.ph(c, 0, f.bins + 32), std::sin(expected), 1e-5) << "channel " << c;
  }
}

TEST(Features, PermutedSwapsChannels) {
  Rng rng(4);
  std::normal_distribution<double> n(0.0, 0.2);
  const auto w = make_wave(2, 1000, [&](auto, auto) { return n(rng); });
  const FeatureTensor f = extract_features(w);
  const FeatureTensor p = f.permuted({1, 0});
  EXPECT_EQ(p.channel_matrix<float>(0), f.channel_matrix<float>(1));
  EXPECT_EQ(p.channel_matrix<float>(1), f.channel_matrix<float>(0));
}

TEST(Normalization, AccumulatesMeanAndStd) {
  FeatureTensor f;
  f.channels = 2;
  f.frames = 2;
  f.bins = 1;
  f.amplitude = {1.0f, 3.0f, 5.0f, 7.0f};
  f.phase = {1, 0, 1, 0, 1, 0, 1, 0};
  NormAccumulator acc(3);
  acc.add(f);
  const NormStats s = acc.finish();
  EXPECT_DOUBLE_EQ(s.mean[0], 4.0);
  EXPECT_DOUBLE_EQ(s.stddev[0], std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(s.mean[1], 1.0);
  EXPECT_DOUBLE_EQ(s.stddev[1], 1e-5);  // constant column floored
  Tensor<double> m = f.channel_matrix<double>(0);
  s.apply(m);
  EXPECT_NEAR(m(0, 0), (1.0 - 4.0) / std::sqrt(5.0), 1e-12);
  EXPECT_EQ(m(0, 1), 0.0);
  Tensor<double> wrong({2, 4});
  EXPECT_THROW(s.apply(wrong), Error);
}

TEST(WavIo, RoundTrip) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  auto w = make_wave(2, 500, [&](auto, auto) { return u(rng); });
  const auto path = temp_path("rt.wav");
  io::write_wav(path, w);
  const MultiChannelWave r = io::read_wav(path);
  EXPECT_EQ(r.sample_rate_hz, 16000);
  ASSERT_EQ(r.samples.shape(), w.samples.shape());
  for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_NEAR(r.samples[i], w.samples[i], 0.5 / 32767.0 + 1e-12);
  EXPECT_EQ(std::filesystem::file_size(path), 44u + 500u * 2u * 2u);
}

TEST(WavIo, RejectsMonoAndGarbage) {
  const auto mono = temp_path("mono.wav");
  io::write_wav(mono, make_wave(1, 100, [](auto, auto) { return 0.1; }));
  try {
    io::read_wav(mono);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SingleChannel);
  }
  const auto junk = temp_path("junk.wav");
  std::ofstream(junk) << "not a wav file";
  try {
    io::read_wav(junk);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::FormatError);
  }
}

TEST(FeatureFile, RoundTrip) {
  Rng rng(6);
  std::normal_distribution<double> n(0.0, 0.2);
  const FeatureTensor f = extract_features(make_wave(2, 2000, [&](auto, auto) { return n(rng); }));
  const auto path = temp_path("f.mcfeat");
  io::write_features(path, f);
  const io::Container c = io::read_feature_file(path);
  EXPECT_EQ(c.header.at("shape"), nlohmann::json({2, f.frames, 771}));
  EXPECT_EQ(c.header.at("dtype"), "f32le");
  EXPECT_EQ(c.header.at("fft_size"), 512);
  const Tensor<float> m1 = f.channel_matrix<float>(1);
  const std::size_t off = f.frames * 771;
  for (std::size_t i = 0; i < m1.size(); ++i) ASSERT_EQ(c.payload[off + i], m1[i]);

  std::ifstream is(path, std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "MCFEAT01");
}
