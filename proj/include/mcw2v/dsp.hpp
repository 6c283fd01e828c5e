#pragma once

// Multi-channel spectral frontend: framed STFT, log power, and interchannel
// phase-difference features.

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include "mcw2v/tensor.hpp"

namespace mcw2v {

struct MultiChannelWave {
  Tensor<double> samples;  // [C x N], values in [-1, 1]
  int sample_rate_hz = 16000;
  std::string utterance_id;

  std::size_t channels() const { return samples.rows(); }
  std::size_t length() const { return samples.cols(); }
};

struct FrontendConfig {
  double hop_ms = 10.0;
  double win_ms = 25.0;
  std::size_t fft_size = 512;
  double power_floor = 1e-10;

  std::size_t bins() const { return fft_size / 2 + 1; }
  // Per-channel feature width: log power + cos IPD + sin IPD.
  std::size_t feature_dim() const { return 3 * bins(); }
};

struct FrameGeometry {
  std::size_t win = 0;
  std::size_t hop = 0;
};

inline FrameGeometry frame_geometry(int sample_rate_hz, const FrontendConfig& cfg = {}) {
  if (sample_rate_hz <= 0) throw Error(Errc::SampleRateUnsupported, "non-positive sample rate");
  const double win = cfg.win_ms * sample_rate_hz / 1000.0;
  const double hop = cfg.hop_ms * sample_rate_hz / 1000.0;
  if (win != std::floor(win) || hop != std::floor(hop) || win > static_cast<double>(cfg.fft_size)) {
    throw Error(Errc::SampleRateUnsupported,
                std::to_string(sample_rate_hz) + " Hz does not give integral frames within the FFT size");
  }
  return {static_cast<std::size_t>(win), static_cast<std::size_t>(hop)};
}

inline std::size_t num_frames(std::size_t samples, const FrameGeometry& geo) {
  return samples < geo.win ? 0 : 1 + (samples - geo.win) / geo.hop;
}

// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

struct ComplexSpectrogram {
  std::size_t channels = 0;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> values;  // [C x T x F]

  std::complex<double>& at(std::size_t c, std::size_t t, std::size_t k) {
    return values[(c * frames + t) * bins + k];
  }
  const std::complex<double>& at(std::size_t c, std::size_t t, std::size_t k) const {
    return values[(c * frames + t) * bins + k];
  }
};

// Frames lie entirely inside the signal; each frame is Hann-windowed and
// zero-padded to the FFT size.
inline ComplexSpectrogram stft(const MultiChannelWave& wave, const FrontendConfig& cfg = {}) {
  const FrameGeometry geo = frame_geometry(wave.sample_rate_hz, cfg);
  if (wave.length() < geo.win) {
    throw Error(Errc::WaveTooShort, std::to_string(wave.length()) + " samples, window needs " +
                                        std::to_string(geo.win));
  }
  ComplexSpectrogram spec;
  spec.channels = wave.channels();
  spec.frames = num_frames(wave.length(), geo);
  spec.bins = cfg.bins();
  spec.values.resize(spec.channels * spec.frames * spec.bins);

  const std::vector<double> window = hann_window(geo.win);
  Eigen::FFT<double> fft;
  std::vector<double> frame(cfg.fft_size, 0.0);
  std::vector<std::complex<double>> out;
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t t = 0; t < spec.frames; ++t) {
      const std::size_t start = t * geo.hop;
      for (std::size_t i = 0; i < geo.win; ++i) frame[i] = window[i] * wave.samples(c, start + i);
      fft.fwd(out, frame);
      for (std::size_t k = 0; k < spec.bins; ++k) spec.at(c, t, k) = out[k];
    }
  }
  return spec;
}

// Amplitude and phase features of all channels. Values are float32; the
// per-channel model input is the row [log power (F) | cos IPD (F) | sin IPD (F)].
struct FeatureTensor {
  std::size_t channels = 0;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<float> amplitude;  // [C x T x F]
  std::vector<float> phase;      // [C x T x 2F], cos block then sin block per frame

  std::size_t dim() const { return 3 * bins; }

  float& amp(std::size_t c, std::size_t t, std::size_t k) { return amplitude[(c * frames + t) * bins + k]; }
  float amp(std::size_t c, std::size_t t, std::size_t k) const {
    return amplitude[(c * frames + t) * bins + k];
  }
  float& ph(std::size_t c, std::size_t t, std::size_t j) { return phase[(c * frames + t) * 2 * bins + j]; }
  float ph(std::size_t c, std::size_t t, std::size_t j) const {
    return phase[(c * frames + t) * 2 * bins + j];
  }

  // [T x 3F] matrix for one channel.
  template <typename S>
  Tensor<S> channel_matrix(std::size_t c) const {
    Tensor<S> m({frames, dim()});
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t k = 0; k < bins; ++k) m(t, k) = static_cast<S>(amp(c, t, k));
      for (std::size_t j = 0; j < 2 * bins; ++j) m(t, bins + j) = static_cast<S>(ph(c, t, j));
    }
    return m;
  }

  // Reorders the channel axis: output channel i is input channel order[i].
  FeatureTensor permuted(const std::vector<std::size_t>& order) const {
    FeatureTensor out = *this;
    const std::size_t a = frames * bins, p = frames * 2 * bins;
    for (std::size_t i = 0; i < order.size(); ++i) {
      std::copy_n(amplitude.begin() + order[i] * a, a, out.amplitude.begin() + i * a);
      std::copy_n(phase.begin() + order[i] * p, p, out.phase.begin() + i * p);
    }
    return out;
  }
};

// ln(max(|X|^2, floor)) per channel, frame and bin.
inline std::vector<float> log_power(const ComplexSpectrogram& spec, const FrontendConfig& cfg = {}) {
  std::vector<float> out(spec.values.size());
  for (std::size_t i = 0; i < spec.values.size(); ++i)
    out[i] = static_cast<float>(std::log(std::max(std::norm(spec.values[i]), cfg.power_floor)));
  return out;
}

// cos/sin of the phase difference between channel c and its partner
// (c + 1) mod C. Bins where both powers fall below the floor give (1, 0).
inline std::vector<float> ipd_features(const ComplexSpectrogram& spec, const FrontendConfig& cfg = {}) {
  if (spec.channels < 2) throw Error(Errc::SingleChannel, "IPD features need at least two channels");
  const std::size_t F = spec.bins;
  std::vector<float> out(spec.channels * spec.frames * 2 * F);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    const std::size_t partner = (c + 1) % spec.channels;
    for (std::size_t t = 0; t < spec.frames; ++t) {
      float* dst = out.data() + (c * spec.frames + t) * 2 * F;
      for (std::size_t k = 0; k < F; ++k) {
        const auto& a = spec.at(c, t, k);
        const auto& b = spec.at(partner, t, k);
        const std::complex<double> z = a * std::conj(b);
        const double mag = std::abs(z);
        const bool silent = std::norm(a) < cfg.power_floor && std::norm(b) < cfg.power_floor;
        if (silent || mag == 0.0) {
          dst[k] = 1.0f;
          dst[F + k] = 0.0f;
        } else {
          dst[k] = static_cast<float>(z.real() / mag);
          dst[F + k] = static_cast<float>(z.imag() / mag);
        }
      }
    }
  }
  return out;
}

inline FeatureTensor extract_features(const MultiChannelWave& wave, const FrontendConfig& cfg = {}) {
  if (wave.channels() < 2) throw Error(Errc::SingleChannel, "waveform has a single channel");
  const ComplexSpectrogram spec = stft(wave, cfg);
  FeatureTensor f;
  f.channels = spec.channels;
  f.frames = spec.frames;
  f.bins = spec.bins;
  f.amplitude = log_power(spec, cfg);
  f.phase = ipd_features(spec, cfg);
  return f;
}

// Global per-dimension mean / standard deviation over all channels and frames
// of a training set, applied at model input.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool empty() const { return mean.empty(); }

  static NormStats identity(std::size_t dim) {
    return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
  }

  template <typename S>
  void apply(Tensor<S>& m) const {
    if (empty()) return;
    if (m.cols() != mean.size()) {
      throw Error(Errc::DimensionMismatch, "normalization stats of width " + std::to_string(mean.size()) +
                                               " applied to " + shape_str(m.shape()));
    }
    for (std::size_t t = 0; t < m.rows(); ++t)
      for (std::size_t j = 0; j < m.cols(); ++j)
        m(t, j) = static_cast<S>((m(t, j) - mean[j]) / stddev[j]);
  }
};

class NormAccumulator {
 public:
  explicit NormAccumulator(std::size_t dim) : sum_(dim, 0.0), sq_(dim, 0.0) {}

  void add(const FeatureTensor& f) {
    for (std::size_t c = 0; c < f.channels; ++c) {
      const Tensor<double> m = f.channel_matrix<double>(c);
      for (std::size_t t = 0; t < m.rows(); ++t)
        for (std::size_t j = 0; j < m.cols(); ++j) {
          sum_[j] += m(t, j);
          sq_[j] += m(t, j) * m(t, j);
        }
      count_ += m.rows();
    }
  }

  NormStats finish(double min_std = 1e-5) const {
    NormStats s;
    s.mean.resize(sum_.size());
    s.stddev.resize(sum_.size());
    for (std::size_t j = 0; j < sum_.size(); ++j) {
      const double n = std::max<double>(1.0, static_cast<double>(count_));
      s.mean[j] = sum_[j] / n;
      s.stddev[j] = std::max(min_std, std::sqrt(std::max(0.0, sq_[j] / n - s.mean[j] * s.mean[j])));
    }
    return s;
  }

 private:
  std::vector<double> sum_;
  std::vector<double> sq_;
  std::size_t count_ = 0;
};

}  // namespace mcw2v
