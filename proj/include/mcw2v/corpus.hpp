#pragma once

// Synthetic two-channel corpus. Every vocabulary symbol is a harmonic burst
// with its own fundamental; the second microphone hears the first one with a
// fractional-sample delay and independent white noise.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcw2v/io.hpp"
#include "mcw2v/transducer.hpp"

namespace mcw2v {

struct SynthConfig {
  std::size_t vocab_size = 16;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;
  double token_ms = 120.0;
  double min_delay = -4.0;  // samples
  double max_delay = 4.0;
  double min_snr_db = 0.0;
  double max_snr_db = 20.0;
  int sample_rate_hz = 16000;
  double base_f0_hz = 180.0;
  double ramp_ms = 15.0;

  void validate() const {
    if (vocab_size == 0 || vocab_size > 26) throw Error(Errc::ConfigError, "vocab_size must be in [1, 26]");
    if (min_tokens == 0 || min_tokens > max_tokens) throw Error(Errc::ConfigError, "bad token count range");
    if (min_delay > max_delay || min_snr_db > max_snr_db) throw Error(Errc::ConfigError, "bad synth ranges");
    if (token_ms <= 0.0) throw Error(Errc::ConfigError, "token_ms must be positive");
  }

  std::size_t token_samples() const {
    return static_cast<std::size_t>(std::lround(token_ms * sample_rate_hz / 1000.0));
  }
  double f0(std::size_t token) const { return base_f0_hz * std::pow(2.0, static_cast<double>(token) / 6.0); }
};

inline char token_char(std::size_t token) { return static_cast<char>('a' + token); }

inline std::string tokens_to_text(const TokenSequence& tokens) {
  std::string s;
  for (std::size_t t : tokens) s.push_back(token_char(t));
  return s;
}

inline TokenSequence text_to_tokens(const std::string& text, std::size_t vocab_size) {
  TokenSequence out;
  for (char ch : text) {
    if (ch < 'a' || static_cast<std::size_t>(ch - 'a') >= vocab_size)
      throw Error(Errc::TokenOutOfRange, std::string("character '") + ch + "' outside the vocabulary");
    out.push_back(static_cast<std::size_t>(ch - 'a'));
  }
  return out;
}

// x delayed by `delay` samples (positive = later), zero outside the signal.
// Integral delays are exact shifts; fractional ones use a Hann-windowed sinc.
inline std::vector<double> fractional_delay(const std::vector<double>& x, double delay, int half_width = 32) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  std::vector<double> y(x.size(), 0.0);
  if (delay == std::round(delay)) {
    const auto d = static_cast<std::ptrdiff_t>(delay);
    for (std::ptrdiff_t i = 0; i < n; ++i)
      if (i - d >= 0 && i - d < n) y[i] = x[i - d];
    return y;
  }
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double center = static_cast<double>(i) - delay;
    const auto k0 = static_cast<std::ptrdiff_t>(std::floor(center)) - half_width + 1;
    double acc = 0.0;
    for (std::ptrdiff_t k = k0; k < k0 + 2 * half_width; ++k) {
      if (k < 0 || k >= n) continue;
      const double u = center - static_cast<double>(k);
      const double sinc = std::sin(std::numbers::pi * u) / (std::numbers::pi * u);
      const double win = 0.5 + 0.5 * std::cos(std::numbers::pi * u / half_width);
      acc += x[k] * sinc * win;
    }
    y[i] = acc;
  }
  return y;
}

struct SynthUtterance {
  MultiChannelWave wave;
  std::string transcript;
  double delay_samples = 0.0;
  double snr_db = 0.0;
};

inline SynthUtterance synth_utterance(const TokenSequence& tokens, const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  detail::check_tokens(tokens, cfg.vocab_size);
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t per = cfg.token_samples();
  const std::size_t n = per * tokens.size();
  const double sr = cfg.sample_rate_hz;
  const auto ramp = static_cast<std::size_t>(std::lround(cfg.ramp_ms * sr / 1000.0));

  std::vector<double> clean(n, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const double f0 = cfg.f0(tokens[i]);
    for (int h = 1; h <= 4 && h * f0 < 0.45 * sr; ++h) {
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      for (std::size_t j = 0; j < per; ++j) {
        double env = 1.0;
        if (j < ramp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * j / ramp);
        if (per - 1 - j < ramp) env = std::min(env, 0.5 - 0.5 * std::cos(std::numbers::pi * (per - 1 - j) / ramp));
        clean[i * per + j] += env / h * std::sin(2.0 * std::numbers::pi * h * f0 * j / sr + phase);
      }
    }
  }
  double peak = 0.0, power = 0.0;
  for (double v : clean) {
    peak = std::max(peak, std::abs(v));
    power += v * v;
  }
  if (peak > 0.0)
    for (double& v : clean) v *= 0.5 / peak;
  power = power / std::max<std::size_t>(n, 1) * (peak > 0.0 ? 0.25 / (peak * peak) : 0.0);

  SynthUtterance out;
  out.delay_samples = cfg.min_delay + (cfg.max_delay - cfg.min_delay) * unit(rng);
  out.snr_db = cfg.min_snr_db + (cfg.max_snr_db - cfg.min_snr_db) * unit(rng);
  if (cfg.min_delay == cfg.max_delay) out.delay_samples = cfg.min_delay;
  if (cfg.min_snr_db == cfg.max_snr_db) out.snr_db = cfg.min_snr_db;

  std::vector<double> second = fractional_delay(clean, out.delay_samples);
  std::vector<double> first = clean;
  if (std::isfinite(out.snr_db)) {
    std::normal_distribution<double> noise(0.0, std::sqrt(power) * std::pow(10.0, -out.snr_db / 20.0));
    for (double& v : first) v += noise(rng);
    for (double& v : second) v += noise(rng);
  }
  double top = 0.0;
  for (std::size_t i = 0; i < n; ++i) top = std::max({top, std::abs(first[i]), std::abs(second[i])});
  const double gain = top > 0.99 ? 0.99 / top : 1.0;

  out.wave.sample_rate_hz = cfg.sample_rate_hz;
  out.wave.samples = Tensor<double>({2, n});
  for (std::size_t i = 0; i < n; ++i) {
    out.wave.samples(0, i) = first[i] * gain;
    out.wave.samples(1, i) = second[i] * gain;
  }
  out.transcript = tokens_to_text(tokens);
  return out;
}

// Lag (in samples, sub-sample by parabolic interpolation) maximizing the
// cross-correlation sum_n y[n] x[n - lag]; positive when y lags x.
inline double estimate_delay(const std::vector<double>& x, const std::vector<double>& y, int max_lag = 8) {
  const auto n = static_cast<std::ptrdiff_t>(std::min(x.size(), y.size()));
  std::vector<double> r(2 * max_lag + 1, 0.0);
  for (int lag = -max_lag; lag <= max_lag; ++lag) {
    double acc = 0.0;
    for (std::ptrdiff_t i = 0; i < n; ++i)
      if (i - lag >= 0 && i - lag < n) acc += y[i] * x[i - lag];
    r[lag + max_lag] = acc;
  }
  const auto best = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  double offset = 0.0;
  if (best > 0 && best < 2 * max_lag) {
    const double a = r[best - 1], b = r[best], c = r[best + 1];
    const double den = a - 2.0 * b + c;
    if (den != 0.0) offset = 0.5 * (a - c) / den;
  }
  return best - max_lag + offset;
}

struct ManifestEntry {
  std::string id;
  std::filesystem::path wav;  // absolute once loaded
  std::string text;
  double duration_s = 0.0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::size_t size() const { return entries.size(); }
};

// JSON Lines with fields "id", "wav", "text", "dur"; wav paths relative to
// the manifest's directory.
inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream os(path);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  const auto base = path.parent_path();
  for (const auto& e : m.entries) {
    const auto rel = e.wav.is_absolute() ? std::filesystem::relative(e.wav, base.empty() ? "." : base) : e.wav;
    nlohmann::json j = {{"id", e.id}, {"wav", rel.generic_string()}, {"text", e.text}, {"dur", e.duration_s}};
    os << j.dump() << '\n';
  }
  if (!os) throw Error(Errc::IoError, "failed writing " + path.string());
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::IoError, "cannot open manifest " + path.string());
  const auto base = std::filesystem::absolute(path).parent_path();
  Manifest m;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      std::filesystem::path wav = j.at("wav").get<std::string>();
      e.wav = wav.is_absolute() ? wav : base / wav;
      e.text = j.at("text").get<std::string>();
      e.duration_s = j.at("dur").get<double>();
      if (!seen.insert(e.id).second) throw Error(Errc::FormatError, "duplicate id " + e.id);
      if (!std::filesystem::exists(e.wav)) throw Error(Errc::IoError, "missing audio " + e.wav.string());
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(Errc::FormatError, path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

struct CorpusManifests {
  Manifest train;
  Manifest test;
  std::filesystem::path train_path;
  std::filesystem::path test_path;
};

inline TokenSequence sample_tokens(const SynthConfig& cfg, Rng& rng) {
  std::uniform_int_distribution<std::size_t> len(cfg.min_tokens, cfg.max_tokens);
  std::uniform_int_distribution<std::size_t> sym(0, cfg.vocab_size - 1);
  TokenSequence y(len(rng));
  for (auto& t : y) t = sym(rng);
  return y;
}

inline CorpusManifests build_corpus(const SynthConfig& cfg, std::size_t n_train, std::size_t n_test, std::uint64_t seed,
                                    const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "wav", ec);
  if (ec) throw Error(Errc::IoError, "cannot create " + (out_dir / "wav").string() + ": " + ec.message());
  Rng rng(seed);
  CorpusManifests out;
  auto make = [&](const std::string& split, std::size_t count, Manifest& m) {
    for (std::size_t i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s-%05zu", split.c_str(), i);
      const TokenSequence tokens = sample_tokens(cfg, rng);
      SynthUtterance u = synth_utterance(tokens, cfg, rng());
      u.wave.utterance_id = id;
      const auto wav = out_dir / "wav" / (std::string(id) + ".wav");
      io::write_wav(wav, u.wave);
      m.entries.push_back({id, std::filesystem::absolute(wav), u.transcript,
                           static_cast<double>(u.wave.length()) / cfg.sample_rate_hz});
    }
  };
  make("train", n_train, out.train);
  make("test", n_test, out.test);
  out.train_path = out_dir / "train.jsonl";
  out.test_path = out_dir / "test.jsonl";
  save_manifest(out.train_path, out.train);
  save_manifest(out.test_path, out.test);
  return out;
}

}  // namespace mcw2v
