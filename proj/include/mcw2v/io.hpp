#pragma once

// On-disk formats: RIFF/WAVE PCM16 audio and the "magic + JSON line +
// little-endian float32 payload" container shared by feature dumps and
// checkpoints.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcw2v/dsp.hpp"

namespace mcw2v::io {

namespace detail {

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& os, T v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(Errc::FormatError, "unexpected end of file");
  return byteswap_if_big(v);
}

}  // namespace detail

inline void write_wav(const std::filesystem::path& path, const MultiChannelWave& wave) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot open " + path.string() + " for writing");
  const auto channels = static_cast<std::uint16_t>(wave.channels());
  const auto frames = static_cast<std::uint32_t>(wave.length());
  const std::uint32_t data_bytes = frames * channels * 2u;
  os.write("RIFF", 4);
  detail::put<std::uint32_t>(os, 36u + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  detail::put<std::uint32_t>(os, 16);
  detail::put<std::uint16_t>(os, 1);
  detail::put<std::uint16_t>(os, channels);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(wave.sample_rate_hz));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(wave.sample_rate_hz) * channels * 2u);
  detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(channels * 2));
  detail::put<std::uint16_t>(os, 16);
  os.write("data", 4);
  detail::put<std::uint32_t>(os, data_bytes);
  for (std::uint32_t n = 0; n < frames; ++n) {
    for (std::uint16_t c = 0; c < channels; ++c) {
      const double x = std::clamp(wave.samples(c, n), -1.0, 1.0);
      detail::put<std::int16_t>(os, static_cast<std::int16_t>(std::lround(x * 32767.0)));
    }
  }
  if (!os) throw Error(Errc::IoError, "failed writing " + path.string());
}

inline MultiChannelWave read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) throw Error(Errc::FormatError, path.string() + ": not RIFF");
  detail::get<std::uint32_t>(is);
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) throw Error(Errc::FormatError, path.string() + ": not WAVE");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (is.read(tag, 4)) {
    const auto size = detail::get<std::uint32_t>(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = detail::get<std::uint16_t>(is);
      channels = detail::get<std::uint16_t>(is);
      rate = detail::get<std::uint32_t>(is);
      detail::get<std::uint32_t>(is);
      detail::get<std::uint16_t>(is);
      bits = detail::get<std::uint16_t>(is);
      is.ignore(static_cast<std::streamsize>(size - 16 + (size & 1u)));
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw Error(Errc::FormatError, path.string() + ": data chunk before fmt");
      if (format != 1 || bits != 16) throw Error(Errc::FormatError, path.string() + ": only PCM16 is supported");
      if (channels < 2) throw Error(Errc::SingleChannel, path.string() + " has one channel");
      const std::size_t frames = size / (2u * channels);
      MultiChannelWave wave;
      wave.sample_rate_hz = static_cast<int>(rate);
      wave.utterance_id = path.stem().string();
      wave.samples = Tensor<double>({channels, frames});
      std::vector<std::int16_t> raw(frames * channels);
      is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 2));
      if (!is) throw Error(Errc::FormatError, path.string() + ": truncated data chunk");
      for (std::size_t n = 0; n < frames; ++n)
        for (std::size_t c = 0; c < channels; ++c)
          wave.samples(c, n) = detail::byteswap_if_big(raw[n * channels + c]) / 32767.0;
      return wave;
    } else {
      is.ignore(static_cast<std::streamsize>(size + (size & 1u)));
    }
  }
  throw Error(Errc::FormatError, path.string() + ": no data chunk");
}

// Container: 8-byte magic, one line of compact JSON terminated by '\n', then
// little-endian float32 values.
inline void write_container(std::ostream& os, std::string_view magic, const nlohmann::json& header,
                            std::span<const float> payload) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  const std::string text = header.dump();
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.put('\n');
  for (float v : payload) detail::put<float>(os, v);
}

struct Container {
  nlohmann::json header;
  std::vector<float> payload;
};

inline Container read_container(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!is || got != magic) throw Error(Errc::FormatError, "bad magic, expected " + std::string(magic));
  std::string line;
  if (!std::getline(is, line)) throw Error(Errc::FormatError, "missing JSON header");
  Container c;
  try {
    c.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, std::string("header: ") + e.what());
  }
  const auto start = is.tellg();
  is.seekg(0, std::ios::end);
  const auto end = is.tellg();
  is.seekg(start);
  const auto bytes = static_cast<std::size_t>(end - start);
  if (bytes % 4 != 0) throw Error(Errc::FormatError, "payload is not a whole number of float32 values");
  c.payload.resize(bytes / 4);
  for (auto& v : c.payload) v = detail::get<float>(is);
  return c;
}

inline constexpr std::string_view kFeatureMagic = "MCFEAT01";

inline nlohmann::json frontend_header(const FrontendConfig& cfg) {
  return {{"dtype", "f32le"}, {"hop_ms", cfg.hop_ms}, {"win_ms", cfg.win_ms}, {"fft_size", cfg.fft_size}};
}

// Feature dump [C x T x 3F]; each row is log power, cos IPD, sin IPD.
inline void write_features(const std::filesystem::path& path, const FeatureTensor& f,
                           const FrontendConfig& cfg = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot open " + path.string() + " for writing");
  nlohmann::json header = frontend_header(cfg);
  header["shape"] = {f.channels, f.frames, f.dim()};
  header["layout"] = "log_power|cos_ipd|sin_ipd";
  std::vector<float> payload;
  payload.reserve(f.channels * f.frames * f.dim());
  for (std::size_t c = 0; c < f.channels; ++c) {
    const Tensor<float> m = f.channel_matrix<float>(c);
    payload.insert(payload.end(), m.values().begin(), m.values().end());
  }
  write_container(os, kFeatureMagic, header, payload);
  if (!os) throw Error(Errc::IoError, "failed writing " + path.string());
}

// Generic [rows x cols] matrix dump in the same container (encoder hidden vectors).
inline void write_matrix(const std::filesystem::path& path, const Tensor<float>& m, const FrontendConfig& cfg = {},
                         const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot open " + path.string() + " for writing");
  nlohmann::json header = frontend_header(cfg);
  header["shape"] = {m.rows(), m.cols()};
  for (auto it = extra.begin(); it != extra.end(); ++it) header[it.key()] = it.value();
  write_container(os, kFeatureMagic, header, m.values());
  if (!os) throw Error(Errc::IoError, "failed writing " + path.string());
}

inline Container read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open " + path.string());
  Container c = read_container(is, kFeatureMagic);
  std::size_t expected = 1;
  for (const auto& d : c.header.at("shape")) expected *= d.get<std::size_t>();
  if (expected != c.payload.size()) throw Error(Errc::FormatError, path.string() + ": payload/shape mismatch");
  return c;
}

}  // namespace mcw2v::io
