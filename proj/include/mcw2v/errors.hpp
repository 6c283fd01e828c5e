#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mcw2v {

enum class Errc {
  WaveTooShort,
  SampleRateUnsupported,
  SingleChannel,
  ShapeMismatch,
  DimensionMismatch,
  NotScalar,
  NonDeterministicFunction,
  EmptyMask,
  TokenOutOfRange,
  LatticeMismatch,
  ImpossibleAlignment,
  TooLarge,
  NonFiniteGradient,
  EmptyReference,
  IoError,
  FormatError,
  ConfigError,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::WaveTooShort: return "WaveTooShort";
    case Errc::SampleRateUnsupported: return "SampleRateUnsupported";
    case Errc::SingleChannel: return "SingleChannel";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NotScalar: return "NotScalar";
    case Errc::NonDeterministicFunction: return "NonDeterministicFunction";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::TokenOutOfRange: return "TokenOutOfRange";
    case Errc::LatticeMismatch: return "LatticeMismatch";
    case Errc::ImpossibleAlignment: return "ImpossibleAlignment";
    case Errc::TooLarge: return "TooLarge";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::EmptyReference: return "EmptyReference";
    case Errc::IoError: return "IoError";
    case Errc::FormatError: return "FormatError";
    case Errc::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

// All library failures are reported with this exception; code() identifies
// the failure class, what() carries the details.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace mcw2v
