#pragma once

// Checkpoints: "MCW2VCK1", one JSON header line (run config, its hash,
// normalization stats, parameter table), then every parameter as float32 in
// header order.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "mcw2v/config.hpp"
#include "mcw2v/io.hpp"

namespace mcw2v {

inline constexpr std::string_view kCheckpointMagic = "MCW2VCK1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;  // "pretrain" or "transducer"
  std::size_t step = 0;
  RunConfig config;
  NormStats norm;
  std::vector<std::string> order;
  std::map<std::string, Tensor<float>> params;
};

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<S>& store, const std::string& kind,
                     std::size_t step, const RunConfig& cfg, const NormStats& norm) {
  nlohmann::json header = {{"version", kCheckpointVersion},
                           {"kind", kind},
                           {"step", step},
                           {"config", cfg.to_json()},
                           {"config_hash", cfg.hash()},
                           {"norm", {{"mean", norm.mean}, {"std", norm.stddev}}}};
  nlohmann::json table = nlohmann::json::array();
  std::vector<float> payload;
  for (std::size_t i = 0; i < store.size(); ++i) {
    table.push_back({{"name", store[i].name}, {"shape", store[i].value.shape()}});
    for (S v : store[i].value.values()) payload.push_back(static_cast<float>(v));
  }
  header["params"] = std::move(table);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::IoError, "cannot write checkpoint " + path.string());
  io::write_container(os, kCheckpointMagic, header, payload);
  if (!os) throw Error(Errc::IoError, "failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::IoError, "cannot open checkpoint " + path.string());
  io::Container c = io::read_container(is, kCheckpointMagic);
  Checkpoint ck;
  try {
    const auto& h = c.header;
    if (h.at("version").get<int>() != kCheckpointVersion)
      throw Error(Errc::FormatError, "unsupported checkpoint version in " + path.string());
    ck.kind = h.at("kind").get<std::string>();
    ck.step = h.at("step").get<std::size_t>();
    ck.config.merge(h.at("config"));
    if (ck.config.hash() != h.at("config_hash").get<std::string>())
      throw Error(Errc::FormatError, path.string() + ": config hash does not match stored config");
    ck.norm.mean = h.at("norm").at("mean").get<std::vector<double>>();
    ck.norm.stddev = h.at("norm").at("std").get<std::vector<double>>();
    std::size_t offset = 0;
    for (const auto& p : h.at("params")) {
      const auto name = p.at("name").get<std::string>();
      Tensor<float> t(p.at("shape").get<Shape>());
      if (offset + t.size() > c.payload.size()) throw Error(Errc::FormatError, path.string() + ": truncated payload");
      std::copy_n(c.payload.begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.values().begin());
      offset += t.size();
      ck.order.push_back(name);
      ck.params.emplace(name, std::move(t));
    }
    if (offset != c.payload.size()) throw Error(Errc::FormatError, path.string() + ": trailing payload");
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, path.string() + ": " + e.what());
  }
  return ck;
}

// Copies every checkpoint tensor whose name starts with `prefix` into the
// store. With require_all, every store parameter under the prefix must be
// present. Returns the number of tensors copied.
template <typename S>
std::size_t assign_parameters(ParamStore<S>& store, const Checkpoint& ck, const std::string& prefix = "",
                              bool require_all = true) {
  std::size_t copied = 0;
  for (const auto& [name, t] : ck.params) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    if (!store.contains(name)) throw Error(Errc::FormatError, "checkpoint parameter " + name + " unknown to model");
    Parameter<S>& p = store.at(name);
    if (p.value.shape() != t.shape()) {
      throw Error(Errc::ShapeMismatch, "parameter " + name + ": checkpoint " + shape_str(t.shape()) + ", model " +
                                           shape_str(p.value.shape()));
    }
    for (std::size_t i = 0; i < t.size(); ++i) p.value[i] = static_cast<S>(t[i]);
    ++copied;
  }
  if (require_all) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& name = store[i].name;
      if (name.compare(0, prefix.size(), prefix) == 0 && !ck.params.count(name))
        throw Error(Errc::FormatError, "checkpoint lacks parameter " + name);
    }
  }
  return copied;
}

}  // namespace mcw2v
