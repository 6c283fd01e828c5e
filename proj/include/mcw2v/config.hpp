#pragma once

// Run configuration: every tunable of the pipeline, loadable from JSON with
// command-line overrides. Unknown keys are rejected.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mcw2v/corpus.hpp"
#include "mcw2v/encoder.hpp"
#include "mcw2v/optim.hpp"
#include "mcw2v/quantizer.hpp"
#include "mcw2v/transducer.hpp"

namespace mcw2v {

struct RunConfig {
  EncoderConfig encoder;

  struct Quantizer {
    std::string method = "feature";
    std::string amp_act = "swish";
    std::string phase_act = "none";
    std::size_t attention_dim = 128;
    std::size_t channels = 2;
    bool share_channel_quantizer = true;
    bool stop_gradient = true;
  } quantizer;

  struct Transducer {
    std::size_t vocab_size = 16;
    std::size_t label_hidden = 256;
    std::size_t proj_dim = 512;
    std::size_t joint_dim = 256;
    std::size_t max_symbols_per_frame = 10;
  } transducer;

  struct Pretrain {
    std::size_t steps = 1000;
    std::size_t batch_size = 4;
    std::size_t mask_span = 10;
    double mask_ratio = 0.5;
    std::size_t distractors = 100;
  } pretrain;

  struct Finetune {
    std::size_t steps = 2000;
    std::size_t batch_size = 4;
    bool spec_augment = true;
    AugmentPolicy augment;
  } finetune;

  struct Optim {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::size_t warmup_steps = 4000;
    double lr_scale = 1.0;
    double clip_norm = 5.0;
  } optim;

  struct Run {
    std::uint64_t seed = 0;
    std::size_t log_every = 50;
    std::size_t checkpoint_every = 0;
    std::size_t jobs = 1;
  } run;

  SynthConfig corpus;

  // Calls v(section, key, field) for every field.
  template <typename Self, typename V>
  static void visit(Self& c, V&& v) {
    v("encoder", "layers", c.encoder.layers);
    v("encoder", "heads", c.encoder.heads);
    v("encoder", "head_dim", c.encoder.head_dim);
    v("encoder", "hidden", c.encoder.hidden);
    v("encoder", "ffn_dim", c.encoder.ffn_dim);
    v("encoder", "conv_kernel", c.encoder.conv_kernel);
    v("encoder", "rel_pos_dim", c.encoder.rel_pos_dim);
    v("encoder", "dropout", c.encoder.dropout);
    v("quantizer", "method", c.quantizer.method);
    v("quantizer", "amp_act", c.quantizer.amp_act);
    v("quantizer", "phase_act", c.quantizer.phase_act);
    v("quantizer", "attention_dim", c.quantizer.attention_dim);
    v("quantizer", "channels", c.quantizer.channels);
    v("quantizer", "share_channel_quantizer", c.quantizer.share_channel_quantizer);
    v("quantizer", "stop_gradient", c.quantizer.stop_gradient);
    v("transducer", "vocab_size", c.transducer.vocab_size);
    v("transducer", "label_hidden", c.transducer.label_hidden);
    v("transducer", "proj_dim", c.transducer.proj_dim);
    v("transducer", "joint_dim", c.transducer.joint_dim);
    v("transducer", "max_symbols_per_frame", c.transducer.max_symbols_per_frame);
    v("pretrain", "steps", c.pretrain.steps);
    v("pretrain", "batch_size", c.pretrain.batch_size);
    v("pretrain", "mask_span", c.pretrain.mask_span);
    v("pretrain", "mask_ratio", c.pretrain.mask_ratio);
    v("pretrain", "distractors", c.pretrain.distractors);
    v("finetune", "steps", c.finetune.steps);
    v("finetune", "batch_size", c.finetune.batch_size);
    v("finetune", "spec_augment", c.finetune.spec_augment);
    v("finetune", "freq_masks", c.finetune.augment.freq_masks);
    v("finetune", "max_freq_width", c.finetune.augment.max_freq_width);
    v("finetune", "time_masks", c.finetune.augment.time_masks);
    v("finetune", "max_time_width", c.finetune.augment.max_time_width);
    v("optim", "beta1", c.optim.beta1);
    v("optim", "beta2", c.optim.beta2);
    v("optim", "eps", c.optim.eps);
    v("optim", "warmup_steps", c.optim.warmup_steps);
    v("optim", "lr_scale", c.optim.lr_scale);
    v("optim", "clip_norm", c.optim.clip_norm);
    v("run", "seed", c.run.seed);
    v("run", "log_every", c.run.log_every);
    v("run", "checkpoint_every", c.run.checkpoint_every);
    v("run", "jobs", c.run.jobs);
    v("corpus", "vocab_size", c.corpus.vocab_size);
    v("corpus", "min_tokens", c.corpus.min_tokens);
    v("corpus", "max_tokens", c.corpus.max_tokens);
    v("corpus", "token_ms", c.corpus.token_ms);
    v("corpus", "min_delay", c.corpus.min_delay);
    v("corpus", "max_delay", c.corpus.max_delay);
    v("corpus", "min_snr_db", c.corpus.min_snr_db);
    v("corpus", "max_snr_db", c.corpus.max_snr_db);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    visit(*this, [&](const char* sec, const char* key, const auto& field) { j[sec][key] = field; });
    return j;
  }

  // Overlays `j` onto this config. Every key must name an existing field.
  void merge(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(Errc::ConfigError, "config must be a JSON object");
    for (auto sec = j.begin(); sec != j.end(); ++sec) {
      bool known = false;
      visit(*this, [&](const char* s, const char*, const auto&) { known = known || sec.key() == s; });
      if (!known) throw Error(Errc::ConfigError, "unknown config section '" + sec.key() + "'");
      if (!sec.value().is_object()) throw Error(Errc::ConfigError, "config section '" + sec.key() + "' is not an object");
      for (auto it = sec.value().begin(); it != sec.value().end(); ++it) set(sec.key(), it.key(), it.value());
    }
  }

  void set(const std::string& section, const std::string& key, const nlohmann::json& value) {
    bool found = false;
    visit(*this, [&](const char* sec, const char* k, auto& field) {
      if (found || section != sec || key != k) return;
      found = true;
      using T = std::decay_t<decltype(field)>;
      try {
        if constexpr (std::is_same_v<T, bool>) {
          if (!value.is_boolean()) throw Error(Errc::ConfigError, "expected a boolean");
          field = value.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
          if (!value.is_string()) throw Error(Errc::ConfigError, "expected a string");
          field = value.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
          if (!value.is_number()) throw Error(Errc::ConfigError, "expected a number");
          field = value.get<T>();
        } else {
          if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0))
            throw Error(Errc::ConfigError, "expected a non-negative integer");
          field = value.get<T>();
        }
      } catch (const Error& e) {
        throw Error(Errc::ConfigError, section + "." + key + ": " + e.what());
      }
    });
    if (!found) throw Error(Errc::ConfigError, "unknown config key " + section + "." + key);
  }

  // "section.key=value"; value is parsed as JSON, falling back to a string.
  void set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw Error(Errc::ConfigError, "override must look like section.key=value: " + assignment);
    const std::string section = assignment.substr(0, dot), key = assignment.substr(dot + 1, eq - dot - 1);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    set(section, key, value);
  }

  static RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error(Errc::IoError, "cannot open config " + path);
    RunConfig c;
    try {
      c.merge(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::ConfigError, path + ": " + e.what());
    }
    return c;
  }

  // FNV-1a of the canonical JSON dump.
  std::string hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : to_json().dump()) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  QuantizerConfig quantizer_config(std::size_t bins = 257) const {
    QuantizerConfig q;
    q.method = parse_quantizer_method(quantizer.method);
    q.amp_activation = parse_activation(quantizer.amp_act);
    q.phase_activation = parse_activation(quantizer.phase_act);
    q.target_dim = encoder.hidden;
    q.bins = bins;
    q.channels = quantizer.channels;
    q.attention_dim = quantizer.attention_dim;
    q.share_channel_quantizer = quantizer.share_channel_quantizer;
    return q;
  }

  TransducerConfig transducer_config() const {
    TransducerConfig t;
    t.vocab_size = transducer.vocab_size;
    t.encoder_dim = encoder.hidden;
    t.label_hidden = transducer.label_hidden;
    t.proj_dim = transducer.proj_dim;
    t.joint_dim = transducer.joint_dim;
    t.max_symbols_per_frame = transducer.max_symbols_per_frame;
    return t;
  }

  AdamOptions adam_options() const {
    AdamOptions a;
    a.beta1 = optim.beta1;
    a.beta2 = optim.beta2;
    a.eps = optim.eps;
    a.warmup_steps = optim.warmup_steps;
    a.model_dim = encoder.hidden;
    a.lr_scale = optim.lr_scale;
    return a;
  }

  void validate() const {
    encoder.validate();
    quantizer_config();
    corpus.validate();
    if (transducer.vocab_size != corpus.vocab_size)
      throw Error(Errc::ConfigError, "transducer.vocab_size must match corpus.vocab_size");
    if (quantizer.channels < 2) throw Error(Errc::ConfigError, "quantizer.channels must be at least 2");
  }
};

}  // namespace mcw2v
