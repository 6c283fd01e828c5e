#pragma once

// End-to-end pieces shared by the CLI and the experiments: feature caches,
// the pre-training and transducer models, both training loops, decoding and
// evaluation reports.

#include <chrono>
#include <exception>
#include <functional>
#include <iomanip>
#include <memory>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "mcw2v/checkpoint.hpp"
#include "mcw2v/contrastive.hpp"

namespace mcw2v {

// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception is
// rethrown after all workers finish.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += jobs) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct Utterance {
  std::string id;
  std::string text;
  TokenSequence tokens;
  FeatureTensor features;
};

struct Dataset {
  std::vector<Utterance> items;
  std::size_t size() const { return items.size(); }
};

inline Dataset load_dataset(const Manifest& manifest, std::size_t vocab_size, std::size_t jobs = 1,
                            const FrontendConfig& frontend = {}) {
  Dataset ds;
  ds.items.resize(manifest.size());
  parallel_for(manifest.size(), jobs, [&](std::size_t i) {
    const ManifestEntry& e = manifest.entries[i];
    Utterance& u = ds.items[i];
    u.id = e.id;
    u.text = e.text;
    u.tokens = text_to_tokens(e.text, vocab_size);
    u.features = extract_features(io::read_wav(e.wav), frontend);
  });
  return ds;
}

inline NormStats compute_norm(const Dataset& ds) {
  if (ds.items.empty()) throw Error(Errc::ConfigError, "cannot compute normalization over an empty dataset");
  NormAccumulator acc(ds.items.front().features.dim());
  for (const auto& u : ds.items) acc.add(u.features);
  return acc.finish();
}

// Normalized [T x 771] input matrix of every channel, as graph constants.
template <typename S>
std::vector<ag::Var<S>> feature_inputs(ag::Graph<S>& g, const FeatureTensor& f, const NormStats& norm) {
  std::vector<ag::Var<S>> out;
  for (std::size_t c = 0; c < f.channels; ++c) {
    Tensor<S> m = f.channel_matrix<S>(c);
    norm.apply(m);
    out.push_back(g.constant(std::move(m)));
  }
  return out;
}

// Mixes a step and item index into an independent seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <typename S>
class PretrainModel {
 public:
  PretrainModel(const RunConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), rng_(seed), encoder_(store_, cfg.encoder, rng_), quantizer_(store_, cfg.quantizer_config(), rng_) {}
  PretrainModel(const PretrainModel&) = delete;
  PretrainModel& operator=(const PretrainModel&) = delete;

  ParamStore<S>& store() { return store_; }
  const RunConfig& config() const { return cfg_; }
  const MultiChannelEncoder<S>& encoder() const { return encoder_; }
  const QuantizerBank<S>& quantizer() const { return quantizer_; }

  // Masks the encoder input, quantizes the clean features and scores the
  // masked frames against same-utterance distractors.
  ag::Var<S> loss(ag::Graph<S>& g, const FeatureTensor& f, const NormStats& norm, std::uint64_t seed) const {
    std::vector<ag::Var<S>> inputs = feature_inputs(g, f, norm);
    const MaskSpec mask = sample_mask(f.frames, seed, cfg_.pretrain.mask_span, cfg_.pretrain.mask_ratio);
    const auto distractors = sample_distractors(mask, cfg_.pretrain.distractors, mix_seed(seed, 1));
    const EncoderOutput<S> enc = encoder_.encode(inputs, mask.masked, seed);
    ag::Var<S> context = ag::gather_rows(enc.fused, mask.masked);
    ag::Var<S> targets = ag::gather_rows(quantizer_(inputs, !cfg_.quantizer.stop_gradient), mask.masked);
    return contrastive_loss(context, targets, distractors);
  }

 private:
  RunConfig cfg_;
  ParamStore<S> store_;
  Rng rng_;
  MultiChannelEncoder<S> encoder_;
  QuantizerBank<S> quantizer_;
};

template <typename S>
class TransducerModel {
 public:
  TransducerModel(const RunConfig& cfg, std::uint64_t seed)
      : cfg_(cfg),
        tcfg_(cfg.transducer_config()),
        rng_(seed),
        encoder_(store_, cfg.encoder, rng_),
        label_(store_, tcfg_, rng_),
        joint_(store_, tcfg_, rng_) {}
  TransducerModel(const TransducerModel&) = delete;
  TransducerModel& operator=(const TransducerModel&) = delete;

  ParamStore<S>& store() { return store_; }
  const RunConfig& config() const { return cfg_; }
  const MultiChannelEncoder<S>& encoder() const { return encoder_; }

  ag::Var<S> loss(ag::Graph<S>& g, const FeatureTensor& f, const NormStats& norm, const TokenSequence& y,
                  std::uint64_t seed = 0) const {
    const EncoderOutput<S> enc = encoder_.encode(feature_inputs(g, f, norm), {}, seed);
    return rnnt_loss(joint_(enc.fused, label_.encode(g, y)), f.frames, y);
  }

  TokenSequence decode(const FeatureTensor& f, const NormStats& norm) const {
    ag::Graph<S> g(false);
    const EncoderOutput<S> enc = encoder_.encode(feature_inputs(g, f, norm));
    ag::Var<S> enc_side = joint_.encoder_side(enc.fused);
    LabelState<S> state = label_.step(g, tcfg_.blank(), nullptr);
    ag::Var<S> label_side = joint_.label_side(state.output());
    auto best = [&](std::size_t t) {
      const Tensor<S>& lp = joint_.combine(ag::slice_rows(enc_side, t, t + 1), label_side).value();
      return static_cast<std::size_t>(std::max_element(lp.values().begin(), lp.values().end()) - lp.values().begin());
    };
    auto advance = [&](std::size_t token) {
      state = label_.step(g, token, &state);
      label_side = joint_.label_side(state.output());
    };
    return greedy_search(f.frames, tcfg_.blank(), tcfg_.max_symbols_per_frame, best, advance);
  }

  // Fused encoder output [T x hidden].
  Tensor<S> hidden(const FeatureTensor& f, const NormStats& norm) const {
    ag::Graph<S> g(false);
    return encoder_.encode(feature_inputs(g, f, norm)).fused.value();
  }

 private:
  RunConfig cfg_;
  TransducerConfig tcfg_;
  ParamStore<S> store_;
  Rng rng_;
  MultiChannelEncoder<S> encoder_;
  LabelEncoder<S> label_;
  JointNetwork<S> joint_;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"seconds", r.seconds}};
}

struct TrainOptions {
  std::size_t steps = 0;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  double clip_norm = 5.0;
  std::size_t log_every = 0;    // 0: no log lines
  std::ostream* log = nullptr;  // JSON lines
  std::size_t checkpoint_every = 0;
  std::function<void(std::size_t)> checkpoint;
};

// Minibatch loop: item_loss(graph, item, seed) builds one utterance's loss;
// gradients of the batch mean are accumulated, clipped, and applied by Adam.
// Items are visited in a fresh seeded shuffle every epoch.
template <typename S, typename ItemLoss>
std::vector<StepRecord> train_loop(ParamStore<S>& store, Adam<S>& adam, std::size_t n_items, const TrainOptions& opts,
                                   ItemLoss&& item_loss) {
  if (n_items == 0) throw Error(Errc::ConfigError, "training set is empty");
  const std::size_t batch = std::max<std::size_t>(1, opts.batch_size);
  Rng rng(mix_seed(opts.seed, 0xDA7A));
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n_items;
  std::vector<StepRecord> records;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= opts.steps; ++step) {
    store.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == n_items) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t item = order[cursor++];
      ag::Graph<S> g;
      ag::Var<S> loss = item_loss(g, item, mix_seed(opts.seed, step * 4096 + b));
      total += static_cast<double>(loss.value()[0]);
      g.backward(ag::scale(loss, S(1) / static_cast<S>(batch)));
    }
    clip_gradients(store, opts.clip_norm);
    StepRecord r;
    r.step = step;
    r.lr = adam.update(store);
    r.loss = total / static_cast<double>(batch);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!std::isfinite(r.loss)) throw Error(Errc::NonFiniteGradient, "loss is not finite at step " + std::to_string(step));
    records.push_back(r);
    if (opts.log && opts.log_every && (step % opts.log_every == 0 || step == 1 || step == opts.steps))
      *opts.log << to_json(r).dump() << '\n' << std::flush;
    if (opts.checkpoint && opts.checkpoint_every && step % opts.checkpoint_every == 0) opts.checkpoint(step);
  }
  return records;
}

inline TrainOptions train_options(const RunConfig& cfg, std::size_t steps, std::size_t batch, std::ostream* log) {
  TrainOptions o;
  o.steps = steps;
  o.batch_size = batch;
  o.seed = cfg.run.seed;
  o.clip_norm = cfg.optim.clip_norm;
  o.log_every = cfg.run.log_every;
  o.log = log;
  o.checkpoint_every = cfg.run.checkpoint_every;
  return o;
}

template <typename S>
std::vector<StepRecord> pretrain(PretrainModel<S>& model, const Dataset& data, const NormStats& norm,
                                 const TrainOptions& opts) {
  Adam<S> adam(model.store(), model.config().adam_options());
  return train_loop(model.store(), adam, data.size(), opts, [&](ag::Graph<S>& g, std::size_t i, std::uint64_t seed) {
    return model.loss(g, data.items[i].features, norm, seed);
  });
}

template <typename S>
std::vector<StepRecord> finetune(TransducerModel<S>& model, const Dataset& data, const NormStats& norm,
                                 const TrainOptions& opts) {
  const RunConfig& cfg = model.config();
  Adam<S> adam(model.store(), cfg.adam_options());
  return train_loop(model.store(), adam, data.size(), opts, [&](ag::Graph<S>& g, std::size_t i, std::uint64_t seed) {
    const Utterance& u = data.items[i];
    if (!cfg.finetune.spec_augment) return model.loss(g, u.features, norm, u.tokens, seed);
    return model.loss(g, spec_augment(u.features, cfg.finetune.augment, seed), norm, u.tokens, seed);
  });
}

// Copies the pre-trained encoder weights into a transducer model; the label
// encoder and joint network keep their fresh initialization.
template <typename S>
std::size_t init_from_pretrained(TransducerModel<S>& model, const Checkpoint& ck) {
  if (ck.config.encoder.hidden != model.config().encoder.hidden || ck.config.encoder.layers != model.config().encoder.layers)
    throw Error(Errc::ConfigError, "pre-trained encoder shape differs from the fine-tuning config");
  return assign_parameters(model.store(), ck, "encoder.", true);
}

struct EvalResult {
  std::size_t n_utts = 0;
  double cer = 0.0;
  double wer = 0.0;
  std::vector<std::string> hypotheses;
};

// Corpus-level error rates: total edits over total reference symbols.
template <typename S>
EvalResult evaluate(const TransducerModel<S>& model, const Dataset& data, const NormStats& norm, std::size_t jobs = 1) {
  EvalResult r;
  r.n_utts = data.size();
  r.hypotheses.resize(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    r.hypotheses[i] = tokens_to_text(model.decode(data.items[i].features, norm));
  });
  std::size_t char_edits = 0, chars = 0, word_edits = 0, words = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string& ref = data.items[i].text;
    const std::string& hyp = r.hypotheses[i];
    if (ref.empty()) throw Error(Errc::EmptyReference, "utterance " + data.items[i].id + " has an empty transcript");
    char_edits += edit_distance(chars_of(ref), chars_of(hyp));
    chars += ref.size();
    word_edits += edit_distance(words_of(ref), words_of(hyp));
    words += words_of(ref).size();
  }
  if (chars) r.cer = static_cast<double>(char_edits) / static_cast<double>(chars);
  if (words) r.wer = static_cast<double>(word_edits) / static_cast<double>(words);
  return r;
}

inline nlohmann::json metrics_report(const std::string& checkpoint, const EvalResult& r,
                                     const EvalResult* baseline = nullptr) {
  nlohmann::json j = {{"checkpoint", checkpoint}, {"n_utts", r.n_utts}, {"cer", r.cer}, {"wer", r.wer}};
  if (baseline) {
    j["baseline_cer"] = baseline->cer;
    j["baseline_wer"] = baseline->wer;
    j["cerr_vs_baseline"] = relative_reduction(baseline->cer, r.cer);
    j["werr_vs_baseline"] = relative_reduction(baseline->wer, r.wer);
  }
  return j;
}

// One row of the pre-training comparison table.
struct TableRow {
  std::string id;
  bool pretrained = false;
  std::string method;     // "joint", "feature", "channel" or "-"
  std::string amp_act;    // feature-wise only
  std::string phase_act;  // feature-wise only
  double cer = 0.0;
  double cerr = 0.0;
};

inline std::string format_table(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(6) << "ID" << std::setw(14) << "pre-training" << std::setw(14) << "quantization"
     << std::setw(10) << "amp act" << std::setw(11) << "phase act" << std::right << std::setw(9) << "CER (%)"
     << std::setw(10) << "CERR (%)" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << std::left << std::setw(6) << r.id << std::setw(14) << (r.pretrained ? "yes" : "-") << std::setw(14)
       << (r.method.empty() ? "-" : r.method) << std::setw(10) << (r.amp_act.empty() ? "-" : r.amp_act)
       << std::setw(11) << (r.phase_act.empty() ? "-" : r.phase_act) << std::right << std::setw(9) << 100.0 * r.cer
       << std::setw(10);
    if (r.pretrained)
      os << r.cerr;
    else
      os << "-";
    os << '\n';
  }
  return os.str();
}

}  // namespace mcw2v
