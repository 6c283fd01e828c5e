#pragma once

// Desk-scale comparison of pre-training methods on the synthetic corpus:
// fine-tuning from random initialization against fine-tuning from encoders
// pre-trained with each quantization method, all with the same budget.

#include <filesystem>
#include <numeric>
#include <ostream>

#include "mcw2v/pipeline.hpp"

namespace mcw2v {

struct DeskExperimentOptions {
  RunConfig config;
  std::size_t n_train = 200;
  std::size_t n_test = 50;
  std::uint64_t corpus_seed = 2024;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool all_methods = true;  // also joint and channel-wise, first seed only
  std::filesystem::path work_dir;
  std::ostream* progress = nullptr;
};

struct DeskRun {
  std::string label;
  std::uint64_t seed = 0;
  double cer = 0.0;
  double final_loss = 0.0;
};

struct DeskExperimentResult {
  std::vector<DeskRun> random_init;
  std::vector<DeskRun> feature_init;
  std::vector<DeskRun> other_methods;
  std::vector<TableRow> rows;
  std::string table;
  double seconds = 0.0;

  static double mean_cer(const std::vector<DeskRun>& runs) {
    if (runs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : runs) s += r.cer;
    return s / static_cast<double>(runs.size());
  }
};

namespace detail {

inline double tail_loss(const std::vector<StepRecord>& log, std::size_t n = 50) {
  if (log.empty()) return 0.0;
  n = std::min(n, log.size());
  double s = 0.0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) s += log[i].loss;
  return s / static_cast<double>(n);
}

}  // namespace detail

inline DeskExperimentResult run_desk_experiment(const DeskExperimentOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  auto say = [&](const std::string& line) {
    if (opts.progress) *opts.progress << line << std::endl;
  };
  const RunConfig& base = opts.config;
  base.validate();
  const CorpusManifests corpus = build_corpus(base.corpus, opts.n_train, opts.n_test, opts.corpus_seed, opts.work_dir / "corpus");
  const Dataset train = load_dataset(corpus.train, base.corpus.vocab_size, base.run.jobs);
  const Dataset test = load_dataset(corpus.test, base.corpus.vocab_size, base.run.jobs);
  const NormStats norm = compute_norm(train);

  auto fine_tune = [&](const std::string& label, std::uint64_t seed, const Checkpoint* init) {
    RunConfig cfg = base;
    cfg.run.seed = seed;
    TransducerModel<float> model(cfg, seed);
    if (init) init_from_pretrained(model, *init);
    const auto log = finetune(model, train, norm, train_options(cfg, cfg.finetune.steps, cfg.finetune.batch_size, nullptr));
    DeskRun r{label, seed, evaluate(model, test, norm, cfg.run.jobs).cer, detail::tail_loss(log)};
    std::ostringstream os;
    os << "finetune " << label << " seed " << seed << ": test CER " << r.cer << ", final loss " << r.final_loss;
    say(os.str());
    return r;
  };
  auto pre_train = [&](const std::string& method, const std::string& amp, const std::string& phase, std::uint64_t seed) {
    RunConfig cfg = base;
    cfg.run.seed = seed;
    cfg.quantizer.method = method;
    cfg.quantizer.amp_act = amp;
    cfg.quantizer.phase_act = phase;
    PretrainModel<float> model(cfg, mix_seed(seed, 0x9e7));
    const auto log = pretrain(model, train, norm, train_options(cfg, cfg.pretrain.steps, cfg.pretrain.batch_size, nullptr));
    const auto path = opts.work_dir / ("pretrain-" + method + "-" + std::to_string(seed) + ".ckpt");
    save_checkpoint(path, model.store(), "pretrain", cfg.pretrain.steps, cfg, norm);
    std::ostringstream os;
    os << "pretrain " << method << " seed " << seed << ": loss " << log.front().loss << " -> " << detail::tail_loss(log);
    say(os.str());
    return load_checkpoint(path);
  };

  DeskExperimentResult res;
  for (std::uint64_t seed : opts.seeds) {
    res.random_init.push_back(fine_tune("random", seed, nullptr));
    const Checkpoint ck = pre_train("feature", "swish", "none", seed);
    res.feature_init.push_back(fine_tune("feature", seed, &ck));
  }
  if (opts.all_methods && !opts.seeds.empty()) {
    const std::uint64_t seed = opts.seeds.front();
    for (const char* method : {"joint", "channel"}) {
      const Checkpoint ck = pre_train(method, "swish", "none", seed);
      res.other_methods.push_back(fine_tune(method, seed, &ck));
    }
  }

  const double base_cer = DeskExperimentResult::mean_cer(res.random_init);
  res.rows.push_back({"exp0", false, "", "", "", base_cer, 0.0});
  for (const auto& r : res.other_methods)
    res.rows.push_back({r.label == "joint" ? "exp3" : "exp5", true, r.label, "", "", r.cer,
                        relative_reduction(base_cer, r.cer)});
  const double feature_cer = DeskExperimentResult::mean_cer(res.feature_init);
  res.rows.push_back({"exp4", true, "feature", "swish", "none", feature_cer, relative_reduction(base_cer, feature_cer)});
  res.table = format_table(res.rows);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace mcw2v
