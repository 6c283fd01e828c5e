// mcw2v: multi-channel self-supervised pre-training and transducer
// fine-tuning on two-channel audio.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "mcw2v/experiment.hpp"
#include "mcw2v/gradcheck_suite.hpp"

namespace {

using namespace mcw2v;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t jobs = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a config field, section.key=value (repeatable)");
  cmd->add_option("--jobs", c.jobs, "worker threads for feature extraction and decoding");
}

// Config precedence: defaults < fallback (e.g. a checkpoint's config) <
// --config file < --set overrides < dedicated flags (applied by the caller).
RunConfig resolve(const Common& c, const RunConfig* fallback = nullptr) {
  RunConfig cfg = fallback ? *fallback : RunConfig{};
  if (!c.config_path.empty()) {
    std::ifstream is(c.config_path);
    try {
      cfg.merge(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::ConfigError, c.config_path + ": " + e.what());
    }
  }
  for (const auto& o : c.overrides) cfg.set_override(o);
  if (c.jobs) cfg.run.jobs = c.jobs;
  return cfg;
}

void echo_config(const RunConfig& cfg) {
  std::cout << nlohmann::json{{"config", cfg.to_json()}, {"config_hash", cfg.hash()}}.dump() << std::endl;
}

Dataset load(const std::string& manifest, const RunConfig& cfg) {
  return load_dataset(load_manifest(manifest), cfg.transducer.vocab_size, cfg.run.jobs);
}

// Encoder weights and normalization of a pre-training or transducer checkpoint.
struct LoadedEncoder {
  Checkpoint ck;
  ParamStore<float> store;
  std::unique_ptr<MultiChannelEncoder<float>> encoder;
};

std::unique_ptr<LoadedEncoder> load_encoder(const std::string& path) {
  auto out = std::make_unique<LoadedEncoder>();
  out->ck = load_checkpoint(path);
  Rng rng(0);
  out->encoder = std::make_unique<MultiChannelEncoder<float>>(out->store, out->ck.config.encoder, rng);
  assign_parameters(out->store, out->ck, "encoder.", true);
  return out;
}

std::unique_ptr<TransducerModel<float>> load_transducer(const Checkpoint& ck) {
  if (ck.kind != "transducer") throw Error(Errc::FormatError, "expected a fine-tuned transducer checkpoint, got " + ck.kind);
  auto model = std::make_unique<TransducerModel<float>>(ck.config, 0);
  assign_parameters(model->store(), ck, "", true);
  return model;
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-channel wav2vec-style pre-training and transducer ASR"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // synth
  std::string out_dir;
  std::size_t n_train = 200, n_test = 50;
  std::uint64_t seed = 0;
  Common synth_common;
  auto* synth = app.add_subcommand("synth", "generate the synthetic two-channel corpus");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--n-train", n_train, "training utterances");
  synth->add_option("--n-test", n_test, "test utterances");
  synth->add_option("--seed", seed, "random seed");
  add_common(synth, synth_common);

  // features
  std::string wav, out_file;
  auto* features = app.add_subcommand("features", "dump log power and IPD features of a WAV file");
  features->add_option("--wav", wav, "two-or-more channel PCM16 WAV")->required()->check(CLI::ExistingFile);
  features->add_option("--out", out_file, "output MCFEAT01 file")->required();

  // pretrain
  std::string manifest, quantizer, amp_act, phase_act, ckpt_out;
  std::size_t steps = 0;
  std::optional<std::uint64_t> run_seed;
  Common pre_common;
  auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training of the encoder");
  pre->add_option("--manifest", manifest, "training manifest (JSONL)")->required()->check(CLI::ExistingFile);
  pre->add_option("--quantizer", quantizer, "quantization method")->check(CLI::IsMember({"joint", "feature", "channel"}));
  pre->add_option("--amp-act", amp_act, "amplitude quantizer activation")->check(CLI::IsMember({"swish", "relu", "none"}));
  pre->add_option("--phase-act", phase_act, "phase quantizer activation")->check(CLI::IsMember({"swish", "relu", "none"}));
  pre->add_option("--steps", steps, "optimizer steps");
  pre->add_option("--seed", run_seed, "random seed");
  pre->add_option("--out", ckpt_out, "output checkpoint")->required();
  add_common(pre, pre_common);

  // finetune
  std::string init = "random";
  Common ft_common;
  auto* ft = app.add_subcommand("finetune", "train the transducer, optionally from a pre-trained encoder");
  ft->add_option("--manifest", manifest, "training manifest (JSONL)")->required()->check(CLI::ExistingFile);
  ft->add_option("--init", init, "pre-training checkpoint or 'random'");
  ft->add_option("--steps", steps, "optimizer steps");
  ft->add_option("--seed", run_seed, "random seed");
  ft->add_option("--out", ckpt_out, "output checkpoint")->required();
  add_common(ft, ft_common);

  // evaluate
  std::string ckpt, baseline;
  std::size_t eval_jobs = 1;
  auto* ev = app.add_subcommand("evaluate", "decode a manifest and report CER/WER");
  ev->add_option("--manifest", manifest, "test manifest (JSONL)")->required()->check(CLI::ExistingFile);
  ev->add_option("--ckpt", ckpt, "transducer checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--baseline", baseline, "baseline checkpoint for CERR/WERR")->check(CLI::ExistingFile);
  ev->add_option("--jobs", eval_jobs, "decoding threads");

  // gradcheck
  std::string module;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--module", module, "check a single block");

  // hidden-dump
  auto* hd = app.add_subcommand("hidden-dump", "write fused encoder outputs of a WAV file");
  hd->add_option("--wav", wav, "input WAV")->required()->check(CLI::ExistingFile);
  hd->add_option("--ckpt", ckpt, "pre-training or transducer checkpoint")->required()->check(CLI::ExistingFile);
  hd->add_option("--out", out_file, "output MCFEAT01 file")->required();

  // experiment
  Common exp_common;
  bool single_method = false;
  auto* exp = app.add_subcommand("experiment", "desk-scale comparison of pre-training methods");
  exp->add_option("--out", out_dir, "working directory")->required();
  exp->add_option("--n-train", n_train, "training utterances");
  exp->add_option("--n-test", n_test, "test utterances");
  exp->add_flag("--feature-only", single_method, "skip the joint and channel-wise methods");
  add_common(exp, exp_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*synth) {
    const RunConfig cfg = resolve(synth_common);
    const auto m = build_corpus(cfg.corpus, n_train, n_test, seed, out_dir);
    std::cout << nlohmann::json{{"train", m.train_path.string()}, {"test", m.test_path.string()},
                                {"n_train", m.train.size()}, {"n_test", m.test.size()}}
                     .dump()
              << std::endl;
  } else if (*features) {
    const FeatureTensor f = extract_features(io::read_wav(wav));
    io::write_features(out_file, f);
    std::cout << nlohmann::json{{"out", out_file}, {"shape", {f.channels, f.frames, f.dim()}}}.dump() << std::endl;
  } else if (*pre) {
    RunConfig cfg = resolve(pre_common);
    if (!quantizer.empty()) cfg.quantizer.method = quantizer;
    if (!amp_act.empty()) cfg.quantizer.amp_act = amp_act;
    if (!phase_act.empty()) cfg.quantizer.phase_act = phase_act;
    if (pre->count("--steps")) cfg.pretrain.steps = steps;
    if (run_seed) cfg.run.seed = *run_seed;
    cfg.validate();
    echo_config(cfg);
    const Dataset data = load(manifest, cfg);
    const NormStats norm = compute_norm(data);
    PretrainModel<float> model(cfg, cfg.run.seed);
    TrainOptions opts = train_options(cfg, cfg.pretrain.steps, cfg.pretrain.batch_size, &std::cout);
    opts.checkpoint = [&](std::size_t step) { save_checkpoint(ckpt_out, model.store(), "pretrain", step, cfg, norm); };
    pretrain(model, data, norm, opts);
    save_checkpoint(ckpt_out, model.store(), "pretrain", cfg.pretrain.steps, cfg, norm);
  } else if (*ft) {
    std::optional<Checkpoint> init_ck;
    if (init != "random") init_ck = load_checkpoint(init);
    RunConfig cfg = resolve(ft_common, init_ck ? &init_ck->config : nullptr);
    if (ft->count("--steps")) cfg.finetune.steps = steps;
    if (run_seed) cfg.run.seed = *run_seed;
    cfg.validate();
    echo_config(cfg);
    const Dataset data = load(manifest, cfg);
    const NormStats norm = init_ck ? init_ck->norm : compute_norm(data);
    TransducerModel<float> model(cfg, cfg.run.seed);
    if (init_ck) init_from_pretrained(model, *init_ck);
    TrainOptions opts = train_options(cfg, cfg.finetune.steps, cfg.finetune.batch_size, &std::cout);
    opts.checkpoint = [&](std::size_t step) { save_checkpoint(ckpt_out, model.store(), "transducer", step, cfg, norm); };
    finetune(model, data, norm, opts);
    save_checkpoint(ckpt_out, model.store(), "transducer", cfg.finetune.steps, cfg, norm);
  } else if (*ev) {
    const Checkpoint ck = load_checkpoint(ckpt);
    const auto model = load_transducer(ck);
    RunConfig cfg = ck.config;
    cfg.run.jobs = eval_jobs;
    const Dataset data = load(manifest, cfg);
    const EvalResult r = evaluate(*model, data, ck.norm, eval_jobs);
    if (baseline.empty()) {
      std::cout << metrics_report(ckpt, r).dump() << std::endl;
    } else {
      const Checkpoint bk = load_checkpoint(baseline);
      const EvalResult b = evaluate(*load_transducer(bk), data, bk.norm, eval_jobs);
      std::cout << metrics_report(ckpt, r, &b).dump() << std::endl;
    }
  } else if (*gc) {
    bool ok = true, found = module.empty();
    for (const auto& c : gradcheck_suite()) {
      if (!module.empty() && c.name != module) continue;
      found = true;
      const GradCheckResult r = c.run();
      const bool pass = r.max_rel_error <= kGradCheckTolerance;
      ok = ok && pass;
      std::cout << nlohmann::json{{"module", c.name},
                                  {"max_rel_error", r.max_rel_error},
                                  {"worst_param", r.worst_param},
                                  {"coordinates", r.coordinates},
                                  {"pass", pass}}
                       .dump()
                << std::endl;
    }
    if (!found) {
      std::cerr << "unknown module '" << module << "'; known:";
      for (const auto& c : gradcheck_suite()) std::cerr << ' ' << c.name;
      std::cerr << '\n';
      return 2;
    }
    return ok ? 0 : 1;
  } else if (*hd) {
    const auto enc = load_encoder(ckpt);
    ag::Graph<float> g(false);
    const Tensor<float> h = enc->encoder->encode(feature_inputs(g, extract_features(io::read_wav(wav)), enc->ck.norm)).fused.value();
    io::write_matrix(out_file, h, {}, {{"layout", "fused_encoder_output"}, {"checkpoint", ckpt}});
    std::cout << nlohmann::json{{"out", out_file}, {"shape", {h.rows(), h.cols()}}}.dump() << std::endl;
  } else if (*exp) {
    DeskExperimentOptions o;
    o.config = resolve(exp_common);
    o.n_train = n_train;
    o.n_test = n_test;
    o.all_methods = !single_method;
    o.work_dir = out_dir;
    o.progress = &std::cerr;
    const DeskExperimentResult r = run_desk_experiment(o);
    std::cout << r.table;
    std::ofstream(std::filesystem::path(out_dir) / "table.txt") << r.table;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
