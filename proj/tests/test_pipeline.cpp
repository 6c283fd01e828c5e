#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <filesystem>

#include "mcw2v/pipeline.hpp"

using namespace mcw2v;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.encoder.layers = 1;
  c.encoder.heads = 2;
  c.encoder.head_dim = 4;
  c.encoder.hidden = 8;
  c.encoder.ffn_dim = 16;
  c.encoder.rel_pos_dim = 4;
  c.quantizer.attention_dim = 4;
  c.transducer.label_hidden = 8;
  c.transducer.proj_dim = 8;
  c.transducer.joint_dim = 8;
  c.corpus.min_tokens = 2;
  c.corpus.max_tokens = 4;
  c.optim.warmup_steps = 20;
  return c;
}

// Shared small corpus, built once.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto dir = std::filesystem::temp_directory_path() / "mcw2v_test_pipeline";
    std::filesystem::remove_all(dir);
    const auto m = build_corpus(tiny_config().corpus, 6, 2, 3, dir);
    train_ = new Dataset(load_dataset(m.train, 16, 2));
    test_ = new Dataset(load_dataset(m.test, 16));
    norm_ = new NormStats(compute_norm(*train_));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete test_;
    delete norm_;
  }
  static Dataset* train_;
  static Dataset* test_;
  static NormStats* norm_;
};

Dataset* Pipeline::train_ = nullptr;
Dataset* Pipeline::test_ = nullptr;
NormStats* Pipeline::norm_ = nullptr;

double grad_norm(const ParamStore<double>& store, const std::string& prefix) {
  double s = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store[i].name.rfind(prefix, 0) == 0)
      for (double v : store[i].grad.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, RethrowsWorkerErrors) {
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw Error(Errc::IoError, "boom");
               }),
               Error);
}

TEST_F(Pipeline, DatasetMatchesManifest) {
  ASSERT_EQ(train_->size(), 6u);
  for (const auto& u : train_->items) {
    EXPECT_EQ(tokens_to_text(u.tokens), u.text);
    EXPECT_EQ(u.features.channels, 2u);
    EXPECT_EQ(u.features.frames, num_frames(u.text.size() * 1920, frame_geometry(16000)));
  }
  EXPECT_EQ(norm_->mean.size(), 771u);
}

TEST_F(Pipeline, PretrainLossStartsNearChance) {
  RunConfig cfg = tiny_config();
  PretrainModel<double> model(cfg, 1);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ag::Graph<double> g(false);
    const Utterance& u = train_->items[seed];
    const double loss = model.loss(g, u.features, *norm_, seed).value()[0];
    const MaskSpec m = sample_mask(u.features.frames, seed, cfg.pretrain.mask_span, cfg.pretrain.mask_ratio);
    const double chance = std::log(static_cast<double>(std::min<std::size_t>(101, m.masked.size())));
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_NEAR(loss, chance, 0.6);
  }
}

TEST_F(Pipeline, StopGradientControlsQuantizerGradients) {
  for (bool stop : {true, false}) {
    RunConfig cfg = tiny_config();
    cfg.quantizer.stop_gradient = stop;
    PretrainModel<double> model(cfg, 2);
    ag::Graph<double> g;
    g.backward(model.loss(g, train_->items[0].features, *norm_, 5));
    EXPECT_GT(grad_norm(model.store(), "encoder."), 0.0);
    if (stop) EXPECT_EQ(grad_norm(model.store(), "quantizer."), 0.0);
    else EXPECT_GT(grad_norm(model.store(), "quantizer."), 0.0);
  }
}

TEST_F(Pipeline, TrainingIsDeterministic) {
  RunConfig cfg = tiny_config();
  cfg.run.seed = 4;
  auto run = [&] {
    TransducerModel<double> model(cfg, 4);
    auto records = finetune(model, *train_, *norm_, train_options(cfg, 5, 2, nullptr));
    std::vector<double> losses;
    for (const auto& r : records) losses.push_back(r.loss);
    return losses;
  };
  const auto a = run();
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(a, run());
}

TEST_F(Pipeline, FinetuningFitsTheTrainingSet) {
  RunConfig cfg = tiny_config();
  cfg.finetune.spec_augment = false;
  cfg.optim.lr_scale = 2.0;
  TransducerModel<double> model(cfg, 5);
  Dataset two;
  two.items = {train_->items[0], train_->items[1]};
  const auto records = finetune(model, two, *norm_, train_options(cfg, 150, 2, nullptr));
  EXPECT_LT(records.back().loss, 0.5 * records.front().loss);
}

TEST(Memorization, GreedyDecodeReproducesTrainingTranscripts) {
  // Desk-size model trained to convergence on 20 utterances.
  RunConfig cfg;
  cfg.encoder.hidden = 64;
  cfg.encoder.heads = 4;
  cfg.encoder.head_dim = 16;
  cfg.encoder.ffn_dim = 128;
  cfg.encoder.rel_pos_dim = 16;
  cfg.encoder.layers = 2;
  cfg.transducer.label_hidden = 64;
  cfg.transducer.proj_dim = 128;
  cfg.transducer.joint_dim = 64;
  cfg.optim.warmup_steps = 400;
  cfg.optim.lr_scale = 0.25;
  cfg.finetune.spec_augment = false;
  const auto dir = std::filesystem::temp_directory_path() / "mcw2v_test_memorize";
  std::filesystem::remove_all(dir);
  const Dataset train = load_dataset(build_corpus(cfg.corpus, 20, 0, 31, dir).train, 16);
  const NormStats norm = compute_norm(train);
  TransducerModel<float> model(cfg, 3);
  finetune(model, train, norm, train_options(cfg, 1500, 1, nullptr));
  const EvalResult r = evaluate(model, train, norm);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < train.size(); ++i) exact += r.hypotheses[i] == train.items[i].text;
  EXPECT_GE(exact, 16u) << "train CER " << r.cer;
}

TEST_F(Pipeline, TrainLogEmitsJsonLines) {
  RunConfig cfg = tiny_config();
  cfg.run.log_every = 2;
  PretrainModel<float> model(cfg, 6);
  std::ostringstream log;
  std::vector<std::size_t> saved;
  TrainOptions o = train_options(cfg, 5, 1, &log);
  o.checkpoint_every = 2;
  o.checkpoint = [&](std::size_t s) { saved.push_back(s); };
  pretrain(model, *train_, *norm_, o);
  std::istringstream is(log.str());
  std::vector<std::size_t> steps;
  for (std::string line; std::getline(is, line);) {
    const auto j = nlohmann::json::parse(line);
    steps.push_back(j.at("step"));
    EXPECT_TRUE(j.contains("loss") && j.contains("lr") && j.contains("seconds"));
  }
  EXPECT_EQ(steps, (std::vector<std::size_t>{1, 2, 4, 5}));
  EXPECT_EQ(saved, (std::vector<std::size_t>{2, 4}));
}

TEST_F(Pipeline, PretrainedEncoderInitializesTransducer) {
  RunConfig cfg = tiny_config();
  PretrainModel<float> pre(cfg, 7);
  const auto path = std::filesystem::temp_directory_path() / "mcw2v_test_pipeline" / "pre.ckpt";
  save_checkpoint(path, pre.store(), "pretrain", 0, cfg, *norm_);
  TransducerModel<float> model(cfg, 8);
  const Tensor<float> label_before = model.store().at("label.embed").value;
  const std::size_t copied = init_from_pretrained(model, load_checkpoint(path));
  std::size_t encoder_params = 0;
  for (std::size_t i = 0; i < model.store().size(); ++i) {
    const auto& p = model.store()[i];
    if (p.name.rfind("encoder.", 0) != 0) continue;
    ++encoder_params;
    EXPECT_EQ(p.value, pre.store().at(p.name).value) << p.name;
  }
  EXPECT_EQ(copied, encoder_params);
  EXPECT_EQ(model.store().at("label.embed").value, label_before);

  RunConfig other = cfg;
  other.encoder.layers = 2;
  TransducerModel<float> mismatched(other, 8);
  EXPECT_THROW(init_from_pretrained(mismatched, load_checkpoint(path)), Error);
}

TEST_F(Pipeline, DecodeIsDeterministicAndInVocabulary) {
  TransducerModel<float> model(tiny_config(), 9);
  for (const auto& u : test_->items) {
    const TokenSequence a = model.decode(u.features, *norm_);
    EXPECT_EQ(a, model.decode(u.features, *norm_));
    EXPECT_LE(a.size(), u.features.frames * 10);
    for (std::size_t t : a) EXPECT_LT(t, 16u);
  }
  EXPECT_EQ(model.hidden(test_->items[0].features, *norm_).shape(), (Shape{test_->items[0].features.frames, 8}));
}

TEST_F(Pipeline, EvaluateIsCorpusLevelAndSelfComparisonIsZero) {
  TransducerModel<float> model(tiny_config(), 10);
  const EvalResult r = evaluate(model, *test_, *norm_, 2);
  ASSERT_EQ(r.hypotheses.size(), test_->size());
  std::size_t edits = 0, chars = 0;
  for (std::size_t i = 0; i < test_->size(); ++i) {
    edits += edit_distance(chars_of(test_->items[i].text), chars_of(r.hypotheses[i]));
    chars += test_->items[i].text.size();
  }
  EXPECT_DOUBLE_EQ(r.cer, static_cast<double>(edits) / static_cast<double>(chars));
  const nlohmann::json rep = metrics_report("x.ckpt", r, &r);
  EXPECT_EQ(rep.at("cerr_vs_baseline"), 0.0);
  EXPECT_EQ(rep.at("werr_vs_baseline"), 0.0);
  EXPECT_EQ(rep.at("n_utts"), test_->size());
  EXPECT_FALSE(metrics_report("x.ckpt", r).contains("cerr_vs_baseline"));
}

TEST(Report, TableLayout) {
  const std::string t = format_table({{"exp0", false, "", "", "", 0.25, 0.0}, {"exp4", true, "feature", "swish", "none", 0.2, 20.0}});
  std::istringstream is(t);
  std::string header, row0, row1;
  std::getline(is, header);
  std::getline(is, row0);
  std::getline(is, row1);
  EXPECT_NE(header.find("CERR (%)"), std::string::npos);
  EXPECT_NE(row0.find("25.00"), std::string::npos);
  EXPECT_EQ(row0.back(), '-');
  EXPECT_NE(row1.find("feature"), std::string::npos);
  EXPECT_NE(row1.find("swish"), std::string::npos);
  EXPECT_NE(row1.find("20.00"), std::string::npos);
}
