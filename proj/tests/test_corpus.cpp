#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "mcw2v/corpus.hpp"

using namespace mcw2v;

namespace {

std::vector<double> channel(const MultiChannelWave& w, std::size_t c) {
  auto r = w.samples.row(c);
  return {r.begin(), r.end()};
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mcw2v_test_corpus" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Synth, LengthFollowsTokenCount) {
  SynthConfig cfg;
  const auto u = synth_utterance({0, 3, 7, 1, 15}, cfg, 1);
  EXPECT_EQ(u.wave.samples.shape(), (Shape{2, 9600}));
  EXPECT_EQ(u.transcript, "adhbp");
  EXPECT_EQ(u.wave.sample_rate_hz, 16000);
}

TEST(Synth, DeterministicPerSeed) {
  SynthConfig cfg;
  const auto a = synth_utterance({2, 4}, cfg, 9);
  const auto b = synth_utterance({2, 4}, cfg, 9);
  const auto c = synth_utterance({2, 4}, cfg, 10);
  EXPECT_EQ(a.wave.samples, b.wave.samples);
  EXPECT_NE(a.wave.samples, c.wave.samples);
}

TEST(Synth, PeakStaysBelowFullScale) {
  SynthConfig cfg;
  cfg.min_snr_db = cfg.max_snr_db = -5.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto u = synth_utterance({1, 2, 3}, cfg, s);
    for (double v : u.wave.samples.values()) ASSERT_LE(std::abs(v), 0.99 + 1e-12);
  }
}

TEST(Synth, NoiselessZeroDelayGivesIdenticalChannels) {
  SynthConfig cfg;
  cfg.min_snr_db = cfg.max_snr_db = INFINITY;
  cfg.min_delay = cfg.max_delay = 0.0;
  const auto u = synth_utterance({5, 6, 0}, cfg, 3);
  EXPECT_EQ(channel(u.wave, 0), channel(u.wave, 1));
}

TEST(Synth, InterChannelDelayIsRecoverable) {
  SynthConfig cfg;
  cfg.min_snr_db = cfg.max_snr_db = INFINITY;
  for (double d : {-3.0, -1.5, 0.0, 0.7, 2.0, 3.6}) {
    cfg.min_delay = cfg.max_delay = d;
    const auto u = synth_utterance({1, 9, 4, 12}, cfg, 5);
    EXPECT_EQ(u.delay_samples, d);
    EXPECT_NEAR(estimate_delay(channel(u.wave, 0), channel(u.wave, 1)), d, 0.5) << "delay " << d;
  }
}

TEST(Synth, TokensAreTheirOwnPitch) {
  // The dominant bin of a clean single-token utterance is its fundamental.
  SynthConfig cfg;
  cfg.min_snr_db = cfg.max_snr_db = INFINITY;
  for (std::size_t tok : {0u, 6u, 15u}) {
    const auto u = synth_utterance({tok}, cfg, 2);
    const FeatureTensor f = extract_features(u.wave);
    const std::size_t t = f.frames / 2;
    std::size_t best = 0;
    for (std::size_t k = 1; k < f.bins; ++k)
      if (f.amp(0, t, k) > f.amp(0, t, best)) best = k;
    EXPECT_NEAR(static_cast<double>(best), cfg.f0(tok) / (16000.0 / 512.0), 1.0) << "token " << tok;
  }
}

TEST(Synth, SnrMatchesNoiseLevel) {
  SynthConfig clean_cfg;
  clean_cfg.min_snr_db = clean_cfg.max_snr_db = INFINITY;
  clean_cfg.min_delay = clean_cfg.max_delay = 0.0;
  SynthConfig noisy = clean_cfg;
  noisy.min_snr_db = noisy.max_snr_db = 10.0;
  const TokenSequence toks{3, 3, 8, 2, 11, 0};
  const auto a = synth_utterance(toks, clean_cfg, 4);
  const auto b = synth_utterance(toks, noisy, 4);
  // Same signal RNG stream up to the noise draw; compare power ratios.
  double ps = 0.0, pn = 0.0;
  for (std::size_t i = 0; i < a.wave.length(); ++i) {
    ps += a.wave.samples(0, i) * a.wave.samples(0, i);
    const double n = b.wave.samples(0, i) - a.wave.samples(0, i);
    pn += n * n;
  }
  double top = 0.0;
  for (double v : b.wave.samples.values()) top = std::max(top, std::abs(v));
  if (top < 0.99 - 1e-9) EXPECT_NEAR(10.0 * std::log10(ps / pn), 10.0, 0.5);
}

TEST(Synth, ConfigValidation) {
  SynthConfig cfg;
  cfg.vocab_size = 0;
  EXPECT_THROW(synth_utterance({0}, cfg, 1), Error);
  SynthConfig ok;
  try {
    synth_utterance({16}, ok, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TokenOutOfRange);
  }
}

TEST(Text, RoundTripAndVocabularyCheck) {
  EXPECT_EQ(tokens_to_text({0, 1, 25}), "abz");
  EXPECT_EQ(text_to_tokens("abz", 26), (TokenSequence{0, 1, 25}));
  EXPECT_THROW(text_to_tokens("q", 16), Error);
  EXPECT_THROW(text_to_tokens("A", 16), Error);
}

TEST(FractionalDelay, IntegerShiftIsExact) {
  std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_EQ(fractional_delay(x, 2.0), (std::vector<double>{0, 0, 1, 2, 3}));
  EXPECT_EQ(fractional_delay(x, -1.0), (std::vector<double>{2, 3, 4, 5, 0}));
}

TEST(FractionalDelay, HalfSampleOfSlowSine) {
  std::vector<double> x(400);
  const double w = 2.0 * std::numbers::pi * 0.01;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(w * static_cast<double>(i));
  const auto y = fractional_delay(x, 0.5);
  for (std::size_t i = 100; i < 300; ++i) EXPECT_NEAR(y[i], std::sin(w * (static_cast<double>(i) - 0.5)), 1e-3);
}

TEST(Corpus, BuildsSplitsAndManifests) {
  const auto dir = fresh_dir("small");
  SynthConfig cfg;
  const CorpusManifests m = build_corpus(cfg, 6, 3, 42, dir);
  EXPECT_EQ(m.train.size(), 6u);
  EXPECT_EQ(m.test.size(), 3u);
  std::size_t wavs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "wav")) wavs += e.path().extension() == ".wav";
  EXPECT_EQ(wavs, 9u);

  const Manifest train = load_manifest(m.train_path);
  ASSERT_EQ(train.size(), 6u);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& e = train.entries[i];
    EXPECT_EQ(e.id, m.train.entries[i].id);
    EXPECT_EQ(e.text, m.train.entries[i].text);
    EXPECT_GE(e.text.size(), cfg.min_tokens);
    EXPECT_LE(e.text.size(), cfg.max_tokens);
    const MultiChannelWave w = io::read_wav(e.wav);
    EXPECT_NEAR(e.duration_s, static_cast<double>(w.length()) / 16000.0, 1e-12);
    EXPECT_EQ(w.length(), e.text.size() * cfg.token_samples());
  }
  // Paths are stored relative to the manifest.
  std::ifstream is(m.train_path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(nlohmann::json::parse(line).at("wav"), "wav/train-00000.wav");
}

TEST(Corpus, SameSeedSameCorpus) {
  SynthConfig cfg;
  const auto a = build_corpus(cfg, 3, 1, 7, fresh_dir("a"));
  const auto b = build_corpus(cfg, 3, 1, 7, fresh_dir("b"));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.train.entries[i].text, b.train.entries[i].text);
    EXPECT_EQ(io::read_wav(a.train.entries[i].wav).samples, io::read_wav(b.train.entries[i].wav).samples);
  }
}

TEST(Corpus, DefaultScaleWritesEveryFile) {
  const auto dir = fresh_dir("full");
  const auto m = build_corpus(SynthConfig{}, 200, 50, 2024, dir);
  std::size_t wavs = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "wav")) wavs += e.path().extension() == ".wav";
  EXPECT_EQ(wavs, 250u);
  std::set<char> used;
  for (const auto& e : m.train.entries) used.insert(e.text.begin(), e.text.end());
  EXPECT_EQ(used.size(), 16u);
}

TEST(Manifest, RejectsBrokenInput) {
  const auto dir = fresh_dir("bad");
  std::ofstream(dir / "bad.jsonl") << "{\"id\": \"x\"\n";
  try {
    load_manifest(dir / "bad.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::FormatError);
  }
  std::ofstream(dir / "missing.jsonl") << R"({"id":"x","wav":"nope.wav","text":"ab","dur":0.1})" << '\n';
  try {
    load_manifest(dir / "missing.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IoError);
  }
  EXPECT_THROW(load_manifest(dir / "absent.jsonl"), Error);
}
