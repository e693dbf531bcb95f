#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "klctl/checkpoint.hpp"
#include "klctl/trainer.hpp"

using namespace klctl;

namespace {

struct Desk {
  SyntheticGrammar grammar = default_grammar();
  Vocabulary vocab = build_vocabulary(grammar);
  std::vector<TrainingExample> corpus = generate_corpus(grammar, vocab, 64, 7);

  TrainConfig config(SchedulerKind s = PIConfig{}, std::uint64_t steps = 12) const {
    TrainConfig t;
    t.model.vocab_size = vocab.size();
    t.model.width = 16;
    t.model.ffn_width = 32;
    t.model.encoder_layers = 1;
    t.model.decoder_layers = 1;
    t.model.heads = 2;
    t.model.latent_dim = 4;
    t.model.fc_hidden = {8};
    t.batch_size = 8;
    t.total_steps = steps;
    t.scheduler = s;
    t.seed = 3;
    return t;
  }
};

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("klctl_test_trainer_" + name)).string();
}

}  // namespace

TEST(Trainer, TraceContract) {
  const Desk d;
  Trainer t(d.config(), d.corpus);
  const auto trace = t.run();
  ASSERT_EQ(trace.size(), 12u);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    EXPECT_EQ(trace[i].step, i + 1);
    EXPECT_GE(trace[i].kl, 0.0);
    EXPECT_GE(trace[i].weight, 0.0);
    EXPECT_LE(trace[i].weight, 1.0);
    EXPECT_TRUE(std::isfinite(trace[i].recon_nll));
    EXPECT_NEAR(trace[i].total_loss, trace[i].recon_nll + trace[i].weight * trace[i].kl,
                1e-4 * (1.0 + std::abs(trace[i].total_loss)));
  }
}

TEST(Trainer, StepCountLimits) {
  const Desk d;
  EXPECT_THROW(Trainer(d.config(PIConfig{}, 0), d.corpus), InputError);
  Trainer one(d.config(PIConfig{}, 1), d.corpus);
  EXPECT_EQ(one.run().size(), 1u);
  EXPECT_THROW(Trainer(d.config(), {}), InputError);
}

TEST(Trainer, IdenticalSeedsGiveIdenticalTraces) {
  const Desk d;
  Trainer a(d.config(), d.corpus), b(d.config(), d.corpus);
  EXPECT_EQ(a.run(), b.run());
  TrainConfig other = d.config();
  other.seed = 4;
  Trainer c(other, d.corpus);
  Trainer a2(d.config(), d.corpus);
  EXPECT_NE(a2.run(), c.run());
}

TEST(Trainer, BatchOrderCoversEachEpoch) {
  const Desk d;
  Trainer t(d.config(), d.corpus);
  std::vector<std::size_t> seen;
  for (std::uint64_t s = 0; s < 8; ++s)
    for (std::size_t i : t.batch_indices(s)) seen.push_back(i);
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], i);
}

TEST(Trainer, ResumeFromCheckpointReproducesTrace) {
  const Desk d;
  RunConfig rc;
  const std::string path = temp_path("resume.bin");
  Trainer full(d.config(), d.corpus);
  const auto reference = full.run();

  Trainer first(d.config(), d.corpus);
  first.run({}, 5);
  save_checkpoint(path, capture_checkpoint(first, rc, d.vocab));

  Trainer resumed(d.config(), d.corpus);
  restore_trainer(resumed, load_checkpoint(path));
  EXPECT_EQ(resumed.step(), 5u);
  const auto tail = resumed.run();
  ASSERT_EQ(tail.size(), 7u);
  for (std::size_t i = 0; i < tail.size(); ++i) EXPECT_EQ(tail[i], reference[5 + i]) << i;
  std::filesystem::remove(path);
}

TEST(Trainer, ZeroWeightLeavesPriorHeadWithoutGradient) {
  const Desk d;
  Cvae<double> model(d.config().model, 2);
  const std::vector<TrainingExample> picked(d.corpus.begin(), d.corpus.begin() + 4);
  const Batch b = make_batch(picked, 100);
  for (double w : {0.0, 0.5}) {
    Graph<double> g;
    const ForwardPass f = cvae_forward(g, model, b, draw_noise<double>(4, 4, 9));
    model.parameters().zero_grad();
    g.backward(weighted_loss(g, f.recon, f.kl, w));
    double mag = 0.0;
    for (const auto& [name, p] : model.parameters())
      if (name.rfind("prior.", 0) == 0)
        for (double v : p.grad.data) mag += std::abs(v);
    if (w == 0.0) EXPECT_EQ(mag, 0.0);
    else EXPECT_GT(mag, 0.0);
  }
}

TEST(Trainer, NonFiniteLossNamesStep) {
  const Desk d;
  TrainConfig cfg = d.config(ConstantWeight{1.0}, 50);
  cfg.adam.learning_rate = 1e30;
  cfg.grad_clip = 0.0;
  Trainer t(cfg, d.corpus);
  try {
    t.run();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(TraceFormat, RoundTripAndFinalPhaseMean) {
  const std::string path = temp_path("trace.csv");
  std::vector<TraceRecord> rows;
  for (std::uint64_t s = 1; s <= 10; ++s) rows.push_back({s, 0.1 * double(s), 1.0 / 3.0, 2.5e-7, std::sqrt(2.0)});
  {
    TraceWriter w(path, false);
    for (const auto& r : rows) w.write(r);
  }
  EXPECT_EQ(read_trace(path), rows);
  // Final 20% of ten rows: steps 9 and 10.
  EXPECT_NEAR(final_phase_mean_kl(rows), 0.95, 1e-12);
  EXPECT_EQ(format_exact(0.1), "0.1");
  EXPECT_EQ(std::stod(format_exact(1.0 / 3.0)), 1.0 / 3.0);
  std::filesystem::remove(path);
}

TEST(Calibration, RetriesAtHalfWeightAfterCollapse) {
  const Desk d;
  std::vector<double> weights;
  const TrainingRun stub = [&](const TrainConfig& cfg) {
    const double w = std::get<ConstantWeight>(cfg.scheduler).weight;
    weights.push_back(w);
    std::vector<TraceRecord> trace;
    for (std::uint64_t s = 1; s <= 10; ++s) trace.push_back({s, w > 0.2 ? 0.01 : 0.8 + 0.01 * double(s), w, 1.0, 1.0});
    return trace;
  };
  const auto r = calibrate_setpoint(d.config(), stub);
  EXPECT_EQ(weights, (std::vector<double>{0.5, 0.25, 0.125}));
  EXPECT_EQ(r.weight, 0.125);
  EXPECT_NEAR(r.setpoint, 0.895, 1e-12);
  EXPECT_EQ(r.attempts.size(), 3u);
}

TEST(Calibration, AllCollapsedIsAnError) {
  const Desk d;
  const TrainingRun collapsed = [](const TrainConfig&) { return std::vector<TraceRecord>(5, TraceRecord{1, 0.0, 0.5, 1.0, 1.0}); };
  CalibrationOptions opt;
  opt.max_retries = 2;
  EXPECT_THROW(calibrate_setpoint(d.config(), collapsed, opt), CalibrationError);
}

TEST(Calibration, RealRunIsDeterministic) {
  const Desk d;
  CalibrationOptions opt;
  opt.collapse_threshold = 0.0;
  const auto a = calibrate_setpoint(d.config(PIConfig{}, 6), d.corpus, opt);
  const auto b = calibrate_setpoint(d.config(PIConfig{}, 6), d.corpus, opt);
  EXPECT_EQ(a.setpoint, b.setpoint);
  EXPECT_EQ(a.weight, 0.5);
}
