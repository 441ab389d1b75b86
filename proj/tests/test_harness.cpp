#include <cmath>
#include <map>
#include <set>

#include "test_util.hpp"

using namespace yesbound;
using testutil::error_kind_of;

namespace {

harness::LmRunConfig tiny_run() {
  harness::LmRunConfig rc;
  rc.model.style = lm::Style::Llama;
  rc.model.vocab_size = 32;
  rc.model.context_len = 8;
  rc.model.d_model = 8;
  rc.model.n_heads = 2;
  rc.model.d_ff = 16;
  rc.model.n_layers = 2;
  rc.optimizer.kind = optim::Kind::AdamW;
  rc.optimizer.lr = 3e-3;
  rc.epochs = 3;
  rc.batch_size = 4;
  rc.seed = 11;
  return rc;
}

data::TokenCorpus tiny_corpus(std::size_t n = 8 * 24 + 1) {
  data::TokenCorpus c;
  c.vocab_size = 32;
  c.context_len = 8;
  c.train = synth::markov_corpus(n, 32, 3);
  c.test = synth::markov_corpus(8 * 8 + 1, 32, 4);
  return c;
}

}  // namespace

TEST(Sgd, SingleStepExample) {
  Mat p = Mat::Constant(1, 1, 1.0);
  optim::sgd_step(p, Mat::Constant(1, 1, 2.0), 0.5);
  EXPECT_EQ(p(0, 0), 0.0);
}

// Gradient of 0.5*c*p^2 is c*p, so each step multiplies p by (1 - lr*c).
TEST(Sgd, QuadraticRecursion) {
  const double c = 3.0;
  const double lr = 0.1;
  Mat p = Mat::Constant(1, 1, 2.0);
  for (int t = 0; t < 100; ++t) optim::sgd_step(p, c * p, lr);
  EXPECT_NEAR(p(0, 0), 2.0 * std::pow(1.0 - lr * c, 100), 1e-15);
}

TEST(Sgd, ShapeMismatch) {
  Mat p = Mat::Zero(2, 2);
  EXPECT_EQ(error_kind_of([&] { optim::sgd_step(p, Mat::Zero(2, 3), 0.1); }), ErrorKind::InvalidShape);
}

TEST(AdamW, FirstStepIsSignTimesLr) {
  optim::OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  for (double g : {2.5, -0.01, 1e4}) {
    Mat p = Mat::Zero(1, 1);
    optim::Moments m;
    optim::adamw_step(p, Mat::Constant(1, 1, g), m, cfg, 1e-3, 1);
    EXPECT_NEAR(p(0, 0), -1e-3 * g / (std::abs(g) + 1e-8), 1e-15);
  }
}

TEST(AdamW, DecoupledDecayOnZeroGradient) {
  optim::OptimizerConfig cfg;
  cfg.weight_decay = 0.1;
  Mat p = Mat::Constant(2, 2, 4.0);
  optim::Moments m;
  optim::adamw_step(p, Mat::Zero(2, 2), m, cfg, 0.01, 1);
  EXPECT_EQ(p, Mat::Constant(2, 2, 4.0 * (1.0 - 0.01 * 0.1)));
}

// Independent scalar recursion of bias-corrected AdamW.
TEST(AdamW, MatchesScalarRecursion) {
  optim::OptimizerConfig cfg;
  Mat p = Mat::Constant(1, 1, 1.5);
  optim::Moments mom;
  double x = 1.5, m = 0.0, v = 0.0;
  const double lr = 0.05;
  for (int t = 1; t <= 50; ++t) {
    const double g = 2.0 * x - 1.0;
    optim::adamw_step(p, Mat::Constant(1, 1, 2.0 * p(0, 0) - 1.0), mom, cfg, lr, t);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x *= 1.0 - lr * 0.01;
    x -= lr * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(p(0, 0), x, 1e-13);
}

TEST(LrSchedule, StepDecay) {
  optim::OptimizerConfig cfg;
  cfg.lr = 1e-5;
  cfg.has_schedule = true;
  cfg.schedule = {0.9, 50};
  EXPECT_EQ(optim::lr_at(0, cfg), 1e-5);
  EXPECT_EQ(optim::lr_at(49, cfg), 1e-5);
  EXPECT_NEAR(optim::lr_at(50, cfg), 9e-6, 1e-20);
  EXPECT_NEAR(optim::lr_at(100, cfg), 8.1e-6, 1e-20);
  EXPECT_NEAR(optim::lr_at(150, cfg), 1e-5 * 0.729, 1e-20);

  cfg.lr = 2e-4;
  cfg.schedule = {0.98, 50};
  EXPECT_NEAR(optim::lr_at(150, cfg), 2e-4 * 0.98 * 0.98 * 0.98, 1e-19);
  EXPECT_NEAR(optim::lr_at(99, cfg), 2e-4 * 0.98, 1e-19);
}

TEST(LrSchedule, ConstantWithoutSchedule) {
  optim::OptimizerConfig cfg;
  cfg.lr = 0.3;
  EXPECT_EQ(optim::lr_at(1000, cfg), 0.3);
  EXPECT_EQ(error_kind_of([&] { optim::lr_at(-1, cfg); }), ErrorKind::InvalidArgument);
}

TEST(LrSchedule, Validation) {
  optim::OptimizerConfig cfg;
  cfg.has_schedule = true;
  cfg.schedule = {1.5, 10};
  EXPECT_EQ(error_kind_of([&] { cfg.validate(); }), ErrorKind::InvalidSpec);
  cfg.schedule = {0.5, 0};
  EXPECT_EQ(error_kind_of([&] { cfg.validate(); }), ErrorKind::InvalidSpec);
  cfg.schedule = {0.5, 1};
  cfg.lr = 0.0;
  EXPECT_EQ(error_kind_of([&] { cfg.validate(); }), ErrorKind::InvalidSpec);
}

TEST(EvaluateSplit, UniformModelScoresLogVocab) {
  auto rc = tiny_run();
  Rng rng(1);
  lm::LmState st = lm::init_lm(rc.model, rng);
  st.head.setZero();
  const auto split = data::sequential_batches(tiny_corpus().train, 4, 8);
  EXPECT_NEAR(harness::evaluate_split(st, rc.model, split), std::log(32.0), 1e-12);
}

TEST(EvaluateSplit, ReplayIsBitIdentical) {
  auto rc = tiny_run();
  Rng rng(2);
  const lm::LmState st = lm::init_lm(rc.model, rng);
  const auto split = data::sequential_batches(tiny_corpus().train, 4, 8);
  EXPECT_EQ(harness::evaluate_split(st, rc.model, split), harness::evaluate_split(st, rc.model, split));
}

TEST(EvaluateSplit, FcnnMatchesLoss) {
  fcnn::FcnnSpec spec{{4, 3, 2}, {}, false};
  Rng rng(3);
  const auto s = fcnn::init_state(spec, rng);
  const Mat x = rng.normal_matrix(4, 10);
  const Mat y = rng.normal_matrix(2, 10);
  EXPECT_EQ(harness::evaluate_split(spec, s, x, y), fcnn::loss(spec, s, x, y));
}

TEST(TrainLm, ZeroEpochsRecordsInitialSnapshotOnly) {
  auto rc = tiny_run();
  rc.epochs = 0;
  rc.suite = {{"YES1", {1, 2}}, {"YES2", {2, 2}}};
  metrics::Sink sink({}, "h");
  const auto res = harness::train_lm(tiny_corpus(), rc, &sink);
  EXPECT_TRUE(res.epoch_loss.empty());
  EXPECT_EQ(res.monitor_epochs, (std::vector<std::int64_t>{0}));
  ASSERT_EQ(sink.rows().size(), 3U);
  for (const auto& r : sink.rows()) EXPECT_EQ(r.epoch, 0);
  Rng rng(rc.seed);
  EXPECT_TRUE(res.state == lm::init_lm(rc.model, rng));
}

TEST(TrainLm, MonitorSchedule) {
  auto rc = tiny_run();
  rc.epochs = 5;
  rc.monitor_every = 2;
  const auto res = harness::train_lm(tiny_corpus(), rc, nullptr);
  EXPECT_EQ(res.monitor_epochs, (std::vector<std::int64_t>{0, 2, 4}));
  EXPECT_EQ(res.epoch_loss.size(), 5U);
  EXPECT_EQ(res.steps, 5 * 6);
}

TEST(TrainLm, TrainLossDecreases) {
  auto rc = tiny_run();
  rc.epochs = 8;
  const auto res = harness::train_lm(tiny_corpus(), rc, nullptr);
  const auto tr = res.train_series.raw("train");
  EXPECT_LT(tr.back(), tr.front());
}

// Two half-size micro-batches per step see the same windows in the same
// order as one full batch, so the trajectories coincide.
TEST(TrainLm, GradientAccumulationMatchesFullBatch) {
  auto full = tiny_run();
  full.epochs = 2;
  auto accum = full;
  accum.batch_size = 2;
  accum.grad_accum_steps = 2;
  const auto corpus = tiny_corpus(8 * 22 + 1);
  const auto a = harness::train_lm(corpus, full, nullptr);
  const auto b = harness::train_lm(corpus, accum, nullptr);
  EXPECT_EQ(a.steps, b.steps);
  EXPECT_GE(a.steps, 10);
  double worst = 0.0;
  const auto ta = a.state.tensors();
  const auto tb = b.state.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) worst = std::max(worst, testutil::max_abs_diff(*ta[i], *tb[i]));
  EXPECT_LT(worst, 1e-10);
  for (std::size_t e = 0; e < a.epoch_loss.size(); ++e) EXPECT_NEAR(a.epoch_loss[e], b.epoch_loss[e], 1e-10);
}

TEST(TrainLm, NonFiniteLossIsNumericalFailure) {
  auto rc = tiny_run();
  rc.epochs = 1;
  Rng rng(rc.seed);
  lm::LmState st = lm::init_lm(rc.model, rng);
  st.head(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(error_kind_of([&] { harness::train_lm(tiny_corpus(), rc, nullptr, nullptr, &st); }),
            ErrorKind::NumericalFailure);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto rc = tiny_run();
  Rng rng(4);
  const lm::LmState st = lm::init_lm(rc.model, rng);
  optim::Optimizer opt(rc.optimizer);
  lm::LmState g = lm::zeros_like(st);
  lm::LmState work = st;
  lm::loss_and_grad(work, rc.model, data::batches(tiny_corpus().train, 4, 8, 0).front(), g, 1.0);
  opt.step(work.tensors(), std::as_const(g).tensors(), 1e-3);

  ckpt::Checkpoint c;
  c.epoch = 7;
  c.config_hash = 0x1234abcdULL;
  c.rng_seed = 11;
  c.rng_counter = 7;
  c.meta = R"({"steps":3})";
  ckpt::pack_lm(c, work, &opt);
  testutil::TempDir dir("ckpt_roundtrip");
  ckpt::save(dir / "a.ckpt", c);
  const auto back = ckpt::load(dir / "a.ckpt");
  EXPECT_EQ(back.epoch, 7U);
  EXPECT_EQ(back.config_hash, c.config_hash);
  EXPECT_EQ(back.opt_step, 1);
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_EQ(ckpt::serialize(back), ckpt::serialize(c));

  Rng rng2(99);
  lm::LmState restored = lm::init_lm(rc.model, rng2);
  optim::Optimizer opt2(rc.optimizer);
  ckpt::unpack_lm(back, restored, &opt2);
  EXPECT_TRUE(restored == work);
  EXPECT_EQ(opt2.step_count(), 1);
  ASSERT_EQ(opt2.moments().size(), opt.moments().size());
  for (std::size_t i = 0; i < opt.moments().size(); ++i) {
    EXPECT_EQ(opt2.moments()[i].m, opt.moments()[i].m);
    EXPECT_EQ(opt2.moments()[i].v, opt.moments()[i].v);
  }
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
  auto rc = tiny_run();
  Rng rng(5);
  ckpt::Checkpoint c;
  ckpt::pack_lm(c, lm::init_lm(rc.model, rng), nullptr);
  const std::string bytes = ckpt::serialize(c);
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_EQ(error_kind_of([&] { ckpt::parse(bytes.substr(0, cut)); }), ErrorKind::FormatError) << cut;
  }
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_EQ(error_kind_of([&] { ckpt::parse(flipped); }), ErrorKind::FormatError);
  EXPECT_EQ(error_kind_of([] { ckpt::load("/nonexistent/dir/x.ckpt"); }), ErrorKind::IoError);
}

TEST(Checkpoint, ShapeMismatchOnUnpack) {
  auto rc = tiny_run();
  Rng rng(6);
  ckpt::Checkpoint c;
  ckpt::pack_lm(c, lm::init_lm(rc.model, rng), nullptr);
  rc.model.d_ff = 24;
  lm::LmState other = lm::init_lm(rc.model, rng);
  EXPECT_EQ(error_kind_of([&] { ckpt::unpack_lm(c, other, nullptr); }), ErrorKind::InvalidShape);
}

TEST(Checkpoint, MidpointResumeReproducesUninterruptedRun) {
  testutil::TempDir dir("ckpt_resume");
  auto rc = tiny_run();
  rc.epochs = 4;
  rc.suite = {{"YES1", {1, 2}}};
  rc.checkpoint_every = 2;
  rc.checkpoint_dir = dir / "full";
  rc.config_hash = 42;
  metrics::Sink full_sink(dir / "full", "h");
  const auto full = harness::train_lm(tiny_corpus(), rc, &full_sink);
  EXPECT_TRUE(std::filesystem::exists(harness::checkpoint_path(dir / "full", 0)));
  EXPECT_TRUE(std::filesystem::exists(harness::checkpoint_path(dir / "full", 2)));
  EXPECT_TRUE(std::filesystem::exists(dir / "full" / "last.ckpt"));

  const auto mid = ckpt::load(harness::checkpoint_path(dir / "full", 2));
  EXPECT_EQ(mid.epoch, 2U);
  auto resumed_rc = rc;
  resumed_rc.checkpoint_dir = dir / "resumed";
  metrics::Sink resumed_sink({}, "h");
  const auto resumed = harness::train_lm(tiny_corpus(), resumed_rc, &resumed_sink, &mid);
  EXPECT_TRUE(resumed.state == full.state);
  EXPECT_EQ(resumed.epoch_loss, full.epoch_loss);
  EXPECT_EQ(resumed.steps, full.steps);

  std::vector<metrics::Row> tail;
  for (const auto& r : full_sink.rows()) {
    if (r.epoch > 2) tail.push_back(r);
  }
  ASSERT_EQ(resumed_sink.rows().size(), tail.size());
  for (std::size_t i = 0; i < tail.size(); ++i) {
    EXPECT_EQ(metrics::csv_line(resumed_sink.rows()[i]), metrics::csv_line(tail[i]));
  }

  auto other = rc;
  other.config_hash = 43;
  EXPECT_EQ(error_kind_of([&] { harness::train_lm(tiny_corpus(), other, nullptr, &mid); }), ErrorKind::InvalidSpec);
}

TEST(Sink, RowsAndFiles) {
  testutil::TempDir dir("sink");
  {
    metrics::Sink s(dir.path(), "abc");
    s.record(0, "train", "train", 3.0);
    s.record(1, "train", "train", 3.5);
    s.record(2, "train", "train", 2.0);
    s.flush();
  }
  const std::string csv = testutil::slurp(dir / "metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), metrics::kCsvHeader);
  const auto rows = metrics::read_csv(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), 3U);
  EXPECT_EQ(rows[1].raw, 3.5);
  EXPECT_EQ(rows[1].monotonized, 3.0);
  EXPECT_EQ(rows[2].monotonized, 2.0);
  EXPECT_EQ(rows[0].manifest_hash, "abc");

  std::ifstream jl(dir / "metrics.jsonl");
  std::string line;
  std::size_t i = 0;
  while (std::getline(jl, line)) {
    const auto j = nlohmann::json::parse(line);
    ASSERT_LT(i, rows.size());
    EXPECT_EQ(j.at("epoch").get<std::int64_t>(), rows[i].epoch);
    EXPECT_EQ(j.at("series").get<std::string>(), rows[i].series);
    EXPECT_EQ(j.at("raw").get<double>(), rows[i].raw);
    EXPECT_EQ(j.at("monotonized").get<double>(), rows[i].monotonized);
    ++i;
  }
  EXPECT_EQ(i, 3U);
}

TEST(Sink, MonotonizedColumnIsPrefixMinimumPerSeriesAndSplit) {
  testutil::TempDir dir("sink_prefix");
  Rng rng(7);
  {
    metrics::Sink s(dir.path(), "h");
    for (std::int64_t e = 0; e < 200; ++e) {
      for (const char* series : {"train", "YES1"}) {
        for (const char* split : {"train", "test"}) s.record(e, series, split, rng.normal());
      }
      s.flush();
    }
  }
  std::map<std::pair<std::string, std::string>, double> best;
  for (const auto& r : metrics::read_csv(dir / "metrics.csv")) {
    auto [it, fresh] = best.try_emplace({r.series, r.split}, r.raw);
    if (!fresh) it->second = std::min(it->second, r.raw);
    EXPECT_EQ(r.monotonized, it->second);
  }
  EXPECT_EQ(best.size(), 4U);
}

TEST(Sink, AppendKeepsSingleHeader) {
  testutil::TempDir dir("sink_append");
  {
    metrics::Sink s(dir.path(), "h");
    s.record(0, "train", "train", 1.0);
    s.flush();
  }
  {
    metrics::Sink s(dir.path(), "h", true);
    s.record(1, "train", "train", 2.0);
    s.flush();
  }
  EXPECT_EQ(metrics::read_csv(dir / "metrics.csv").size(), 2U);
  const std::string csv = testutil::slurp(dir / "metrics.csv");
  EXPECT_EQ(csv.find(metrics::kCsvHeader, 1), std::string::npos);
}

TEST(Sink, CsvKeepsFullPrecision) {
  metrics::Row r{3, "YES2", "test", 0.1 + 0.2, 1.0 / 3.0, "ff"};
  testutil::TempDir dir("sink_precision");
  testutil::write_text(dir / "m.csv", std::string(metrics::kCsvHeader) + "\n" + metrics::csv_line(r) + "\n");
  const auto back = metrics::read_csv(dir / "m.csv");
  ASSERT_EQ(back.size(), 1U);
  EXPECT_EQ(back[0].raw, r.raw);
  EXPECT_EQ(back[0].monotonized, r.monotonized);
}

TEST(TrainFcnn, RecordsSeriesAndStairs) {
  harness::FcnnRunConfig rc;
  rc.spec = {{6, 5, 4, 3}, {quant::Scheme::BinaryGlobal, 1.0, 1}, false};
  rc.optimizer.lr = 1e-3;
  rc.epochs = 4;
  rc.batch_size = 8;
  rc.monitor_every = 2;
  Rng rng(8);
  const Mat x = rng.normal_matrix(6, 32);
  const Mat y = rng.normal_matrix(3, 32);
  metrics::Sink sink({}, "h");
  const auto res = harness::train_fcnn(x, y, rc, &sink);
  ASSERT_EQ(res.points.size(), 3U);
  EXPECT_EQ(res.points[1].epoch, 2);
  EXPECT_EQ(res.epoch_loss.size(), 4U);
  for (const auto& p : res.points) {
    EXPECT_TRUE(p.yesk.has_value());
    EXPECT_LE(*p.yesk, p.yes0 + 1e-12);
  }
  ASSERT_FALSE(res.stairs.stairs.empty());
  EXPECT_EQ(res.stairs.stairs.front().value, res.points.front().yes0);
  std::set<std::string> names;
  for (const auto& r : sink.rows()) names.insert(r.series);
  EXPECT_EQ(names, (std::set<std::string>{"train", "YES-0", "YES-k", "stair"}));
}
