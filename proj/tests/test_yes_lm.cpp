#include <cmath>
#include <map>

#include "tables.hpp"
#include "test_util.hpp"

using namespace yesbound;
using testutil::error_kind_of;
using namespace tables;

namespace {

lm::LmConfig config(lm::Style style = lm::Style::Llama, Index layers = 4) {
  lm::LmConfig c;
  c.style = style;
  c.vocab_size = 16;
  c.context_len = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.n_layers = layers;
  c.init_std = 0.2;
  return c;
}

lm::TokenBatch random_batch(Rng& rng, Index batch, Index seq, Index vocab) {
  lm::TokenBatch b;
  b.batch = batch;
  b.seq_len = seq;
  for (Index s = 0; s < batch; ++s) {
    std::vector<std::int32_t> ids;
    for (Index t = 0; t <= seq; ++t) ids.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab))));
    for (Index t = 0; t < seq; ++t) {
      b.inputs.push_back(ids[static_cast<std::size_t>(t)]);
      b.targets.push_back(ids[static_cast<std::size_t>(t) + 1]);
    }
  }
  return b;
}

std::size_t invalid_index(const yes::PermutationSpec& p, Index L) {
  try {
    yes::validate_permutation(p, L);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidPermutation);
    return e.position();
  }
  return 0;
}

struct Fixture {
  lm::LmConfig cfg = config();
  lm::LmState teacher;
  lm::TokenBatch batch;
  yes::TeacherCache cache;

  explicit Fixture(lm::LmConfig c = config(), std::uint64_t seed = 1) : cfg(c) {
    Rng rng(seed);
    teacher = lm::init_lm(cfg, rng);
    batch = random_batch(rng, 4, cfg.context_len, cfg.vocab_size);
    cache = yes::cache_teacher(teacher, cfg, batch, 3);
  }
};

}  // namespace

TEST(TeacherCache, ZeroWeightLayerPassesEmbeddingThrough) {
  auto cfg = config(lm::Style::Llama, 1);
  Rng rng(1);
  lm::LmState t = lm::init_lm(cfg, rng);
  for (Mat* m : {&t.blocks[0].wq, &t.blocks[0].wk, &t.blocks[0].wv, &t.blocks[0].wo, &t.blocks[0].w_gate,
                 &t.blocks[0].w_up, &t.blocks[0].w_down}) {
    m->setZero();
  }
  const auto c = yes::cache_teacher(t, cfg, random_batch(rng, 2, 5, cfg.vocab_size));
  ASSERT_EQ(c.hidden.size(), 2U);
  EXPECT_EQ(c.hidden[1], c.hidden[0]);
}

TEST(TeacherCache, ReplayIsBitIdentical) {
  Fixture f;
  const auto again = yes::cache_teacher(f.teacher, f.cfg, f.batch, 3);
  ASSERT_EQ(again.hidden.size(), f.cache.hidden.size());
  for (std::size_t i = 0; i < again.hidden.size(); ++i) EXPECT_EQ(again.hidden[i], f.cache.hidden[i]);
  EXPECT_EQ(f.cache.size(), 4);
  EXPECT_EQ(f.cache.teacher_depth(), 4);
}

TEST(TeacherCache, DefaultSizeIsTheBatchSize) {
  harness::LmRunConfig rc;
  rc.batch_size = 8;
  EXPECT_EQ(rc.effective_cache(), 8);
  rc.cache_size = 3;
  EXPECT_EQ(rc.effective_cache(), 3);
}

TEST(TeacherCache, DepthMismatch) {
  Fixture f;
  auto cfg = f.cfg;
  cfg.n_layers = 3;
  EXPECT_EQ(error_kind_of([&] { yes::cache_teacher(f.teacher, cfg, f.batch); }), ErrorKind::InvalidShape);
}

TEST(Permutation, WorkedExamplesValidate) {
  EXPECT_NO_THROW(yes::validate_permutation(perm("direct", {1, 2, 3, 4}), 4));
  EXPECT_NO_THROW(yes::validate_permutation(perm("", {3, 3, 3, 4}), 4));
  for (const auto& p : worked_examples()) EXPECT_NO_THROW(yes::validate_permutation(p, 4)) << p.name;
  EXPECT_EQ(yes::PermutationSpec::direct(4).targets, (std::vector<Index>{1, 2, 3, 4}));
}

TEST(Permutation, DecreasingPairNamesSecondEntry) {
  EXPECT_EQ(invalid_index(perm("p", {3, 1}), 4), 2U);
}

TEST(Permutation, SmallModelSuitesValidate) {
  for (const auto& p : small_lm_suite()) EXPECT_NO_THROW(yes::validate_permutation(p, 4)) << p.name;
  for (const auto& p : full_depth_lm_suite()) EXPECT_NO_THROW(yes::validate_permutation(p, 4)) << p.name;
}

TEST(Permutation, TwentySixLayerListsValidate) {
  for (const auto& p : shallow_of_26()) {
    EXPECT_EQ(p.depth(), 5);
    EXPECT_NO_THROW(yes::validate_permutation(p, 26)) << p.name << " " << yes::describe(p);
  }
  for (const auto& p : full_of_26()) {
    EXPECT_EQ(p.depth(), 26) << p.name;
    EXPECT_NO_THROW(yes::validate_permutation(p, 26)) << p.name << " " << yes::describe(p);
  }
}

TEST(Permutation, EveryDecreasingListIsRejected) {
  Rng rng(5);
  int rejected = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const Index L = 2 + static_cast<Index>(rng.below(25));
    const Index len = 2 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(L - 1)));
    std::vector<Index> t;
    for (Index i = 0; i < len; ++i) t.push_back(1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(L))));
    std::sort(t.begin(), t.end());
    // force one descent
    const auto at = static_cast<std::size_t>(1 + rng.below(static_cast<std::uint64_t>(len - 1)));
    if (t[at - 1] == t[at]) {
      if (t[at] > 1) {
        t[at] -= 1;
      } else {
        t[at - 1] += 1;
      }
    }
    std::swap(t[at - 1], t[at]);
    if (t[at - 1] < t[at]) std::swap(t[at - 1], t[at]);
    ASSERT_GT(t[at - 1], t[at]);
    if (invalid_index(perm("d", t), L) != 0) ++rejected;
  }
  EXPECT_EQ(rejected, 1000);
}

TEST(Permutation, StructuralViolations) {
  EXPECT_EQ(invalid_index(perm("shallow", {1, 1}), 4), 2U);
  EXPECT_EQ(invalid_index(perm("range", {1, 5}), 4), 2U);
  EXPECT_EQ(invalid_index(perm("deep", {1, 2, 3, 4, 4}), 4), 5U);
  EXPECT_EQ(invalid_index(perm("embedding", {0}), 4), 1U);
  EXPECT_EQ(error_kind_of([] { yes::validate_permutation(perm("empty", {}), 4); }), ErrorKind::InvalidPermutation);
  try {
    yes::validate_permutation(perm("YES9", {3, 2}), 4);
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("YES9"), std::string::npos);
  }
}

TEST(FitLayer, TeacherCopyStartsAtZeroLoss) {
  Fixture f;
  yes::YesConfig yc;
  yc.init = yes::YesInit::TeacherCopy;
  Rng rng(2);
  auto y = yes::make_yes_model(f.teacher, f.cfg, yes::PermutationSpec::direct(4), yc, rng);
  for (Index l = 1; l <= 4; ++l) {
    const auto tr = yes::fit_yes_layer(y, l, f.cache, yc);
    ASSERT_EQ(tr.history.size(), 7U);
    EXPECT_LT(tr.history.front(), 1e-20) << "layer " << l;
    EXPECT_LT(tr.loss, 1e-20) << "layer " << l;
  }
}

// A fresh layer whose residual branch starts at zero (output projections
// cleared) regresses its input towards a deeper teacher state.
TEST(FitLayer, ZeroResidualBranchLossDecreasesEveryStep) {
  for (auto style : {lm::Style::Llama, lm::Style::Gpt2}) {
    Fixture f(config(style));
    yes::YesConfig yc;
    Rng rng(3);
    auto y = yes::make_yes_model(f.teacher, f.cfg, perm("p", {4}), yc, rng);
    auto& b = y.state.blocks[0];
    b.wo.setZero();
    if (style == lm::Style::Llama) {
      b.w_down.setZero();
    } else {
      b.w_proj.setZero();
    }
    const auto tr = yes::fit_yes_layer(y, 1, f.cache, yc);
    ASSERT_EQ(tr.history.size(), 7U);
    EXPECT_GT(tr.history.front(), 0.0);
    for (std::size_t i = 1; i < tr.history.size(); ++i) {
      EXPECT_LT(tr.history[i], tr.history[i - 1]) << lm::to_string(style) << " step " << i;
    }
  }
}

// With every block weight zero the layer is the identity, so the objective is
// the mean squared gap between the embedding rows and the target state.
TEST(FitLayer, ObjectiveMatchesScalarRecomputation) {
  auto cfg = config(lm::Style::Llama, 2);
  Fixture f(cfg);
  lm::TokenBatch two = f.batch;
  two.batch = 2;
  two.inputs.resize(static_cast<std::size_t>(2 * cfg.context_len));
  two.targets.resize(two.inputs.size());
  const auto cache = yes::cache_teacher(f.teacher, cfg, two);
  yes::YesConfig yc;
  yc.layer_iterations = 0;
  Rng rng(4);
  auto y = yes::make_yes_model(f.teacher, cfg, perm("p", {2}), yc, rng);
  y.state.blocks[0].for_each([](const char* n, Mat& m) {
    if (std::string(n).find("norm") == std::string::npos) m.setZero();
  });
  const double got = yes::fit_yes_layer(y, 1, cache, yc).loss;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < two.inputs.size(); ++r) {
    for (Index c = 0; c < cfg.d_model; ++c) {
      const double diff = f.teacher.tok_emb(two.inputs[r], c) - cache.hidden[2](static_cast<Index>(r), c);
      sum += diff * diff;
      ++count;
    }
  }
  EXPECT_NEAR(got, sum / static_cast<double>(count), 1e-10);
}

TEST(FitLayer, FreezingDiscipline) {
  Fixture f;
  yes::YesConfig yc;
  Rng rng(5);
  auto y = yes::make_yes_model(f.teacher, f.cfg, perm("p", {1, 3, 3, 4}), yc, rng);
  for (Index l = 1; l <= 4; ++l) {
    const lm::LmState before = y.state;
    yes::fit_yes_layer(y, l, f.cache, yc);
    for (Index k = 0; k < 4; ++k) {
      lm::LmState a, b;
      a.blocks = {before.blocks[static_cast<std::size_t>(k)]};
      b.blocks = {y.state.blocks[static_cast<std::size_t>(k)]};
      if (k == l - 1) {
        EXPECT_FALSE(a == b) << "layer " << l << " was not trained";
      } else {
        EXPECT_TRUE(a == b) << "layer " << k + 1 << " changed while fitting " << l;
      }
    }
    EXPECT_EQ(y.state.tok_emb, before.tok_emb);
    EXPECT_EQ(y.state.head, before.head);
    EXPECT_EQ(y.state.normf_g, before.normf_g);
  }
  const lm::LmState before_head = y.state;
  yes::fit_output_head(y, f.cache, yc);
  for (std::size_t k = 0; k < 4; ++k) {
    lm::LmState a, b;
    a.blocks = {before_head.blocks[k]};
    b.blocks = {y.state.blocks[k]};
    EXPECT_TRUE(a == b);
  }
  EXPECT_NE(y.state.head, before_head.head);
  EXPECT_EQ(y.state.normf_g, before_head.normf_g);
}

TEST(FitLayer, RangeChecks) {
  Fixture f;
  yes::YesConfig yc;
  Rng rng(6);
  auto y = yes::make_yes_model(f.teacher, f.cfg, perm("p", {2, 2}), yc, rng);
  EXPECT_EQ(error_kind_of([&] { yes::fit_yes_layer(y, 0, f.cache, yc); }), ErrorKind::InvalidArgument);
  EXPECT_EQ(error_kind_of([&] { yes::fit_yes_layer(y, 3, f.cache, yc); }), ErrorKind::InvalidArgument);
}

TEST(FitHead, ZeroIterationsLeaveHeadUnchanged) {
  Fixture f;
  yes::YesConfig yc;
  yc.head_iterations = 0;
  Rng rng(7);
  auto y = yes::make_yes_model(f.teacher, f.cfg, perm("p", {2, 4}), yc, rng);
  const Mat before = y.state.head;
  const auto tr = yes::fit_output_head(y, f.cache, yc);
  EXPECT_EQ(y.state.head, before);
  ASSERT_EQ(tr.history.size(), 1U);
  EXPECT_EQ(tr.loss, lm::lm_loss(y.state, y.cfg, f.batch));
}

TEST(FitHead, TeacherHeadOnPerfectLayersReproducesTeacherLoss) {
  Fixture f;
  yes::YesConfig yc;
  yc.init = yes::YesInit::TeacherCopy;
  yc.head_iterations = 0;
  Rng rng(8);
  auto y = yes::make_yes_model(f.teacher, f.cfg, yes::PermutationSpec::direct(4), yc, rng);
  for (Index l = 1; l <= 4; ++l) yes::fit_yes_layer(y, l, f.cache, yc);
  const double teacher_ce = lm::lm_loss(f.teacher, f.cfg, f.batch);
  EXPECT_NEAR(yes::fit_output_head(y, f.cache, yc).loss, teacher_ce, 1e-12);

  yc.head_iterations = 6;
  const auto tr = yes::fit_output_head(y, f.cache, yc);
  EXPECT_NEAR(tr.history.front(), teacher_ce, 1e-12);
  EXPECT_LE(tr.loss, tr.history.front());
}

// Identical embedding rows make every hidden state the same vector, so the
// head can only express one next-token distribution for the whole cache.
TEST(FitHead, ConstantFeaturesCannotBeatUnigramEntropy) {
  auto cfg = config(lm::Style::Llama, 2);
  Fixture f(cfg);
  lm::LmState t = f.teacher;
  for (Index r = 1; r < cfg.vocab_size; ++r) t.tok_emb.row(r) = t.tok_emb.row(0);
  const auto cache = yes::cache_teacher(t, cfg, f.batch);
  yes::YesConfig yc;
  yc.head_iterations = 300;
  yc.head_lr = 0.05;
  Rng rng(9);
  auto y = yes::make_yes_model(t, cfg, perm("p", {1, 2}), yc, rng);
  for (Index l = 1; l <= 2; ++l) yes::fit_yes_layer(y, l, cache, yc);
  const Mat hs = lm::hidden_states(y.state, y.cfg, f.batch).back();
  for (Index r = 1; r < hs.rows(); ++r) EXPECT_LT((hs.row(r) - hs.row(0)).cwiseAbs().maxCoeff(), 1e-12);

  std::map<std::int32_t, double> counts;
  for (auto id : f.batch.targets) counts[id] += 1.0;
  double entropy = 0.0;
  const double n = static_cast<double>(f.batch.targets.size());
  for (const auto& [id, c] : counts) entropy -= (c / n) * std::log(c / n);

  const auto tr = yes::fit_output_head(y, cache, yc);
  for (double v : tr.history) EXPECT_GE(v, entropy - 1e-9);
  EXPECT_LT(tr.loss, tr.history.front());
}

TEST(Evaluate, ExactCopyEqualsTeacher) {
  Fixture f;
  yes::YesModel y{f.cfg, f.teacher, yes::PermutationSpec::direct(4), f.cfg.quant};
  Rng rng(10);
  const std::vector<lm::TokenBatch> split{random_batch(rng, 3, 8, 16), random_batch(rng, 2, 8, 16)};
  const double teacher = lm::mean_loss(f.teacher, f.cfg, split);
  EXPECT_NEAR(yes::evaluate_yes_solution(y, split), teacher, 1e-12);
  EXPECT_EQ(yes::evaluate_yes_solution(y, split), yes::evaluate_yes_solution(y, split));
}

TEST(Suite, SmallModelSuiteGivesOneValuePerPermutation) {
  Fixture f;
  yes::YesConfig yc;
  Rng rng(11);
  const std::vector<lm::TokenBatch> train{random_batch(rng, 4, 8, 16)};
  const std::vector<lm::TokenBatch> test{random_batch(rng, 4, 8, 16)};
  const auto res = yes::run_yes_suite(f.teacher, f.cfg, small_lm_suite(), f.cache, yc, train, &test);
  ASSERT_EQ(res.size(), 8U);
  for (std::size_t i = 0; i < res.size(); ++i) {
    EXPECT_EQ(res[i].name, "YES" + std::to_string(i + 1));
    EXPECT_EQ(res[i].layer_losses.size(), 2U);
    EXPECT_TRUE(std::isfinite(res[i].train));
    ASSERT_TRUE(res[i].test.has_value());
    EXPECT_TRUE(std::isfinite(*res[i].test));
    EXPECT_NE(res[i].train, *res[i].test);
  }
  const auto again = yes::run_yes_suite(f.teacher, f.cfg, small_lm_suite(), f.cache, yc, train, &test);
  for (std::size_t i = 0; i < res.size(); ++i) {
    EXPECT_EQ(res[i].train, again[i].train);
    EXPECT_EQ(*res[i].test, *again[i].test);
    EXPECT_EQ(res[i].layer_losses, again[i].layer_losses);
  }
}

TEST(Suite, FullDepthSuiteOnGpt2) {
  Fixture f(config(lm::Style::Gpt2));
  yes::YesConfig yc;
  Rng rng(12);
  const std::vector<lm::TokenBatch> train{random_batch(rng, 2, 8, 16)};
  const auto res = yes::run_yes_suite(f.teacher, f.cfg, full_depth_lm_suite(), f.cache, yc, train);
  ASSERT_EQ(res.size(), 4U);
  for (const auto& r : res) {
    EXPECT_EQ(r.layer_losses.size(), 4U);
    EXPECT_FALSE(r.test.has_value());
  }
}

TEST(Suite, DirectTeacherCopyTracksTeacher) {
  Fixture f;
  yes::YesConfig yc;
  yc.init = yes::YesInit::TeacherCopy;
  yc.head_iterations = 0;
  Rng rng(13);
  const std::vector<lm::TokenBatch> train{random_batch(rng, 4, 8, 16)};
  const auto res = yes::run_yes_suite(f.teacher, f.cfg, {yes::PermutationSpec::direct(4)}, f.cache, yc, train);
  ASSERT_EQ(res.size(), 1U);
  EXPECT_NEAR(res[0].train, lm::mean_loss(f.teacher, f.cfg, train), 1e-12);
  for (double l : res[0].layer_losses) EXPECT_LT(l, 1e-20);
}

TEST(Suite, InvalidPermutationIsRejectedBeforeFitting) {
  Fixture f;
  yes::YesConfig yc;
  const std::vector<lm::TokenBatch> train{f.batch};
  EXPECT_EQ(error_kind_of([&] { yes::run_yes_suite(f.teacher, f.cfg, {perm("bad", {2, 1})}, f.cache, yc, train); }),
            ErrorKind::InvalidPermutation);
}

TEST(DeferredQuant, FitsInFullPrecisionThenQuantizes) {
  auto cfg = config();
  cfg.quant = {quant::Scheme::Ternary, 1.0, 1};
  Fixture f(cfg);
  yes::YesConfig yc;
  Rng rng(14);
  auto y = yes::make_yes_model(f.teacher, cfg, perm("p", {2, 4}), yc, rng);
  EXPECT_FALSE(y.cfg.quant.enabled());
  EXPECT_EQ(y.eval_quant, cfg.quant);
  yes::finalize(y);
  EXPECT_EQ(y.cfg.quant, cfg.quant);

  yc.deferred_quant = false;
  Rng rng2(14);
  const auto z = yes::make_yes_model(f.teacher, cfg, perm("p", {2, 4}), yc, rng2);
  EXPECT_EQ(z.cfg.quant, cfg.quant);
}

TEST(DeferredQuant, ShallowYesModelUsesTeacherEmbeddings) {
  Fixture f(config(lm::Style::Gpt2));
  yes::YesConfig yc;
  Rng rng(15);
  const auto y = yes::make_yes_model(f.teacher, f.cfg, perm("p", {1, 3}), yc, rng);
  EXPECT_EQ(y.cfg.n_layers, 2);
  EXPECT_EQ(y.state.blocks.size(), 2U);
  EXPECT_EQ(y.state.tok_emb, f.teacher.tok_emb);
  EXPECT_EQ(y.state.pos_emb, f.teacher.pos_emb);
  EXPECT_EQ(y.state.normf_g, f.teacher.normf_g);
  EXPECT_NE(y.state.head, f.teacher.head);
}

TEST(Monotonize, Examples) {
  EXPECT_EQ(yes::monotonize({3.0, 2.5, 2.7, 2.4}), (std::vector<double>{3.0, 2.5, 2.5, 2.4}));
  const std::vector<double> down{5.0, 4.0, 4.0, 1.0};
  EXPECT_EQ(yes::monotonize(down), down);
  EXPECT_TRUE(yes::monotonize({}).empty());
}

TEST(Monotonize, PrefixMinimumOnRandomSeries) {
  Rng rng(16);
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> s(1 + rng.below(60));
    for (double& v : s) v = rng.normal();
    const auto m = yes::monotonize(s);
    ASSERT_EQ(m.size(), s.size());
    for (std::size_t e = 0; e < s.size(); ++e) {
      double expect = s[0];
      for (std::size_t k = 1; k <= e; ++k) expect = std::min(expect, s[k]);
      EXPECT_EQ(m[e], expect);
      if (e > 0) EXPECT_EQ(m[e], std::min(m[e - 1], s[e]));
    }
  }
}

TEST(BoundSeriesView, RawAndMonotonized) {
  yes::BoundSeries b{"test", {}};
  b.add("YES1", 0, 3.0);
  b.add("YES1", 1, 3.5);
  b.add("YES1", 2, 2.0);
  EXPECT_EQ(b.raw("YES1"), (std::vector<double>{3.0, 3.5, 2.0}));
  EXPECT_EQ(b.monotonized("YES1"), (std::vector<double>{3.0, 3.0, 2.0}));
  EXPECT_TRUE(b.raw("missing").empty());
}
