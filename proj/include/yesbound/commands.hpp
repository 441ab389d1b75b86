#pragma once

// Subcommand bodies for the yesbound executable. Each returns a process exit
// status: 0 ok, 2 configuration or input error, 3 numerical failure, 4 output
// IO failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <json.hpp>

#include "yesbound/checkpoint.hpp"
#include "yesbound/data.hpp"
#include "yesbound/gradcheck_suite.hpp"
#include "yesbound/harness.hpp"
#include "yesbound/manifest.hpp"
#include "yesbound/metrics.hpp"

namespace yesbound::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

struct Options {
  std::filesystem::path manifest;
  manifest::Overrides overrides;
  std::string split = "test";
  std::optional<std::filesystem::path> resume;
  std::optional<std::filesystem::path> checkpoint;
};

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::NumericalFailure: return kExitNumeric;
    case ErrorKind::IoError: return kExitIo;
    default: return kExitConfig;
  }
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what();
    if (e.has_position()) err << " (at " << e.position() << ")";
    err << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    err << "error [InvalidSpec]: " << e.what() << "\n";
    return kExitConfig;
  }
}

inline void expect_kind(const manifest::Manifest& m, const char* kind) {
  if (m.kind != kind) {
    fail(ErrorKind::InvalidSpec, "manifest '" + m.experiment + "' has kind '" + m.kind +
                                     "', this command needs '" + kind + "'");
  }
}

inline data::TokenCorpus load_corpus(const manifest::Manifest& m) {
  data::TokenCorpus c;
  c.vocab_size = m.lm.model.vocab_size;
  c.context_len = m.lm.model.context_len;
  c.train = data::load_token_ids(m.train_path, m.train_take, c.vocab_size);
  if (!m.test_path.empty()) c.test = data::load_token_ids(m.test_path, m.test_take, c.vocab_size);
  return c;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
}

inline int cmd_train_fcnn(const Options& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const auto m = manifest::load(o.manifest, o.overrides);
    expect_kind(m, "fcnn");
    const auto set = data::load_mnist_idx(m.images_path, m.labels_path, m.subset);
    const Mat x = set.images.transpose();
    const Mat y = set.labels.transpose();
    metrics::Sink sink(m.output_dir, m.hash());
    const auto res = harness::train_fcnn(x, y, m.fcnn, &sink);
    nlohmann::json stairs = nlohmann::json::array();
    for (const auto& s : res.stairs.stairs) {
      stairs.push_back({{"value", s.value},
                        {"source", s.source},
                        {"activated_epoch", s.activated_epoch},
                        {"crossed_epoch", s.crossed_epoch ? nlohmann::json(*s.crossed_epoch) : nlohmann::json()}});
    }
    write_json(m.output_dir / "stairs.json", {{"manifest_hash", m.hash()}, {"stairs", stairs}});
    for (const auto& p : res.points) {
      out << "epoch " << p.epoch << "  train " << fmt(p.train) << "  YES-0 " << fmt(p.yes0);
      if (p.yesk) out << "  YES-k " << fmt(*p.yesk);
      out << "\n";
    }
    out << "stairs crossed: " << res.stairs.crossings() << "\n";
    return kExitOk;
  });
}

inline int cmd_train_lm(const Options& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const auto m = manifest::load(o.manifest, o.overrides);
    expect_kind(m, "lm");
    const auto corpus = load_corpus(m);
    std::optional<ckpt::Checkpoint> resume;
    if (o.resume) resume = ckpt::load(*o.resume);
    metrics::Sink sink(m.output_dir, m.hash(), resume.has_value());
    const auto res = harness::train_lm(corpus, m.lm, &sink, resume ? &*resume : nullptr);
    const std::size_t first = resume ? static_cast<std::size_t>(resume->epoch) : 0;
    for (std::size_t i = first; i < res.epoch_loss.size(); ++i) {
      out << "epoch " << (i + 1) << "  step-loss " << fmt(res.epoch_loss[i]) << "\n";
    }
    for (const auto& r : sink.rows()) {
      out << "monitor epoch " << r.epoch << "  " << r.series << "/" << r.split << "  " << fmt(r.raw)
          << "  (min " << fmt(r.monotonized) << ")\n";
    }
    return kExitOk;
  });
}

inline int cmd_yes_eval(const Options& o, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (o.split != "train" && o.split != "test") {
      fail(ErrorKind::InvalidArgument, "--split must be train or test");
    }
    if (!o.checkpoint) fail(ErrorKind::InvalidArgument, "yes-eval needs --checkpoint");
    const auto m = manifest::load(o.manifest, o.overrides);
    expect_kind(m, "lm");
    const auto corpus = load_corpus(m);
    if (o.split == "test" && corpus.test.empty()) {
      fail(ErrorKind::InvalidSpec, "manifest has no test split");
    }
    const auto ck = ckpt::load(*o.checkpoint);
    if (ck.config_hash != m.model_hash()) {
      fail(ErrorKind::InvalidSpec, "checkpoint does not match the manifest's model configuration");
    }
    const auto& cfg = m.lm.model;
    Rng unused(0);
    lm::LmState teacher = lm::init_lm(cfg, unused);
    ckpt::unpack_lm(ck, teacher, nullptr);
    const auto epoch = static_cast<std::int64_t>(ck.epoch);
    metrics::Sink sink(m.output_dir / ("yes_eval_" + o.split), m.hash());
    if (!m.lm.suite.empty()) {
      const auto& ids = o.split == "train" ? corpus.train : corpus.test;
      const auto split = data::sequential_batches(ids, m.lm.batch_size, cfg.context_len, m.lm.eval_windows);
      const auto cache_batch =
          data::batches(corpus.train, m.lm.effective_cache(), cfg.context_len, m.lm.seed, epoch).front();
      const auto cache = yes::cache_teacher(teacher, cfg, cache_batch, epoch);
      yes::YesConfig yc = m.lm.yes;
      yc.seed = m.lm.seed;
      for (const auto& r : yes::run_yes_suite(teacher, cfg, m.lm.suite, cache, yc, split)) {
        sink.record(epoch, r.name, o.split, r.train);
        out << r.name << "  " << o.split << "  " << fmt(r.train) << "\n";
      }
    }
    sink.flush();
    return kExitOk;
  });
}

inline int cmd_gradcheck(std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    bool ok = true;
    for (const auto& c : gradsuite::run_all()) {
      char line[160];
      std::snprintf(line, sizeof line, "%-22s max_rel_error %.3e  worst %-16s %s\n", c.name.c_str(),
                    c.report.max_rel_error, c.worst_tensor.c_str(), c.passed() ? "PASS" : "FAIL");
      out << line;
      ok = ok && c.passed();
    }
    return ok ? kExitOk : kExitNumeric;
  });
}

}  // namespace yesbound::cli
