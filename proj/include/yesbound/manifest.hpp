#pragma once

// JSON run manifests. The schema is documented in docs/manifest.md; relative
// paths resolve against the manifest's directory.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "yesbound/harness.hpp"
#include "yesbound/hash.hpp"

namespace yesbound::manifest {

using nlohmann::json;

namespace detail {

template <typename T>
T get(const json& j, const std::string& ctx, const std::string& key) {
  if (!j.contains(key)) fail(ErrorKind::InvalidSpec, ctx + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::InvalidSpec, ctx + ": field '" + key + "' has the wrong type");
  }
}

template <typename T>
T get_or(const json& j, const std::string& ctx, const std::string& key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  return get<T>(j, ctx, key);
}

inline void allow_only(const json& j, const std::string& ctx, std::initializer_list<const char*> keys) {
  if (!j.is_object()) fail(ErrorKind::InvalidSpec, ctx + " must be an object");
  const std::set<std::string> ok(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) fail(ErrorKind::InvalidSpec, ctx + ": unknown field '" + k + "'");
  }
}

}  // namespace detail

struct Manifest {
  json raw;  // after command-line overrides
  std::filesystem::path base_dir;

  std::string experiment;
  std::string kind;  // "lm" or "fcnn"
  std::filesystem::path output_dir;

  harness::LmRunConfig lm;
  std::filesystem::path train_path, test_path;
  std::size_t train_take = 0, test_take = 0;

  harness::FcnnRunConfig fcnn;
  std::filesystem::path images_path, labels_path;
  Index subset = 0;

  /// FNV-1a 64 of the canonical (sorted-key) JSON dump, output_dir excluded
  /// so the same run written elsewhere hashes identically.
  std::string hash() const {
    json h = raw;
    h.erase("output_dir");
    return hex64(fnv1a64(h.dump()));
  }
  /// Architecture identity used to match checkpoints.
  std::uint64_t model_hash() const {
    return fnv1a64(json{{"model", raw.at("model")}, {"quant", raw.value("quant", json::object())}}.dump());
  }
};

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline quant::QuantSpec parse_quant(const json& j) {
  detail::allow_only(j, "quant", {"scheme", "lambda", "zero_sign"});
  quant::QuantSpec q;
  q.scheme = quant::scheme_from_string(detail::get_or<std::string>(j, "quant", "scheme", "none"));
  q.lambda = detail::get_or<double>(j, "quant", "lambda", 1.0);
  q.zero_sign = detail::get_or<int>(j, "quant", "zero_sign", 1);
  q.validate();
  return q;
}

inline optim::OptimizerConfig parse_optimizer(const json& j) {
  detail::allow_only(j, "optimizer", {"kind", "lr", "beta1", "beta2", "eps", "weight_decay", "schedule"});
  optim::OptimizerConfig o;
  o.kind = optim::kind_from_string(detail::get<std::string>(j, "optimizer", "kind"));
  o.lr = detail::get<double>(j, "optimizer", "lr");
  o.beta1 = detail::get_or<double>(j, "optimizer", "beta1", o.beta1);
  o.beta2 = detail::get_or<double>(j, "optimizer", "beta2", o.beta2);
  o.eps = detail::get_or<double>(j, "optimizer", "eps", o.eps);
  o.weight_decay = detail::get_or<double>(j, "optimizer", "weight_decay", o.weight_decay);
  if (j.contains("schedule") && !j["schedule"].is_null()) {
    const json& s = j["schedule"];
    detail::allow_only(s, "optimizer.schedule", {"factor", "every_n_epochs"});
    o.has_schedule = true;
    o.schedule.factor = detail::get<double>(s, "optimizer.schedule", "factor");
    o.schedule.every_n_epochs = detail::get<std::int64_t>(s, "optimizer.schedule", "every_n_epochs");
  }
  o.validate();
  return o;
}

inline std::vector<yes::PermutationSpec> parse_suite(const json& j) {
  if (!j.is_array()) fail(ErrorKind::InvalidSpec, "yes.suite must be an array");
  std::vector<yes::PermutationSpec> out;
  std::set<std::string> names;
  for (const auto& e : j) {
    detail::allow_only(e, "yes.suite entry", {"name", "targets"});
    yes::PermutationSpec p;
    p.name = detail::get<std::string>(e, "yes.suite entry", "name");
    p.targets = detail::get<std::vector<Index>>(e, "yes.suite entry " + p.name, "targets");
    if (p.name.empty() || p.name == "train" || !names.insert(p.name).second) {
      fail(ErrorKind::InvalidSpec, "yes.suite: permutation names must be unique, non-empty and not 'train'");
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline void require_file(const std::filesystem::path& p, const std::string& what) {
  if (!std::filesystem::is_regular_file(p)) {
    fail(ErrorKind::InvalidSpec, what + " not found: " + p.string());
  }
}

/// Builds the typed configuration from `m.raw`.
inline void build(Manifest& m) {
  const json& j = m.raw;
  detail::allow_only(j, "manifest",
                     {"experiment", "kind", "seed", "epochs", "monitor_every", "output_dir", "model",
                      "optimizer", "quant", "batch_size", "grad_accum_steps", "data", "yes",
                      "fcnn_bounds", "checkpoint_every"});
  m.experiment = detail::get<std::string>(j, "manifest", "experiment");
  m.kind = detail::get<std::string>(j, "manifest", "kind");
  const auto seed = detail::get_or<std::uint64_t>(j, "manifest", "seed", 0);
  const auto epochs = detail::get<std::int64_t>(j, "manifest", "epochs");
  const auto monitor_every = detail::get_or<std::int64_t>(j, "manifest", "monitor_every", 1);
  m.output_dir = resolve(m.base_dir, detail::get_or<std::string>(j, "manifest", "output_dir", "runs/" + m.experiment));
  const quant::QuantSpec q = parse_quant(j.value("quant", json::object()));
  const optim::OptimizerConfig opt = parse_optimizer(detail::get<json>(j, "manifest", "optimizer"));
  const json model = detail::get<json>(j, "manifest", "model");
  const json data = detail::get<json>(j, "manifest", "data");

  if (m.kind == "lm") {
    if (j.contains("fcnn_bounds")) fail(ErrorKind::InvalidSpec, "fcnn_bounds is only valid for kind 'fcnn'");
    detail::allow_only(model, "model", {"style", "vocab_size", "context_len", "d_model", "n_heads", "d_ff", "n_layers", "init_std"});
    auto& c = m.lm.model;
    c.style = lm::style_from_string(detail::get<std::string>(model, "model", "style"));
    c.vocab_size = detail::get<Index>(model, "model", "vocab_size");
    c.context_len = detail::get<Index>(model, "model", "context_len");
    c.d_model = detail::get<Index>(model, "model", "d_model");
    c.n_heads = detail::get<Index>(model, "model", "n_heads");
    c.d_ff = detail::get<Index>(model, "model", "d_ff");
    c.n_layers = detail::get<Index>(model, "model", "n_layers");
    c.init_std = detail::get_or<double>(model, "model", "init_std", 0.02);
    c.quant = q;
    m.lm.optimizer = opt;
    m.lm.epochs = epochs;
    m.lm.monitor_every = monitor_every;
    m.lm.seed = seed;
    m.lm.batch_size = detail::get_or<Index>(j, "manifest", "batch_size", 8);
    m.lm.grad_accum_steps = detail::get_or<Index>(j, "manifest", "grad_accum_steps", 1);
    m.lm.checkpoint_every = detail::get_or<std::int64_t>(j, "manifest", "checkpoint_every", 0);
    m.lm.checkpoint_dir = m.output_dir / "checkpoints";

    detail::allow_only(data, "data", {"train", "test", "train_take", "test_take", "eval_windows", "eval_test"});
    m.train_path = resolve(m.base_dir, detail::get<std::string>(data, "data", "train"));
    require_file(m.train_path, "training token file");
    m.train_take = detail::get_or<std::size_t>(data, "data", "train_take", 100000);
    m.lm.eval_windows = detail::get_or<Index>(data, "data", "eval_windows", 0);
    m.lm.eval_test = detail::get_or<bool>(data, "data", "eval_test", false);
    if (data.contains("test")) {
      m.test_path = resolve(m.base_dir, detail::get<std::string>(data, "data", "test"));
      require_file(m.test_path, "test token file");
      m.test_take = detail::get_or<std::size_t>(data, "data", "test_take", 10000);
    } else if (m.lm.eval_test) {
      fail(ErrorKind::InvalidSpec, "data.eval_test needs data.test");
    }

    if (j.contains("yes")) {
      const json& y = j["yes"];
      detail::allow_only(y, "yes", {"suite", "layer_lr", "head_lr", "layer_iterations", "head_iterations",
                                    "cache_size", "init", "fit_final_norm", "deferred_quant", "weight_decay"});
      m.lm.suite = parse_suite(y.value("suite", json::array()));
      auto& yc = m.lm.yes;
      yc.layer_lr = detail::get_or<double>(y, "yes", "layer_lr", yc.layer_lr);
      yc.head_lr = detail::get_or<double>(y, "yes", "head_lr", yc.head_lr);
      yc.layer_iterations = detail::get_or<Index>(y, "yes", "layer_iterations", yc.layer_iterations);
      yc.head_iterations = detail::get_or<Index>(y, "yes", "head_iterations", yc.head_iterations);
      yc.init = yes::init_from_string(detail::get_or<std::string>(y, "yes", "init", "random"));
      yc.fit_final_norm = detail::get_or<bool>(y, "yes", "fit_final_norm", false);
      yc.deferred_quant = detail::get_or<bool>(y, "yes", "deferred_quant", true);
      yc.weight_decay = detail::get_or<double>(y, "yes", "weight_decay", 0.0);
      m.lm.cache_size = detail::get_or<Index>(y, "yes", "cache_size", 0);
    }
    m.lm.config_hash = m.model_hash();
    m.lm.validate();
  } else if (m.kind == "fcnn") {
    if (j.contains("yes")) fail(ErrorKind::InvalidSpec, "the yes section is only valid for kind 'lm'");
    detail::allow_only(model, "model", {"layer_widths", "bias"});
    auto& f = m.fcnn;
    f.spec.layer_widths = detail::get<std::vector<Index>>(model, "model", "layer_widths");
    f.spec.bias = detail::get_or<bool>(model, "model", "bias", false);
    f.spec.quant = q;
    f.optimizer = opt;
    f.epochs = epochs;
    f.monitor_every = monitor_every;
    f.seed = seed;
    f.batch_size = detail::get_or<Index>(j, "manifest", "batch_size", 1000);
    detail::allow_only(data, "data", {"images", "labels", "subset"});
    m.images_path = resolve(m.base_dir, detail::get<std::string>(data, "data", "images"));
    m.labels_path = resolve(m.base_dir, detail::get<std::string>(data, "data", "labels"));
    require_file(m.images_path, "MNIST image file");
    require_file(m.labels_path, "MNIST label file");
    m.subset = detail::get<Index>(data, "data", "subset");
    if (j.contains("fcnn_bounds")) {
      const json& b = j["fcnn_bounds"];
      detail::allow_only(b, "fcnn_bounds", {"yesk", "refine", "refine_iterations", "refine_tolerance",
                                            "last_layer_iterative", "last_layer_iterations", "alpha"});
      f.yesk = detail::get_or<bool>(b, "fcnn_bounds", "yesk", true);
      f.yes.refine = detail::get_or<bool>(b, "fcnn_bounds", "refine", false);
      f.yes.refine_cfg.iterations = detail::get_or<Index>(b, "fcnn_bounds", "refine_iterations", 100);
      f.yes.refine_cfg.tolerance = detail::get_or<double>(b, "fcnn_bounds", "refine_tolerance", 1e-8);
      f.yes.last_layer_iterative = detail::get_or<bool>(b, "fcnn_bounds", "last_layer_iterative", false);
      f.yes.last_layer_cfg.iterations = detail::get_or<Index>(b, "fcnn_bounds", "last_layer_iterations", 100);
      if (b.contains("alpha") && !b["alpha"].is_null()) {
        f.yes.refine_cfg.alpha = f.yes.last_layer_cfg.alpha = detail::get<double>(b, "fcnn_bounds", "alpha");
      }
    }
    f.validate();
  } else {
    fail(ErrorKind::InvalidSpec, "kind must be 'lm' or 'fcnn', got '" + m.kind + "'");
  }
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::int64_t> monitor_every;
  std::optional<std::int64_t> epochs;
};

inline Manifest parse(const std::string& text, const std::filesystem::path& base_dir,
                      const Overrides& ov = {}) {
  Manifest m;
  m.base_dir = base_dir;
  try {
    m.raw = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::InvalidSpec, std::string("manifest is not valid JSON: ") + e.what(), e.byte);
  }
  if (!m.raw.is_object()) fail(ErrorKind::InvalidSpec, "manifest must be a JSON object");
  if (ov.seed) m.raw["seed"] = *ov.seed;
  if (ov.output_dir) m.raw["output_dir"] = std::filesystem::absolute(*ov.output_dir).string();
  if (ov.monitor_every) m.raw["monitor_every"] = *ov.monitor_every;
  if (ov.epochs) m.raw["epochs"] = *ov.epochs;
  build(m);
  return m;
}

inline Manifest load(const std::filesystem::path& path, const Overrides& ov = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::InvalidSpec, "cannot read manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path(), ov);
}

}  // namespace yesbound::manifest
