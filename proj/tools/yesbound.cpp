#include <CLI11.hpp>

#include "yesbound/commands.hpp"

int main(int argc, char** argv) {
  namespace cli = yesbound::cli;
  CLI::App app{"Training certification with layer-wise reference bounds"};
  app.require_subcommand(1);

  cli::Options opt;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::int64_t monitor_every = 0;
  std::int64_t epochs = -1;
  std::string resume, checkpoint;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--manifest", opt.manifest, "run manifest (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the manifest seed");
    sub->add_option("--out", out_dir, "override the output directory");
    sub->add_option("--monitor-every", monitor_every, "override the monitoring interval")
        ->check(CLI::PositiveNumber);
    sub->add_option("--epochs", epochs, "override the epoch budget")->check(CLI::NonNegativeNumber);
  };

  auto* fcnn = app.add_subcommand("train-fcnn", "train a quantized ReLU network with the bound cloud");
  add_common(fcnn);
  auto* lm = app.add_subcommand("train-lm", "train a decoder LM with the YES suite");
  add_common(lm);
  lm->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  auto* eval = app.add_subcommand("yes-eval", "fit the YES suite against a frozen checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", opt.split, "evaluation split")->check(CLI::IsMember({"train", "test"}));
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of all backward passes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kExitConfig;
  }

  for (auto* sub : {fcnn, lm, eval}) {
    if (sub->count("--seed")) opt.overrides.seed = seed;
    if (sub->count("--out")) opt.overrides.output_dir = out_dir;
    if (sub->count("--monitor-every")) opt.overrides.monitor_every = monitor_every;
    if (sub->count("--epochs")) opt.overrides.epochs = epochs;
  }
  if (!resume.empty()) opt.resume = resume;
  if (!checkpoint.empty()) opt.checkpoint = checkpoint;

  if (*fcnn) return cli::cmd_train_fcnn(opt);
  if (*lm) return cli::cmd_train_lm(opt);
  if (*eval) return cli::cmd_yes_eval(opt);
  if (*grad) return cli::cmd_gradcheck();
  return cli::kExitConfig;
}
