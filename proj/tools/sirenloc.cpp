// sirenloc: simulate sessions, label them, train, evaluate and run streaming
// inference.
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sirenloc/pipeline.hpp"

using namespace sirenloc;

int main(int argc, char** argv) {
  CLI::App app{"Emergency vehicle siren detection and localization"};
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint;
  std::string out;
  std::string session;
  double stride = 0.17;
  std::optional<double> threshold;
  std::optional<std::uint64_t> seed;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "output directory (infer: records file)");
    cmd->add_option("--seed", seed, "override the training/splitting seeds");
  };

  auto* simulate = app.add_subcommand("simulate", "generate synthetic recording sessions");
  add_common(simulate);
  auto* label = app.add_subcommand("label", "window, label and split the sessions");
  add_common(label);
  auto* train = app.add_subcommand("train", "train the network");
  add_common(train);
  train->add_option("--checkpoint", checkpoint, "resume from this checkpoint")->check(CLI::ExistingFile);
  auto* evaluate = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/model/best.ckpt)");
  evaluate->add_option("--threshold", threshold, "siren probability threshold");
  auto* infer = app.add_subcommand("infer", "stream a recording through a checkpoint");
  add_common(infer);
  infer->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/model/best.ckpt)");
  infer->add_option("--session", session, "session directory or 8-channel WAV file")->required();
  infer->add_option("--stride", stride, "seconds between ticks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    auto rc = config::load_run_config(config_path);
    if (!out.empty() && !infer->parsed()) rc.output_dir = out;
    if (seed) {
      rc.train.seed = *seed;
      rc.label.split.seed = *seed;
      rc.label.balance.seed = *seed;
    }
    if (threshold) rc.eval.threshold = *threshold;
    const auto default_ckpt = [&] { return checkpoint.empty() ? pipeline::model_dir(rc) / "best.ckpt" : std::filesystem::path(checkpoint); };

    if (simulate->parsed()) {
      pipeline::cmd_simulate(rc, std::cout);
    } else if (label->parsed()) {
      pipeline::cmd_label(rc, std::cout);
    } else if (train->parsed()) {
      std::optional<std::filesystem::path> resume;
      if (!checkpoint.empty()) resume = checkpoint;
      pipeline::cmd_train(rc, resume, std::cout);
    } else if (evaluate->parsed()) {
      pipeline::cmd_eval(rc, default_ckpt(), std::cout);
    } else if (infer->parsed()) {
      if (out.empty()) {
        pipeline::cmd_infer(rc, default_ckpt(), session, stride, std::cout);
      } else {
        std::ofstream os(out);
        if (!os) throw RuntimeFailure("cannot write " + out);
        pipeline::cmd_infer(rc, default_ckpt(), session, stride, os);
      }
    }
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
