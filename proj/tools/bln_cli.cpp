// Command-line entry point: train, compare, gridsearch, gradcheck.

#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "bln/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Batch layer normalization lab"};
  app.require_subcommand(1);

  bln::CommandOptions opts;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "Experiment config (flat JSON)");
    sub->add_option("--out", opts.out_path, "Output CSV path (default: stdout)");
    sub->add_option("--threads", opts.threads, "Worker threads")->check(CLI::PositiveNumber);
  };

  auto* train = app.add_subcommand("train", "Train one network, write metrics and a checkpoint");
  add_common(train);
  train->add_option("--checkpoint", opts.checkpoint_path, "Checkpoint output path");
  train->add_flag("--force", opts.force, "Overwrite an existing checkpoint");

  auto* compare = app.add_subcommand("compare", "Train every listed normalizer with one seed");
  add_common(compare);

  auto* grid = app.add_subcommand("gridsearch", "Rank the 16 BLN inference configurations");
  add_common(grid);
  grid->add_option("--checkpoint", opts.checkpoint_path, "Trained BLN checkpoint")->required();
  grid->add_flag("--search-on-test", opts.search_on_test, "Rank on the test split");

  bln::GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients to finite differences");
  grad->add_option("--layer", gc.layer, "bn | ln | bln | net-none | net-bn | net-ln | net-bln");
  grad->add_option("--m", gc.m, "Batch size");
  grad->add_option("--d", gc.d, "Feature size");
  grad->add_option("--seed", gc.seed, "Random seed");
  grad->add_flag("--corrupt", gc.corrupt, "Perturb the analytic gradient (detector self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? bln::kExitOk : bln::kExitUsage;
  }

  if (*train) return bln::cmd_train(opts);
  if (*compare) return bln::cmd_compare(opts);
  if (*grid) return bln::cmd_gridsearch(opts);
  if (*grad) return bln::cmd_gradcheck(gc);
  return bln::kExitUsage;
}
