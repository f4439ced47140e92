// dvc: detector-verifier cascade runs, reward scoring, toy GRPO training
// and ablations.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dvc/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::string dataset;
  std::string backend;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (JSON)");
  cmd->add_option("--dataset", c.dataset, "dataset manifest");
  cmd->add_option("--backend", c.backend, "verifier backend")->check(CLI::IsMember({"replay", "http", "oracle", "policy"}));
  cmd->add_option("--workers", c.workers, "frame-level worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, "output directory");
}

dvc::RunConfig resolve(const Common& c) {
  dvc::RunConfig cfg = c.config.empty() ? dvc::RunConfig{} : dvc::load_config(c.config);
  if (!c.dataset.empty()) cfg.dataset = c.dataset;
  if (!c.backend.empty()) cfg.backend.verifier = dvc::verifier_kind_from_string(c.backend);
  if (c.workers) cfg.workers = *c.workers;
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Detector-verifier cascade toolkit"};
  app.require_subcommand(1);

  Common run_opts, train_opts, ablate_opts;
  auto* run = app.add_subcommand("run", "run the cascade over a dataset and write reports");
  add_common(run, run_opts);

  auto* train = app.add_subcommand("train", "train the toy verifier policy with GRPO");
  add_common(train, train_opts);
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* ablate = app.add_subcommand("ablate", "compare cascade variants on one dataset");
  add_common(ablate, ablate_opts);
  std::vector<std::string> variants;
  ablate->add_option("--variant", variants, "baseline | fixed | adaptive | adaptive+grpo (repeatable)");

  auto* score = app.add_subcommand("score", "score detection responses with the reward");
  std::string score_config, responses, annotations, score_out;
  score->add_option("--config", score_config, "configuration holding the reward weights");
  score->add_option("--responses", responses, "NDJSON of {frame_id, response}")->required();
  score->add_option("--annotations", annotations, "annotation NDJSON")->required();
  score->add_option("--out", score_out, "output file (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return dvc::cmd_run(resolve(run_opts), std::cerr);
    if (*train) {
      return dvc::cmd_train(resolve(train_opts), resume.empty() ? std::nullopt : std::optional(resume), std::cerr);
    }
    if (*ablate) {
      if (variants.empty()) variants = {"baseline", "fixed", "adaptive", "adaptive+grpo"};
      return dvc::cmd_ablate(resolve(ablate_opts), variants, std::cout, std::cerr);
    }
    if (*score) {
      const dvc::RunConfig cfg = score_config.empty() ? dvc::RunConfig{} : dvc::load_config(score_config);
      const auto header = dvc::provenance(cfg);
      if (score_out.empty()) return dvc::cmd_score(responses, annotations, cfg.rewards, std::cout, std::cerr, header);
      std::ofstream out(score_out);
      if (!out) {
        std::cerr << "error: cannot write " << score_out << '\n';
        return dvc::kExitFatal;
      }
      return dvc::cmd_score(responses, annotations, cfg.rewards, out, std::cerr, header);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return dvc::kExitFatal;
  }
  return dvc::kExitFatal;
}
