#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ezsd/pipeline.hpp"

namespace {

// Keys whose defaults carry the published training recipe.
const std::vector<std::string> kPaperDefaultKeys{
    "/temperature",
    "/prompt_template",
    "/adapt/learning_rate",
    "/adapt/batch_size",
    "/adapt/epochs",
    "/adapt/grad_norm_clip",
    "/adapt/enlarge_factor",
    "/proposals/resize/max_long_edge",
    "/proposals/resize/max_short_edge",
    "/proposals/nms_iou",
    "/proposals/top_k",
    "/proposals/base_gt_filter_iou",
    "/proposals/gt_enlarge_factor",
    "/proposals/train_subset_size",
    "/detector/fg_iou",
    "/detector/roi_batch",
    "/detector/sgd/lr",
    "/detector/sgd/momentum",
    "/detector/sgd/weight_decay",
    "/detector/batch_size",
    "/detector/epochs",
    "/detector/warmup_iters",
    "/detector/warmup_ratio",
    "/detector/score_threshold",
};

std::string paper_default_footer() {
  const auto defaults = ezsd::to_json(ezsd::RunConfig{});
  std::string out = "paper-default values (config key = value):\n";
  for (const auto& ptr : kPaperDefaultKeys) {
    std::string key = ptr.substr(1);
    for (auto& ch : key)
      if (ch == '/') ch = '.';
    out += "  " + key + " = " + defaults.at(nlohmann::json::json_pointer(ptr)).dump() + "  [paper-default]\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ezsd: zero-shot detection by distilling a vision-language encoder into a detector"};
  app.require_subcommand(1);
  app.footer(paper_default_footer());

  std::string config_path;
  bool print_config = false;
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON run config; flags override file values")->check(CLI::ExistingFile);
  app.add_flag("--print-config", print_config, "print the resolved config and exit");
  app.add_option("--workers", workers, "worker pool cap")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "global seed");
  app.add_option("--output-dir", output_dir, "artifact directory");
  app.add_option("--set", overrides, "override a config key: key.path=value (repeatable)");

  auto* make_toy = app.add_subcommand("make-toy", "render the synthetic shapes dataset");
  std::optional<int> toy_images;
  make_toy->add_option("--n-images", toy_images, "training images");

  auto* adapt = app.add_subcommand("adapt", "finetune the encoder's normalization layers on base crops");
  std::optional<int> adapt_epochs;
  adapt->add_option("--epochs", adapt_epochs, "finetuning epochs");

  app.add_subcommand("gen-proposals", "score anchors with the encoder and write the proposal store");

  auto* train = app.add_subcommand("train", "train the detector");
  bool no_distill = false;
  std::optional<int> iters;
  train->add_flag("--no-distill", no_distill, "drop the distillation term");
  train->add_option("--iters", iters, "iteration count (overrides epochs)")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "evaluate a detector checkpoint on the eval split");
  std::optional<std::string> checkpoint;
  std::optional<std::string> eval_format;
  eval->add_option("--checkpoint", checkpoint, "detector checkpoint (default: <output-dir>/detector.ckpt)");
  eval->add_option("--format", eval_format, "report format")->check(CLI::IsMember({"csv", "json"}));

  auto* stats = app.add_subcommand("stats", "IoGT statistics of a proposal store against novel GT");
  std::optional<std::string> store;
  std::optional<std::string> stats_format;
  stats->add_option("--store", store, "store manifest (default: <output-dir>/proposals.jsonl)");
  stats->add_option("--format", stats_format, "report format")->check(CLI::IsMember({"csv", "json"}));

  CLI11_PARSE(app, argc, argv);

  std::string stage = "config";
  try {
    ezsd::RunConfig cfg = config_path.empty() ? ezsd::RunConfig{} : ezsd::load_run_config(config_path);
    for (const auto& o : overrides) ezsd::apply_override(cfg, o);
    if (workers) cfg.workers = *workers;
    if (seed) cfg.seed = *seed;
    if (output_dir) cfg.output_dir = *output_dir;
    if (toy_images) cfg.toy.options.n_images = *toy_images;
    if (adapt_epochs) cfg.adapt.epochs = *adapt_epochs;
    if (no_distill) cfg.detector.distill = false;
    if (iters) cfg.detector.max_iters = *iters;
    if (eval_format) cfg.eval.format = *eval_format;
    if (stats_format) cfg.eval.format = *stats_format;
    cfg.resolve();
    cfg.validate();

    if (print_config) {
      std::cout << ezsd::to_json(cfg).dump(2) << "\n";
      return 0;
    }

    const auto* sub = app.get_subcommands().front();
    stage = sub->get_name();
    if (sub == make_toy) {
      const auto s = ezsd::cmd_make_toy(cfg);
      std::cout << "train " << s.train_images << " images " << s.train_annotations << " annotations\n";
      if (!s.eval_dir.empty())
        std::cout << "eval " << s.eval_images << " images " << s.eval_annotations << " annotations\n";
    } else if (sub == adapt) {
      ezsd::cmd_adapt(cfg);
    } else if (sub == train) {
      ezsd::cmd_train(cfg);
    } else if (sub == eval) {
      ezsd::cmd_eval(cfg, checkpoint ? std::optional<std::filesystem::path>(*checkpoint) : std::nullopt);
    } else if (sub == stats) {
      ezsd::cmd_stats(cfg, store ? std::optional<std::filesystem::path>(*store) : std::nullopt);
    } else {
      ezsd::cmd_gen_proposals(cfg);
    }
  } catch (const ezsd::PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << stage << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
