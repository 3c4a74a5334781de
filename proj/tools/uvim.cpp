// Command-line front end: data generation, both training stages, prediction,
// evaluation, sample grids, mask probes, ablations and code-size sweeps.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "uvim/imageio.hpp"
#include "uvim/runner.hpp"

namespace fs = std::filesystem;
using namespace uvim;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string checkpoint;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool needs_checkpoint, bool needs_out_dir) {
  cmd->add_option("--config", opts.config_path, "Run configuration file (key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "Overrides the configured seed");
  auto* out = cmd->add_option("--out-dir", opts.out_dir, "Output directory");
  auto* ckpt = cmd->add_option("--checkpoint", opts.checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.overrides, "Config override key=value (repeatable)");
  if (needs_checkpoint) ckpt->required();
  if (needs_out_dir) out->required();
}

// Config file (or fallback), then --seed, then --set overrides.
RunConfig resolve_config(const CommonOptions& opts, const RunConfig& fallback = {}) {
  RunConfig cfg = opts.config_path.empty() ? fallback : load_config(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  for (const auto& item : opts.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + item + "'");
    set_config_value(cfg, item.substr(0, eq), item.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

RunOptions run_options(const CommonOptions& opts) { return {.out_dir = opts.out_dir, .log = &std::cerr}; }

void print_metrics(const std::vector<TaskMetric>& metrics) {
  for (const auto& m : metrics) std::cout << m.name << " " << m.value << "\n";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "holdout") return Split::holdout;
  throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = std::min(text.find(',', start), text.size());
    out.push_back(std::stoull(text.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

struct Loaded {
  Checkpoint ckpt;
  std::unique_ptr<Stage1Trainer> stage1;
  std::unique_ptr<Stage2Trainer> stage2;  // only for stage2 checkpoints
};

Loaded load_models(const std::string& path, bool need_lm) {
  Loaded out{Checkpoint::load(path)};
  out.stage1 = load_stage1_trainer(out.ckpt);
  if (out.ckpt.kind == "stage2") out.stage2 = load_stage2_trainer(out.ckpt);
  if (need_lm && !out.stage2) throw std::invalid_argument("'" + path + "' is not a stage2 checkpoint");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage guided dense prediction with a learned discrete code"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string split = "holdout";
  std::size_t count = 8, samples = 4;
  double temperature = 1.0;
  std::string lengths = "4,16,64", dict_sizes = "64";
  bool sweep_stage2 = false;
  MaskProbeSpec probe;
  std::string mask_mode = "random_codeword";

  auto* gen = app.add_subcommand("gen-data", "Write synthetic scenes as PNG and JSON");
  add_common(gen, common, false, true);
  gen->add_option("--split", split, "train or holdout");
  gen->add_option("--count", count, "Number of scenes");

  auto* train1 = app.add_subcommand("train-stage1", "Train the oracle and base model");
  add_common(train1, common, false, true);

  auto* train2 = app.add_subcommand("train-stage2", "Train the language model on a stage-1 checkpoint");
  add_common(train2, common, true, true);

  auto* pred = app.add_subcommand("predict", "Write predictions for held-out scenes");
  add_common(pred, common, true, true);
  pred->add_option("--count", count, "Number of held-out scenes");
  pred->add_option("--temperature", temperature, "Sampling temperature, 0 for argmax")->check(CLI::NonNegativeNumber);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  add_common(eval, common, true, false);
  eval->add_option("--count", count, "Number of held-out scenes");

  auto* grid = app.add_subcommand("sample-grid", "Tile inputs, labels and sampled predictions");
  add_common(grid, common, true, true);
  grid->add_option("--count", count, "Number of held-out scenes (columns)");
  grid->add_option("--samples", samples, "Sampled rows");
  grid->add_option("--temperature", temperature, "Sampling temperature")->check(CLI::NonNegativeNumber);

  auto* mask = app.add_subcommand("probe-mask", "Mask a code region and score the base model");
  add_common(mask, common, true, false);
  mask->add_option("--count", count, "Number of held-out scenes");
  mask->add_option("--top", probe.top, "First masked code row");
  mask->add_option("--left", probe.left, "First masked code column");
  mask->add_option("--height", probe.height, "Masked code rows");
  mask->add_option("--width", probe.width, "Masked code columns");
  mask->add_option("--mode", mask_mode, "zero_embedding, random_codeword or constant_codeword");
  mask->add_option("--constant-index", probe.constant_index, "Codeword for constant_codeword");

  auto* ablate = app.add_subcommand("ablate", "Run the ablation arms and write ablations.csv");
  add_common(ablate, common, false, true);

  auto* sweep = app.add_subcommand("sweep", "Sweep code length and dictionary size");
  add_common(sweep, common, false, true);
  sweep->add_option("--lengths", lengths, "Comma-separated code lengths (perfect squares)");
  sweep->add_option("--dict-sizes", dict_sizes, "Comma-separated dictionary sizes");
  sweep->add_flag("--stage2", sweep_stage2, "Also train and evaluate stage II per cell");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const RunConfig cfg = resolve_config(common);
      const SyntheticDataset data(cfg.data_config(), cfg.task);
      dump_dataset(data, parse_split(split), count, common.out_dir);
    } else if (train1->parsed()) {
      const RunConfig cfg = resolve_config(common);
      print_metrics(run_stage1(cfg, run_options(common)).final_metrics);
    } else if (train2->parsed()) {
      const Checkpoint stage1 = Checkpoint::load(common.checkpoint);
      const RunConfig cfg = resolve_config(common, stage1.config);
      print_metrics(run_stage2(cfg, stage1, run_options(common)).final_metrics);
    } else if (pred->parsed()) {
      const Loaded m = load_models(common.checkpoint, true);
      const RunConfig& cfg = m.ckpt.config;
      const auto examples = SyntheticDataset(cfg.data_config(), cfg.task).holdout(count);
      Rng rng(derive_seed(common.seed.value_or(cfg.seed), 7));
      const auto preds = predict(m.stage1->base(), m.stage1->oracle().codebook(), m.stage2->lm(),
                                 batch_images(examples), temperature, rng);
      fs::create_directories(common.out_dir);
      for (std::size_t i = 0; i < preds.size(); ++i) {
        write_png((fs::path(common.out_dir) / ("pred_" + std::to_string(i) + ".png")).string(),
                  to_raster(preds[i], cfg.task.depth.max));
      }
    } else if (eval->parsed()) {
      const Loaded m = load_models(common.checkpoint, false);
      const RunConfig& cfg = m.ckpt.config;
      const auto examples = SyntheticDataset(cfg.data_config(), cfg.task).holdout(count);
      std::vector<TaskMetric> metrics = m.stage2 ? evaluate_stage2(*m.stage1, m.stage2->lm(), examples)
                                                 : evaluate_stage1(*m.stage1, examples);
      print_metrics(metrics);
      if (!common.out_dir.empty()) {
        std::vector<MetricRow> rows;
        for (const auto& x : metrics) rows.push_back({m.ckpt.step, "holdout", x.name, x.value});
        write_metrics_csv((fs::path(common.out_dir) / "eval.csv").string(), rows);
      }
    } else if (grid->parsed()) {
      const Loaded m = load_models(common.checkpoint, true);
      const RunConfig& cfg = m.ckpt.config;
      const auto examples = SyntheticDataset(cfg.data_config(), cfg.task).holdout(count);
      write_sample_grid((fs::path(common.out_dir) / "samples.png").string(), *m.stage1, m.stage2->lm(), examples,
                        samples, temperature, common.seed.value_or(cfg.seed));
    } else if (mask->parsed()) {
      const Loaded m = load_models(common.checkpoint, false);
      const RunConfig& cfg = m.ckpt.config;
      probe.mode = parse_mask_mode(mask_mode);
      const auto examples = SyntheticDataset(cfg.data_config(), cfg.task).holdout(count);
      const ProbeResult r = run_mask_probe(*m.stage1, examples, probe, common.seed.value_or(cfg.seed));
      std::cout << "masked_accuracy " << r.masked_accuracy << "\nunmasked_accuracy " << r.unmasked_accuracy << "\n";
      print_metrics(r.metrics);
    } else if (ablate->parsed()) {
      const auto rows = run_ablations(resolve_config(common), run_options(common));
      for (const auto& r : rows) std::cout << r.arm << " " << r.status << "\n";
    } else if (sweep->parsed()) {
      const auto rows = run_code_sweep(resolve_config(common), parse_list(lengths), parse_list(dict_sizes),
                                       sweep_stage2, run_options(common));
      for (const auto& r : rows) std::cout << r.code_len << " " << r.dict_size << " " << r.status << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
