#include "uvim/runner.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "uvim/imageio.hpp"

namespace uvim {

namespace fs = std::filesystem;

namespace {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, result.ptr);
}

std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : "N/A"; }

// Quotes a CSV field when it holds a separator, quote or newline.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::ofstream open_output(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void add_rows(std::vector<MetricRow>& rows, std::size_t step, const std::string& split,
              const std::vector<TaskMetric>& metrics) {
  for (const auto& m : metrics) rows.push_back({step, split, m.name, m.value});
}

std::string describe(const std::vector<TaskMetric>& metrics) {
  std::string out;
  for (const auto& m : metrics) out += " " + m.name + "=" + format_number(m.value);
  return out;
}

bool at_checkpoint(std::size_t done, std::size_t interval, std::size_t total) {
  return done % interval == 0 || done == total;
}

template <class Run, class Step>
void train_loop(std::size_t total, const char* stage, std::ostream* log, Run& run, Step&& step) {
  std::size_t batch_index = 0, streak = 0;
  while (run() < total) {
    try {
      step(batch_index++);
      streak = 0;
    } catch (const NonFiniteError& e) {
      if (log) *log << stage << ": skipped non-finite step: " << e.what() << "\n";
      if (++streak >= kMaxNonFiniteStreak) {
        throw std::runtime_error(std::string(stage) + ": aborting after " + std::to_string(streak) +
                                 " consecutive non-finite steps; last: " + e.what());
      }
    }
  }
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  auto out = open_output(path);
  out << "step,split,metric,value\n";
  for (const auto& r : rows) out << r.step << "," << r.split << "," << r.metric << "," << format_number(r.value) << "\n";
}

std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "step,split,metric,value") {
    throw std::runtime_error("'" + path + "' is not a metrics CSV");
  }
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    MetricRow r;
    std::string step, value;
    if (!std::getline(fields, step, ',') || !std::getline(fields, r.split, ',') ||
        !std::getline(fields, r.metric, ',') || !std::getline(fields, value)) {
      throw std::runtime_error("malformed metrics row: " + line);
    }
    r.step = std::stoull(step);
    r.value = value == "nan" ? std::nan("") : std::stod(value);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string primary_metric(TaskKind kind) {
  switch (kind) {
    case TaskKind::panoptic:
      return "pq";
    case TaskKind::depth:
      return "rmse";
    case TaskKind::colorization:
      return "mse";
  }
  throw std::invalid_argument("primary_metric: unknown task");
}

double metric_value(const std::vector<TaskMetric>& metrics, const std::string& name) {
  for (const auto& m : metrics) {
    if (m.name == name) return m.value;
  }
  throw std::out_of_range("metric '" + name + "' not reported");
}

std::vector<TaskMetric> evaluate_stage1(const Stage1Trainer& trainer, std::span<const Example> examples,
                                        std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("evaluate_stage1: batch must be positive");
  TaskEvaluator evaluator(trainer.task());
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    const auto chunk = examples.subspan(start, std::min(batch, examples.size() - start));
    const auto preds = decode_batch(trainer.task(), trainer.reconstruct(chunk));
    for (std::size_t e = 0; e < chunk.size(); ++e) evaluator.add(preds[e], chunk[e].y);
  }
  return evaluator.metrics();
}

std::vector<TaskMetric> evaluate_stage2(const Stage1Trainer& stage1, const LanguageModel& lm,
                                        std::span<const Example> examples, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("evaluate_stage2: batch must be positive");
  if (stage1.model_config().no_oracle) throw std::invalid_argument("evaluate_stage2: no stage II without an oracle");
  TaskEvaluator evaluator(stage1.task());
  double nll = 0.0;
  Rng rng(0);  // unused at T = 0
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    const auto chunk = examples.subspan(start, std::min(batch, examples.size() - start));
    const Tensor images = batch_images(chunk);
    const auto preds = predict(stage1.base(), stage1.oracle().codebook(), lm, images, 0.0, rng);
    for (std::size_t e = 0; e < chunk.size(); ++e) evaluator.add(preds[e], chunk[e].y);
    NoRecordScope<float> no_record;
    const GuidingCode codes = oracle_codes(stage1.oracle(), stage1.task(), chunk);
    nll += lm.loss(lm.encode_image(images), codes).item() * static_cast<double>(chunk.size());
  }
  auto metrics = evaluator.metrics();
  metrics.push_back({"nll", examples.empty() ? 0.0 : nll / static_cast<double>(examples.size()), false});
  return metrics;
}

Stage1Run run_stage1(const RunConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const SyntheticDataset data(cfg.data_config(), cfg.task);
  const auto holdout = data.holdout(cfg.eval_size);
  Stage1Run run;
  run.trainer = std::make_unique<Stage1Trainer>(cfg.model_config(), cfg.task, cfg.stage1_config(), cfg.seed);
  Stage1Trainer& trainer = *run.trainer;
  auto steps = [&] { return trainer.optimizer().steps(); };

  train_loop(cfg.total_steps, "stage1", options.log, steps, [&](std::size_t batch_index) {
    const Stage1Metrics m = trainer.step(data.train_batch(batch_index, cfg.batch_size));
    const std::size_t done = m.step + 1;
    if (at_checkpoint(done, cfg.log_training_steps, cfg.total_steps)) {
      std::vector<TaskMetric> scalars = {{"loss", m.loss},        {"reconstruction", m.reconstruction},
                                         {"commitment", m.commitment}, {"grad_norm", m.grad_norm},
                                         {"lr", m.lr}};
      if (!cfg.no_oracle) {
        scalars.push_back({"perplexity", m.perplexity});
        scalars.push_back({"respawned", static_cast<double>(m.respawned)});
      }
      add_rows(run.train_rows, done, "train", scalars);
      if (options.log) *options.log << "stage1 step " << done << describe(scalars) << "\n";
    }
    if (at_checkpoint(done, cfg.log_eval_steps, cfg.total_steps)) {
      run.final_metrics = evaluate_stage1(trainer, holdout, options.eval_batch);
      add_rows(run.eval_rows, done, "holdout", run.final_metrics);
      if (options.log) *options.log << "stage1 eval " << done << describe(run.final_metrics) << std::endl;
    }
  });

  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    save_config(cfg, join(options.out_dir, "config.txt"));
    write_metrics_csv(join(options.out_dir, "train_log.csv"), run.train_rows);
    write_metrics_csv(join(options.out_dir, "metrics.csv"), run.eval_rows);
    stage1_checkpoint(cfg, trainer).save(join(options.out_dir, "stage1.ckpt"));
  }
  return run;
}

Stage2Run run_stage2(const RunConfig& cfg, const Checkpoint& stage1, const RunOptions& options) {
  cfg.validate();
  if (cfg.no_oracle) throw std::invalid_argument("stage2: the no_oracle ablation has no stage II");
  if (stage1.kind != "stage1" && stage1.kind != "stage2") {
    throw CheckpointError("stage2: unexpected checkpoint kind '" + stage1.kind + "'");
  }
  require_compatible(cfg, stage1, language_model_keys());

  Stage2Run run;
  run.stage1 = load_stage1_trainer(stage1);
  const Stage1Trainer& frozen = *run.stage1;
  check_compatible(frozen.model_config(), frozen.oracle().codebook(), cfg.model_config());
  run.trainer = std::make_unique<Stage2Trainer>(cfg.model_config(), cfg.task, cfg.stage2_config(), cfg.seed);
  Stage2Trainer& trainer = *run.trainer;

  const SyntheticDataset data(cfg.data_config(), cfg.task);
  const auto holdout = data.holdout(cfg.stage2_eval_size);
  const std::uint64_t oracle_sum = frozen.oracle().params().checksum(), base_sum = frozen.base().params().checksum();
  auto steps = [&] { return trainer.optimizer().steps(); };

  train_loop(cfg.stage2_total_steps, "stage2", options.log, steps, [&](std::size_t batch_index) {
    const Stage2Metrics m = trainer.step(frozen.oracle(), data.train_batch(batch_index, cfg.stage2_batch_size));
    const std::size_t done = m.step + 1;
    if (at_checkpoint(done, cfg.log_training_steps, cfg.stage2_total_steps)) {
      const std::vector<TaskMetric> scalars = {{"loss", m.loss}, {"grad_norm", m.grad_norm}, {"lr", m.lr}};
      add_rows(run.train_rows, done, "train", scalars);
      if (options.log) *options.log << "stage2 step " << done << describe(scalars) << "\n";
    }
    if (at_checkpoint(done, cfg.stage2_log_eval_steps, cfg.stage2_total_steps)) {
      run.final_metrics = evaluate_stage2(frozen, trainer.lm(), holdout, options.eval_batch);
      add_rows(run.eval_rows, done, "holdout", run.final_metrics);
      if (options.log) *options.log << "stage2 eval " << done << describe(run.final_metrics) << std::endl;
    }
  });

  if (frozen.oracle().params().checksum() != oracle_sum || frozen.base().params().checksum() != base_sum) {
    throw std::logic_error("stage2: stage-I parameters changed during training");
  }
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    save_config(cfg, join(options.out_dir, "config.txt"));
    write_metrics_csv(join(options.out_dir, "train_log.csv"), run.train_rows);
    write_metrics_csv(join(options.out_dir, "metrics.csv"), run.eval_rows);
    stage2_checkpoint(cfg, frozen, trainer).save(join(options.out_dir, "stage2.ckpt"));
  }
  return run;
}

const std::vector<std::string>& ablation_arms() {
  static const std::vector<std::string> arms = {"default", "no_dropout", "no_oracle", "non_autoregressive", "no_image"};
  return arms;
}

RunConfig ablation_config(const RunConfig& base, const std::string& arm) {
  RunConfig cfg = base;
  if (arm == "default") {
  } else if (arm == "no_dropout") {
    cfg.no_dropout = true;
  } else if (arm == "no_oracle") {
    cfg.no_oracle = true;
  } else if (arm == "non_autoregressive") {
    cfg.non_autoregressive_lm = true;
  } else if (arm == "no_image") {
    cfg.no_image = true;
  } else {
    throw std::invalid_argument("unknown ablation arm '" + arm + "'");
  }
  return cfg;
}

std::vector<AblationRow> run_ablations(const RunConfig& base, const RunOptions& options,
                                       const std::vector<std::string>& arms) {
  std::vector<AblationRow> rows;
  // Stage I does not depend on the LM, so the non-autoregressive arm reuses
  // the default arm's stage-I model when it is available.
  std::optional<Checkpoint> default_stage1;
  std::optional<double> default_stage1_metric;
  const std::string metric = primary_metric(base.task.kind);

  for (const auto& arm : arms) {
    AblationRow row{arm, "ok", metric};
    RunOptions arm_options = options;
    if (!options.out_dir.empty()) arm_options.out_dir = join(options.out_dir, arm);
    try {
      const RunConfig cfg = ablation_config(base, arm);
      if (options.log) *options.log << "ablation arm " << arm << std::endl;
      std::optional<Checkpoint> stage1;
      if (arm == "non_autoregressive" && default_stage1) {
        stage1 = default_stage1;
        row.stage1 = default_stage1_metric;
      } else {
        const Stage1Run s1 = run_stage1(cfg, arm_options);
        row.stage1 = metric_value(s1.final_metrics, metric);
        stage1 = stage1_checkpoint(cfg, *s1.trainer);
        if (arm == "default") {
          default_stage1 = stage1;
          default_stage1_metric = row.stage1;
        }
      }
      if (!cfg.no_oracle) {
        const Stage2Run s2 = run_stage2(cfg, *stage1, arm_options);
        row.stage2 = metric_value(s2.final_metrics, metric);
        row.stage2_nll = metric_value(s2.final_metrics, "nll");
      }
    } catch (const std::exception& e) {
      row.status = "failed";
      row.error = e.what();
      if (options.log) *options.log << "ablation arm " << arm << " failed: " << e.what() << std::endl;
    }
    rows.push_back(std::move(row));
  }
  if (!options.out_dir.empty()) write_ablation_csv(join(options.out_dir, "ablations.csv"), rows);
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  auto out = open_output(path);
  out << "arm,status,metric,stage1,stage2,stage2_nll,error\n";
  for (const auto& r : rows) {
    out << r.arm << "," << r.status << "," << r.metric << "," << format_optional(r.stage1) << ","
        << format_optional(r.stage2) << "," << format_optional(r.stage2_nll) << "," << csv_field(r.error) << "\n";
  }
}

std::vector<SweepRow> run_code_sweep(const RunConfig& base, const std::vector<std::size_t>& lengths,
                                     const std::vector<std::size_t>& dict_sizes, bool with_stage2,
                                     const RunOptions& options) {
  for (std::size_t n : lengths) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (n == 0 || side * side != n) throw std::invalid_argument("sweep: code_len " + std::to_string(n) + " is not a perfect square");
  }
  const std::string metric = primary_metric(base.task.kind);
  std::vector<SweepRow> rows;
  for (std::size_t n : lengths) {
    for (std::size_t N : dict_sizes) {
      SweepRow row{n, N, "ok"};
      RunConfig cfg = base;
      cfg.model.code_len = n;
      cfg.model.dict_size = N;
      RunOptions cell_options = options;
      if (!options.out_dir.empty()) {
        cell_options.out_dir = join(options.out_dir, "n" + std::to_string(n) + "_N" + std::to_string(N));
      }
      try {
        if (options.log) *options.log << "sweep cell code_len=" << n << " dict_size=" << N << std::endl;
        const Stage1Run s1 = run_stage1(cfg, cell_options);
        row.stage1_metric = metric_value(s1.final_metrics, metric);
        if (with_stage2 && !cfg.no_oracle) {
          const Stage2Run s2 = run_stage2(cfg, stage1_checkpoint(cfg, *s1.trainer), cell_options);
          row.stage2_metric = metric_value(s2.final_metrics, metric);
        }
      } catch (const std::exception& e) {
        row.status = "failed";
        if (options.log) *options.log << "sweep cell failed: " << e.what() << std::endl;
      }
      rows.push_back(row);
    }
  }
  if (!options.out_dir.empty()) write_sweep_csv(join(options.out_dir, "sweep.csv"), rows);
  return rows;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  auto out = open_output(path);
  out << "code_len,dict_size,stage1_metric,stage2_metric,status\n";
  for (const auto& r : rows) {
    out << r.code_len << "," << r.dict_size << "," << format_optional(r.stage1_metric) << ","
        << format_optional(r.stage2_metric) << "," << r.status << "\n";
  }
}

void write_sample_grid(const std::string& path, const Stage1Trainer& stage1, const LanguageModel& lm,
                       std::span<const Example> examples, std::size_t num_samples, double temperature,
                       std::uint64_t seed) {
  if (examples.empty()) throw std::invalid_argument("sample grid: no examples");
  const TaskConfig& task = stage1.task();
  const double max_depth = task.depth.max;
  const Tensor images = batch_images(examples);
  const Codebook& book = stage1.oracle().codebook();

  std::vector<std::vector<Raster>> rows(3);
  for (const auto& e : examples) {
    rows[0].push_back(to_raster(e.x));
    rows[1].push_back(to_raster(e.y, max_depth));
  }
  Rng greedy_rng(seed);
  for (const auto& label : predict(stage1.base(), book, lm, images, 0.0, greedy_rng)) {
    rows[2].push_back(to_raster(label, max_depth));
  }
  if (num_samples > 0) {
    const SamplingParams params{temperature, seed, num_samples};
    for (const auto& code : sample_codes(lm, images, params)) {
      auto& row = rows.emplace_back();
      for (const auto& label : decode_with_code(stage1.base(), book, images, code)) {
        row.push_back(to_raster(label, max_depth));
      }
    }
  }
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_png(path, tile(rows));
}

ProbeResult run_mask_probe(const Stage1Trainer& stage1, std::span<const Example> examples, const MaskProbeSpec& spec,
                           std::uint64_t seed, std::size_t batch) {
  if (stage1.model_config().no_oracle) throw std::invalid_argument("mask probe: model has no guiding code");
  if (batch == 0) throw std::invalid_argument("mask probe: batch must be positive");
  const ModelConfig& model = stage1.model_config();
  spec.validate(model.code_side(), model.dict_size);
  const auto region = probe_pixel_region(spec, model.code_side(), model.input_size, model.input_size);
  TaskEvaluator evaluator(stage1.task());
  Rng rng(seed);
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    const auto chunk = examples.subspan(start, std::min(batch, examples.size() - start));
    const GuidingCode code = oracle_codes(stage1.oracle(), stage1.task(), chunk);
    const auto preds =
        probe_masked_code(stage1.base(), stage1.oracle().codebook(), batch_images(chunk), code, spec, rng);
    for (std::size_t e = 0; e < chunk.size(); ++e) {
      evaluator.add(preds[e], chunk[e].y);
      evaluator.add_region(preds[e], chunk[e].y, region);
    }
  }
  ProbeResult result;
  result.metrics = evaluator.metrics();
  for (const auto& m : result.metrics) {
    if (m.name == "region_accuracy") result.masked_accuracy = m.value;
    if (m.name == "outside_accuracy") result.unmasked_accuracy = m.value;
  }
  return result;
}

}  // namespace uvim
