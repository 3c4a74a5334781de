#pragma once

// End-to-end runs: training loops with periodic evaluation, metric logs,
// the ablation table, the code-size sweep, sample grids and mask probes.

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uvim/checkpoint.hpp"
#include "uvim/config.hpp"
#include "uvim/inference.hpp"

namespace uvim {

struct MetricRow {
  std::size_t step = 0;
  std::string split;  // "train" or "holdout"
  std::string metric;
  double value = 0.0;

  bool operator==(const MetricRow&) const = default;
};

// CSV with header "step,split,metric,value"; values use the shortest exact form.
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::string& path);

// Name of the metric reported for each task: pq, rmse or mse.
std::string primary_metric(TaskKind kind);
double metric_value(const std::vector<TaskMetric>& metrics, const std::string& name);

struct RunOptions {
  std::string out_dir;           // empty: write nothing
  std::ostream* log = nullptr;   // progress lines
  std::size_t eval_batch = 32;
};

// Aborts a run after this many consecutive non-finite steps.
inline constexpr std::size_t kMaxNonFiniteStreak = 10;

// Oracle-guided reconstruction quality on held-out examples.
std::vector<TaskMetric> evaluate_stage1(const Stage1Trainer& trainer, std::span<const Example> examples,
                                        std::size_t batch = 32);
// End-to-end quality of predict at T = 0 plus the mean code NLL ("nll").
std::vector<TaskMetric> evaluate_stage2(const Stage1Trainer& stage1, const LanguageModel& lm,
                                        std::span<const Example> examples, std::size_t batch = 32);

struct Stage1Run {
  std::unique_ptr<Stage1Trainer> trainer;
  std::vector<MetricRow> train_rows, eval_rows;
  std::vector<TaskMetric> final_metrics;
};

// Writes config.txt, train_log.csv, metrics.csv and stage1.ckpt when
// out_dir is set. Evaluates every log_eval_steps and at the final step.
Stage1Run run_stage1(const RunConfig& cfg, const RunOptions& options = {});

struct Stage2Run {
  std::unique_ptr<Stage1Trainer> stage1;
  std::unique_ptr<Stage2Trainer> trainer;
  std::vector<MetricRow> train_rows, eval_rows;
  std::vector<TaskMetric> final_metrics;
};

// Geometry mismatches with the stage-I checkpoint are rejected before training.
// Writes config.txt, train_log.csv, metrics.csv and stage2.ckpt.
Stage2Run run_stage2(const RunConfig& cfg, const Checkpoint& stage1, const RunOptions& options = {});

struct AblationRow {
  std::string arm;
  std::string status;  // "ok" or "failed"
  std::string metric;
  std::optional<double> stage1, stage2, stage2_nll;
  std::string error;
};

const std::vector<std::string>& ablation_arms();
// The arm's config derived from the base config.
RunConfig ablation_config(const RunConfig& base, const std::string& arm);
// Columns: arm,status,metric,stage1,stage2,stage2_nll,error. Missing entries are N/A.
std::vector<AblationRow> run_ablations(const RunConfig& base, const RunOptions& options = {},
                                       const std::vector<std::string>& arms = ablation_arms());
void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

struct SweepRow {
  std::size_t code_len = 0, dict_size = 0;
  std::string status;
  std::optional<double> stage1_metric, stage2_metric;
};

// Columns: code_len,dict_size,stage1_metric,stage2_metric,status.
std::vector<SweepRow> run_code_sweep(const RunConfig& base, const std::vector<std::size_t>& lengths,
                                     const std::vector<std::size_t>& dict_sizes, bool with_stage2,
                                     const RunOptions& options = {});
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

// Rows: input, ground truth, T = 0 prediction, then num_samples draws at the
// given temperature. Columns are held-out examples.
void write_sample_grid(const std::string& path, const Stage1Trainer& stage1, const LanguageModel& lm,
                       std::span<const Example> examples, std::size_t num_samples, double temperature,
                       std::uint64_t seed);

struct ProbeResult {
  double masked_accuracy = 0.0;    // pixels under the masked code cells
  double unmasked_accuracy = 0.0;  // all other pixels
  std::vector<TaskMetric> metrics;
};

// Masks part of the oracle code on held-out examples and scores f's output.
ProbeResult run_mask_probe(const Stage1Trainer& stage1, std::span<const Example> examples, const MaskProbeSpec& spec,
                           std::uint64_t seed, std::size_t batch = 32);

}  // namespace uvim
