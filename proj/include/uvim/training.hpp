#pragma once

// Optimizer, schedule and the two training stages.

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uvim/models.hpp"
#include "uvim/synthdata.hpp"

namespace uvim {

// Raised when a loss or gradient is NaN/Inf. The failing step leaves all
// trainer state untouched.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Schedule {
  double base_lr = 4e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 3000;
  std::string decay_type = "cosine";  // "cosine" or "constant"

  void validate() const;
};

// Linear warmup from 0, then cosine decay to 0 at total_steps.
double lr_at(std::size_t step, const Schedule& schedule);

// Scales all gradients by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the norm before clipping.
double clip_global_norm(GradMap<float>& grads, double max_norm);

struct OptimizerConfig {
  double lr = 4e-4;
  double wd = 4e-5;
  double beta1 = 0.9;
  double beta2_cap = 0.95;
  double eps = 1e-8;
  double grad_clip_norm = 1.0;
};

// Adam-style update with second-moment decay 1 - t^-0.8 capped at beta2_cap,
// and decoupled weight decay on kernels scaled by the schedule.
class Optimizer {
 public:
  Optimizer(ParameterSet params, OptimizerConfig cfg, Schedule schedule);

  // Updates every parameter that has an entry in grads. Returns the lr used.
  double step(const GradMap<float>& grads);

  // Multiplies the lr of parameters whose name starts with prefix.
  void set_lr_multiplier(const std::string& prefix, double multiplier);

  std::size_t steps() const { return steps_; }
  const ParameterSet& params() const { return params_; }
  const OptimizerConfig& config() const { return cfg_; }
  const Schedule& schedule() const { return schedule_; }

  // Moments in parameter order, for checkpoints.
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(std::size_t steps, const std::vector<Tensor>& m, const std::vector<Tensor>& v);

 private:
  ParameterSet params_;
  OptimizerConfig cfg_;
  Schedule schedule_;
  std::vector<Tensor> m_, v_;
  std::vector<double> lr_mult_;
  std::vector<bool> decay_;
  std::size_t steps_ = 0;
};

struct Stage1Config {
  std::size_t batch_size = 32;
  std::size_t steps = 3000;
  std::size_t warmup_steps = 100;
  std::string decay_type = "cosine";
  OptimizerConfig opt;
  bool code_dropout = true;
  float commitment_beta = 0.25f;
};

struct Stage1Metrics {
  std::size_t step = 0;
  double loss = 0.0;            // reconstruction + commitment
  double reconstruction = 0.0;
  double commitment = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double perplexity = 0.0;
  std::size_t respawned = 0;
};

// Joint optimization of the oracle and the base model. Under the no_oracle
// ablation only the base model is trained and the code input is omitted.
class Stage1Trainer {
 public:
  Stage1Trainer(const ModelConfig& model, const TaskConfig& task, const Stage1Config& cfg, std::uint64_t seed);

  Stage1Metrics step(std::span<const Example> batch);

  // Base-model logits [B, H, W, C] guided by the oracle's clean code.
  Tensor reconstruct(std::span<const Example> batch) const;

  OracleModel& oracle() { return oracle_; }
  const OracleModel& oracle() const { return oracle_; }
  BaseModel& base() { return base_; }
  const BaseModel& base() const { return base_; }
  Optimizer& optimizer() { return optimizer_; }
  const Optimizer& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  const ModelConfig& model_config() const { return model_; }
  const TaskConfig& task() const { return task_; }
  const Stage1Config& config() const { return cfg_; }

 private:
  ModelConfig model_;
  TaskConfig task_;
  Stage1Config cfg_;
  Rng init_rng_;
  OracleModel oracle_;
  BaseModel base_;
  Optimizer optimizer_;
  Rng rng_;
};

struct Stage2Config {
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::size_t warmup_steps = 100;
  std::string decay_type = "cosine";
  OptimizerConfig opt;
};

struct Stage2Metrics {
  std::size_t step = 0;
  double loss = 0.0;  // mean nats per code position
  double grad_norm = 0.0;
  double lr = 0.0;
};

// Trains the language model on codes from a frozen oracle.
class Stage2Trainer {
 public:
  Stage2Trainer(const ModelConfig& model, const TaskConfig& task, const Stage2Config& cfg, std::uint64_t seed);

  // Targets are recomputed from the frozen oracle for every batch.
  Stage2Metrics step(const OracleModel& oracle, std::span<const Example> batch);
  Stage2Metrics step(const Tensor& images, std::span<const int> codes);

  LanguageModel& lm() { return lm_; }
  const LanguageModel& lm() const { return lm_; }
  Optimizer& optimizer() { return optimizer_; }
  const Optimizer& optimizer() const { return optimizer_; }
  const Stage2Config& config() const { return cfg_; }

 private:
  ModelConfig model_;
  TaskConfig task_;
  Stage2Config cfg_;
  Rng init_rng_;
  LanguageModel lm_;
  Optimizer optimizer_;
};

// Clean oracle codes [B * n] for a batch, without recording.
GuidingCode oracle_codes(const OracleModel& oracle, const TaskConfig& task, std::span<const Example> batch);

// Stacked inputs [B, H, W, C] and labels of a batch.
Tensor batch_images(std::span<const Example> batch);
std::vector<TaskLabel> batch_labels(std::span<const Example> batch);

}  // namespace uvim
