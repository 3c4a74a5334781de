#pragma once

// Flat "key = value" run configuration with dotted names.

#include <string>
#include <vector>

#include "uvim/synthdata.hpp"
#include "uvim/training.hpp"

namespace uvim {

struct RunConfig {
  std::uint64_t seed = 0;

  TaskConfig task;
  DataConfig data;  // seed and image_size are taken from seed and model.input_size
  ModelConfig model;
  float commitment_beta = 0.25f;
  bool code_dropout = true;

  // Stage I. A rate of 4e-4 is too slow for desk budgets.
  OptimizerConfig opt{.lr = 2e-3};
  std::string decay_type = "cosine";
  std::size_t warmup_steps = 100;
  std::size_t batch_size = 32;
  std::size_t total_steps = 3000;
  std::size_t log_training_steps = 50;
  std::size_t log_eval_steps = 500;
  std::size_t eval_size = 256;

  // Stage II.
  double stage2_lr = 1e-3;
  double stage2_wd = 1e-6;
  std::size_t stage2_warmup_steps = 100;
  std::size_t stage2_batch_size = 32;
  std::size_t stage2_total_steps = 2000;
  std::size_t stage2_log_eval_steps = 500;
  std::size_t stage2_eval_size = 256;

  // Ablations.
  bool no_oracle = false;
  bool no_image = false;
  bool non_autoregressive_lm = false;
  bool no_dropout = false;

  void validate() const;

  // Derived component configurations with ablations applied.
  ModelConfig model_config() const;
  DataConfig data_config() const;
  Stage1Config stage1_config() const;
  Stage2Config stage2_config() const;
};

// Every key in serialization order.
std::vector<std::string> config_keys();

std::string serialize(const RunConfig& cfg);
// Unknown keys, malformed values and duplicate keys are rejected with the line number.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
void save_config(const RunConfig& cfg, const std::string& path);

// Applies one "key=value" override.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

// "key: a -> b" for every key with the given prefixes whose values differ.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b,
                                     const std::vector<std::string>& prefixes = {});

// Keys that fix model shapes and semantics; checkpoints must agree on these.
const std::vector<std::string>& architecture_prefixes();

}  // namespace uvim
