#pragma once

// A run configuration small enough for unit tests.

#include "uvim/config.hpp"

namespace uvim::testing {

inline RunConfig tiny_run_config() {
  RunConfig cfg;
  cfg.model.input_size = 16;
  cfg.model.patch_size = 4;
  cfg.model.width = 32;
  cfg.model.num_heads = 2;
  cfg.model.mlp_dim = 64;
  cfg.model.f_depth = 1;
  cfg.model.oracle_depth = 1;
  cfg.model.lm_enc_depth = 1;
  cfg.model.lm_dec_depth = 1;
  cfg.model.code_len = 4;
  cfg.model.dict_size = 8;
  cfg.model.codeword_dim = 8;
  cfg.model.usage_window = 4;
  cfg.data.train_size = 64;
  cfg.data.holdout_size = 8;
  cfg.batch_size = 4;
  cfg.total_steps = 6;
  cfg.warmup_steps = 2;
  cfg.log_training_steps = 2;
  cfg.log_eval_steps = 3;
  cfg.eval_size = 4;
  cfg.stage2_batch_size = 4;
  cfg.stage2_total_steps = 4;
  cfg.stage2_warmup_steps = 1;
  cfg.stage2_log_eval_steps = 2;
  cfg.stage2_eval_size = 4;
  return cfg;
}

}  // namespace uvim::testing
