#include "uvim/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace uvim {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  return s.substr(begin, s.find_last_not_of(" \t\r") - begin + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& text, const char* expected) {
  throw std::invalid_argument("config: " + key + " = '" + text + "' is not " + expected);
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, TaskKind>) {
    return task_name(v);
  } else {
    // Shortest representation that parses back to the same value.
    char buf[64];
    const auto result = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, result.ptr);
  }
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true") return true;
    if (text == "false") return false;
    bad_value(key, text, "true or false");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (text.empty()) bad_value(key, text, "a non-empty string");
    return text;
  } else if constexpr (std::is_same_v<T, TaskKind>) {
    return parse_task(text);
  } else {
    T v{};
    const char* end = text.data() + text.size();
    const auto result = std::from_chars(text.data(), end, v);
    if (text.empty() || result.ec != std::errc() || result.ptr != end) {
      bad_value(key, text, std::is_integral_v<T> ? "a non-negative integer" : "a number");
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(v)) bad_value(key, text, "finite");
    }
    return v;
  }
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T, class Access>
Field make_field(std::string key, Access access) {
  Field f;
  f.key = key;
  f.get = [access](const RunConfig& c) { return format_value<T>(access(const_cast<RunConfig&>(c))); };
  f.set = [access, key](RunConfig& c, const std::string& text) { access(c) = parse_value<T>(key, text); };
  return f;
}

#define UVIM_FIELD(key, member)                                                                          \
  make_field<std::remove_cvref_t<decltype(std::declval<RunConfig&>().member)>>(key, [](RunConfig& c) -> auto& { \
    return c.member;                                                                                     \
  })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      UVIM_FIELD("seed", seed),
      UVIM_FIELD("task", task.kind),
      UVIM_FIELD("task.num_classes", task.num_classes),
      UVIM_FIELD("task.num_instances", task.num_instances),
      UVIM_FIELD("task.tiny_fraction", task.tiny_fraction),
      UVIM_FIELD("task.depth_min", task.depth.min),
      UVIM_FIELD("task.depth_max", task.depth.max),
      UVIM_FIELD("task.depth_bins", task.depth.count),
      UVIM_FIELD("task.depth_eval_crop", task.depth_eval_crop),
      UVIM_FIELD("data.train_size", data.train_size),
      UVIM_FIELD("data.holdout_size", data.holdout_size),
      UVIM_FIELD("data.max_shapes", data.max_shapes),
      UVIM_FIELD("data.augment", data.augment),
      UVIM_FIELD("data.min_crop_area", data.min_crop_area),
      UVIM_FIELD("model.input_size", model.input_size),
      UVIM_FIELD("model.patch_size", model.patch_size),
      UVIM_FIELD("model.width", model.width),
      UVIM_FIELD("model.mlp_dim", model.mlp_dim),
      UVIM_FIELD("model.num_heads", model.num_heads),
      UVIM_FIELD("model.base_model_depth", model.f_depth),
      UVIM_FIELD("model.oracle_depth", model.oracle_depth),
      UVIM_FIELD("model.lm_encoder_depth", model.lm_enc_depth),
      UVIM_FIELD("model.lm_decoder_depth", model.lm_dec_depth),
      UVIM_FIELD("model.code_len", model.code_len),
      UVIM_FIELD("model.dict_size", model.dict_size),
      UVIM_FIELD("model.codeword_dim", model.codeword_dim),
      UVIM_FIELD("model.dict_momentum", model.dict_momentum),
      UVIM_FIELD("model.usage_window", model.usage_window),
      UVIM_FIELD("model.codebook_init_std", model.codebook_init_std),
      UVIM_FIELD("model.with_encoder_ctx", model.oracle_image_context),
      UVIM_FIELD("model.commitment_beta", commitment_beta),
      UVIM_FIELD("model.code_dropout", code_dropout),
      UVIM_FIELD("lr", opt.lr),
      UVIM_FIELD("wd", opt.wd),
      UVIM_FIELD("optax.beta1", opt.beta1),
      UVIM_FIELD("optax.beta2_cap", opt.beta2_cap),
      UVIM_FIELD("grad_clip_norm", opt.grad_clip_norm),
      UVIM_FIELD("schedule.decay_type", decay_type),
      UVIM_FIELD("schedule.warmup_steps", warmup_steps),
      UVIM_FIELD("batch_size", batch_size),
      UVIM_FIELD("total_steps", total_steps),
      UVIM_FIELD("log_training_steps", log_training_steps),
      UVIM_FIELD("log_eval_steps", log_eval_steps),
      UVIM_FIELD("eval_size", eval_size),
      UVIM_FIELD("stage2.lr", stage2_lr),
      UVIM_FIELD("stage2.wd", stage2_wd),
      UVIM_FIELD("stage2.warmup_steps", stage2_warmup_steps),
      UVIM_FIELD("stage2.batch_size", stage2_batch_size),
      UVIM_FIELD("stage2.total_steps", stage2_total_steps),
      UVIM_FIELD("stage2.log_eval_steps", stage2_log_eval_steps),
      UVIM_FIELD("stage2.eval_size", stage2_eval_size),
      UVIM_FIELD("ablation.no_oracle", no_oracle),
      UVIM_FIELD("ablation.no_image", no_image),
      UVIM_FIELD("ablation.non_autoregressive_lm", non_autoregressive_lm),
      UVIM_FIELD("ablation.no_dropout", no_dropout),
  };
  return table;
}

#undef UVIM_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

bool has_prefix(const std::string& key, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  for (const auto& p : prefixes) {
    if (key.starts_with(p)) return true;
  }
  return false;
}

}  // namespace

void RunConfig::validate() const {
  task.validate();
  model_config().validate();
  Schedule{opt.lr, warmup_steps, total_steps, decay_type}.validate();
  Schedule{stage2_lr, stage2_warmup_steps, stage2_total_steps, decay_type}.validate();
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw std::invalid_argument(std::string("config: ") + key + " must be positive");
  };
  positive(batch_size, "batch_size");
  positive(stage2_batch_size, "stage2.batch_size");
  positive(log_training_steps, "log_training_steps");
  positive(log_eval_steps, "log_eval_steps");
  positive(stage2_log_eval_steps, "stage2.log_eval_steps");
  positive(data.train_size, "data.train_size");
  if (eval_size > data.holdout_size || stage2_eval_size > data.holdout_size) {
    throw std::invalid_argument("config: eval_size and stage2.eval_size must not exceed data.holdout_size");
  }
  if (!(data.min_crop_area > 0.0 && data.min_crop_area <= 1.0)) {
    throw std::invalid_argument("config: data.min_crop_area must be in (0, 1]");
  }
  if (!(opt.grad_clip_norm > 0.0)) throw std::invalid_argument("config: grad_clip_norm must be positive");
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.no_oracle = no_oracle;
  m.no_image = no_image;
  m.non_autoregressive = non_autoregressive_lm;
  return m;
}

DataConfig RunConfig::data_config() const {
  DataConfig d = data;
  d.seed = seed;
  d.image_size = model.input_size;
  return d;
}

Stage1Config RunConfig::stage1_config() const {
  return {batch_size, total_steps, warmup_steps, decay_type, opt, code_dropout && !no_dropout, commitment_beta};
}

Stage2Config RunConfig::stage2_config() const {
  OptimizerConfig o = opt;
  o.lr = stage2_lr;
  o.wd = stage2_wd;
  return {stage2_batch_size, stage2_total_steps, stage2_warmup_steps, decay_type, o};
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::string serialize(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (const auto it = seen.find(key); it != seen.end()) {
      throw std::invalid_argument(where + "duplicate key '" + key + "' (first set on line " +
                                  std::to_string(it->second) + ")");
    }
    seen[key] = number;
    try {
      find_field(key).set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config file '" + path + "'");
  out << serialize(cfg);
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_field(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b, const std::vector<std::string>& prefixes) {
  std::vector<std::string> diff;
  for (const auto& f : fields()) {
    if (!has_prefix(f.key, prefixes)) continue;
    const std::string va = f.get(a), vb = f.get(b);
    if (va != vb) diff.push_back(f.key + ": " + va + " -> " + vb);
  }
  return diff;
}

const std::vector<std::string>& architecture_prefixes() {
  static const std::vector<std::string> prefixes = {"task", "model.", "ablation.no_oracle", "ablation.no_image",
                                                    "ablation.non_autoregressive_lm"};
  return prefixes;
}

}  // namespace uvim
