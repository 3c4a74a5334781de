#include "uvim/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace uvim {

static_assert(std::endian::native == std::endian::little, "checkpoint arrays are stored little-endian");

namespace {

constexpr char kMagic[8] = {'U', 'V', 'I', 'M', 'C', 'K', 'P', '1'};

template <class T>
std::string raw_bytes(std::span<const T> values) {
  std::string out(values.size() * sizeof(T), '\0');
  if (!values.empty()) std::memcpy(out.data(), values.data(), out.size());
  return out;
}

template <class T>
std::vector<T> from_raw(const std::string& bytes) {
  std::vector<T> out(bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64" || dtype == "u64") return 8;
  throw CheckpointError("checkpoint: unknown dtype '" + dtype + "'");
}

std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng parse_rng(const std::string& text) {
  Rng rng;
  std::istringstream in(text);
  in >> rng;
  if (!in) throw CheckpointError("checkpoint: malformed RNG state");
  return rng;
}

void put_params(Checkpoint& ckpt, const ParameterSet& params) {
  for (const auto& [name, t] : params.items()) ckpt.put("params/" + name, t);
}

void load_params(const Checkpoint& ckpt, ParameterSet& params) {
  for (auto& [name, t] : params.items()) {
    const Tensor saved = ckpt.f32("params/" + name);
    if (saved.shape() != t.shape()) throw CheckpointError("checkpoint: shape mismatch for parameter " + name);
    std::copy(saved.data().begin(), saved.data().end(), t.mutable_data().begin());
  }
}

void put_optimizer(Checkpoint& ckpt, const std::string& prefix, const Optimizer& opt) {
  const auto& items = opt.params().items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    ckpt.put(prefix + "/m/" + items[i].first, opt.first_moments()[i]);
    ckpt.put(prefix + "/v/" + items[i].first, opt.second_moments()[i]);
  }
  ckpt.put(prefix + "/steps", std::vector<std::uint64_t>{opt.steps()});
}

void load_optimizer(const Checkpoint& ckpt, const std::string& prefix, Optimizer& opt) {
  std::vector<Tensor> m, v;
  for (const auto& [name, t] : opt.params().items()) {
    m.push_back(ckpt.f32(prefix + "/m/" + name));
    v.push_back(ckpt.f32(prefix + "/v/" + name));
  }
  const auto steps = ckpt.u64_values(prefix + "/steps");
  if (steps.size() != 1) throw CheckpointError("checkpoint: malformed " + prefix + "/steps");
  opt.restore(steps[0], m, v);
}

void put_codebook(Checkpoint& ckpt, const Codebook& book) {
  ckpt.put("codebook/entries", book.entries());
  ckpt.put("codebook/ema_sums", book.ema_sums());
  ckpt.put("codebook/ema_counts", book.ema_counts());
  const auto state = book.usage_state();
  ckpt.put("codebook/usage", state.usage);
  ckpt.put("codebook/usage_position", std::vector<std::uint64_t>{state.cursor, state.steps});
}

void load_codebook(const Checkpoint& ckpt, Codebook& book) {
  const auto position = ckpt.u64_values("codebook/usage_position");
  if (position.size() != 2) throw CheckpointError("checkpoint: malformed codebook/usage_position");
  book.restore(ckpt.f64("codebook/entries"), ckpt.f64("codebook/ema_sums"), ckpt.f64_values("codebook/ema_counts"),
               Codebook::State{ckpt.u64_values("codebook/usage"), position[0], position[1]});
}

void put_stage1_model(Checkpoint& ckpt, const Stage1Trainer& trainer) {
  if (!trainer.model_config().no_oracle) {
    put_params(ckpt, trainer.oracle().params());
    put_codebook(ckpt, trainer.oracle().codebook());
  }
  put_params(ckpt, trainer.base().params());
  ckpt.strings["stage1.rng"] = rng_state(trainer.rng());
}

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
  arrays_[name] = {"f32", t.shape(), raw_bytes<float>(t.data())};
}

void Checkpoint::put(const std::string& name, const Tensor64& t) {
  arrays_[name] = {"f64", t.shape(), raw_bytes<double>(t.data())};
}

void Checkpoint::put(const std::string& name, const std::vector<double>& values) {
  arrays_[name] = {"f64", {values.size()}, raw_bytes<double>(values)};
}

void Checkpoint::put(const std::string& name, const std::vector<std::uint64_t>& values) {
  arrays_[name] = {"u64", {values.size()}, raw_bytes<std::uint64_t>(values)};
}

const Checkpoint::Array& Checkpoint::get(const std::string& name, const std::string& dtype) const {
  const auto it = arrays_.find(name);
  if (it == arrays_.end()) throw CheckpointError("checkpoint: missing array '" + name + "'");
  if (it->second.dtype != dtype) {
    throw CheckpointError("checkpoint: array '" + name + "' is " + it->second.dtype + ", expected " + dtype);
  }
  return it->second;
}

Tensor Checkpoint::f32(const std::string& name) const {
  const Array& a = get(name, "f32");
  return Tensor(a.shape, from_raw<float>(a.data));
}

Tensor64 Checkpoint::f64(const std::string& name) const {
  const Array& a = get(name, "f64");
  return Tensor64(a.shape, from_raw<double>(a.data));
}

std::vector<double> Checkpoint::f64_values(const std::string& name) const {
  return from_raw<double>(get(name, "f64").data);
}

std::vector<std::uint64_t> Checkpoint::u64_values(const std::string& name) const {
  return from_raw<std::uint64_t>(get(name, "u64").data);
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  for (const auto& [name, a] : arrays_) out.push_back(name);
  return out;
}

std::string Checkpoint::bytes() const {
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["kind"] = kind;
  manifest["step"] = step;
  manifest["config"] = serialize(config);
  manifest["strings"] = strings;
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : arrays_) {
    arrays.push_back({{"name", name}, {"dtype", a.dtype}, {"shape", a.shape}, {"offset", offset}});
    offset += a.data.size();
  }
  manifest["arrays"] = std::move(arrays);
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  const std::uint64_t length = text.size();
  out.append(reinterpret_cast<const char*>(&length), sizeof length);
  out += text;
  for (const auto& [name, a] : arrays_) out += a.data;
  return out;
}

Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  constexpr std::size_t header = sizeof kMagic + sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("checkpoint: bad magic");
  }
  std::uint64_t length = 0;
  std::memcpy(&length, bytes.data() + sizeof kMagic, sizeof length);
  if (length > bytes.size() - header) throw CheckpointError("checkpoint: truncated manifest");

  Checkpoint ckpt;
  std::size_t payload = 0;
  try {
    const auto manifest = nlohmann::json::parse(bytes.substr(header, length));
    const int version = manifest.at("format_version").get<int>();
    if (version != kFormatVersion) {
      throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
    }
    ckpt.kind = manifest.at("kind").get<std::string>();
    ckpt.step = manifest.at("step").get<std::uint64_t>();
    ckpt.config = parse_config(manifest.at("config").get<std::string>());
    ckpt.strings = manifest.at("strings").get<std::map<std::string, std::string>>();
    const std::size_t base = header + length;
    payload = bytes.size() - base;
    for (const auto& entry : manifest.at("arrays")) {
      Array a;
      a.dtype = entry.at("dtype").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t size = shape_numel(a.shape) * dtype_size(a.dtype);
      const std::string name = entry.at("name").get<std::string>();
      if (offset > payload || size > payload - offset) throw CheckpointError("checkpoint: array '" + name + "' out of range");
      a.data = bytes.substr(base + offset, size);
      ckpt.arrays_[name] = std::move(a);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  return ckpt;
}

void Checkpoint::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot write '" + tmp + "'");
    const std::string data = bytes();
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  std::ostringstream data;
  data << in.rdbuf();
  return from_bytes(data.str());
}

const std::vector<std::string>& language_model_keys() {
  static const std::vector<std::string> keys = {"model.lm_encoder_depth", "model.lm_decoder_depth",
                                                "ablation.non_autoregressive_lm"};
  return keys;
}

void require_compatible(const RunConfig& expected, const Checkpoint& ckpt, const std::vector<std::string>& ignore) {
  std::string message;
  for (const auto& line : config_diff(ckpt.config, expected, architecture_prefixes())) {
    const std::string key = line.substr(0, line.find(':'));
    if (std::find(ignore.begin(), ignore.end(), key) != ignore.end()) continue;
    message += "\n  " + line;
  }
  if (!message.empty()) {
    throw CheckpointError("checkpoint is incompatible with the run config (checkpoint -> run):" + message);
  }
}

Checkpoint stage1_checkpoint(const RunConfig& cfg, const Stage1Trainer& trainer) {
  Checkpoint ckpt;
  ckpt.kind = "stage1";
  ckpt.step = trainer.optimizer().steps();
  ckpt.config = cfg;
  put_stage1_model(ckpt, trainer);
  put_optimizer(ckpt, "opt1", trainer.optimizer());
  return ckpt;
}

void restore_stage1(const Checkpoint& ckpt, Stage1Trainer& trainer) {
  if (!trainer.model_config().no_oracle) {
    load_params(ckpt, trainer.oracle().params());
    load_codebook(ckpt, trainer.oracle().codebook());
  }
  load_params(ckpt, trainer.base().params());
  // Stage-II files carry the frozen model only.
  if (ckpt.has("opt1/steps")) load_optimizer(ckpt, "opt1", trainer.optimizer());
  const auto rng = ckpt.strings.find("stage1.rng");
  if (rng == ckpt.strings.end()) throw CheckpointError("checkpoint: missing stage1.rng");
  trainer.rng() = parse_rng(rng->second);
}

std::unique_ptr<Stage1Trainer> load_stage1_trainer(const Checkpoint& ckpt) {
  const RunConfig& cfg = ckpt.config;
  auto trainer = std::make_unique<Stage1Trainer>(cfg.model_config(), cfg.task, cfg.stage1_config(), cfg.seed);
  restore_stage1(ckpt, *trainer);
  return trainer;
}

Checkpoint stage2_checkpoint(const RunConfig& cfg, const Stage1Trainer& stage1, const Stage2Trainer& stage2) {
  Checkpoint ckpt;
  ckpt.kind = "stage2";
  ckpt.step = stage2.optimizer().steps();
  ckpt.config = cfg;
  put_stage1_model(ckpt, stage1);
  put_params(ckpt, stage2.lm().params());
  put_optimizer(ckpt, "opt2", stage2.optimizer());
  return ckpt;
}

void restore_stage2(const Checkpoint& ckpt, Stage2Trainer& trainer) {
  if (ckpt.kind != "stage2") throw CheckpointError("checkpoint: expected a stage2 checkpoint, got " + ckpt.kind);
  load_params(ckpt, trainer.lm().params());
  load_optimizer(ckpt, "opt2", trainer.optimizer());
}

std::unique_ptr<Stage2Trainer> load_stage2_trainer(const Checkpoint& ckpt) {
  const RunConfig& cfg = ckpt.config;
  auto trainer = std::make_unique<Stage2Trainer>(cfg.model_config(), cfg.task, cfg.stage2_config(), cfg.seed);
  restore_stage2(ckpt, *trainer);
  return trainer;
}

}  // namespace uvim
