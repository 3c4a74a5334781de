#pragma once

// Single-file checkpoints: an 8-byte magic, a u64 manifest length, a JSON
// manifest (name -> offset, shape, dtype) and raw little-endian arrays.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "uvim/config.hpp"
#include "uvim/training.hpp"

namespace uvim {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Checkpoint {
 public:
  static constexpr int kFormatVersion = 1;

  std::string kind;  // "stage1" or "stage2"
  std::uint64_t step = 0;
  RunConfig config;
  std::map<std::string, std::string> strings;  // RNG states and similar

  void put(const std::string& name, const Tensor& t);
  void put(const std::string& name, const Tensor64& t);
  void put(const std::string& name, const std::vector<double>& values);
  void put(const std::string& name, const std::vector<std::uint64_t>& values);

  bool has(const std::string& name) const { return arrays_.count(name) > 0; }
  Tensor f32(const std::string& name) const;
  Tensor64 f64(const std::string& name) const;
  std::vector<double> f64_values(const std::string& name) const;
  std::vector<std::uint64_t> u64_values(const std::string& name) const;
  std::vector<std::string> names() const;

  // Writes atomically through a temporary file.
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
  std::string bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);

 private:
  struct Array {
    std::string dtype;  // f32, f64, u64
    Shape shape;
    std::string data;
  };
  std::map<std::string, Array> arrays_;

  const Array& get(const std::string& name, const std::string& dtype) const;
};

// Throws CheckpointError listing every architecture field that differs,
// except keys in `ignore`.
void require_compatible(const RunConfig& expected, const Checkpoint& ckpt,
                        const std::vector<std::string>& ignore = {});
// Fields a stage-II run may change relative to its stage-I checkpoint.
const std::vector<std::string>& language_model_keys();

Checkpoint stage1_checkpoint(const RunConfig& cfg, const Stage1Trainer& trainer);
// The trainer must have been built from a compatible config.
void restore_stage1(const Checkpoint& ckpt, Stage1Trainer& trainer);
std::unique_ptr<Stage1Trainer> load_stage1_trainer(const Checkpoint& ckpt);

// Holds the frozen stage-I arrays too, so one file serves prediction.
Checkpoint stage2_checkpoint(const RunConfig& cfg, const Stage1Trainer& stage1, const Stage2Trainer& stage2);
void restore_stage2(const Checkpoint& ckpt, Stage2Trainer& trainer);
std::unique_ptr<Stage2Trainer> load_stage2_trainer(const Checkpoint& ckpt);

}  // namespace uvim
