#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "planet/tensor.hpp"

namespace planet {

template <class T>
using ParamSet = std::map<std::string, Tensor<T>>;

using GradMap = ParamSet<float>;

struct ParamEntry {
  Tensor<float> value;
  Tensor<float> adam_m;
  Tensor<float> adam_v;
  int64_t adam_step = 0;
};

// Named, shaped float32 parameter arrays with per-entry optimizer state.
// Shapes are fixed at creation; entries are iterated in name order so every
// update touches memory in a reproducible sequence.
class ParamStore {
 public:
  Tensor<float>& create(const std::string& name, Shape shape);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor<float>& value(const std::string& name) const;
  Tensor<float>& value(const std::string& name);
  ParamEntry& entry(const std::string& name);
  const std::map<std::string, ParamEntry>& entries() const { return entries_; }
  std::map<std::string, ParamEntry>& entries() { return entries_; }
  int64_t total_parameters() const;

  ParamSet<float> values() const;
  ParamSet<double> values_as_double() const;
  void assign(const ParamSet<float>& values);  // shapes must match

 private:
  std::map<std::string, ParamEntry> entries_;
};

struct AdamConfig {
  float lr = 1e-3f;
  float eps = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
};

// Standard Adam with bias correction. Entries without a gradient are left
// untouched; a gradient with an unknown name or wrong shape is rejected with
// the offending parameter named.
void adam_step(ParamStore& params, const GradMap& grads, const AdamConfig& cfg);

struct ClipResult {
  double norm = 0.0;       // pre-clip global L2 norm
  double scale = 1.0;
  bool nonfinite = false;  // NaN/Inf seen; values passed through untouched
};

// Joint L2 clipping over all entries. A small relative tolerance keeps the
// operation idempotent: inputs already at the norm boundary are not rescaled
// by rounding-level factors.
ClipResult clip_global_norm(GradMap& grads, double max_norm);

// Checkpoint = JSON index {name, shape, dtype, byte offset} + one blob of
// little-endian float32. Round-trips are bitwise exact. Optimizer moments are
// stored as "<name>.adam_m" / "<name>.adam_v" entries; step counters and any
// caller metadata live in the index JSON.
void save_checkpoint(const std::filesystem::path& index_path, const ParamStore& params,
                     const std::string& meta_json = "{}");
ParamStore load_checkpoint(const std::filesystem::path& index_path, std::string* meta_json = nullptr);

}  // namespace planet
