#include "planet/params.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>

namespace planet {

using nlohmann::json;

Tensor<float>& ParamStore::create(const std::string& name, Shape shape) {
  check_arg(!contains(name), "parameter already exists: " + name);
  ParamEntry e;
  e.value = Tensor<float>::zeros(shape);
  e.adam_m = Tensor<float>::zeros(shape);
  e.adam_v = Tensor<float>::zeros(std::move(shape));
  auto [it, ok] = entries_.emplace(name, std::move(e));
  (void)ok;
  return it->second.value;
}

const Tensor<float>& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  check_arg(it != entries_.end(), "unknown parameter: " + name);
  return it->second.value;
}

Tensor<float>& ParamStore::value(const std::string& name) {
  auto it = entries_.find(name);
  check_arg(it != entries_.end(), "unknown parameter: " + name);
  return it->second.value;
}

ParamEntry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  check_arg(it != entries_.end(), "unknown parameter: " + name);
  return it->second;
}

int64_t ParamStore::total_parameters() const {
  int64_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.numel();
  return n;
}

ParamSet<float> ParamStore::values() const {
  ParamSet<float> out;
  for (const auto& [name, e] : entries_) out.emplace(name, e.value);
  return out;
}

ParamSet<double> ParamStore::values_as_double() const {
  ParamSet<double> out;
  for (const auto& [name, e] : entries_) out.emplace(name, e.value.cast<double>());
  return out;
}

void ParamStore::assign(const ParamSet<float>& values) {
  for (const auto& [name, v] : values) {
    auto& e = entry(name);
    check_arg(e.value.shape == v.shape, "assign shape mismatch for parameter: " + name);
    e.value = v;
  }
}

void adam_step(ParamStore& params, const GradMap& grads, const AdamConfig& cfg) {
  check_arg(cfg.lr > 0.f, "adam_step: lr must be positive");
  for (const auto& [name, g] : grads) {
    check_arg(params.contains(name), "adam_step: gradient for unknown parameter: " + name);
    ParamEntry& e = params.entry(name);
    check_arg(e.value.shape == g.shape,
              "adam_step: gradient shape mismatch for parameter: " + name + " (param " +
                  shape_str(e.value.shape) + ", grad " + shape_str(g.shape) + ")");
  }
  for (auto& [name, e] : params.entries()) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor<float>& g = it->second;
    e.adam_step += 1;
    const float b1t = 1.f - std::pow(cfg.beta1, float(e.adam_step));
    const float b2t = 1.f - std::pow(cfg.beta2, float(e.adam_step));
    for (size_t i = 0; i < g.v.size(); ++i) {
      float& m = e.adam_m.v[i];
      float& v = e.adam_v.v[i];
      m = cfg.beta1 * m + (1.f - cfg.beta1) * g.v[i];
      v = cfg.beta2 * v + (1.f - cfg.beta2) * g.v[i] * g.v[i];
      const float mhat = m / b1t;
      const float vhat = v / b2t;
      e.value.v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

ClipResult clip_global_norm(GradMap& grads, double max_norm) {
  check_arg(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
  ClipResult r;
  double acc = 0.0;
  for (const auto& [_, g] : grads)
    for (float x : g.v) acc += double(x) * double(x);
  r.norm = std::sqrt(acc);
  if (!std::isfinite(r.norm)) {
    r.nonfinite = true;
    return r;
  }
  if (r.norm <= max_norm * (1.0 + 1e-6)) return r;
  r.scale = max_norm / r.norm;
  const float s = float(r.scale);
  for (auto& [_, g] : grads)
    for (float& x : g.v) x *= s;
  return r;
}

void save_checkpoint(const std::filesystem::path& index_path, const ParamStore& params,
                     const std::string& meta_json) {
  std::filesystem::path blob_path = index_path;
  blob_path.replace_extension(".bin");

  json index;
  index["format"] = "planet-checkpoint-v1";
  index["blob"] = blob_path.filename().string();
  index["meta"] = json::parse(meta_json);
  json entries = json::array();
  json steps = json::object();

  std::ofstream blob(blob_path, std::ios::binary);
  check_arg(blob.good(), "cannot open checkpoint blob for writing: " + blob_path.string());
  int64_t offset = 0;
  auto put = [&](const std::string& name, const Tensor<float>& t) {
    json e;
    e["name"] = name;
    e["shape"] = t.shape;
    e["dtype"] = "f32";
    e["offset"] = offset;
    entries.push_back(std::move(e));
    blob.write(reinterpret_cast<const char*>(t.data()),
               std::streamsize(t.v.size() * sizeof(float)));
    offset += int64_t(t.v.size() * sizeof(float));
  };
  for (const auto& [name, e] : params.entries()) {
    put(name, e.value);
    put(name + ".adam_m", e.adam_m);
    put(name + ".adam_v", e.adam_v);
    steps[name] = e.adam_step;
  }
  blob.close();
  check_arg(blob.good(), "failed writing checkpoint blob: " + blob_path.string());

  index["entries"] = std::move(entries);
  index["adam_steps"] = std::move(steps);
  std::ofstream out(index_path);
  check_arg(out.good(), "cannot open checkpoint index for writing: " + index_path.string());
  out << index.dump(2) << "\n";
}

ParamStore load_checkpoint(const std::filesystem::path& index_path, std::string* meta_json) {
  std::ifstream in(index_path);
  check_arg(in.good(), "cannot open checkpoint index: " + index_path.string());
  json index = json::parse(in);
  check_arg(index.value("format", "") == "planet-checkpoint-v1",
            "unrecognized checkpoint format in " + index_path.string());
  if (meta_json) *meta_json = index["meta"].dump();

  std::filesystem::path blob_path = index_path.parent_path() / index["blob"].get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  check_arg(blob.good(), "cannot open checkpoint blob: " + blob_path.string());

  std::map<std::string, Tensor<float>> raw;
  for (const auto& e : index["entries"]) {
    const std::string name = e["name"].get<std::string>();
    Shape shape = e["shape"].get<Shape>();
    check_arg(e["dtype"].get<std::string>() == "f32", "unsupported dtype for entry " + name);
    Tensor<float> t(shape);
    blob.seekg(e["offset"].get<int64_t>());
    blob.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.v.size() * sizeof(float)));
    check_arg(blob.good(), "failed reading checkpoint entry " + name);
    raw.emplace(name, std::move(t));
  }

  ParamStore params;
  for (auto& [name, t] : raw) {
    if (name.ends_with(".adam_m") || name.ends_with(".adam_v")) continue;
    ParamEntry e;
    e.value = std::move(t);
    auto m = raw.find(name + ".adam_m");
    auto v = raw.find(name + ".adam_v");
    e.adam_m = m != raw.end() ? std::move(m->second) : Tensor<float>::zeros(e.value.shape);
    e.adam_v = v != raw.end() ? std::move(v->second) : Tensor<float>::zeros(e.value.shape);
    if (index.contains("adam_steps") && index["adam_steps"].contains(name))
      e.adam_step = index["adam_steps"][name].get<int64_t>();
    params.entries().emplace(name, std::move(e));
  }
  return params;
}

}  // namespace planet
