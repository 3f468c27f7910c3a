#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "planet/params.hpp"
#include "planet/rng.hpp"

using namespace planet;

TEST_SUITE_BEGIN("params");

namespace {

// Independent scalar Adam reference, double precision throughout.
struct ScalarAdamRef {
  double m = 0, v = 0, x = 0;
  int t = 0;
  void step(double g, double lr, double eps, double b1, double b2) {
    t += 1;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    x -= lr * mhat / (std::sqrt(vhat) + eps);
  }
};

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "planet_test_params";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("create rejects duplicates, value checks names") {
  ParamStore ps;
  ps.create("w", {2, 2});
  CHECK_THROWS_AS(ps.create("w", {2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(ps.value("nope"), std::invalid_argument);
  CHECK(ps.total_parameters() == 4);
}

TEST_CASE("adam_step: zero gradient leaves parameters unchanged") {
  ParamStore ps;
  auto& w = ps.create("w", {3});
  w.v = {1.f, -2.f, 0.5f};
  GradMap grads;
  grads["w"] = Tensor<float>::zeros({3});
  adam_step(ps, grads, {});
  CHECK(ps.value("w").v == std::vector<float>{1.f, -2.f, 0.5f});
  CHECK(ps.entry("w").adam_step == 1);
}

TEST_CASE("adam_step rejects shape mismatch naming the parameter") {
  ParamStore ps;
  ps.create("conv.w", {2, 3});
  GradMap grads;
  grads["conv.w"] = Tensor<float>::zeros({3, 2});
  try {
    adam_step(ps, grads, {});
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("conv.w") != std::string::npos);
  }
}

TEST_CASE("adam_step matches an independent scalar reference over 1000 steps") {
  ParamStore ps;
  ps.create("x", {1});
  ScalarAdamRef ref;
  const AdamConfig cfg{1e-3f, 1e-4f, 0.9f, 0.999f};
  GradMap grads;
  grads["x"] = Tensor<float>({1}, {1.f});
  for (int i = 0; i < 1000; ++i) {
    adam_step(ps, grads, cfg);
    ref.step(1.0, cfg.lr, cfg.eps, cfg.beta1, cfg.beta2);
  }
  CHECK(std::abs(double(ps.value("x")[0]) - ref.x) < 2e-4);
  // Constant unit gradient: after warmup each step moves ~ lr.
  CHECK(ref.x == doctest::Approx(-1.0).epsilon(0.02));
}

TEST_CASE("adam_step is bitwise deterministic") {
  auto run = [] {
    ParamStore ps;
    auto& w = ps.create("w", {4});
    w.v = {0.1f, 0.2f, 0.3f, 0.4f};
    GradMap grads;
    grads["w"] = Tensor<float>({4}, {0.5f, -0.25f, 1.5f, 2.f});
    for (int i = 0; i < 10; ++i) adam_step(ps, grads, {});
    return ps.value("w").v;
  };
  CHECK(run() == run());
}

TEST_CASE("clip_global_norm leaves small gradients untouched") {
  GradMap g;
  g["a"] = Tensor<float>({2}, {300.f, 400.f});  // norm 500
  auto before = g["a"].v;
  auto r = clip_global_norm(g, 1000.0);
  CHECK(r.norm == doctest::Approx(500.0));
  CHECK(g["a"].v == before);
}

TEST_CASE("clip_global_norm scales 5 down to 1") {
  GradMap g;
  g["a"] = Tensor<float>({2}, {3.f, 4.f});
  auto r = clip_global_norm(g, 1.0);
  CHECK(r.norm == doctest::Approx(5.0));
  CHECK(g["a"][0] == doctest::Approx(0.6f));
  CHECK(g["a"][1] == doctest::Approx(0.8f));
}

TEST_CASE("clip_global_norm: post-clip norm equals min(n, max) and is idempotent") {
  RngStream rng(11);
  GradMap g;
  for (const char* name : {"a", "b", "c"}) {
    Tensor<float> t({17});
    for (auto& x : t.v) x = float(rng.normal() * 3.0);
    g[name] = std::move(t);
  }
  double n0 = 0;
  for (auto& [_, t] : g)
    for (float x : t.v) n0 += double(x) * double(x);
  n0 = std::sqrt(n0);
  const double max_norm = n0 * 0.4;
  clip_global_norm(g, max_norm);
  double n1 = 0;
  for (auto& [_, t] : g)
    for (float x : t.v) n1 += double(x) * double(x);
  n1 = std::sqrt(n1);
  CHECK(n1 == doctest::Approx(std::min(n0, max_norm)).epsilon(1e-6));

  auto snapshot = g;
  clip_global_norm(g, max_norm);
  for (auto& [name, t] : g) CHECK(t.v == snapshot[name].v);
}

TEST_CASE("clip_global_norm flags non-finite input and passes it through") {
  GradMap g;
  g["a"] = Tensor<float>({2}, {1.f, std::numeric_limits<float>::quiet_NaN()});
  auto r = clip_global_norm(g, 1.0);
  CHECK(r.nonfinite);
  CHECK(std::isnan(g["a"][1]));
}

TEST_CASE("checkpoint round-trip is bitwise exact") {
  RngStream rng(12);
  ParamStore ps;
  for (const char* name : {"enc.w", "enc.b", "gru.uz"}) {
    auto& t = ps.create(name, {5, 3});
    for (auto& x : t.v) x = float(rng.normal());
    auto& e = ps.entry(name);
    for (auto& x : e.adam_m.v) x = float(rng.normal());
    for (auto& x : e.adam_v.v) x = float(std::abs(rng.normal()));
    e.adam_step = 7;
  }
  auto dir = temp_dir();
  auto index = dir / "step_7.json";
  save_checkpoint(index, ps, R"({"note":"roundtrip"})");

  std::string meta;
  ParamStore loaded = load_checkpoint(index, &meta);
  CHECK(meta.find("roundtrip") != std::string::npos);
  REQUIRE(loaded.entries().size() == ps.entries().size());
  for (const auto& [name, e] : ps.entries()) {
    const auto& l = loaded.entry(name);
    CHECK(l.value.shape == e.value.shape);
    CHECK(std::memcmp(l.value.data(), e.value.data(), e.value.v.size() * 4) == 0);
    CHECK(std::memcmp(l.adam_m.data(), e.adam_m.data(), e.adam_m.v.size() * 4) == 0);
    CHECK(std::memcmp(l.adam_v.data(), e.adam_v.data(), e.adam_v.v.size() * 4) == 0);
    CHECK(l.adam_step == 7);
  }
  std::filesystem::remove_all(dir);
}

TEST_SUITE_END();
