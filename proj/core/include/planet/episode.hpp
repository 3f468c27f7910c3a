#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "planet/tensor.hpp"

namespace planet {

// One collected episode, arrays aligned by record: obs[t] is the observation
// after applying act[t] (the last frame of the repeat block), rew[t] the sum
// of rewards collected during the block, states[t] the simulator ground truth
// at obs[t]. The reset frame is used for the first planning belief only and
// is not stored.
struct EpisodeRecord {
  std::string env;
  int env_steps = 0;      // T before action repeat
  int action_repeat = 1;  // R
  uint64_t seed = 0;
  Tensor<uint8_t> obs;    // [N, H, W, 3]
  Tensor<float> actions;  // [N, A]
  Tensor<float> rewards;  // [N]
  Tensor<float> states;   // [N, S]; S may be zero

  int length() const { return obs.v.empty() ? 0 : obs.dim(0); }
  float total_reward() const {
    float s = 0.f;
    for (float r : rewards.v) s += r;
    return s;
  }
};

// One file per episode: little-endian u32 manifest length, JSON manifest
// {env, T, R, seed, shapes}, then the raw little-endian arrays in manifest
// order (obs u8, actions f32, rewards f32, states f32). Round-trips are
// bitwise exact.
void save_episode(const std::filesystem::path& path, const EpisodeRecord& episode);
EpisodeRecord load_episode(const std::filesystem::path& path);

}  // namespace planet
