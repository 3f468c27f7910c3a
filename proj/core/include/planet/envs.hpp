#pragma once

#include <Eigen/Dense>

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "planet/rng.hpp"
#include "planet/tensor.hpp"

namespace planet {

struct EnvSpec {
  std::string name;
  int action_dim = 1;
  float act_low = -1.f;
  float act_high = 1.f;
  int episode_len = 200;  // environment steps before action repeat
  float dt = 0.05f;
  int image_size = 32;
};

// Single-threaded state machine with pixel rendering. Rendering is a pure
// function of the state, and stepping is deterministic given (state, action);
// all randomness comes in through reset().
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual void reset(RngStream& rng) = 0;
  virtual float step(std::span<const float> action) = 0;
  virtual Tensor<uint8_t> render() const = 0;  // [H, W, 3], 8-bit
  virtual std::vector<float> state() const = 0;
  virtual std::vector<std::string> state_labels() const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
};

// Torque-limited pendulum; angle zero is the rewarded upright pose and the
// episode starts near the opposite pose. Reward lives in [0, 1].
class PendulumEnv : public Env {
 public:
  explicit PendulumEnv(int image_size = 32);
  const EnvSpec& spec() const override { return spec_; }
  void reset(RngStream& rng) override;
  float step(std::span<const float> action) override;
  Tensor<uint8_t> render() const override;
  std::vector<float> state() const override;
  std::vector<std::string> state_labels() const override { return {"theta", "theta_dot"}; }
  std::unique_ptr<Env> clone() const override { return std::make_unique<PendulumEnv>(*this); }

  void set_state(double theta, double theta_dot);
  double theta() const { return theta_; }
  double theta_dot() const { return theta_dot_; }
  // Total mechanical energy for the undamped, unforced system.
  double energy() const;

  static constexpr double kGravity = 10.0, kLength = 1.0, kMass = 1.0;
  static constexpr double kDamping = 0.1, kMaxTorque = 2.0, kDt = 0.05;

 private:
  EnvSpec spec_;
  double theta_ = 0.0;
  double theta_dot_ = 0.0;
};

// Damped 2-d point mass with a sparse reward disc around a per-episode goal.
class SparseGoalEnv : public Env {
 public:
  explicit SparseGoalEnv(int image_size = 32);
  const EnvSpec& spec() const override { return spec_; }
  void reset(RngStream& rng) override;
  float step(std::span<const float> action) override;
  Tensor<uint8_t> render() const override;
  std::vector<float> state() const override;
  std::vector<std::string> state_labels() const override {
    return {"px", "py", "vx", "vy", "gx", "gy"};
  }
  std::unique_ptr<Env> clone() const override { return std::make_unique<SparseGoalEnv>(*this); }

  void set_state(std::span<const double> pos, std::span<const double> vel,
                 std::span<const double> goal);

  static constexpr double kGoalRadius = 0.15, kForce = 2.0, kDamping = 1.0, kDt = 0.1;

 private:
  EnvSpec spec_;
  double pos_[2] = {0, 0}, vel_[2] = {0, 0}, goal_[2] = {0.5, 0.5};
};

std::unique_ptr<Env> make_env(const std::string& name, int image_size);

// 5-bit depth reduction then shift to [-0.5, 0.46875]:
// floor(pixel / 2^3) / 2^5 - 0.5.
template <class T>
T preprocess_pixel(uint8_t p) {
  return T(p >> 3) / T(32) - T(0.5);
}

template <class T>
Tensor<T> preprocess_image(const Tensor<uint8_t>& img) {
  Tensor<T> out;
  out.shape = img.shape;
  out.v.resize(img.v.size());
  for (size_t i = 0; i < img.v.size(); ++i) out.v[i] = preprocess_pixel<T>(img.v[i]);
  return out;
}

// Inverse map back to 8-bit (multiples of 8); preprocess(requantize(x)) == x
// for any x produced by preprocess.
template <class T>
uint8_t requantize_pixel(T x) {
  double q = (double(x) + 0.5) * 256.0;
  return uint8_t(std::clamp(q, 0.0, 248.0));
}

// ---- linear-Gaussian system (oracle environment) ----

// s_1 ~ N(0, Sigma0); s_t = A s_{t-1} + B a_{t-1} + w_t for t >= 2;
// o_t = C s_t + v_t. Diagonal noise covariances.
struct LinGaussSpec {
  Eigen::MatrixXd A;            // [n, n]
  Eigen::MatrixXd B;            // [n, m]
  Eigen::MatrixXd C;            // [p, n]
  Eigen::VectorXd q_diag;       // [n] process noise variances
  Eigen::VectorXd r_diag;       // [p] observation noise variances
  Eigen::VectorXd sigma0_diag;  // [n] initial state variances

  int state_dim() const { return int(A.rows()); }
  int action_dim() const { return int(B.cols()); }
  int obs_dim() const { return int(C.rows()); }
  void validate() const;
};

struct LinGaussEpisode {
  std::vector<Eigen::VectorXd> states;  // s_1..s_T
  std::vector<Eigen::VectorXd> obs;     // o_1..o_T
};

// actions: [T-1, m]; a_t drives the transition into s_{t+1}.
LinGaussEpisode lingauss_episode(const LinGaussSpec& spec, const Eigen::MatrixXd& actions,
                                 int T, RngStream& rng);

}  // namespace planet
