#include "planet/envs.hpp"

#include <algorithm>
#include <cmath>

namespace planet {

namespace {

constexpr double kPi = 3.14159265358979323846;

double wrap_angle(double theta) {
  theta = std::fmod(theta + kPi, 2.0 * kPi);
  if (theta < 0) theta += 2.0 * kPi;
  return theta - kPi;  // (-pi, pi]
}

struct Rgb {
  uint8_t r, g, b;
};

void fill_background(Tensor<uint8_t>& img, Rgb c) {
  const int64_t pixels = img.numel() / 3;
  for (int64_t i = 0; i < pixels; ++i) {
    img[i * 3 + 0] = c.r;
    img[i * 3 + 1] = c.g;
    img[i * 3 + 2] = c.b;
  }
}

void put_pixel(Tensor<uint8_t>& img, int x, int y, Rgb c) {
  const int h = img.dim(0), w = img.dim(1);
  if (x < 0 || x >= w || y < 0 || y >= h) return;
  const int64_t o = (int64_t(y) * w + x) * 3;
  img[o + 0] = c.r;
  img[o + 1] = c.g;
  img[o + 2] = c.b;
}

void draw_disc(Tensor<uint8_t>& img, int cx, int cy, int radius, Rgb c) {
  for (int y = cy - radius; y <= cy + radius; ++y)
    for (int x = cx - radius; x <= cx + radius; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) put_pixel(img, x, y, c);
}

void draw_line(Tensor<uint8_t>& img, int x0, int y0, int x1, int y1, int thickness, Rgb c) {
  const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  for (int i = 0; i <= steps; ++i) {
    const int x = x0 + (steps ? (x1 - x0) * i / steps : 0);
    const int y = y0 + (steps ? (y1 - y0) * i / steps : 0);
    if (thickness <= 1) put_pixel(img, x, y, c);
    else draw_disc(img, x, y, thickness / 2, c);
  }
}

}  // namespace

// ---- pendulum ----

PendulumEnv::PendulumEnv(int image_size) {
  spec_.name = "pendulum";
  spec_.action_dim = 1;
  spec_.episode_len = 200;
  spec_.dt = float(kDt);
  spec_.image_size = image_size;
}

void PendulumEnv::reset(RngStream& rng) {
  theta_ = wrap_angle(kPi + rng.uniform(-0.1, 0.1));
  theta_dot_ = rng.uniform(-0.05, 0.05);
}

float PendulumEnv::step(std::span<const float> action) {
  check_arg(action.size() == 1, "pendulum: action must be 1-d");
  const double a = std::clamp(double(action[0]), -1.0, 1.0);
  const double accel = -(kGravity / kLength) * std::sin(theta_) +
                       (a * kMaxTorque - kDamping * theta_dot_) / (kMass * kLength * kLength);
  theta_dot_ += kDt * accel;  // semi-implicit Euler
  theta_ = wrap_angle(theta_ + kDt * theta_dot_);
  return float((std::cos(theta_) + 1.0) / 2.0);
}

double PendulumEnv::energy() const {
  return 0.5 * theta_dot_ * theta_dot_ - (kGravity / kLength) * std::cos(theta_);
}

void PendulumEnv::set_state(double theta, double theta_dot) {
  theta_ = wrap_angle(theta);
  theta_dot_ = theta_dot;
}

std::vector<float> PendulumEnv::state() const {
  return {float(theta_), float(theta_dot_)};
}

Tensor<uint8_t> PendulumEnv::render() const {
  const int s = spec_.image_size;
  Tensor<uint8_t> img({s, s, 3});
  fill_background(img, {18, 18, 26});
  const int cx = s / 2, cy = s / 2;
  const double rod = 0.34 * s;
  // theta = 0 points up; screen y grows downward.
  const int bx = cx + int(std::lround(rod * std::sin(theta_)));
  const int by = cy - int(std::lround(rod * std::cos(theta_)));
  draw_line(img, cx, cy, bx, by, std::max(1, s / 16), {205, 205, 215});
  draw_disc(img, bx, by, std::max(2, s / 8), {235, 90, 70});
  draw_disc(img, cx, cy, std::max(1, s / 32), {120, 120, 135});
  return img;
}

// ---- sparse goal ----

SparseGoalEnv::SparseGoalEnv(int image_size) {
  spec_.name = "sparse_goal";
  spec_.action_dim = 2;
  spec_.episode_len = 200;
  spec_.dt = float(kDt);
  spec_.image_size = image_size;
}

void SparseGoalEnv::reset(RngStream& rng) {
  for (int i = 0; i < 2; ++i) {
    pos_[i] = rng.uniform(-0.8, 0.8);
    vel_[i] = 0.0;
    goal_[i] = rng.uniform(-0.8, 0.8);
  }
}

float SparseGoalEnv::step(std::span<const float> action) {
  check_arg(action.size() == 2, "sparse_goal: action must be 2-d");
  for (int i = 0; i < 2; ++i) {
    const double a = std::clamp(double(action[i]), -1.0, 1.0);
    vel_[i] += kDt * (kForce * a - kDamping * vel_[i]);
    pos_[i] += kDt * vel_[i];
    if (pos_[i] < -1.0) {
      pos_[i] = -1.0;
      vel_[i] = 0.0;
    } else if (pos_[i] > 1.0) {
      pos_[i] = 1.0;
      vel_[i] = 0.0;
    }
  }
  const double dx = pos_[0] - goal_[0], dy = pos_[1] - goal_[1];
  return std::sqrt(dx * dx + dy * dy) < kGoalRadius ? 1.f : 0.f;
}

void SparseGoalEnv::set_state(std::span<const double> pos, std::span<const double> vel,
                              std::span<const double> goal) {
  for (int i = 0; i < 2; ++i) {
    pos_[i] = std::clamp(pos[size_t(i)], -1.0, 1.0);
    vel_[i] = vel[size_t(i)];
    goal_[i] = goal[size_t(i)];
  }
}

std::vector<float> SparseGoalEnv::state() const {
  return {float(pos_[0]), float(pos_[1]), float(vel_[0]),
          float(vel_[1]), float(goal_[0]), float(goal_[1])};
}

Tensor<uint8_t> SparseGoalEnv::render() const {
  const int s = spec_.image_size;
  Tensor<uint8_t> img({s, s, 3});
  fill_background(img, {16, 22, 16});
  auto to_px = [s](double world) { return int(std::lround((world + 1.0) * 0.5 * (s - 1))); };
  const int goal_r = std::max(2, int(std::lround(kGoalRadius * 0.5 * s)));
  draw_disc(img, to_px(goal_[0]), to_px(goal_[1]), goal_r, {70, 220, 95});
  draw_disc(img, to_px(pos_[0]), to_px(pos_[1]), std::max(2, s / 16), {80, 120, 235});
  return img;
}

std::unique_ptr<Env> make_env(const std::string& name, int image_size) {
  if (name == "pendulum") return std::make_unique<PendulumEnv>(image_size);
  if (name == "sparse_goal") return std::make_unique<SparseGoalEnv>(image_size);
  throw std::invalid_argument("unknown environment: " + name);
}

// ---- linear-Gaussian system ----

void LinGaussSpec::validate() const {
  check_arg(A.rows() == A.cols(), "LinGaussSpec: A must be square");
  check_arg(B.rows() == A.rows(), "LinGaussSpec: B row mismatch");
  check_arg(C.cols() == A.rows(), "LinGaussSpec: C column mismatch");
  check_arg(q_diag.size() == A.rows(), "LinGaussSpec: q_diag size mismatch");
  check_arg(r_diag.size() == C.rows(), "LinGaussSpec: r_diag size mismatch");
  check_arg(sigma0_diag.size() == A.rows(), "LinGaussSpec: sigma0_diag size mismatch");
  for (int i = 0; i < q_diag.size(); ++i)
    check_arg(q_diag[i] >= 0.0, "LinGaussSpec: negative process noise variance");
  for (int i = 0; i < r_diag.size(); ++i)
    check_arg(r_diag[i] >= 0.0, "LinGaussSpec: negative observation noise variance");
  for (int i = 0; i < sigma0_diag.size(); ++i)
    check_arg(sigma0_diag[i] >= 0.0, "LinGaussSpec: negative initial variance");
}

LinGaussEpisode lingauss_episode(const LinGaussSpec& spec, const Eigen::MatrixXd& actions,
                                 int T, RngStream& rng) {
  spec.validate();
  check_arg(T >= 1, "lingauss_episode: T must be positive");
  check_arg(actions.rows() >= T - 1 && actions.cols() == spec.action_dim(),
            "lingauss_episode: need T-1 action rows of width action_dim");
  const int n = spec.state_dim(), p = spec.obs_dim();
  LinGaussEpisode ep;
  ep.states.reserve(size_t(T));
  ep.obs.reserve(size_t(T));
  Eigen::VectorXd s(n);
  for (int i = 0; i < n; ++i) s[i] = std::sqrt(spec.sigma0_diag[i]) * rng.normal();
  for (int t = 0; t < T; ++t) {
    if (t > 0) {
      Eigen::VectorXd w(n);
      for (int i = 0; i < n; ++i) w[i] = std::sqrt(spec.q_diag[i]) * rng.normal();
      s = spec.A * s + spec.B * actions.row(t - 1).transpose() + w;
    }
    Eigen::VectorXd o = spec.C * s;
    for (int i = 0; i < p; ++i) o[i] += std::sqrt(spec.r_diag[i]) * rng.normal();
    ep.states.push_back(s);
    ep.obs.push_back(std::move(o));
  }
  return ep;
}

}  // namespace planet
