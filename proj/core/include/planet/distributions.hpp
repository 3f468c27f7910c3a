#pragma once

#include <cmath>
#include <span>

#include "planet/graph.hpp"
#include "planet/tensor.hpp"

namespace planet {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Diagonal Gaussian over a k-vector. The one distribution family the whole
// artifact runs on: latent beliefs, action-sequence beliefs and decoders.
template <class T>
struct DiagGaussian {
  Tensor<T> mean;
  Tensor<T> stddev;

  DiagGaussian() = default;
  DiagGaussian(Tensor<T> mean_, Tensor<T> stddev_)
      : mean(std::move(mean_)), stddev(std::move(stddev_)) {
    check_arg(mean.numel() == stddev.numel(), "DiagGaussian: mean/stddev length mismatch");
    for (const T& s : stddev.v) check_arg(s > T(0), "DiagGaussian: stddev must be positive");
  }

  int64_t dim() const { return mean.numel(); }

  static DiagGaussian standard(int k) {
    return DiagGaussian(Tensor<T>::zeros({k}), Tensor<T>::full({k}, T(1)));
  }
};

template <class T>
T gauss_log_prob(const DiagGaussian<T>& d, std::span<const T> x) {
  check_arg(int64_t(x.size()) == d.dim(), "log_prob: dimension mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < d.dim(); ++i) {
    const double mu = double(d.mean[i]);
    const double sd = double(d.stddev[i]);
    const double z = (double(x[size_t(i)]) - mu) / sd;
    acc += -0.5 * kLog2Pi - std::log(sd) - 0.5 * z * z;
  }
  return T(acc);
}

template <class T>
T gauss_kl(const DiagGaussian<T>& q, const DiagGaussian<T>& p) {
  check_arg(q.dim() == p.dim(), "kl: dimension mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < q.dim(); ++i) {
    const double sq = double(q.stddev[i]);
    const double sp = double(p.stddev[i]);
    const double dm = double(q.mean[i]) - double(p.mean[i]);
    acc += std::log(sp / sq) + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
  }
  return T(acc);
}

template <class T>
Tensor<T> gauss_rsample(const DiagGaussian<T>& d, std::span<const T> noise) {
  check_arg(int64_t(noise.size()) == d.dim(), "rsample: noise dimension mismatch");
  Tensor<T> out = d.mean;
  for (int64_t i = 0; i < d.dim(); ++i) out[i] += d.stddev[i] * noise[size_t(i)];
  return out;
}

// ---- graph (differentiable, batched over rows) versions ----

template <class T>
struct GaussIds {
  typename Graph<T>::Id mean = Graph<T>::kNoId;
  typename Graph<T>::Id stddev = Graph<T>::kNoId;
};

// mean + stddev (.) noise; differentiable w.r.t. mean and stddev.
template <class T>
typename Graph<T>::Id rsample_g(Graph<T>& g, const GaussIds<T>& d, typename Graph<T>::Id noise) {
  return g.add(d.mean, g.mul(d.stddev, noise));
}

// Per-row sum of independent Gaussian log densities: [N, D] -> [N].
template <class T>
typename Graph<T>::Id gauss_logprob_g(Graph<T>& g, const GaussIds<T>& d,
                                      typename Graph<T>::Id x) {
  const int64_t dcols = g.val(d.mean).cols();
  auto z = g.div(g.sub(x, d.mean), d.stddev);
  auto quad = g.mul_c(g.sum_rows(g.square(z)), T(-0.5));
  auto logdet = g.neg(g.sum_rows(g.log_(d.stddev)));
  return g.add_c(g.add(quad, logdet), T(-0.5) * T(dcols) * T(kLog2Pi));
}

// Closed-form KL between diagonal Gaussians per row: [N, D] -> [N].
// Written as log(sp/sq) + ((sq/sp)^2 + ((mq-mp)/sp)^2)/2 - 1/2 so that
// identical inputs cancel to exactly zero.
template <class T>
typename Graph<T>::Id gauss_kl_g(Graph<T>& g, const GaussIds<T>& q, const GaussIds<T>& p) {
  const int64_t dcols = g.val(q.mean).cols();
  auto ratio = g.div(p.stddev, q.stddev);
  auto term_log = g.log_(ratio);
  auto var_ratio = g.square(g.div(q.stddev, p.stddev));
  auto mean_term = g.square(g.div(g.sub(q.mean, p.mean), p.stddev));
  auto per_dim = g.add(term_log, g.mul_c(g.add(var_ratio, mean_term), T(0.5)));
  return g.add_c(g.sum_rows(per_dim), T(-0.5) * T(dcols));
}

}  // namespace planet
