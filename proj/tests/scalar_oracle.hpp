#pragma once
// Straight-line double-precision reference decoder written with plain loops
// and no shared code with the library implementation.

#include <cmath>
#include <cstdint>
#include <vector>

#include "stagelm/model.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

template <class M>
double at(const M& m, std::size_t i, std::size_t j) {
  return static_cast<double>(m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
}

template <class M>
Mat matmul(const Mat& a, const M& w) {
  const std::size_t n = a.size(), k = static_cast<std::size_t>(w.rows()), m = static_cast<std::size_t>(w.cols());
  Mat out = zeros(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t l = 0; l < k; ++l) s += a[i][l] * at(w, l, j);
      out[i][j] = s;
    }
  return out;
}

template <class M>
Mat rmsnorm(const Mat& x, const M& gain, double eps) {
  Mat y = x;
  for (std::size_t t = 0; t < x.size(); ++t) {
    double ss = 0;
    for (double v : x[t]) ss += v * v;
    const double denom = std::sqrt(ss / static_cast<double>(x[t].size()) + eps);
    for (std::size_t i = 0; i < x[t].size(); ++i) y[t][i] = at(gain, 0, i) * x[t][i] / denom;
  }
  return y;
}

inline void rotate(Mat& x, std::size_t heads, double base) {
  const std::size_t dh = x[0].size() / heads;
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const double theta = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
        const double a = x[t][h * dh + 2 * i], b = x[t][h * dh + 2 * i + 1];
        x[t][h * dh + 2 * i] = a * std::cos(theta) - b * std::sin(theta);
        x[t][h * dh + 2 * i + 1] = a * std::sin(theta) + b * std::cos(theta);
      }
}

template <class P>
Mat attention(const Mat& n, const P& L, const stagelm::model::ModelConfig& cfg) {
  Mat q = matmul(n, L.wq), k = matmul(n, L.wk), v = matmul(n, L.wv);
  rotate(q, cfg.n_heads, cfg.rope_base);
  rotate(k, cfg.n_heads, cfg.rope_base);
  const std::size_t T = n.size(), d = cfg.d_model, dh = d / cfg.n_heads;
  Mat o = zeros(T, d);
  for (std::size_t h = 0; h < cfg.n_heads; ++h)
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> s(t + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= t; ++j) {
        double dot = 0;
        for (std::size_t i = 0; i < dh; ++i) dot += q[t][h * dh + i] * k[j][h * dh + i];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j <= t; ++j)
        for (std::size_t i = 0; i < dh; ++i) o[t][h * dh + i] += s[j] / z * v[j][h * dh + i];
    }
  return matmul(o, L.wo);
}

template <class P>
Mat ffn(const Mat& n, const P& L) {
  Mat g = matmul(n, L.w_gate), u = matmul(n, L.w_up);
  for (std::size_t t = 0; t < g.size(); ++t)
    for (std::size_t i = 0; i < g[t].size(); ++i) g[t][i] = g[t][i] / (1.0 + std::exp(-g[t][i])) * u[t][i];
  return matmul(g, L.w_down);
}

template <class T>
Mat logits(const stagelm::model::ModelParams<T>& p, const stagelm::model::ModelConfig& cfg,
           const std::vector<std::uint32_t>& tokens) {
  Mat x = zeros(tokens.size(), cfg.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t i = 0; i < cfg.d_model; ++i) x[t][i] = at(p.tok_embed, tokens[t], i);
  for (const auto& L : p.layers) {
    const Mat n1 = rmsnorm(x, L.attn_norm_gain, cfg.rms_eps);
    const Mat a = attention(n1, L, cfg);
    if (cfg.parallel_residual) {
      const Mat f = ffn(n1, L);
      for (std::size_t t = 0; t < x.size(); ++t)
        for (std::size_t i = 0; i < x[t].size(); ++i) x[t][i] += a[t][i] + f[t][i];
    } else {
      for (std::size_t t = 0; t < x.size(); ++t)
        for (std::size_t i = 0; i < x[t].size(); ++i) x[t][i] += a[t][i];
      const Mat f = ffn(rmsnorm(x, L.ffn_norm_gain, cfg.rms_eps), L);
      for (std::size_t t = 0; t < x.size(); ++t)
        for (std::size_t i = 0; i < x[t].size(); ++i) x[t][i] += f[t][i];
    }
  }
  return matmul(rmsnorm(x, p.final_norm_gain, cfg.rms_eps), p.lm_head);
}

inline double token_nll(const std::vector<double>& row, std::uint32_t target) {
  double mx = -1e300;
  for (double v : row) mx = std::max(mx, v);
  double z = 0;
  for (double v : row) z += std::exp(v - mx);
  return mx + std::log(z) - row[target];
}

// Mean NLL over positions where mask is 1 (all positions when mask is empty).
template <class T>
double masked_loss(const stagelm::model::ModelParams<T>& p, const stagelm::model::ModelConfig& cfg,
                   const std::vector<std::uint32_t>& tokens, const std::vector<std::uint32_t>& targets,
                   const std::vector<std::uint8_t>& mask) {
  const Mat lg = logits(p, cfg, tokens);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (!mask.empty() && !mask[t]) continue;
    sum += token_nll(lg[t], targets[t]);
    ++n;
  }
  return sum / static_cast<double>(n);
}

}  // namespace oracle
