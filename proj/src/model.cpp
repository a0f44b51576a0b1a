#include "stagelm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "stagelm/error.hpp"

namespace stagelm::model {
namespace {

constexpr std::string_view kModule = "model";

[[noreturn]] void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(kModule), msg);
}

template <class T>
using Vec = std::vector<T>;

template <class T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

template <class T>
Matrix<T> rms_forward(const Matrix<T>& x, const Matrix<T>& gain, double eps, Vec<T>& inv) {
  const auto rows = x.rows();
  const auto d = static_cast<T>(x.cols());
  inv.resize(static_cast<std::size_t>(rows));
  Matrix<T> y(rows, x.cols());
  for (Eigen::Index t = 0; t < rows; ++t) {
    const T r = T(1) / std::sqrt(x.row(t).squaredNorm() / d + static_cast<T>(eps));
    inv[static_cast<std::size_t>(t)] = r;
    y.row(t) = (x.row(t) * r).cwiseProduct(gain);
  }
  return y;
}

// Returns dx and accumulates the gain gradient into dgain.
template <class T>
Matrix<T> rms_backward(const Matrix<T>& x, const Vec<T>& inv, const Matrix<T>& gain, const Matrix<T>& dy,
                       Matrix<T>& dgain) {
  const auto d = static_cast<T>(x.cols());
  Matrix<T> dx(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const T r = inv[static_cast<std::size_t>(t)];
    dgain += dy.row(t).cwiseProduct(x.row(t)) * r;
    const Eigen::Matrix<T, 1, Eigen::Dynamic> gdy = dy.row(t).cwiseProduct(gain);
    const T dot = gdy.cwiseProduct(x.row(t)).sum();
    dx.row(t) = gdy * r - x.row(t) * (r * r * r * dot / d);
  }
  return dx;
}

struct RopeTable {
  Matrix<double> cos, sin;  // [T × head_dim/2]
};

RopeTable make_rope_table(std::span<const std::size_t> positions, std::size_t head_dim, double base,
                          std::size_t max_seq_len) {
  const auto half = static_cast<Eigen::Index>(head_dim / 2);
  RopeTable tab{Matrix<double>(static_cast<Eigen::Index>(positions.size()), half),
                Matrix<double>(static_cast<Eigen::Index>(positions.size()), half)};
  for (std::size_t t = 0; t < positions.size(); ++t) {
    if (positions[t] >= max_seq_len) {
      fail(ErrorCode::kInvalidArgument, "position " + std::to_string(positions[t]) +
                                            " outside max_seq_len " + std::to_string(max_seq_len));
    }
    if (t > 0 && positions[t] <= positions[t - 1]) {
      fail(ErrorCode::kInvalidArgument, "rotary positions must be strictly increasing");
    }
    for (Eigen::Index i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(positions[t]) * freq;
      tab.cos(static_cast<Eigen::Index>(t), i) = std::cos(angle);
      tab.sin(static_cast<Eigen::Index>(t), i) = std::sin(angle);
    }
  }
  return tab;
}

// direction +1 applies the rotation, -1 its transpose (used for gradients).
template <class T>
void apply_rope(Matrix<T>& x, std::size_t n_heads, const RopeTable& tab, int direction) {
  const auto head_dim = static_cast<Eigen::Index>(x.cols()) / static_cast<Eigen::Index>(n_heads);
  const auto half = head_dim / 2;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n_heads); ++h) {
      for (Eigen::Index i = 0; i < half; ++i) {
        const T c = static_cast<T>(tab.cos(t, i));
        const T s = static_cast<T>(tab.sin(t, i)) * static_cast<T>(direction);
        T& a = x(t, h * head_dim + 2 * i);
        T& b = x(t, h * head_dim + 2 * i + 1);
        const T a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

// softmax(q kᵀ/√d_h) v per head with a causal mask. probs receives the
// per-head attention matrices (upper triangle zero).
template <class T>
Matrix<T> attention_core(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, std::size_t n_heads,
                         std::vector<Matrix<T>>& probs) {
  const Eigen::Index T_len = q.rows();
  const Eigen::Index dh = q.cols() / static_cast<Eigen::Index>(n_heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> out(T_len, q.cols());
  probs.resize(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h) * dh;
    Matrix<T>& P = probs[h];
    P.noalias() = q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose();
    for (Eigen::Index t = 0; t < T_len; ++t) {
      auto row = P.row(t);
      T m = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j <= t; ++j) m = std::max(m, row(j) * scale);
      T sum = 0;
      for (Eigen::Index j = 0; j <= t; ++j) {
        const T e = std::exp(row(j) * scale - m);
        row(j) = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (Eigen::Index j = 0; j <= t; ++j) row(j) *= inv;
      for (Eigen::Index j = t + 1; j < T_len; ++j) row(j) = 0;
    }
    out.middleCols(c0, dh).noalias() = P.template triangularView<Eigen::Lower>() * v.middleCols(c0, dh);
  }
  return out;
}

template <class T>
struct LayerCache {
  Matrix<T> x_in;
  Vec<T> inv1;
  Matrix<T> n1;
  Matrix<T> q, k, v;  // q and k after rotation
  std::vector<Matrix<T>> probs;
  Matrix<T> att;
  Matrix<T> ffn_in;  // residual stream the feed-forward norm reads (sequential only)
  Vec<T> inv2;
  Matrix<T> n2;
  Matrix<T> gate, up, act;
};

template <class T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  Matrix<T> x_final;
  Vec<T> inv_final;
  Matrix<T> n_final;
  Matrix<T> logits;
};

template <class T>
Matrix<T> swiglu_forward(const Matrix<T>& x, const Matrix<T>& w_gate, const Matrix<T>& w_up,
                         const Matrix<T>& w_down, Matrix<T>& gate, Matrix<T>& up, Matrix<T>& act) {
  gate.noalias() = x * w_gate;
  up.noalias() = x * w_up;
  act = gate.unaryExpr([](T z) { return z * sigmoid(z); }).cwiseProduct(up);
  Matrix<T> out;
  out.noalias() = act * w_down;
  return out;
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.empty()) fail(ErrorCode::kInvalidArgument, "empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    fail(ErrorCode::kInvalidArgument, "sequence length " + std::to_string(tokens.size()) +
                                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (TokenId id : tokens) {
    if (id >= cfg.vocab_size) fail(ErrorCode::kInvalidArgument, "token id " + std::to_string(id) + " out of range");
  }
}

template <class T>
void forward_cached(const ModelParams<T>& params, const ModelConfig& cfg, std::span<const TokenId> tokens,
                    ForwardCache<T>& cache) {
  check_tokens(cfg, tokens);
  const auto T_len = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  Matrix<T> x(T_len, d);
  for (Eigen::Index t = 0; t < T_len; ++t) x.row(t) = params.tok_embed.row(tokens[static_cast<std::size_t>(t)]);

  const auto positions = iota_positions(tokens.size());
  const RopeTable tab = make_rope_table(positions, cfg.head_dim(), cfg.rope_base, cfg.max_seq_len);

  cache.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& P = params.layers[l];
    auto& c = cache.layers[l];
    c.x_in = x;
    c.n1 = rms_forward(x, P.attn_norm_gain, cfg.rms_eps, c.inv1);
    c.q.noalias() = c.n1 * P.wq;
    c.k.noalias() = c.n1 * P.wk;
    c.v.noalias() = c.n1 * P.wv;
    apply_rope(c.q, cfg.n_heads, tab, +1);
    apply_rope(c.k, cfg.n_heads, tab, +1);
    c.att = attention_core(c.q, c.k, c.v, cfg.n_heads, c.probs);
    Matrix<T> attn_out;
    attn_out.noalias() = c.att * P.wo;
    if (cfg.parallel_residual) {
      c.n2 = c.n1;
    } else {
      c.ffn_in = x + attn_out;
      c.n2 = rms_forward(c.ffn_in, P.ffn_norm_gain, cfg.rms_eps, c.inv2);
    }
    Matrix<T> ffn_out = swiglu_forward(c.n2, P.w_gate, P.w_up, P.w_down, c.gate, c.up, c.act);
    x = cfg.parallel_residual ? Matrix<T>(x + attn_out + ffn_out) : Matrix<T>(c.ffn_in + ffn_out);
  }
  cache.x_final = x;
  cache.n_final = rms_forward(x, params.final_norm_gain, cfg.rms_eps, cache.inv_final);
  cache.logits.noalias() = cache.n_final * params.lm_head;
}

// Accumulates scale · ∂(Σ masked NLL)/∂θ into grads and returns Σ masked NLL.
template <class T>
double backward_accumulate(const ModelParams<T>& params, const ModelConfig& cfg,
                           std::span<const TokenId> tokens, std::span<const TokenId> targets,
                           std::span<const std::uint8_t> mask, T scale, Gradients<T>& grads) {
  if (targets.size() != tokens.size()) fail(ErrorCode::kInvalidArgument, "targets/tokens length mismatch");
  if (!mask.empty() && mask.size() != tokens.size()) fail(ErrorCode::kInvalidArgument, "mask/tokens length mismatch");
  for (TokenId id : targets) {
    if (id >= cfg.vocab_size) fail(ErrorCode::kInvalidArgument, "target id " + std::to_string(id) + " out of range");
  }
  ForwardCache<T> cache;
  forward_cached(params, cfg, tokens, cache);
  const auto T_len = static_cast<Eigen::Index>(tokens.size());

  double nll_sum = 0.0;
  Matrix<T> dlogits = Matrix<T>::Zero(T_len, cache.logits.cols());
  for (Eigen::Index t = 0; t < T_len; ++t) {
    const auto ut = static_cast<std::size_t>(t);
    if (!mask.empty() && mask[ut] == 0) continue;
    auto row = cache.logits.row(t);
    const T m = row.maxCoeff();
    const T sum = (row.array() - m).exp().sum();
    const T lse = m + std::log(sum);
    nll_sum += static_cast<double>(lse - row(targets[ut]));
    dlogits.row(t) = ((row.array() - lse).exp() * scale).matrix();
    dlogits(t, targets[ut]) -= scale;
  }

  grads.lm_head.noalias() += cache.n_final.transpose() * dlogits;
  Matrix<T> dn;
  dn.noalias() = dlogits * params.lm_head.transpose();
  Matrix<T> dx = rms_backward(cache.x_final, cache.inv_final, params.final_norm_gain, dn, grads.final_norm_gain);

  const RopeTable tab = make_rope_table(iota_positions(tokens.size()), cfg.head_dim(), cfg.rope_base,
                                        cfg.max_seq_len);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& P = params.layers[li];
    auto& G = grads.layers[li];
    const auto& c = cache.layers[li];

    // Feed-forward branch; dx is the gradient w.r.t. the block output.
    Matrix<T> dact;
    G.w_down.noalias() += c.act.transpose() * dx;
    dact.noalias() = dx * P.w_down.transpose();
    Matrix<T> dgate(c.gate.rows(), c.gate.cols()), dup(c.up.rows(), c.up.cols());
    for (Eigen::Index t = 0; t < c.gate.rows(); ++t) {
      for (Eigen::Index j = 0; j < c.gate.cols(); ++j) {
        const T z = c.gate(t, j);
        const T s = sigmoid(z);
        const T sw = z * s;
        dup(t, j) = dact(t, j) * sw;
        dgate(t, j) = dact(t, j) * c.up(t, j) * s * (T(1) + z * (T(1) - s));
      }
    }
    G.w_gate.noalias() += c.n2.transpose() * dgate;
    G.w_up.noalias() += c.n2.transpose() * dup;
    Matrix<T> dn2;
    dn2.noalias() = dgate * P.w_gate.transpose();
    dn2.noalias() += dup * P.w_up.transpose();

    // Gradient w.r.t. the attention output a = att·Wo; in the parallel
    // circuit the feed-forward shares the attention norm, so dn2 joins dn1.
    Matrix<T> da = cfg.parallel_residual
                       ? dx
                       : Matrix<T>(dx + rms_backward(c.ffn_in, c.inv2, P.ffn_norm_gain, dn2, G.ffn_norm_gain));
    const Matrix<T>& dres = da;

    G.wo.noalias() += c.att.transpose() * da;
    Matrix<T> datt;
    datt.noalias() = da * P.wo.transpose();

    Matrix<T> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    Matrix<T> dP, dS;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      const Matrix<T>& Pm = c.probs[h];
      const auto dO = datt.middleCols(c0, dh);
      dP.noalias() = dO * c.v.middleCols(c0, dh).transpose();
      dv.middleCols(c0, dh).noalias() = Pm.transpose() * dO;
      dS.resize(Pm.rows(), Pm.cols());
      for (Eigen::Index t = 0; t < Pm.rows(); ++t) {
        T dot = 0;
        for (Eigen::Index j = 0; j <= t; ++j) dot += Pm(t, j) * dP(t, j);
        for (Eigen::Index j = 0; j <= t; ++j) dS(t, j) = Pm(t, j) * (dP(t, j) - dot) * att_scale;
        for (Eigen::Index j = t + 1; j < Pm.cols(); ++j) dS(t, j) = 0;
      }
      dq.middleCols(c0, dh).noalias() = dS.template triangularView<Eigen::Lower>() * c.k.middleCols(c0, dh);
      dk.middleCols(c0, dh).noalias() =
          dS.transpose().template triangularView<Eigen::Upper>() * c.q.middleCols(c0, dh);
    }
    apply_rope(dq, cfg.n_heads, tab, -1);
    apply_rope(dk, cfg.n_heads, tab, -1);
    G.wq.noalias() += c.n1.transpose() * dq;
    G.wk.noalias() += c.n1.transpose() * dk;
    G.wv.noalias() += c.n1.transpose() * dv;
    Matrix<T> dn1;
    dn1.noalias() = dq * P.wq.transpose();
    dn1.noalias() += dk * P.wk.transpose();
    dn1.noalias() += dv * P.wv.transpose();
    if (cfg.parallel_residual) dn1 += dn2;
    dx = dres + rms_backward(c.x_in, c.inv1, P.attn_norm_gain, dn1, G.attn_norm_gain);
  }

  for (Eigen::Index t = 0; t < T_len; ++t) grads.tok_embed.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
  return nll_sum;
}

std::size_t supervised_count(std::span<const std::uint8_t> mask, std::size_t len) {
  if (mask.empty()) return len;
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
}

template <class T>
void add_into(Gradients<T>& dst, const Gradients<T>& src) {
  dst.tok_embed += src.tok_embed;
  for (std::size_t l = 0; l < dst.layers.size(); ++l) {
    auto& a = dst.layers[l];
    const auto& b = src.layers[l];
    a.attn_norm_gain += b.attn_norm_gain;
    a.wq += b.wq;
    a.wk += b.wk;
    a.wv += b.wv;
    a.wo += b.wo;
    a.ffn_norm_gain += b.ffn_norm_gain;
    a.w_gate += b.w_gate;
    a.w_up += b.w_up;
    a.w_down += b.w_down;
  }
  dst.final_norm_gain += src.final_norm_gain;
  dst.lm_head += src.lm_head;
}

}  // namespace

void ModelConfig::validate() const {
  auto bad = [](const std::string& msg) { fail(ErrorCode::kInvalidArgument, msg); };
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || max_seq_len == 0) {
    bad("vocab_size, d_model, n_heads and max_seq_len must be positive");
  }
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) bad("head_dim must be even for rotary embeddings");
  if (!(rms_eps > 0.0)) bad("rms_eps must be positive");
  if (!(rope_base > 0.0)) bad("rope_base must be positive");
}

std::size_t ModelConfig::default_ffn_hidden(std::size_t d_model) {
  const std::size_t raw = (8 * d_model + 2) / 3;  // ceil(8d/3)
  return (raw + 7) / 8 * 8;
}

template <class T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& cfg) {
  const auto V = static_cast<Eigen::Index>(cfg.vocab_size);
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto F = static_cast<Eigen::Index>(cfg.ffn());
  ModelParams p;
  p.tok_embed = Matrix<T>::Zero(V, d);
  p.layers.resize(cfg.n_layers);
  for (auto& L : p.layers) {
    L.attn_norm_gain = Matrix<T>::Zero(1, d);
    L.wq = Matrix<T>::Zero(d, d);
    L.wk = Matrix<T>::Zero(d, d);
    L.wv = Matrix<T>::Zero(d, d);
    L.wo = Matrix<T>::Zero(d, d);
    L.ffn_norm_gain = Matrix<T>::Zero(1, d);
    L.w_gate = Matrix<T>::Zero(d, F);
    L.w_up = Matrix<T>::Zero(d, F);
    L.w_down = Matrix<T>::Zero(F, d);
  }
  p.final_norm_gain = Matrix<T>::Zero(1, d);
  p.lm_head = Matrix<T>::Zero(d, V);
  return p;
}

template <class T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix<T>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <class T>
void ModelParams<T>::check_shapes(const ModelConfig& cfg) const {
  if (layers.size() != cfg.n_layers) {
    fail(ErrorCode::kShapeMismatch, "expected " + std::to_string(cfg.n_layers) + " layers, found " +
                                        std::to_string(layers.size()));
  }
  auto expected = ModelParams<T>::zeros(cfg);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  expected.for_each([&](const std::string&, const Matrix<T>& m) { shapes.emplace_back(m.rows(), m.cols()); });
  std::size_t i = 0;
  for_each([&](const std::string& name, const Matrix<T>& m) {
    if (m.rows() != shapes[i].first || m.cols() != shapes[i].second) {
      fail(ErrorCode::kShapeMismatch, "tensor " + name + " has shape " + std::to_string(m.rows()) + "x" +
                                          std::to_string(m.cols()) + ", expected " +
                                          std::to_string(shapes[i].first) + "x" + std::to_string(shapes[i].second));
    }
    ++i;
  });
}

template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  auto p = ModelParams<T>::zeros(cfg);
  p.for_each([&](const std::string& name, Matrix<T>& m) {
    if (name.ends_with("norm_gain")) {
      m.setOnes();
    } else if (name == "tok_embed") {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(standard_normal(rng));
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(m.rows()));
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>((2.0 * uniform_unit(rng) - 1.0) * bound);
      }
    }
  });
  return p;
}

template <class T, class U>
ModelParams<U> cast_params(const ModelParams<T>& p) {
  ModelParams<U> out;
  out.tok_embed = p.tok_embed.template cast<U>();
  out.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& a = p.layers[l];
    auto& b = out.layers[l];
    b.attn_norm_gain = a.attn_norm_gain.template cast<U>();
    b.wq = a.wq.template cast<U>();
    b.wk = a.wk.template cast<U>();
    b.wv = a.wv.template cast<U>();
    b.wo = a.wo.template cast<U>();
    b.ffn_norm_gain = a.ffn_norm_gain.template cast<U>();
    b.w_gate = a.w_gate.template cast<U>();
    b.w_up = a.w_up.template cast<U>();
    b.w_down = a.w_down.template cast<U>();
  }
  out.final_norm_gain = p.final_norm_gain.template cast<U>();
  out.lm_head = p.lm_head.template cast<U>();
  return out;
}

template <class T>
Matrix<T> rmsnorm(const Matrix<T>& x, const Matrix<T>& gain, double eps) {
  if (gain.size() != x.cols()) fail(ErrorCode::kInvalidArgument, "rmsnorm gain length mismatch");
  Vec<T> inv;
  const Matrix<T> row = Eigen::Map<const Matrix<T>>(gain.data(), 1, x.cols());
  return rms_forward(x, row, eps, inv);
}

template <class T>
void rope_inplace(Matrix<T>& x, std::size_t n_heads, std::span<const std::size_t> positions, double base,
                  std::size_t max_seq_len) {
  if (static_cast<std::size_t>(x.rows()) != positions.size()) {
    fail(ErrorCode::kInvalidArgument, "rope: one position per row required");
  }
  const std::size_t head_dim = static_cast<std::size_t>(x.cols()) / n_heads;
  if (head_dim % 2 != 0) fail(ErrorCode::kInvalidArgument, "rope: head_dim must be even");
  apply_rope(x, n_heads, make_rope_table(positions, head_dim, base, max_seq_len), +1);
}

template <class T>
RotatedQK<T> rope(Matrix<T> q, Matrix<T> k, std::span<const std::size_t> positions, const ModelConfig& cfg) {
  rope_inplace(q, cfg.n_heads, positions, cfg.rope_base, cfg.max_seq_len);
  rope_inplace(k, cfg.n_heads, positions, cfg.rope_base, cfg.max_seq_len);
  return {std::move(q), std::move(k)};
}

template <class T>
Matrix<T> causal_attention(const Matrix<T>& x, const LayerParams<T>& layer, const ModelConfig& cfg,
                           std::vector<Matrix<T>>* probs) {
  if (static_cast<std::size_t>(x.rows()) > cfg.max_seq_len) {
    fail(ErrorCode::kInvalidArgument, "attention input longer than max_seq_len");
  }
  Matrix<T> q = x * layer.wq, k = x * layer.wk, v = x * layer.wv;
  const auto positions = iota_positions(static_cast<std::size_t>(x.rows()));
  const RopeTable tab = make_rope_table(positions, cfg.head_dim(), cfg.rope_base, cfg.max_seq_len);
  apply_rope(q, cfg.n_heads, tab, +1);
  apply_rope(k, cfg.n_heads, tab, +1);
  std::vector<Matrix<T>> local;
  Matrix<T> att = attention_core(q, k, v, cfg.n_heads, probs ? *probs : local);
  return att * layer.wo;
}

template <class T>
Matrix<T> swiglu_ffn(const Matrix<T>& x, const Matrix<T>& w_gate, const Matrix<T>& w_up, const Matrix<T>& w_down) {
  if (x.cols() != w_gate.rows() || x.cols() != w_up.rows() || w_gate.cols() != w_up.cols() ||
      w_down.rows() != w_gate.cols()) {
    fail(ErrorCode::kInvalidArgument, "swiglu weight shapes are not congruent");
  }
  Matrix<T> gate, up, act;
  return swiglu_forward(x, w_gate, w_up, w_down, gate, up, act);
}

template <class T>
Matrix<T> forward(const ModelParams<T>& params, const ModelConfig& cfg, std::span<const TokenId> tokens) {
  ForwardCache<T> cache;
  forward_cached(params, cfg, tokens, cache);
  return std::move(cache.logits);
}

template <class T>
LossAndGrads<T> backward(const ModelParams<T>& params, const ModelConfig& cfg, std::span<const TokenId> tokens,
                         std::span<const TokenId> targets, std::span<const std::uint8_t> loss_mask) {
  const std::size_t count = supervised_count(loss_mask, tokens.size());
  if (count == 0) fail(ErrorCode::kNoSupervisedPositions, "no supervised positions");
  auto grads = ModelParams<T>::zeros(cfg);
  const double sum = backward_accumulate(params, cfg, tokens, targets, loss_mask,
                                         static_cast<T>(1.0 / static_cast<double>(count)), grads);
  return {static_cast<T>(sum / static_cast<double>(count)), std::move(grads)};
}

template <class T>
T backward_batch(const ModelParams<T>& params, const ModelConfig& cfg, std::span<const SupervisedSequence> batch,
                 Gradients<T>& grads, int threads) {
  std::size_t total = 0;
  for (const auto& s : batch) total += supervised_count(s.loss_mask, s.tokens.size());
  if (total == 0) fail(ErrorCode::kNoSupervisedPositions, "no supervised positions");
  const T scale = static_cast<T>(1.0 / static_cast<double>(total));

  grads = ModelParams<T>::zeros(cfg);
  std::vector<double> sums(batch.size(), 0.0);
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, batch.size());
  if (workers <= 1) {
    auto local = ModelParams<T>::zeros(cfg);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (i > 0) local.for_each([](const std::string&, Matrix<T>& m) { m.setZero(); });
      const auto& s = batch[i];
      sums[i] = backward_accumulate(params, cfg, s.tokens, s.targets, s.loss_mask, scale, local);
      add_into(grads, local);
    }
  } else {
    std::vector<Gradients<T>> per_seq(batch.size());
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t i = w; i < batch.size(); i += workers) {
              per_seq[i] = ModelParams<T>::zeros(cfg);
              const auto& s = batch[i];
              sums[i] = backward_accumulate(params, cfg, s.tokens, s.targets, s.loss_mask, scale, per_seq[i]);
            }
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (const auto& g : per_seq) add_into(grads, g);
  }
  double sum = 0.0;
  for (double s : sums) sum += s;
  return static_cast<T>(sum / static_cast<double>(total));
}

template <class T>
std::vector<double> token_nll(const ModelParams<T>& params, const ModelConfig& cfg, std::span<const TokenId> tokens,
                              std::span<const TokenId> targets) {
  if (targets.size() != tokens.size()) fail(ErrorCode::kInvalidArgument, "targets/tokens length mismatch");
  const Matrix<T> logits = forward(params, cfg, tokens);
  std::vector<double> nll(tokens.size());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const auto target = targets[static_cast<std::size_t>(t)];
    if (target >= cfg.vocab_size) fail(ErrorCode::kInvalidArgument, "target id out of range");
    const Eigen::VectorXd row = logits.row(t).template cast<double>().transpose();
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    nll[static_cast<std::size_t>(t)] = lse - row(target);
  }
  return nll;
}

#define STAGELM_INSTANTIATE(T)                                                                                 \
  template struct ModelParams<T>;                                                                              \
  template ModelParams<T> init_params<T>(const ModelConfig&, Rng&);                                            \
  template Matrix<T> rmsnorm<T>(const Matrix<T>&, const Matrix<T>&, double);                                   \
  template void rope_inplace<T>(Matrix<T>&, std::size_t, std::span<const std::size_t>, double, std::size_t);   \
  template RotatedQK<T> rope<T>(Matrix<T>, Matrix<T>, std::span<const std::size_t>, const ModelConfig&);       \
  template Matrix<T> causal_attention<T>(const Matrix<T>&, const LayerParams<T>&, const ModelConfig&,          \
                                         std::vector<Matrix<T>>*);                                             \
  template Matrix<T> swiglu_ffn<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, const Matrix<T>&);    \
  template Matrix<T> forward<T>(const ModelParams<T>&, const ModelConfig&, std::span<const TokenId>);          \
  template LossAndGrads<T> backward<T>(const ModelParams<T>&, const ModelConfig&, std::span<const TokenId>,    \
                                       std::span<const TokenId>, std::span<const std::uint8_t>);               \
  template T backward_batch<T>(const ModelParams<T>&, const ModelConfig&, std::span<const SupervisedSequence>, \
                               Gradients<T>&, int);                                                            \
  template std::vector<double> token_nll<T>(const ModelParams<T>&, const ModelConfig&,                         \
                                            std::span<const TokenId>, std::span<const TokenId>);

STAGELM_INSTANTIATE(float)
STAGELM_INSTANTIATE(double)
#undef STAGELM_INSTANTIATE

template ModelParams<double> cast_params<float, double>(const ModelParams<float>&);
template ModelParams<float> cast_params<double, float>(const ModelParams<double>&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&);
template ModelParams<double> cast_params<double, double>(const ModelParams<double>&);

}  // namespace stagelm::model
