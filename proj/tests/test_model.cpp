#include <catch_amalgamated.hpp>

#include <cmath>

#include "scalar_oracle.hpp"
#include "stagelm/error.hpp"
#include "stagelm/model.hpp"

using namespace stagelm;
using namespace stagelm::model;
using Catch::Approx;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.max_seq_len = 16;
  return cfg;
}

// Random gains as well so the gain gradients are exercised away from 1.
ModelParams<double> random_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto p = init_params<double>(cfg, rng);
  p.for_each([&](const std::string& name, Matrix<double>& m) {
    if (name.ends_with("norm_gain")) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.5 + uniform_unit(rng);
    }
  });
  return p;
}

double max_rel_fd_error(ModelParams<double> p, const ModelConfig& cfg, const std::vector<TokenId>& tokens,
                        const std::vector<TokenId>& targets, const std::vector<std::uint8_t>& mask) {
  const auto lg = backward(p, cfg, tokens, targets, mask);
  double worst = 0;
  std::vector<const Matrix<double>*> analytic;
  lg.grads.for_each([&](const std::string&, const Matrix<double>& m) { analytic.push_back(&m); });
  std::size_t idx = 0;
  const double h = 1e-4;
  p.for_each([&](const std::string&, Matrix<double>& m) {
    const Matrix<double>& g = *analytic[idx++];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double keep = m.data()[i];
      m.data()[i] = keep + h;
      const double up = backward(p, cfg, tokens, targets, mask).loss;
      m.data()[i] = keep - h;
      const double down = backward(p, cfg, tokens, targets, mask).loss;
      m.data()[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double err = std::abs(fd - g.data()[i]) / std::max(1e-6, std::abs(fd) + std::abs(g.data()[i]));
      worst = std::max(worst, err);
    }
  });
  return worst;
}

}  // namespace

TEST_CASE("config validation and ffn sizing") {
  CHECK(ModelConfig::default_ffn_hidden(8) == 24);
  CHECK(ModelConfig::default_ffn_hidden(64) == 176);
  auto cfg = tiny_config();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.d_model = 6;
  cfg.n_heads = 2;  // head_dim 3 is odd
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("rmsnorm matches a scalar loop") {
  Rng rng(3);
  Matrix<double> x(4, 8), g(1, 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
  const auto y = rmsnorm(x, g, 1e-5);
  oracle::Mat xo(4, std::vector<double>(8));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 8; ++c) xo[r][c] = x(r, c);
  const auto yo = oracle::rmsnorm(xo, g, 1e-5);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 8; ++c) CHECK(y(r, c) == Approx(yo[r][c]).epsilon(1e-6));

  const Matrix<double> zero = Matrix<double>::Zero(2, 8);
  CHECK(rmsnorm(zero, g, 1e-5).cwiseAbs().maxCoeff() == 0.0);
  const Matrix<double> constant = Matrix<double>::Constant(1, 8, 3.0);
  const auto yc = rmsnorm(constant, g, 0.0);
  for (int c = 0; c < 8; ++c) CHECK(yc(0, c) == Approx(g(0, c)).epsilon(1e-12));
}

TEST_CASE("rope properties") {
  auto cfg = tiny_config();
  cfg.max_seq_len = 64;
  Rng rng(5);
  Matrix<double> q(1, 8), k(1, 8);
  for (Eigen::Index i = 0; i < 8; ++i) {
    q.data()[i] = standard_normal(rng);
    k.data()[i] = standard_normal(rng);
  }
  SECTION("position zero is the identity and norms are preserved") {
    Matrix<double> q0 = q;
    const std::size_t p0[] = {0};
    rope_inplace(q0, 2, p0, cfg.rope_base, cfg.max_seq_len);
    CHECK((q0 - q).cwiseAbs().maxCoeff() == 0.0);
    Matrix<double> q9 = q;
    const std::size_t p9[] = {9};
    rope_inplace(q9, 2, p9, cfg.rope_base, cfg.max_seq_len);
    CHECK(q9.norm() == Approx(q.norm()).epsilon(1e-6));
  }
  SECTION("scores depend only on relative position") {
    auto score = [&](std::size_t a, std::size_t b) {
      Matrix<double> qa = q, kb = k;
      const std::size_t pa[] = {a}, pb[] = {b};
      rope_inplace(qa, 2, pa, cfg.rope_base, cfg.max_seq_len);
      rope_inplace(kb, 2, pb, cfg.rope_base, cfg.max_seq_len);
      // per-head inner products
      return std::pair{qa.leftCols(4).cwiseProduct(kb.leftCols(4)).sum(), qa.rightCols(4).cwiseProduct(kb.rightCols(4)).sum()};
    };
    for (std::size_t s : {1u, 7u, 30u}) {
      const auto base = score(9, 3);
      const auto shifted = score(9 + s, 3 + s);
      CHECK(shifted.first == Approx(base.first).margin(1e-5));
      CHECK(shifted.second == Approx(base.second).margin(1e-5));
    }
  }
  SECTION("range and ordering errors") {
    Matrix<double> q2 = q;
    const std::size_t bad[] = {64};
    CHECK_THROWS_AS(rope_inplace(q2, 2, bad, cfg.rope_base, cfg.max_seq_len), Error);
    Matrix<double> q3(2, 8);
    q3.setOnes();
    const std::size_t unordered[] = {3, 3};
    CHECK_THROWS_AS(rope_inplace(q3, 2, unordered, cfg.rope_base, cfg.max_seq_len), Error);
  }
}

TEST_CASE("attention rows, T=1 and causality") {
  const auto cfg = tiny_config();
  const auto p = random_params(cfg, 11);
  Rng rng(2);
  Matrix<double> x(6, 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  std::vector<Matrix<double>> probs;
  const auto out = causal_attention(x, p.layers[0], cfg, &probs);
  REQUIRE(probs.size() == 2);
  for (const auto& P : probs) {
    for (Eigen::Index t = 0; t < P.rows(); ++t) {
      CHECK(P.row(t).sum() == Approx(1.0).margin(1e-6));
      for (Eigen::Index j = t + 1; j < P.cols(); ++j) CHECK(P(t, j) == 0.0);
    }
  }
  const Matrix<double> x1 = x.topRows(1);
  const auto single = causal_attention(x1, p.layers[0], cfg);
  const Matrix<double> expect = x1 * p.layers[0].wv * p.layers[0].wo;
  CHECK((single - expect).cwiseAbs().maxCoeff() < 1e-12);

  Matrix<double> x2 = x;
  x2.row(4) *= 3.0;
  const auto out2 = causal_attention(x2, p.layers[0], cfg);
  CHECK(out2.topRows(4) == out.topRows(4));
}

TEST_CASE("swiglu") {
  Matrix<double> wg(1, 1), wu(1, 1), wd(1, 1), x(1, 1);
  wg << 1;
  wu << 1;
  wd << 1;
  x << 1;
  CHECK(swiglu_ffn(x, wg, wu, wd)(0, 0) == Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(swiglu_ffn(x, wg, wu, wd)(0, 0) == Approx(0.731059).epsilon(1e-6));
  x << 0;
  CHECK(swiglu_ffn(x, wg, wu, wd)(0, 0) == 0.0);
  Matrix<double> bad(2, 1);
  CHECK_THROWS_AS(swiglu_ffn(x, wg, bad, wd), Error);
}

TEST_CASE("forward matches the scalar oracle") {
  for (bool parallel : {false, true}) {
    auto cfg = tiny_config();
    cfg.parallel_residual = parallel;
    const auto p = random_params(cfg, 17);
    const std::vector<TokenId> toks{3, 1, 10, 0, 7};
    const auto lg = forward(p, cfg, toks);
    const auto ref = oracle::logits(p, cfg, toks);
    double worst = 0;
    for (int t = 0; t < 5; ++t)
      for (int v = 0; v < 11; ++v) worst = std::max(worst, std::abs(lg(t, v) - ref[t][v]));
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("forward edge cases") {
  auto cfg = tiny_config();
  const auto p = random_params(cfg, 23);
  const std::vector<TokenId> toks{1, 2, 3, 4, 5, 6};
  SECTION("out of range token rejected") {
    const std::vector<TokenId> bad{1, 11};
    CHECK_THROWS_AS(forward(p, cfg, bad), Error);
  }
  SECTION("too long rejected") {
    const std::vector<TokenId> longer(17, 1);
    CHECK_THROWS_AS(forward(p, cfg, longer), Error);
  }
  SECTION("empty stack is norm then head") {
    auto cfg0 = cfg;
    cfg0.n_layers = 0;
    Rng rng(1);
    const auto p0 = init_params<double>(cfg0, rng);
    const auto lg = forward(p0, cfg0, toks);
    Matrix<double> e(6, 8);
    for (int t = 0; t < 6; ++t) e.row(t) = p0.tok_embed.row(toks[t]);
    const Matrix<double> expect = rmsnorm(e, p0.final_norm_gain, cfg0.rms_eps) * p0.lm_head;
    CHECK((lg - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("causality and determinism") {
    const auto a = forward(p, cfg, toks);
    auto toks2 = toks;
    toks2[4] = 9;
    const auto b = forward(p, cfg, toks2);
    CHECK(a.topRows(4) == b.topRows(4));
    CHECK(a == forward(p, cfg, toks));
  }
}

TEST_CASE("backward loss values") {
  const auto cfg = tiny_config();
  SECTION("uniform logits give ln V") {
    auto p = ModelParams<double>::zeros(cfg);
    p.final_norm_gain.setOnes();
    p.layers[0].attn_norm_gain.setOnes();
    p.layers[0].ffn_norm_gain.setOnes();
    const std::vector<TokenId> toks{1, 2, 3}, tg{2, 3, 4};
    CHECK(backward(p, cfg, toks, tg, {}).loss == Approx(std::log(11.0)).epsilon(1e-12));
  }
  SECTION("single unmasked position equals its NLL") {
    const auto p = random_params(cfg, 29);
    const std::vector<TokenId> toks{3, 1, 10, 0, 7}, tg{1, 10, 0, 7, 2};
    const std::vector<std::uint8_t> mask{0, 0, 1, 0, 0};
    const auto ref = oracle::logits(p, cfg, toks);
    CHECK(backward(p, cfg, toks, tg, mask).loss == Approx(oracle::token_nll(ref[2], 0)).epsilon(1e-10));
    const auto nll = token_nll(p, cfg, toks, tg);
    CHECK(nll[2] == Approx(oracle::token_nll(ref[2], 0)).epsilon(1e-10));
  }
  SECTION("all-masked rejected") {
    const auto p = random_params(cfg, 29);
    const std::vector<TokenId> toks{3, 1}, tg{1, 2};
    const std::vector<std::uint8_t> mask{0, 0};
    try {
      backward(p, cfg, toks, tg, mask);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kNoSupervisedPositions);
    }
  }
}

TEST_CASE("gradients match central finite differences") {
  for (bool parallel : {false, true}) {
    auto cfg = tiny_config();
    cfg.parallel_residual = parallel;
    const auto p = random_params(cfg, 31);
    const std::vector<TokenId> toks{3, 1, 10, 0, 7}, tg{1, 10, 0, 7, 2};
    CHECK(max_rel_fd_error(p, cfg, toks, tg, {}) < 1e-4);
    CHECK(max_rel_fd_error(p, cfg, toks, tg, {0, 1, 0, 1, 1}) < 1e-4);
  }
  auto cfg2 = tiny_config();
  cfg2.n_layers = 2;
  const auto p2 = random_params(cfg2, 37);
  const std::vector<TokenId> toks{3, 1, 10, 0, 7, 7}, tg{1, 10, 0, 7, 7, 2};
  CHECK(max_rel_fd_error(p2, cfg2, toks, tg, {}) < 1e-4);
}

TEST_CASE("batched backward is thread-count invariant") {
  auto cfg = tiny_config();
  cfg.n_layers = 2;
  Rng rng(41);
  const auto p = init_params<float>(cfg, rng);
  std::vector<std::vector<TokenId>> toks, tg;
  std::vector<std::vector<std::uint8_t>> masks;
  for (int b = 0; b < 5; ++b) {
    std::vector<TokenId> s;
    for (int t = 0; t < 9; ++t) s.push_back(static_cast<TokenId>(uniform_index(rng, 11)));
    toks.emplace_back(s.begin(), s.end() - 1);
    tg.emplace_back(s.begin() + 1, s.end());
    masks.emplace_back(8, static_cast<std::uint8_t>(b % 2 ? 1 : 0));
    masks.back()[0] = 1;
  }
  std::vector<SupervisedSequence> batch;
  for (int b = 0; b < 5; ++b) batch.push_back({toks[b], tg[b], masks[b]});
  Gradients<float> g1, g3;
  const float l1 = backward_batch(p, cfg, batch, g1, 1);
  const float l3 = backward_batch(p, cfg, batch, g3, 3);
  CHECK(l1 == l3);
  std::vector<Matrix<float>> a, b;
  g1.for_each([&](const std::string&, const Matrix<float>& m) { a.push_back(m); });
  g3.for_each([&](const std::string&, const Matrix<float>& m) { b.push_back(m); });
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // Batch loss equals the supervised-position-weighted mean of the parts.
  double sum = 0;
  std::size_t count = 0;
  for (int i = 0; i < 5; ++i) {
    const auto nll = token_nll(p, cfg, toks[i], tg[i]);
    for (int t = 0; t < 8; ++t)
      if (masks[i][t]) {
        sum += nll[t];
        ++count;
      }
  }
  CHECK(l1 == Approx(sum / count).epsilon(1e-5));
}

TEST_CASE("shape checks and parameter counting") {
  const auto cfg = tiny_config();
  Rng rng(1);
  auto p = init_params<double>(cfg, rng);
  CHECK(p.parameter_count() == 11 * 8 + (8 + 4 * 64 + 8 + 3 * 8 * 24) + 8 + 8 * 11);
  CHECK_NOTHROW(p.check_shapes(cfg));
  p.layers[0].wq.resize(8, 7);
  CHECK_THROWS_AS(p.check_shapes(cfg), Error);
  const auto f = cast_params<double, float>(init_params<double>(cfg, rng));
  CHECK(f.tok_embed.rows() == 11);
}
