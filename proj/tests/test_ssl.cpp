#include <gtest/gtest.h>

#include "support.hpp"
#include "tilessl/losses.hpp"
#include "tilessl/optim.hpp"
#include "tilessl/pretrain.hpp"

using namespace tilessl;
using testing_support::check_gradient;
using testing_support::random_image;
using testing_support::random_matrix;

namespace {

Matrix scaled(Matrix m, double s) {
  for (auto& v : m.values()) v *= s;
  return m;
}

// Runs plain Sinkhorn until the marginals stop moving.
Matrix sinkhorn_oracle(const Matrix& scores, double eps) {
  Matrix q(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t k = 0; k < q.cols(); ++k) q(i, k) = std::exp(scores(i, k) / eps);
  for (int it = 0; it < 5000; ++it) {
    for (std::size_t k = 0; k < q.cols(); ++k) {
      double s = 0;
      for (std::size_t i = 0; i < q.rows(); ++i) s += q(i, k);
      for (std::size_t i = 0; i < q.rows(); ++i) q(i, k) *= static_cast<double>(q.rows()) / static_cast<double>(q.cols()) / s;
    }
    for (std::size_t i = 0; i < q.rows(); ++i) {
      double s = 0;
      for (std::size_t k = 0; k < q.cols(); ++k) s += q(i, k);
      for (std::size_t k = 0; k < q.cols(); ++k) q(i, k) /= s;
    }
  }
  return q;
}

std::vector<Image16> phantom_patches(std::size_t n, std::uint64_t seed) {
  std::vector<Image16> out;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Image16 im(16, 16);
    const double base = rng.uniform(0.2, 0.6), cx = rng.uniform(3, 12), cy = rng.uniform(3, 12);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        im.at(x, y) = quantize16(65535.0 * std::min(1.0, base + 0.3 * std::exp(-r2 / 6.0) + 0.03 * rng.normal()));
      }
    out.push_back(im);
  }
  return out;
}

PretrainConfig tiny_config(SslMethod method, std::uint64_t seed) {
  PretrainConfig c;
  c.method = method;
  c.epochs = 3;
  c.batch_size = 16;
  c.input = {8, 1};
  c.encoder_hidden = {16};
  c.embedding = 8;
  c.head_hidden = 16;
  c.optimizer = OptimizerKind::adam;
  c.adam.lr = 1e-3;
  c.swav.prototypes = 4;
  c.swav.queue_capacity = 32;
  c.augment.kinds = {TransformKind::crop_resize, TransformKind::gamma};
  c.seed = seed;
  return c;
}

}  // namespace

TEST(NtXent, IdenticalEmbeddingsGiveLn3) {
  const auto l = nt_xent_loss(Matrix(4, 5, 0.7), {0.5});
  EXPECT_NEAR(l.loss, std::log(3.0), 1e-12);
}

TEST(NtXent, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto e = random_matrix(8, 6, seed);
    const auto l = nt_xent_loss(e, {0.5});
    const auto r = check_gradient([&] { return nt_xent_loss(e, {0.5}).loss; }, e.values(), l.grad.values());
    EXPECT_LE(r.max_rel, 1e-5) << seed;
  }
}

TEST(NtXent, ImprovingPositivePairLowersLoss) {
  auto e = random_matrix(6, 4, 4);
  const double before = nt_xent_loss(e, {0.5}).loss;
  for (std::size_t k = 0; k < 4; ++k) e(1, k) = 0.5 * e(1, k) + 0.5 * e(0, k);
  EXPECT_LT(nt_xent_loss(e, {0.5}).loss, before);
}

TEST(NtXent, ScaleAndPairPermutationInvariance) {
  const auto e = random_matrix(8, 5, 5);
  const double base = nt_xent_loss(e, {0.5}).loss;
  EXPECT_NEAR(nt_xent_loss(scaled(e, 3.7), {0.5}).loss, base, 1e-6);
  Matrix p(8, 5);
  const std::size_t perm[4] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t v = 0; v < 2; ++v)
      std::copy(e.row(2 * perm[i] + v).begin(), e.row(2 * perm[i] + v).end(), p.row(2 * i + v).begin());
  EXPECT_NEAR(nt_xent_loss(p, {0.5}).loss, base, 1e-12);
}

TEST(NtXent, Errors) {
  EXPECT_THROW(nt_xent_loss(random_matrix(2, 3, 1), {0.5}), ShapeError);
  EXPECT_THROW(nt_xent_loss(random_matrix(4, 3, 1), {0.0}), ConfigError);
  Matrix z = random_matrix(4, 3, 1);
  for (auto& v : z.row(2)) v = 0.0;
  EXPECT_THROW(nt_xent_loss(z, {0.5}), NumericError);
}

TEST(Byol, ClosedFormValues) {
  const auto p = random_matrix(3, 4, 6);
  EXPECT_NEAR(byol_loss(p, scaled(p, 2.0)).loss, 0.0, 1e-12);
  Matrix a(1, 2, std::vector<double>{1, 0}), b(1, 2, std::vector<double>{0, 3});
  EXPECT_NEAR(byol_loss(a, b).loss, 2.0, 1e-12);
}

TEST(Byol, GradientsAndStopGradient) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto pa = random_matrix(4, 5, seed), pb = random_matrix(4, 5, seed + 10);
    const auto ta = random_matrix(4, 5, seed + 20), tb = random_matrix(4, 5, seed + 30);
    const auto l = byol_symmetric_loss(pa, pb, ta, tb);
    auto f = [&] { return byol_symmetric_loss(pa, pb, ta, tb).loss; };
    EXPECT_LE(check_gradient(f, pa.values(), l.grad_pred_a.values()).max_rel, 1e-5);
    EXPECT_LE(check_gradient(f, pb.values(), l.grad_pred_b.values()).max_rel, 1e-5);
    const auto plain = byol_loss(pa, ta);
    for (double v : plain.grad_target.values()) EXPECT_EQ(v, 0.0);
    EXPECT_NEAR(byol_symmetric_loss(scaled(pa, 0.3), scaled(pb, 0.3), scaled(ta, 5.0), scaled(tb, 5.0)).loss, l.loss, 1e-6);
  }
}

TEST(Ema, Contract) {
  std::vector<double> t{1.0, 1.0}, o{0.0, 4.0};
  ParamList tl{{"t", t, false}}, ol{{"o", o, false}};
  ema_update(tl, ol, 1.0);
  EXPECT_EQ(t, (std::vector<double>{1.0, 1.0}));
  ema_update(tl, ol, 0.99);
  EXPECT_NEAR(t[0], 0.99, 1e-15);
  EXPECT_NEAR(t[1], 0.99 + 0.04, 1e-15);
  ema_update(tl, ol, 0.0);
  EXPECT_EQ(t, o);
  std::vector<double> small{1.0};
  EXPECT_THROW(ema_update(tl, ParamList{{"s", small, false}}, 0.5), ShapeError);
  EXPECT_THROW(ema_update(tl, ol, 1.5), ConfigError);
}

TEST(Sinkhorn, UniformInputGivesUniformOutput) {
  const auto q = sinkhorn_assign(Matrix(6, 3, 0.25), 0.05, 3);
  for (double v : q.values()) EXPECT_EQ(v, 1.0 / 3.0);
}

// Scores are cosines between random unit embeddings (m = 32) and unit prototypes,
// the regime the assignment runs in during SwAV training.
TEST(Sinkhorn, MarginalsAfterConvergence) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto z = normalize_rows(random_matrix(64, 32, seed)).unit;
    const auto c = normalize_rows(random_matrix(8, 32, seed + 100)).unit;
    const auto q = sinkhorn_assign(matmul_nt(z, c), 0.05, 50);
    for (std::size_t i = 0; i < 64; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 8; ++k) {
        EXPECT_GE(q(i, k), 0.0);
        s += q(i, k);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    for (std::size_t k = 0; k < 8; ++k) {
      double s = 0;
      for (std::size_t i = 0; i < 64; ++i) s += q(i, k);
      EXPECT_NEAR(s, 8.0, 1e-6);
    }
  }
}

TEST(Sinkhorn, DiagonalScoresApproachIdentity) {
  Matrix s(5, 5, 0.0);
  for (std::size_t i = 0; i < 5; ++i) s(i, i) = 1.0;
  const auto q = sinkhorn_assign(s, 0.05, 3);
  const auto ref = sinkhorn_oracle(s, 0.05);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_NEAR(q(i, k), i == k ? 1.0 : 0.0, 1e-3);
      EXPECT_NEAR(q(i, k), ref(i, k), 1e-3);
    }
}

TEST(Sinkhorn, MatchesOracleOnRandomScores) {
  const auto s = random_matrix(12, 4, 7);
  const auto q = sinkhorn_assign(s, 0.5, 200);
  const auto ref = sinkhorn_oracle(s, 0.5);
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_NEAR(q.values()[i], ref.values()[i], 1e-9);
}

TEST(Sinkhorn, Errors) {
  EXPECT_THROW(sinkhorn_assign(Matrix(0, 3), 0.05, 3), ShapeError);
  EXPECT_THROW(sinkhorn_assign(Matrix(2, 3), 0.0, 3), ConfigError);
  Matrix bad(2, 2);
  bad(0, 0) = std::nan("");
  EXPECT_THROW(sinkhorn_assign(bad, 0.05, 3), NumericError);
}

TEST(Swav, SymmetricPrototypesGiveLn2) {
  SwavState st;
  st.prototypes = Matrix(2, 2, std::vector<double>{0, 1, 0, -1});
  Matrix z(4, 2);
  for (std::size_t i = 0; i < 4; ++i) z(i, 0) = 1.0;
  const auto l = swav_loss(z, z, st);
  EXPECT_NEAR(l.loss, std::log(2.0), 1e-12);
}

TEST(Swav, GradientsWithFrozenCodes) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto za = normalize_rows(random_matrix(6, 4, seed)).unit;
    auto zb = normalize_rows(random_matrix(6, 4, seed + 1)).unit;
    auto protos = normalize_rows(random_matrix(3, 4, seed + 2)).unit;
    const auto ca = sinkhorn_assign(matmul_nt(za, protos), 0.05, 3);
    const auto cb = sinkhorn_assign(matmul_nt(zb, protos), 0.05, 3);
    const auto l = swav_loss_with_codes(za, zb, protos, ca, cb, 0.1);
    auto f = [&] { return swav_loss_with_codes(za, zb, protos, ca, cb, 0.1).loss; };
    EXPECT_LE(check_gradient(f, za.values(), l.grad_a.values()).max_rel, 1e-5);
    EXPECT_LE(check_gradient(f, zb.values(), l.grad_b.values()).max_rel, 1e-5);
    EXPECT_LE(check_gradient(f, protos.values(), l.grad_prototypes.values()).max_rel, 1e-5);
  }
}

TEST(Swav, QueueFifoAndScaleInvariance) {
  SwavState st;
  st.prototypes = normalize_rows(random_matrix(3, 4, 9)).unit;
  st.queue_a = EmbeddingQueue(10, 4);
  st.queue_b = EmbeddingQueue(10, 4);
  const auto raw_a = random_matrix(4, 4, 10), raw_b = random_matrix(4, 4, 11);
  SwavState copy = st;
  const auto l1 = swav_loss(normalize_rows(raw_a).unit, normalize_rows(raw_b).unit, st);
  const auto l2 = swav_loss(normalize_rows(scaled(raw_a, 9.0)).unit, normalize_rows(scaled(raw_b, 9.0)).unit, copy);
  EXPECT_NEAR(l1.loss, l2.loss, 1e-6);
  EXPECT_EQ(st.queue_a.size(), 4u);
  for (int i = 0; i < 3; ++i) swav_loss(normalize_rows(raw_a).unit, normalize_rows(raw_b).unit, st);
  EXPECT_EQ(st.queue_a.size(), 10u);
  EXPECT_EQ(st.queue_b.size(), 10u);
  EXPECT_THROW(swav_loss(Matrix(0, 4), Matrix(0, 4), st), DataError);
}

TEST(Swav, PrototypeNormalization) {
  SwavState st;
  st.prototypes = random_matrix(5, 3, 12);
  st.normalize_prototypes();
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(l2_norm(st.prototypes.row(k)), 1.0, 1e-12);
  st.prototypes.fill(0.0);
  EXPECT_THROW(st.normalize_prototypes(), NumericError);
}

TEST(Lars, ScalarExample) {
  std::vector<double> w{2.0}, g{1.0};
  lars_step({{"w", w, false}}, {{"w", g}}, {0.1, 0.0, 1.0, 0.0});
  EXPECT_NEAR(w[0], 1.8, 1e-15);
}

TEST(Lars, BiasTakesPlainStepAndZeroGradIsNoop) {
  std::vector<double> b{0.5, -1.0}, gb{0.2, 0.4};
  lars_step({{"b", b, true}}, {{"b", gb}}, {0.1, 0.5, 0.001, 0.0});
  EXPECT_NEAR(b[0], 0.5 - 0.02, 1e-15);
  EXPECT_NEAR(b[1], -1.0 - 0.04, 1e-15);
  std::vector<double> w{1.0, 2.0}, z{0.0, 0.0};
  lars_step({{"w", w, false}}, {{"w", z}}, {0.1, 0.0, 0.001, 0.0});
  EXPECT_EQ(w, (std::vector<double>{1.0, 2.0}));
  std::vector<double> zero_w{0.0}, g{3.0};
  lars_step({{"w", zero_w, false}}, {{"w", g}}, {0.1, 0.0, 1.0, 0.0});
  EXPECT_EQ(zero_w[0], 0.0);
}

TEST(Adam, FirstStepAndDecoupledDecay) {
  std::vector<double> w{1.0, -2.0, 3.0}, one{1.0, 1.0, 1.0}, zero{0.0, 0.0, 0.0};
  AdamState st;
  adam_step({{"w", w, false}}, {{"w", zero}}, {}, st);
  EXPECT_EQ(w, (std::vector<double>{1.0, -2.0, 3.0}));

  AdamState st2;
  AdamConfig c;
  c.lr = 0.01;
  adam_step({{"w", w, false}}, {{"w", one}}, c, st2);
  EXPECT_NEAR(w[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w[1], -2.0 - 0.01, 1e-9);

  std::vector<double> d{2.0};
  std::vector<double> dz{0.0};
  AdamState st3;
  AdamConfig wc;
  wc.lr = 0.1;
  wc.weight_decay = 0.5;
  wc.decoupled = true;
  adam_step({{"d", d, false}}, {{"d", dz}}, wc, st3);
  EXPECT_NEAR(d[0], 2.0 - 0.1 * 0.5 * 2.0, 1e-15);
}

TEST(SslStep, FullModelGradients) {
  for (auto method : {SslMethod::simclr, SslMethod::byol}) {
    for (std::uint64_t seed : {1, 2, 3}) {
      auto cfg = tiny_config(method, seed);
      cfg.input = {4, 1};
      cfg.encoder_hidden = {6};
      cfg.embedding = 4;
      cfg.head_hidden = 5;
      SslModel model = make_ssl_model(cfg);
      // Move the target away from the online net so the BYOL loss is not at its minimum.
      if (method == SslMethod::byol) {
        for (auto& p : model.target_encoder.params())
          for (auto& v : p.values) v += 0.1;
      }
      for (auto& l : model.encoder.layers)
        for (auto& b : l.bias) b = 0.05;
      const auto x = random_matrix(8, 16, seed + 5, 0.0, 1.0);
      auto step = detail::ssl_step(model, x, cfg, nullptr, true, false);
      auto params = model.online_params(method);
      const auto grads = step.grads.view();
      auto f = [&] { return detail::ssl_step(model, x, cfg, nullptr, false, false).loss; };
      for (std::size_t t = 0; t < params.size(); ++t) {
        // Stacked normalizations make the loss stiff: smaller h, and a floor above round-off at that h.
        EXPECT_LE(check_gradient(f, params[t].values, grads[t].values, 1e-5, 1e-5).max_rel, 1e-5)
            << method_name(method) << " " << params[t].name << " seed " << seed;
      }
    }
  }
}

TEST(Pretrain, OneEpochEmitsOneValRecord) {
  const auto tr = phantom_patches(24, 1), va = phantom_patches(8, 2);
  auto cfg = tiny_config(SslMethod::simclr, 1);
  cfg.epochs = 1;
  const auto r = pretrain(tr, va, cfg);
  EXPECT_EQ(std::count_if(r.history.begin(), r.history.end(), [](const LossRecord& l) { return l.split == "val"; }), 1);
  EXPECT_EQ(r.best_epoch, 1u);
}

TEST(Pretrain, BestIsArgminOfValidationAndDeterministic) {
  const auto tr = phantom_patches(40, 3), va = phantom_patches(10, 4);
  for (auto method : {SslMethod::simclr, SslMethod::byol, SslMethod::swav}) {
    auto cfg = tiny_config(method, 5);
    cfg.epochs = 4;
    const auto r = pretrain(tr, va, cfg);
    std::size_t arg = 0;
    double best = 1e300;
    for (const auto& h : r.history) {
      if (h.split == "val" && h.loss < best) {
        best = h.loss;
        arg = h.epoch;
      }
    }
    EXPECT_EQ(r.best_epoch, arg) << method_name(method);
    EXPECT_EQ(r.best.encoder, r.checkpoints[arg - 1].encoder);
    const auto again = pretrain(tr, va, cfg);
    EXPECT_EQ(again.best.encoder, r.best.encoder);
    ASSERT_EQ(again.history.size(), r.history.size());
    for (std::size_t i = 0; i < r.history.size(); ++i) EXPECT_EQ(again.history[i].loss, r.history[i].loss);
    if (method == SslMethod::swav) {
      for (std::size_t k = 0; k < r.best.prototypes.rows(); ++k) EXPECT_NEAR(l2_norm(r.best.prototypes.row(k)), 1.0, 1e-12);
    }
  }
}

TEST(Pretrain, ByolTrainLossDecreases) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto tr = phantom_patches(64, seed), va = phantom_patches(16, seed + 50);
    auto cfg = tiny_config(SslMethod::byol, seed);
    cfg.epochs = 20;
    const auto r = pretrain(tr, va, cfg);
    EXPECT_LT(r.history[2 * 19].loss, r.history[0].loss) << seed;
  }
}

TEST(Pretrain, Errors) {
  const auto some = phantom_patches(4, 1);
  auto cfg = tiny_config(SslMethod::byol, 1);
  EXPECT_THROW(pretrain(std::span<const Image16>(), some, cfg), DataError);
  EXPECT_THROW(pretrain(some, std::span<const Image16>(some.data(), 1), cfg), DataError);
  EXPECT_FALSE(parse_method("mae").has_value());
  EXPECT_EQ(parse_method("swav"), SslMethod::swav);
}
