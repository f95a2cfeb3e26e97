#include <cmath>

#include "doctest.h"
#include "manipshield/error.hpp"
#include "manipshield/losses.hpp"
#include "manipshield/rng.hpp"
#include "oracles.hpp"

using namespace manipshield;
using namespace manipshield::losses;
using doctest::Approx;

namespace {

ContrastiveBatch two_pairs(Eigen::Vector2d a, Eigen::Vector2d b, Eigen::Vector2d c, Eigen::Vector2d d) {
  ContrastiveBatch batch;
  batch.embeddings.resize(4, 2);
  batch.embeddings << a.transpose(), b.transpose(), c.transpose(), d.transpose();
  batch.pairs = {{0, 1}, {2, 3}};
  return batch;
}

ContrastiveBatch random_batch(Rng& rng, std::size_t pairs, Eigen::Index dim) {
  ContrastiveBatch b;
  b.embeddings.resize(static_cast<Eigen::Index>(2 * pairs), dim);
  for (Eigen::Index i = 0; i < b.embeddings.size(); ++i) b.embeddings.data()[i] = standard_normal(rng);
  for (std::size_t k = 0; k < pairs; ++k) b.pairs.emplace_back(2 * k, 2 * k + 1);
  return b;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kIo;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("contrastive hand values") {
    const auto b = two_pairs({1, 0}, {1, 0}, {0, 1}, {0, 1});
    CHECK(contrastive_loss(b, 1.0).loss == Approx(std::log(2.0) - 1).epsilon(1e-12));
    const auto same = two_pairs({1, 1}, {1, 1}, {1, 1}, {1, 1});
    CHECK(contrastive_loss(same, 0.3).loss == Approx(std::log(2.0)).epsilon(1e-12));
  }

  TEST_CASE("contrastive is scale invariant") {
    Rng rng(3);
    auto b = random_batch(rng, 3, 5);
    const auto a = contrastive_loss(b, 0.2);
    b.embeddings *= 3.0;
    const auto s = contrastive_loss(b, 0.2);
    CHECK(s.loss == Approx(a.loss).epsilon(1e-12));
    CHECK(oracle::relative_error(Eigen::Map<const Eigen::VectorXd>(s.grad.data(), s.grad.size()) * 3.0,
                                 Eigen::Map<const Eigen::VectorXd>(a.grad.data(), a.grad.size())) < 1e-9);
  }

  TEST_CASE("contrastive gradients match finite differences") {
    Rng rng(4);
    for (const auto anchoring : {Anchoring::kFirst, Anchoring::kSymmetric}) {
      for (int t = 0; t < 10; ++t) {
        auto b = random_batch(rng, 2 + t % 3, 4);
        const ContrastiveOptions opt{anchoring, t % 2 ? Normalizer::kEmbeddings : Normalizer::kPairs};
        const auto res = contrastive_loss(b, 0.5, opt);
        Eigen::VectorXd x = Eigen::Map<Eigen::VectorXd>(b.embeddings.data(), b.embeddings.size());
        auto f = [&](const Eigen::VectorXd& v) {
          auto c = b;
          c.embeddings = Eigen::Map<const Eigen::MatrixXd>(v.data(), b.embeddings.rows(), b.embeddings.cols());
          return contrastive_loss(c, 0.5, opt).loss;
        };
        const Eigen::VectorXd g = Eigen::Map<const Eigen::VectorXd>(res.grad.data(), res.grad.size());
        CHECK(oracle::relative_error(g, oracle::fd_gradient(f, x, 1e-5)) < 1e-4);
      }
    }
  }

  TEST_CASE("contrastive decreases as the positive gets closer") {
    auto b = two_pairs({1, 0}, {0, 1}, {-1, 0.3}, {0.2, -1});
    double prev = contrastive_loss(b, 0.5).loss;
    for (int step = 1; step <= 10; ++step) {
      const double t = step / 10.0;
      b.embeddings.row(1) = (1 - t) * Eigen::RowVector2d(0, 1) + t * Eigen::RowVector2d(1, 0);
      const double cur = contrastive_loss(b, 0.5).loss;
      CHECK(cur < prev);
      prev = cur;
    }
  }

  TEST_CASE("contrastive batch errors") {
    auto one = two_pairs({1, 0}, {1, 0}, {0, 1}, {0, 1});
    one.pairs = {{0, 1}};
    one.embeddings.conservativeResize(2, 2);
    CHECK(kind_of([&] { contrastive_loss(one, 1.0); }) == ErrorKind::kShape);
    auto zero = two_pairs({0, 0}, {1, 0}, {0, 1}, {0, 1});
    CHECK(kind_of([&] { contrastive_loss(zero, 1.0); }) == ErrorKind::kDomain);
    auto overlap = two_pairs({1, 0}, {1, 0}, {0, 1}, {0, 1});
    overlap.pairs = {{0, 1}, {1, 2}};
    CHECK_THROWS_AS(contrastive_loss(overlap, 1.0), Error);
  }

  TEST_CASE("focal loss") {
    CHECK(focal_loss(0.5, true, 0.25, 2).loss == Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
    CHECK(focal_loss(1.0, true, 0.25, 2).loss <= 0.25 * 1e-6);
    CHECK(focal_loss(0.0, false, 0.25, 2).loss <= 0.25 * 1e-6);
    CHECK(focal_loss(1.0, true, 0.25, 2).grad == 0.0);
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
      const double p = 0.01 + 0.98 * uniform01(rng);
      CHECK(focal_loss(p, true, 1, 0).loss == -std::log(p));
      CHECK(focal_loss(p, false, 1, 0).loss == -std::log(1 - p));
      const bool target = i % 2;
      const double h = 1e-6;
      const double fd = (focal_loss(p + h, target, 0.25, 2).loss - focal_loss(p - h, target, 0.25, 2).loss) / (2 * h);
      CHECK(focal_loss(p, target, 0.25, 2).grad == Approx(fd).epsilon(1e-5));
    }
  }

  TEST_CASE("bbox mse") {
    const std::vector<Box> zero = {{0, 0, 0, 0}}, one = {{1, 1, 1, 1}};
    CHECK(bbox_mse(zero, one).loss == 1.0);
    CHECK(bbox_mse(one, one).loss == 0.0);
    const std::vector<Box> p = {{0.1, 0.2, 0.4, 0.6}, {0.3, 0.3, 0.9, 0.8}};
    const std::vector<Box> g = {{0.0, 0.1, 0.5, 0.5}, {0.2, 0.4, 0.7, 0.9}};
    std::vector<Box> p2 = p, g2 = g;
    p2.insert(p2.end(), p.begin(), p.end());
    g2.insert(g2.end(), g.begin(), g.end());
    CHECK(bbox_mse(p2, g2).loss == Approx(bbox_mse(p, g).loss).epsilon(1e-15));
    const auto r = bbox_mse(p, g);
    CHECK(r.grad[0][0] == Approx(2 * (0.1 - 0.0) / 8));
    CHECK(kind_of([&] { bbox_mse(p, one); }) == ErrorKind::kShape);
  }

  TEST_CASE("cue cross-entropy") {
    const Vector uniform = Vector::Zero(12);
    CHECK(cue_cross_entropy(uniform, 3).loss == Approx(std::log(12.0) / 12).epsilon(1e-12));
    Vector sharp = Vector::Zero(12);
    sharp[5] = 50;
    CHECK(cue_cross_entropy(sharp, 5).loss < 1e-20);
    Rng rng(1);
    Vector l(12);
    for (auto& x : l) x = standard_normal(rng);
    const Vector shifted = l.array() + 13.0;
    CHECK(cue_cross_entropy(shifted, 2).loss == Approx(cue_cross_entropy(l, 2).loss).epsilon(1e-12));
    const auto r = cue_cross_entropy(l, 2);
    auto f = [&](const Eigen::VectorXd& v) { return cue_cross_entropy(v, 2).loss; };
    CHECK(oracle::relative_error(r.grad, oracle::fd_gradient(f, l, 1e-5)) < 1e-6);
    CHECK(kind_of([&] { cue_cross_entropy(l, 12); }) == ErrorKind::kIndex);
  }

  TEST_CASE("total loss") {
    LossConfig cfg;
    CHECK(total_loss({0.1, 0.2, 0.3}, cfg) == Approx(0.6).epsilon(1e-15));
    cfg.lambda_binary = cfg.lambda_bbox = cfg.lambda_cue = 0;
    CHECK(total_loss({5, 6, 7}, cfg) == 0.0);
    cfg.lambda_binary = 2;
    cfg.lambda_bbox = 0.5;
    cfg.lambda_cue = 1;
    CHECK(total_loss({1, 2, 3}, cfg) == 6.0);
  }

  TEST_CASE("config validation") {
    LossConfig cfg;
    cfg.validate();
    cfg.tau = 0;
    CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::kParameter);
    cfg = {};
    cfg.alpha = 1.5;
    CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::kParameter);
    cfg = {};
    cfg.lambda_cue = -1;
    CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::kParameter);
  }
}
