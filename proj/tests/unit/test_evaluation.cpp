#include <doctest.h>

#include <cmath>
#include <limits>

#include "casdiff/data.hpp"
#include "casdiff/evaluation.hpp"
#include "casdiff/png_io.hpp"

using namespace casdiff;

namespace {

PosteriorBatch rows(std::initializer_list<std::initializer_list<double>> r) {
  PosteriorBatch p;
  p.probs.resize(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) p.probs(i, j++) = v;
    ++i;
  }
  return p;
}

FeatureStats stats_of(const std::vector<Eigen::VectorXd>& xs) {
  FeatureStats s(static_cast<int>(xs.front().size()));
  for (const auto& x : xs) s.add(x);
  return s;
}

Eigen::MatrixXd random_spd(int d, Rng& rng) {
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

std::vector<Tensor<float>> toy_images(int n, int res) {
  std::vector<Tensor<float>> out;
  for (int i = 0; i < n; ++i) out.push_back(image_to_tensor(render_toy_image(i % 3, (i / 3) % 3, (i / 9) % 4, res)));
  return out;
}

}  // namespace

TEST_CASE("inception score oracles") {
  CHECK(inception_score(rows({{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}})) == doctest::Approx(1.0));
  PosteriorBatch eye;
  eye.probs = Eigen::MatrixXd::Identity(5, 5);
  CHECK(inception_score(eye) == doctest::Approx(5.0).epsilon(1e-12));
  // marginal [0.75, 0.25]; KL terms log(4/3) and log(4/3)/2, mean 3/4 log(4/3)
  CHECK(inception_score(rows({{1, 0}, {0.5, 0.5}})) == doctest::Approx(std::pow(4.0 / 3.0, 0.75)).epsilon(1e-12));
  CHECK_THROWS_AS(inception_score(rows({{0.7, 0.7}})), InvalidArgument);
  CHECK_THROWS_AS(inception_score(rows({{1.2, -0.2}})), InvalidArgument);
}

TEST_CASE("inception score lies in [1, K] and ignores row order") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    PosteriorBatch p;
    p.probs.resize(7, 4);
    for (int i = 0; i < 7; ++i) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += (p.probs(i, k) = rng.uniform() * rng.uniform());
      p.probs.row(i) /= s;
    }
    const double is = inception_score(p);
    CHECK(is >= 1.0 - 1e-12);
    CHECK(is <= 4.0 + 1e-12);
    PosteriorBatch q = p;
    q.probs.row(0).swap(q.probs.row(6));
    q.probs.row(2).swap(q.probs.row(3));
    CHECK(inception_score(q) == doctest::Approx(is).epsilon(1e-12));
  }
}

TEST_CASE("feature stats") {
  Eigen::VectorXd v(3);
  v << 1, 2, 3;
  const auto one = stats_of({v});
  CHECK(one.mean() == v);
  CHECK(one.cov().isZero());

  Rng rng(4);
  std::vector<Eigen::VectorXd> xs;
  for (int i = 0; i < 500; ++i) xs.push_back(Eigen::Vector3d(rng.normal(), rng.normal() * 2, rng.uniform()));
  FeatureStats a(3), b(3);
  for (int i = 0; i < 500; ++i) (i < 137 ? a : b).add(xs[static_cast<std::size_t>(i)]);
  a.merge(b);
  const auto whole = stats_of(xs);
  CHECK((a.mean() - whole.mean()).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((a.cov() - whole.cov()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("feature stats recover a known 2-D Gaussian") {
  Rng rng(5);
  const double m0 = 1.0, m1 = -2.0, s0 = 1.5, s1 = 0.5, rho = 0.6;
  const int n = 100000;
  FeatureStats st(2);
  for (int i = 0; i < n; ++i) {
    const double u = rng.normal(), w = rng.normal();
    st.add(Eigen::Vector2d(m0 + s0 * u, m1 + s1 * (rho * u + std::sqrt(1 - rho * rho) * w)));
  }
  CHECK(std::abs(st.mean()(0) - m0) < 4 * s0 / std::sqrt(n));
  CHECK(std::abs(st.mean()(1) - m1) < 4 * s1 / std::sqrt(n));
  const auto c = st.cov();
  CHECK(std::abs(c(0, 0) - s0 * s0) < 0.05 * s0 * s0);
  CHECK(std::abs(c(1, 1) - s1 * s1) < 0.05 * s1 * s1);
  CHECK(std::abs(c(0, 1) - rho * s0 * s1) < 0.05 * rho * s0 * s1);
}

TEST_CASE("fid oracles") {
  Rng rng(6);
  std::vector<Eigen::VectorXd> xs, ys;
  for (int i = 0; i < 200; ++i) {
    Eigen::VectorXd x(4), y(4);
    for (int k = 0; k < 4; ++k) {
      x(k) = rng.normal();
      y(k) = 0.5 + 1.3 * rng.normal();
    }
    xs.push_back(x);
    ys.push_back(y);
  }
  const auto sx = stats_of(xs), sy = stats_of(ys);

  CHECK(std::abs(fid(sx, sx)) < 1e-6);
  CHECK(std::abs(fid(sx, sy) - fid(sy, sx)) < 1e-8);
  CHECK(fid(sx, sy) > 0.0);

  const double a = std::sqrt(0.5);
  Eigen::VectorXd p(1), q(1), r(1), s(1);
  p << -a;
  q << a;
  r << 1 - a;
  s << 1 + a;
  CHECK(fid(stats_of({p, q}), stats_of({r, s})) == doctest::Approx(1.0).epsilon(1e-9));

  FeatureStats d3(3);
  CHECK_THROWS_AS(fid(sx, d3), InvalidArgument);
}

TEST_CASE("fid flags fewer samples than dimensions") {
  Rng rng(7);
  std::vector<Eigen::VectorXd> xs;
  for (int i = 0; i < 3; ++i) xs.push_back(Eigen::VectorXd::Random(5));
  const auto r = fid_detailed(stats_of(xs), stats_of(xs));
  CHECK(r.degenerate);
  CHECK_FALSE(r.warning.empty());
  CHECK(r.fid >= 0.0);
}

TEST_CASE("sqrtm reconstruction residual") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd m = random_spd(8, rng) * random_spd(8, rng);
    const Eigen::MatrixXd s = sqrtm(m);
    CHECK((s * s - m).norm() / m.norm() < 1e-6);
  }
  Eigen::Matrix2d neg;
  neg << -1, 0, 0, 1;
  CHECK_THROWS_AS(sqrtm(neg), NumericFailure);
}

TEST_CASE("toy classifier features and self-comparison") {
  const ToyClassifier clf(3);
  const auto imgs = toy_images(72, 64);
  std::vector<Eigen::VectorXd> f1, f2;
  PosteriorBatch post;
  clf.run(imgs, &f1, &post);
  clf.run(imgs, &f2, nullptr);
  REQUIRE(f1.size() == imgs.size());
  CHECK(f1[0].size() == 32);
  CHECK(f1 == f2);
  CHECK_NOTHROW(post.validate());

  const auto ref = accumulate_features(clf, imgs);
  const auto res = evaluate_images(clf, imgs, ref);
  CHECK(res.fid < 1e-3);
  CHECK(res.n == 72);
  CHECK(res.is >= 1.0);

  auto bad = imgs;
  bad[5][0] = std::numeric_limits<float>::quiet_NaN();
  try {
    accumulate_features(clf, bad);
    FAIL("expected NumericFailure");
  } catch (const NumericFailure& e) {
    CHECK(std::string(e.what()).find('5') != std::string::npos);
  }
}

TEST_CASE("toy classifier learns the nine classes") {
  ToyClassifier clf(1);
  std::vector<Tensor<float>> imgs;
  std::vector<int> labels;
  for (int i = 0; i < 72; ++i) {
    const int color = i % 3, shape = (i / 3) % 3;
    imgs.push_back(image_to_tensor(render_toy_image(color, shape, (i / 9) % 4, 32)));
    labels.push_back(color * 3 + shape);
  }
  clf.train(imgs, labels, 400, 24, 3e-3, 2);
  CHECK(clf.accuracy(imgs, labels) >= 0.9);
}
