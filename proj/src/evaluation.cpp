#include "casdiff/evaluation.hpp"

#include <cmath>
#include <complex>

#include <unsupported/Eigen/MatrixFunctions>

#include "casdiff/image_ops.hpp"
#include "casdiff/optim.hpp"
#include "casdiff/rng.hpp"

namespace casdiff {

void PosteriorBatch::validate(double tol) const {
  if (probs.rows() < 1 || probs.cols() < 1) throw InvalidArgument("posteriors: empty batch");
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double sum = 0;
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double p = probs(i, k);
      if (!(p >= -tol && p <= 1 + tol)) throw InvalidArgument("posteriors: entry outside [0,1] in row " + std::to_string(i));
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol) throw InvalidArgument("posteriors: row " + std::to_string(i) + " does not sum to 1");
  }
}

double inception_score(const PosteriorBatch& posteriors) {
  posteriors.validate();
  const auto& p = posteriors.probs;
  const Eigen::RowVectorXd marginal = p.colwise().mean();
  double kl_sum = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double kl = 0;
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      if (p(i, k) > 0) kl += p(i, k) * (std::log(p(i, k)) - std::log(marginal(k)));
    }
    kl_sum += kl;
  }
  return std::exp(kl_sum / static_cast<double>(p.rows()));
}

FeatureStats::FeatureStats(int dim) : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::MatrixXd::Zero(dim, dim)) {}

Eigen::MatrixXd FeatureStats::cov() const {
  if (n_ <= 1) return Eigen::MatrixXd::Zero(dim(), dim());
  Eigen::MatrixXd c = m2_ / static_cast<double>(n_ - 1);
  return 0.5 * (c + c.transpose());
}

void FeatureStats::add(const Eigen::VectorXd& x) {
  if (x.size() != mean_.size()) throw InvalidArgument("FeatureStats: dimension mismatch");
  ++n_;
  const Eigen::VectorXd delta = x - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_.noalias() += delta * (x - mean_).transpose();
}

void FeatureStats::merge(const FeatureStats& other) {
  if (other.dim() != dim()) throw InvalidArgument("FeatureStats: dimension mismatch in merge");
  if (other.n_ == 0) return;
  if (n_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(other.n_), n = na + nb;
  const Eigen::VectorXd delta = other.mean_ - mean_;
  m2_ += other.m2_ + delta * delta.transpose() * (na * nb / n);
  mean_ += delta * (nb / n);
  n_ += other.n_;
}

Eigen::MatrixXd sqrtm(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw InvalidArgument("sqrtm: matrix must be square");
  const Eigen::MatrixXcd c = m.cast<std::complex<double>>();
  const Eigen::MatrixXcd s = c.sqrt();
  const double re = s.real().cwiseAbs().maxCoeff();
  const double im = s.imag().cwiseAbs().maxCoeff();
  if (!std::isfinite(re) || !std::isfinite(im)) throw NumericFailure("sqrtm: non-finite result");
  if (im > 1e-3 * std::max(re, 1e-300)) {
    throw NumericFailure("sqrtm: imaginary residue " + std::to_string(im) + " exceeds 1e-3 of the real part");
  }
  return s.real();
}

FidResult fid_detailed(const FeatureStats& real, const FeatureStats& gen) {
  if (real.dim() != gen.dim()) throw InvalidArgument("fid: feature dimensions differ");
  const int d = real.dim();
  FidResult out;
  if (real.n() < 2 || gen.n() < 2) {
    out.degenerate = true;
    out.warning = "fewer than 2 samples; covariance is zero and only jitter remains";
  } else if (real.n() <= d || gen.n() <= d) {
    out.degenerate = true;
    out.warning = "fewer samples than feature dimensions; covariance is rank deficient and jitter-regularized";
  }
  auto jittered = [d](const FeatureStats& s) {
    Eigen::MatrixXd c = s.cov();
    const double eps = std::max(1e-6 * c.trace() / d, 1e-12);
    c.diagonal().array() += eps;
    return c;
  };
  const Eigen::MatrixXd cr = jittered(real), cg = jittered(gen);
  const Eigen::MatrixXd s = sqrtm(cr * cg);
  const double value = (real.mean() - gen.mean()).squaredNorm() + cr.trace() + cg.trace() - 2.0 * s.trace();
  if (!std::isfinite(value)) throw NumericFailure("fid: non-finite result");
  out.fid = std::max(value, 0.0);
  return out;
}

double fid(const FeatureStats& real, const FeatureStats& gen) { return fid_detailed(real, gen).fid; }

FeatureStats accumulate_features(const FeatureExtractor& extractor, const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw InvalidArgument("accumulate_features: no images");
  FeatureStats stats(extractor.feature_dim());
  constexpr std::size_t chunk = 128;
  for (std::size_t first = 0; first < images.size(); first += chunk) {
    const std::vector<Tensor<float>> part(images.begin() + static_cast<long>(first),
                                          images.begin() + static_cast<long>(std::min(images.size(), first + chunk)));
    std::vector<Eigen::VectorXd> feats;
    extractor.run(part, &feats, nullptr);
    for (std::size_t i = 0; i < feats.size(); ++i) {
      if (!feats[i].allFinite()) throw NumericFailure("accumulate_features: non-finite feature for image " +
                                                      std::to_string(first + i));
      stats.add(feats[i]);
    }
  }
  return stats;
}

ToyClassifier::ToyClassifier(std::uint64_t seed)
    : store_(seed),
      c1_(store_, "c1", 3, 16, 3, 2),
      c2_(store_, "c2", 16, 32, 3, 2),
      c3_(store_, "c3", 32, 32, 3, 2),
      head_(store_, "head", 32, 9) {}

namespace {

Tensor<float> to_classifier_input(const std::vector<Tensor<float>>& images) {
  std::vector<Tensor<float>> scaled;
  scaled.reserve(images.size());
  for (const auto& im : images) {
    if (im.rank() != 3 || im.dim(0) != 3 || im.dim(1) != im.dim(2) || im.dim(1) % 32 != 0)
      throw InvalidArgument("classifier: images must be (3,H,H) with H a multiple of 32");
    scaled.push_back(im.dim(1) == 32 ? im : downsample_area(im, im.dim(1) / 32));
  }
  return stack<float>(scaled);
}

}  // namespace

Var<float> ToyClassifier::logits(const Tensor<float>& batch, Var<float>* features) const {
  Var<float> h = ops::silu(c1_(constant(batch)));
  h = ops::silu(c2_(h));
  h = ops::silu(c3_(h));
  Var<float> f = ops::global_avg_pool(h);
  if (features) *features = f;
  return head_(f);
}

void ToyClassifier::run(const std::vector<Tensor<float>>& images, std::vector<Eigen::VectorXd>* features,
                        PosteriorBatch* posteriors) const {
  NoGradGuard no_grad;
  const Tensor<float> batch = to_classifier_input(images);
  Var<float> f;
  const Var<float> z = logits(batch, &f);
  const int n = static_cast<int>(images.size());
  if (features) {
    features->clear();
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd v(32);
      for (int k = 0; k < 32; ++k) v(k) = f->value[static_cast<std::size_t>(i * 32 + k)];
      features->push_back(std::move(v));
    }
  }
  if (posteriors) {
    const Tensor<float> p = ops::softmax_rows(z->value);
    posteriors->probs.resize(n, 9);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < 9; ++k) posteriors->probs(i, k) = p[static_cast<std::size_t>(i * 9 + k)];
  }
}

void ToyClassifier::train(const std::vector<Tensor<float>>& images, const std::vector<int>& labels, int steps,
                          int batch_size, double lr, std::uint64_t seed) {
  if (images.size() != labels.size() || images.empty()) throw InvalidArgument("classifier: need one label per image");
  const Tensor<float> all = to_classifier_input(images);
  const std::size_t item = all.size() / images.size();
  Optimizer opt(OptimizerConfig{});
  Rng rng(seed);
  for (int s = 0; s < steps; ++s) {
    Tensor<float> batch({batch_size, 3, 32, 32});
    std::vector<int> ys;
    for (int b = 0; b < batch_size; ++b) {
      const std::size_t idx = rng.below(images.size());
      std::copy_n(all.data() + idx * item, item, batch.data() + static_cast<std::size_t>(b) * item);
      ys.push_back(labels[idx]);
    }
    store_.zero_grad();
    Var<float> loss = ops::softmax_cross_entropy(logits(batch, nullptr), ys);
    backward(loss);
    opt.step(store_, lr);
  }
  store_.zero_grad();
}

double ToyClassifier::accuracy(const std::vector<Tensor<float>>& images, const std::vector<int>& labels) const {
  PosteriorBatch p;
  run(images, nullptr, &p);
  int correct = 0;
  for (Eigen::Index i = 0; i < p.probs.rows(); ++i) {
    Eigen::Index best;
    p.probs.row(i).maxCoeff(&best);
    correct += static_cast<int>(best) == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

EvalResult evaluate_images(const FeatureExtractor& extractor, const std::vector<Tensor<float>>& generated,
                           const FeatureStats& reference) {
  EvalResult r;
  PosteriorBatch post;
  extractor.run(generated, nullptr, &post);
  r.is = inception_score(post);
  const FidResult f = fid_detailed(reference, accumulate_features(extractor, generated));
  r.fid = f.fid;
  r.warning = f.warning;
  r.n = static_cast<std::int64_t>(generated.size());
  return r;
}

}  // namespace casdiff
