#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "casdiff/layers.hpp"

namespace casdiff {

/// Per-image label posteriors, one row per image.
struct PosteriorBatch {
  Eigen::MatrixXd probs;  // n x K

  /// Throws InvalidArgument unless entries lie in [0,1] and rows sum to 1
  /// within `tol`.
  void validate(double tol = 1e-6) const;
};

/// exp(mean_i KL(p_i || mean_j p_j)), single split.
double inception_score(const PosteriorBatch& posteriors);

/// Streaming mean and covariance. Merging is exact up to rounding, so
/// shards may be accumulated independently.
class FeatureStats {
 public:
  FeatureStats() = default;
  explicit FeatureStats(int dim);

  int dim() const { return static_cast<int>(mean_.size()); }
  std::int64_t n() const { return n_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  /// Unbiased (divisor n-1); zero for n <= 1.
  Eigen::MatrixXd cov() const;

  void add(const Eigen::VectorXd& x);
  void merge(const FeatureStats& other);

 private:
  std::int64_t n_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

/// Principal square root of a matrix whose eigenvalues are real and
/// non-negative (e.g. a product of two SPD matrices), via complex Schur.
/// Throws NumericFailure when the imaginary residue exceeds 1e-3 of the
/// real part.
Eigen::MatrixXd sqrtm(const Eigen::MatrixXd& m);

struct FidResult {
  double fid = 0;
  bool degenerate = false;  // fewer samples than dimensions on either side
  std::string warning;
};

FidResult fid_detailed(const FeatureStats& real, const FeatureStats& gen);
double fid(const FeatureStats& real, const FeatureStats& gen);

/// Source of features (for FID) and class posteriors (for IS).
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual int feature_dim() const = 0;
  virtual int num_classes() const = 0;
  /// images are (3,H,W) in [-1,1]. Either output may be null.
  virtual void run(const std::vector<Tensor<float>>& images, std::vector<Eigen::VectorXd>* features,
                   PosteriorBatch* posteriors) const = 0;
};

/// Throws NumericFailure naming the first image with a non-finite feature.
FeatureStats accumulate_features(const FeatureExtractor& extractor, const std::vector<Tensor<float>>& images);

/// Small CNN classifier over the 9 toy (color, shape) classes. Inputs are
/// area-downsampled to 32x32; features are the pooled 32-channel activations.
class ToyClassifier final : public FeatureExtractor {
 public:
  explicit ToyClassifier(std::uint64_t seed = 0);

  std::string id() const override { return "toy-cnn-v1"; }
  int feature_dim() const override { return 32; }
  int num_classes() const override { return 9; }
  void run(const std::vector<Tensor<float>>& images, std::vector<Eigen::VectorXd>* features,
           PosteriorBatch* posteriors) const override;

  /// Adam on softmax cross-entropy; deterministic in `seed`.
  void train(const std::vector<Tensor<float>>& images, const std::vector<int>& labels, int steps, int batch_size,
             double lr, std::uint64_t seed);
  double accuracy(const std::vector<Tensor<float>>& images, const std::vector<int>& labels) const;

 private:
  Var<float> logits(const Tensor<float>& batch, Var<float>* features) const;

  ParameterStore<float> store_;
  Conv2d<float> c1_, c2_, c3_;
  Linear<float> head_;
};

struct EvalResult {
  double is = 0;
  double fid = 0;
  std::int64_t n = 0;
  std::string warning;
};

EvalResult evaluate_images(const FeatureExtractor& extractor, const std::vector<Tensor<float>>& generated,
                           const FeatureStats& reference);

}  // namespace casdiff
