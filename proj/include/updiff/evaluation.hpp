#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "updiff/data.hpp"

namespace updiff {

/// Gaussian fit of a feature distribution.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Frechet distance between two Gaussians:
///   |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
/// The trace of the square root is taken from the eigenvalues of the symmetric
/// product S_a^{1/2} S_b S_a^{1/2}; eigenvalues in [-1e-6, 0) are clamped to 0.
/// Throws on dimension mismatch or covariances that are indefinite beyond that tolerance.
double fid(const FeatureStats& a, const FeatureStats& b);

/// Maps a (3, H, W) image in [-1, 1] to a feature vector.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual Eigen::VectorXd extract(const torch::Tensor& image) const = 0;
  virtual int64_t dim() const = 0;
};

/// Per-channel spatial means (d = 3).
class ChannelMeanExtractor : public FeatureExtractor {
 public:
  Eigen::VectorXd extract(const torch::Tensor& image) const override;
  int64_t dim() const override { return 3; }
};

/// Frozen random convolutional network with weights drawn from a fixed seed
/// (platform-independent generator). Features are the global average of the
/// last layer's ReLU activations; `layer_features` exposes every layer for
/// perceptual distances.
class RandomConvExtractor : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(uint64_t seed = 20240717, std::vector<int64_t> widths = {16, 32, 48});

  Eigen::VectorXd extract(const torch::Tensor& image) const override;
  int64_t dim() const override { return widths_.back(); }

  /// Activations of every layer, (1, C_l, H_l, W_l) each, in float64.
  std::vector<torch::Tensor> layer_features(const torch::Tensor& image) const;

 private:
  std::vector<int64_t> widths_;
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

/// Sample mean and unbiased covariance of extractor outputs. Needs >= 2 images.
FeatureStats compute_feature_stats(const std::vector<torch::Tensor>& images, const FeatureExtractor& extractor);

/// Image-pair distance in the role of a learned perceptual metric.
class PerceptualDistance {
 public:
  virtual ~PerceptualDistance() = default;
  virtual double distance(const torch::Tensor& a, const torch::Tensor& b) const = 0;
};

/// Mean over layers of the squared distance between channel-normalized
/// activations of a RandomConvExtractor.
class RandomFeaturePerceptualDistance : public PerceptualDistance {
 public:
  explicit RandomFeaturePerceptualDistance(std::shared_ptr<const RandomConvExtractor> net);
  double distance(const torch::Tensor& a, const torch::Tensor& b) const override;

 private:
  std::shared_ptr<const RandomConvExtractor> net_;
};

/// Change detector: (I_pre, I_post) -> (1, H, W) binary map.
class ChangeDetector {
 public:
  virtual ~ChangeDetector() = default;
  virtual torch::Tensor detect(const torch::Tensor& pre, const torch::Tensor& post) const = 0;
};

constexpr double kDefaultChangeThreshold = 0.25;

/// Channel-mean absolute difference, Gaussian-blurred, thresholded (> threshold).
/// threshold must lie in (0, 2]; images are (3, H, W) in [-1, 1].
torch::Tensor derive_change_map(const torch::Tensor& pre, const torch::Tensor& post,
                                double threshold = kDefaultChangeThreshold, double sigma = 1.0);

class DifferenceChangeDetector : public ChangeDetector {
 public:
  explicit DifferenceChangeDetector(double threshold = kDefaultChangeThreshold, double sigma = 1.0)
      : threshold_(threshold), sigma_(sigma) {}
  torch::Tensor detect(const torch::Tensor& pre, const torch::Tensor& post) const override {
    return derive_change_map(pre, post, threshold_, sigma_);
  }

 private:
  double threshold_;
  double sigma_;
};

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Fractions in [0, 1]. Empty denominators: P = 0 when TP+FP = 0, R = 0 when
/// TP+FN = 0, F1 = 0 when P+R = 0, IoU = 1 when both maps are empty.
struct CdMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0, iou = 0.0;
};

ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& truth);
CdMetrics cd_metrics(const ConfusionCounts& c);
/// Throws if either map is non-binary or the shapes differ.
CdMetrics cd_metrics(const torch::Tensor& pred, const torch::Tensor& truth);

/// Produces post-change predictions for a batch: (B,3,H,W), (B,1,H,W) -> (B,3,H,W).
using PostImageGenerator = std::function<torch::Tensor(const torch::Tensor& pre, const torch::Tensor& change_map)>;

struct SampleScore {
  std::string id;
  CdMetrics cd;
  double perceptual = 0.0;
};

struct EvaluationReport {
  int64_t samples = 0;
  double fid = 0.0;
  double perceptual = 0.0;
  CdMetrics cd;  ///< mean over samples
  std::vector<SampleScore> per_sample;
  std::vector<std::pair<std::string, std::string>> extra;  ///< appended to the key=value block
};

struct EvaluationTools {
  std::shared_ptr<const FeatureExtractor> extractor;
  std::shared_ptr<const PerceptualDistance> perceptual;
  std::shared_ptr<const ChangeDetector> detector;

  /// Random-conv extractor + perceptual distance and the difference detector.
  static EvaluationTools defaults();
};

/// Generates I_post for every triplet (in batches of `batch_size`) and scores
/// FID(real post, generated post), mean perceptual distance and mean CD metrics
/// of detector(I_pre, generated) against the input change map.
EvaluationReport evaluate(const std::vector<Triplet>& triplets, const PostImageGenerator& generate,
                          const EvaluationTools& tools, int64_t batch_size = 16);

/// key=value block followed by a per-sample table. Percentages with two decimals.
std::string format_report(const EvaluationReport& report);

}  // namespace updiff
