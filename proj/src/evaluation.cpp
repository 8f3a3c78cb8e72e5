#include "updiff/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>

namespace updiff {

namespace {

constexpr double kEigenTolerance = 1e-6;

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -kEigenTolerance * scale)
      throw std::invalid_argument(std::string(what) + " is not positive semi-definite (eigenvalue " +
                                  std::to_string(ev[i]) + ")");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double normal01(std::mt19937_64& rng) {
  const double u1 = 1.0 - static_cast<double>(rng() >> 11) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

torch::Tensor as_batch64(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw std::invalid_argument("expected a (3, H, W) image");
  return image.detach().to(torch::kFloat64).unsqueeze(0);
}

}  // namespace

double fid(const FeatureStats& a, const FeatureStats& b) {
  const auto d = a.mean.size();
  if (b.mean.size() != d || a.cov.rows() != d || a.cov.cols() != d || b.cov.rows() != d || b.cov.cols() != d)
    throw std::invalid_argument("fid: feature statistics have mismatched dimensions");
  const Eigen::MatrixXd sqrt_a = symmetric_sqrt(a.cov, "covariance A");
  symmetric_sqrt(b.cov, "covariance B");  // validation only
  const Eigen::MatrixXd product = sqrt_a * b.cov * sqrt_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (product + product.transpose()), Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  double trace_sqrt = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()[i];
    if (ev < -kEigenTolerance * scale)
      throw std::invalid_argument("fid: covariance product has a negative eigenvalue " + std::to_string(ev));
    trace_sqrt += std::sqrt(std::max(ev, 0.0));
  }
  const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
  return std::max(value, 0.0);
}

Eigen::VectorXd ChannelMeanExtractor::extract(const torch::Tensor& image) const {
  auto m = as_batch64(image).mean({0, 2, 3}).contiguous();
  return Eigen::Map<const Eigen::VectorXd>(m.data_ptr<double>(), 3);
}

RandomConvExtractor::RandomConvExtractor(uint64_t seed, std::vector<int64_t> widths) : widths_(std::move(widths)) {
  if (widths_.empty()) throw std::invalid_argument("random extractor needs at least one layer");
  std::mt19937_64 rng(seed);
  int64_t in = 3;
  for (auto out : widths_) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(in * 9));
    auto w = torch::empty({out, in, 3, 3}, torch::kFloat64);
    auto* pw = w.data_ptr<double>();
    for (int64_t i = 0; i < w.numel(); ++i) pw[i] = normal01(rng) * std_dev;
    auto b = torch::empty({out}, torch::kFloat64);
    auto* pb = b.data_ptr<double>();
    for (int64_t i = 0; i < out; ++i) pb[i] = 0.1 * normal01(rng);
    weights_.push_back(w);
    biases_.push_back(b);
    in = out;
  }
}

std::vector<torch::Tensor> RandomConvExtractor::layer_features(const torch::Tensor& image) const {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> out;
  auto h = as_batch64(image);
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    h = torch::relu(torch::conv2d(h, weights_[i], biases_[i], /*stride=*/2, /*padding=*/1));
    out.push_back(h);
  }
  return out;
}

Eigen::VectorXd RandomConvExtractor::extract(const torch::Tensor& image) const {
  auto pooled = layer_features(image).back().mean({0, 2, 3}).contiguous();
  return Eigen::Map<const Eigen::VectorXd>(pooled.data_ptr<double>(), pooled.numel());
}

FeatureStats compute_feature_stats(const std::vector<torch::Tensor>& images, const FeatureExtractor& extractor) {
  if (images.size() < 2) throw std::invalid_argument("feature statistics need at least 2 images");
  const auto n = static_cast<Eigen::Index>(images.size());
  Eigen::MatrixXd feats(n, extractor.dim());
  for (Eigen::Index i = 0; i < n; ++i) feats.row(i) = extractor.extract(images[static_cast<std::size_t>(i)]);
  FeatureStats s;
  s.mean = feats.colwise().mean();
  const Eigen::MatrixXd centered = feats.rowwise() - s.mean.transpose();
  s.cov = centered.transpose() * centered / static_cast<double>(n - 1);
  return s;
}

RandomFeaturePerceptualDistance::RandomFeaturePerceptualDistance(std::shared_ptr<const RandomConvExtractor> net)
    : net_(std::move(net)) {}

double RandomFeaturePerceptualDistance::distance(const torch::Tensor& a, const torch::Tensor& b) const {
  const auto fa = net_->layer_features(a), fb = net_->layer_features(b);
  double total = 0.0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    auto na = fa[l] / (fa[l].pow(2).sum(1, true).sqrt() + 1e-10);
    auto nb = fb[l] / (fb[l].pow(2).sum(1, true).sqrt() + 1e-10);
    total += (na - nb).pow(2).sum(1).mean().item<double>();
  }
  return total / static_cast<double>(fa.size());
}

torch::Tensor derive_change_map(const torch::Tensor& pre, const torch::Tensor& post, double threshold, double sigma) {
  if (pre.dim() != 3 || pre.size(0) != 3 || !pre.sizes().equals(post.sizes()))
    throw std::invalid_argument("derive_change_map: images must be aligned (3, H, W) tensors");
  if (!(threshold > 0.0 && threshold <= 2.0)) throw std::invalid_argument("change threshold must lie in (0, 2]");
  torch::NoGradGuard guard;
  auto diff = (pre.to(torch::kFloat64) - post.to(torch::kFloat64)).abs().mean(0, true).unsqueeze(0);
  if (sigma > 0.0) {
    const auto radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    auto x = torch::arange(-radius, radius + 1, torch::kFloat64);
    auto k = torch::exp(-x.pow(2) / (2.0 * sigma * sigma));
    k = k / k.sum();
    namespace F = torch::nn::functional;
    auto padded = F::pad(diff, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
    padded = torch::conv2d(padded, k.view({1, 1, 1, -1}));
    diff = torch::conv2d(padded, k.view({1, 1, -1, 1})).clamp(0.0, 2.0);
  }
  return (diff.squeeze(0) > threshold).to(torch::kFloat32);
}

ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& truth) {
  if (!pred.sizes().equals(truth.sizes())) throw std::invalid_argument("cd_metrics: maps have different shapes");
  auto binary = [](const torch::Tensor& m) { return (m == 0).logical_or(m == 1).all().item<bool>(); };
  if (!binary(pred) || !binary(truth)) throw std::invalid_argument("cd_metrics: maps must be binary");
  auto p = pred > 0.5, t = truth > 0.5;
  ConfusionCounts c;
  c.tp = p.logical_and(t).sum().item<int64_t>();
  c.fp = p.logical_and(t.logical_not()).sum().item<int64_t>();
  c.fn = p.logical_not().logical_and(t).sum().item<int64_t>();
  c.tn = pred.numel() - c.tp - c.fp - c.fn;
  return c;
}

CdMetrics cd_metrics(const ConfusionCounts& c) {
  CdMetrics m;
  const auto tp = static_cast<double>(c.tp);
  m.precision = c.tp + c.fp > 0 ? tp / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn > 0 ? tp / static_cast<double>(c.tp + c.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.iou = c.tp + c.fp + c.fn > 0 ? tp / static_cast<double>(c.tp + c.fp + c.fn) : 1.0;
  return m;
}

CdMetrics cd_metrics(const torch::Tensor& pred, const torch::Tensor& truth) {
  return cd_metrics(confusion(pred, truth));
}

EvaluationTools EvaluationTools::defaults() {
  auto net = std::make_shared<const RandomConvExtractor>();
  return {net, std::make_shared<const RandomFeaturePerceptualDistance>(net),
          std::make_shared<const DifferenceChangeDetector>()};
}

EvaluationReport evaluate(const std::vector<Triplet>& triplets, const PostImageGenerator& generate,
                          const EvaluationTools& tools, int64_t batch_size) {
  if (triplets.empty()) throw std::invalid_argument("evaluation set is empty");
  const auto n = static_cast<int64_t>(triplets.size());
  std::vector<torch::Tensor> generated, real;
  for (int64_t i = 0; i < n; i += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t j = i; j < std::min(n, i + batch_size); ++j) idx.push_back(j);
    auto batch = stack_triplets(triplets, idx);
    torch::Tensor out;
    {
      torch::NoGradGuard guard;
      out = generate(batch.pre, batch.change_map);
    }
    if (!out.sizes().equals(batch.post.sizes()))
      throw std::runtime_error("generator returned a batch of the wrong shape");
    for (int64_t j = 0; j < out.size(0); ++j) generated.push_back(out[j].detach().to(torch::kFloat32));
  }

  EvaluationReport report;
  report.samples = n;
  for (int64_t i = 0; i < n; ++i) {
    const auto& t = triplets[static_cast<std::size_t>(i)];
    real.push_back(t.post);
    SampleScore s;
    s.id = t.id;
    s.cd = cd_metrics(tools.detector->detect(t.pre, generated[static_cast<std::size_t>(i)]), t.change_map);
    s.perceptual = tools.perceptual->distance(generated[static_cast<std::size_t>(i)], t.post);
    report.cd.precision += s.cd.precision / static_cast<double>(n);
    report.cd.recall += s.cd.recall / static_cast<double>(n);
    report.cd.f1 += s.cd.f1 / static_cast<double>(n);
    report.cd.iou += s.cd.iou / static_cast<double>(n);
    report.perceptual += s.perceptual / static_cast<double>(n);
    report.per_sample.push_back(std::move(s));
  }
  report.fid = fid(compute_feature_stats(real, *tools.extractor), compute_feature_stats(generated, *tools.extractor));
  return report;
}

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::string percent(double v) { return fixed(100.0 * v, 2); }

}  // namespace

std::string format_report(const EvaluationReport& r) {
  std::ostringstream out;
  out << "# updiff evaluation report\n"
      << "# published full-scale reference values (pre-trained backbones, full datasets; not reproducible here):\n"
      << "#   levir_cd: lpips=0.342 fid=117.79 precision=92.23 recall=76.55 f1=82.41 iou=73.35\n"
      << "#   sysu_cd:  lpips=0.400 fid=34.57 precision=86.82 recall=86.10 f1=86.45 iou=76.86\n"
      << "samples=" << r.samples << "\n"
      << "fid=" << fixed(r.fid, 6) << "\n"
      << "perceptual=" << fixed(r.perceptual, 6) << "\n"
      << "precision=" << percent(r.cd.precision) << "\n"
      << "recall=" << percent(r.cd.recall) << "\n"
      << "f1=" << percent(r.cd.f1) << "\n"
      << "iou=" << percent(r.cd.iou) << "\n";
  for (const auto& [k, v] : r.extra) out << k << "=" << v << "\n";
  out << "\n[per_sample]\n"
      << "id\tprecision\trecall\tf1\tiou\tperceptual\n";
  for (const auto& s : r.per_sample)
    out << s.id << "\t" << percent(s.cd.precision) << "\t" << percent(s.cd.recall) << "\t" << percent(s.cd.f1)
        << "\t" << percent(s.cd.iou) << "\t" << fixed(s.perceptual, 6) << "\n";
  return out.str();
}

}  // namespace updiff
