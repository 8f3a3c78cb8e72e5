#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace updiff {

/// One training/evaluation sample.
///   pre, post:   (3, H, W) float in [-1, 1]
///   change_map:  (1, H, W) float in {0, 1}
struct Triplet {
  torch::Tensor pre;
  torch::Tensor change_map;
  torch::Tensor post;
  std::string id;

  int64_t height() const { return pre.size(1); }
  int64_t width() const { return pre.size(2); }
};

/// Throws std::invalid_argument if shapes disagree, values leave their ranges,
/// or the map is not strictly binary.
void validate_triplet(const Triplet& t);

/// Stacked tensors of several triplets: (B, 3, H, W), (B, 1, H, W), (B, 3, H, W).
struct TripletBatch {
  torch::Tensor pre;
  torch::Tensor change_map;
  torch::Tensor post;
  int64_t size() const { return pre.size(0); }
};

TripletBatch stack_triplets(const std::vector<Triplet>& triplets);
TripletBatch stack_triplets(const std::vector<Triplet>& triplets, const std::vector<int64_t>& indices);

struct DatasetManifest {
  std::filesystem::path root;
  std::string split;
  int64_t resolution = 0;  ///< side length; 0 when the split is empty
  int64_t count = 0;
};

/// Change-detection dataset in the `root/<split>/{A,B,label}/` layout:
/// A = pre-change image, B = post-change image, label = binary mask (0 / 255).
/// File names must match across the three folders. Samples are decoded on access.
class CdDataset {
 public:
  /// Scans the split; throws naming the first file that lacks a counterpart.
  CdDataset(std::filesystem::path root, std::string split);

  int64_t size() const { return static_cast<int64_t>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  const DatasetManifest& manifest() const { return manifest_; }

  /// Decodes sample i; throws on resolution mismatch or a non-binary label.
  Triplet get(int64_t i) const;
  /// Decodes every sample.
  std::vector<Triplet> load_all() const;

 private:
  std::filesystem::path dir_;
  std::vector<std::string> names_;
  DatasetManifest manifest_;
};

CdDataset load_cd_dataset(const std::filesystem::path& root, const std::string& split);

/// Writes triplets as `root/<split>/{A,B,label}/<id>.png`.
void write_cd_dataset(const std::filesystem::path& root, const std::string& split,
                      const std::vector<Triplet>& triplets);

/// Procedural urban scenes. Each sample: textured ground with optional roads
/// and existing structures (I_pre); 1-4 axis-aligned rectangles with sides
/// >= 8 px (m); I_pre with grid-textured buildings painted inside m (I_post).
/// `divisor` is the factor the resolution must be divisible by.
std::vector<Triplet> generate_synthetic(int64_t n, int64_t resolution, uint64_t seed, int64_t divisor = 8);

struct AugmentConfig {
  double flip_probability = 0.5;  ///< per axis
  int64_t crop = 0;               ///< output side; 0 keeps the source size
  /// Chance of replacing the sample by its unchanged counterpart (m = 0, I_post = I_pre).
  double no_change_probability = 0.0;
};

/// One random geometric transform (flips then crop) applied identically to all
/// three components, optionally followed by the no-change substitution.
/// Throws if the crop exceeds the source.
Triplet augment(const Triplet& t, std::mt19937_64& rng, const AugmentConfig& config = {});

/// Deterministic uniform draw in [0, 1) that does not depend on the standard
/// library's distribution implementations.
double uniform01(std::mt19937_64& rng);
/// Uniform integer in [lo, hi].
int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi);

}  // namespace updiff
