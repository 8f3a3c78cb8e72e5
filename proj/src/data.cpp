#include "updiff/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

#include "updiff/image_io.hpp"

namespace updiff {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  const auto span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(rng() % span);
}

void validate_triplet(const Triplet& t) {
  const auto where = t.id.empty() ? std::string("triplet") : "triplet '" + t.id + "'";
  if (t.pre.dim() != 3 || t.pre.size(0) != 3 || t.post.dim() != 3 || t.post.size(0) != 3)
    throw std::invalid_argument(where + ": images must be (3, H, W)");
  if (t.change_map.dim() != 3 || t.change_map.size(0) != 1)
    throw std::invalid_argument(where + ": change map must be (1, H, W)");
  if (t.pre.sizes() != t.post.sizes() || t.pre.size(1) != t.change_map.size(1) ||
      t.pre.size(2) != t.change_map.size(2))
    throw std::invalid_argument(where + ": components have different spatial sizes");
  auto binary = (t.change_map == 0).logical_or(t.change_map == 1);
  if (!binary.all().item<bool>()) throw std::invalid_argument(where + ": change map is not binary");
  if (t.pre.abs().max().item<float>() > 1.0f || t.post.abs().max().item<float>() > 1.0f)
    throw std::invalid_argument(where + ": image values outside [-1, 1]");
}

TripletBatch stack_triplets(const std::vector<Triplet>& triplets, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("cannot stack an empty batch");
  std::vector<torch::Tensor> pre, map, post;
  for (auto i : indices) {
    const auto& t = triplets.at(static_cast<std::size_t>(i));
    pre.push_back(t.pre);
    map.push_back(t.change_map);
    post.push_back(t.post);
  }
  return {torch::stack(pre), torch::stack(map), torch::stack(post)};
}

TripletBatch stack_triplets(const std::vector<Triplet>& triplets) {
  std::vector<int64_t> idx(triplets.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  return stack_triplets(triplets, idx);
}

// ----------------------------------------------------------------------------

namespace {

std::set<std::string> png_stems(const std::filesystem::path& dir) {
  std::set<std::string> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.insert(e.path().filename().string());
  return out;
}

}  // namespace

CdDataset::CdDataset(std::filesystem::path root, std::string split) : dir_(root / split) {
  if (!std::filesystem::is_directory(dir_)) throw std::runtime_error("dataset split not found: " + dir_.string());
  for (const char* sub : {"A", "B", "label"})
    if (!std::filesystem::is_directory(dir_ / sub))
      throw std::runtime_error("dataset split " + dir_.string() + " lacks the '" + sub + "' folder");
  const auto a = png_stems(dir_ / "A"), b = png_stems(dir_ / "B"), l = png_stems(dir_ / "label");
  for (const auto& name : a) {
    if (!b.count(name)) throw std::runtime_error("missing counterpart file " + (dir_ / "B" / name).string());
    if (!l.count(name)) throw std::runtime_error("missing counterpart file " + (dir_ / "label" / name).string());
  }
  for (const auto& name : b)
    if (!a.count(name)) throw std::runtime_error("missing counterpart file " + (dir_ / "A" / name).string());
  for (const auto& name : l)
    if (!a.count(name)) throw std::runtime_error("missing counterpart file " + (dir_ / "A" / name).string());
  names_.assign(a.begin(), a.end());

  manifest_.root = std::move(root);
  manifest_.split = std::move(split);
  manifest_.count = size();
  if (!names_.empty()) {
    const auto first = read_png(dir_ / "A" / names_.front());
    if (first.width != first.height)
      throw std::runtime_error("non-square sample " + names_.front() + " (" + std::to_string(first.width) + "x" +
                               std::to_string(first.height) + ")");
    manifest_.resolution = first.width;
  }
}

Triplet CdDataset::get(int64_t i) const {
  const auto& name = names_.at(static_cast<std::size_t>(i));
  auto check = [&](const Image8& img, const std::filesystem::path& p) {
    if (img.width != manifest_.resolution || img.height != manifest_.resolution)
      throw std::runtime_error(p.string() + ": resolution " + std::to_string(img.width) + "x" +
                               std::to_string(img.height) + " differs from split resolution " +
                               std::to_string(manifest_.resolution));
  };
  const auto pa = dir_ / "A" / name, pb = dir_ / "B" / name, pl = dir_ / "label" / name;
  const auto a = read_png(pa), b = read_png(pb), l = read_png(pl);
  check(a, pa);
  check(b, pb);
  check(l, pl);
  Triplet t;
  t.pre = image_to_tensor(a);
  t.post = image_to_tensor(b);
  try {
    t.change_map = image_to_mask(l);
  } catch (const ImageError& e) {
    throw std::runtime_error(pl.string() + ": " + e.what());
  }
  t.id = std::filesystem::path(name).stem().string();
  return t;
}

std::vector<Triplet> CdDataset::load_all() const {
  std::vector<Triplet> out;
  out.reserve(names_.size());
  for (int64_t i = 0; i < size(); ++i) out.push_back(get(i));
  return out;
}

CdDataset load_cd_dataset(const std::filesystem::path& root, const std::string& split) {
  return CdDataset(root, split);
}

void write_cd_dataset(const std::filesystem::path& root, const std::string& split,
                      const std::vector<Triplet>& triplets) {
  const auto dir = root / split;
  for (const char* sub : {"A", "B", "label"}) std::filesystem::create_directories(dir / sub);
  for (const auto& t : triplets) {
    validate_triplet(t);
    const auto file = t.id + ".png";
    write_png(dir / "A" / file, tensor_to_image(t.pre));
    write_png(dir / "B" / file, tensor_to_image(t.post));
    write_png(dir / "label" / file, mask_to_image(t.change_map));
  }
}

// ----------------------------------------------------------------------------

namespace {

/// Planar (3, H, W) float canvas.
struct Canvas {
  int64_t size;
  std::vector<float> px;

  explicit Canvas(int64_t s) : size(s), px(static_cast<std::size_t>(3 * s * s), 0.0f) {}
  float& at(int c, int64_t y, int64_t x) { return px[static_cast<std::size_t>((c * size + y) * size + x)]; }
};

struct Rect {
  int64_t x0, y0, w, h;
};

Rect random_rect(std::mt19937_64& rng, int64_t size, int64_t min_side, int64_t max_side) {
  max_side = std::clamp<int64_t>(max_side, min_side, size);
  const auto w = uniform_int(rng, min_side, max_side);
  const auto h = uniform_int(rng, min_side, max_side);
  return {uniform_int(rng, 0, size - w), uniform_int(rng, 0, size - h), w, h};
}

void fill_rect(Canvas& c, const Rect& r, const float rgb[3]) {
  for (int64_t y = r.y0; y < r.y0 + r.h; ++y)
    for (int64_t x = r.x0; x < r.x0 + r.w; ++x)
      for (int ch = 0; ch < 3; ++ch) c.at(ch, y, x) = rgb[ch];
}

Triplet synth_one(std::mt19937_64& rng, int64_t size, const std::string& id) {
  Canvas pre(size);

  // Ground: earthy base colour modulated by a few low-frequency waves.
  const float base[3] = {static_cast<float>(-0.45 + 0.3 * uniform01(rng)),
                         static_cast<float>(-0.40 + 0.3 * uniform01(rng)),
                         static_cast<float>(-0.55 + 0.25 * uniform01(rng))};
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double two_pi = 2.0 * std::numbers::pi;
    waves.push_back({two_pi * (0.5 + 1.5 * uniform01(rng)) / static_cast<double>(size),
                     two_pi * (0.5 + 1.5 * uniform01(rng)) / static_cast<double>(size), two_pi * uniform01(rng),
                     0.04 + 0.04 * uniform01(rng)});
  }
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      double v = 0.0;
      for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      for (int c = 0; c < 3; ++c) pre.at(c, y, x) = base[c] + static_cast<float>(v * (1.0 - 0.2 * c));
    }

  // Road.
  if (uniform01(rng) < 0.5) {
    const auto width = uniform_int(rng, 3, 5);
    const auto pos = uniform_int(rng, 0, size - width);
    const float gray = static_cast<float>(-0.15 + 0.15 * uniform01(rng));
    const float rgb[3] = {gray, gray, gray + 0.03f};
    fill_rect(pre, uniform01(rng) < 0.5 ? Rect{0, pos, size, width} : Rect{pos, 0, width, size}, rgb);
  }

  // Existing structures.
  const auto existing = uniform_int(rng, 0, 2);
  for (int64_t i = 0; i < existing; ++i) {
    const float gray = static_cast<float>(-0.2 + 0.3 * uniform01(rng));
    const float rgb[3] = {gray, gray - 0.02f, gray - 0.05f};
    fill_rect(pre, random_rect(rng, size, 6, std::max<int64_t>(6, size / 5)), rgb);
  }

  Canvas post = pre;
  torch::Tensor mask = torch::zeros({1, size, size}, torch::kFloat32);
  auto m = mask.accessor<float, 3>();

  // Planned construction: grid-textured roofs inside each change rectangle,
  // brightened relative to the ground they replace.
  const auto n_rects = uniform_int(rng, 1, 4);
  for (int64_t i = 0; i < n_rects; ++i) {
    const auto r = random_rect(rng, size, 8, std::max<int64_t>(8, size * 3 / 8));
    const double lift = 0.6 + 0.1 * uniform01(rng);
    const double warm = 0.08 * (2.0 * uniform01(rng) - 1.0);
    const float roof[3] = {static_cast<float>(lift + warm), static_cast<float>(lift),
                           static_cast<float>(lift - warm)};
    const auto period = uniform_int(rng, 6, 8);
    for (int64_t y = r.y0; y < r.y0 + r.h; ++y)
      for (int64_t x = r.x0; x < r.x0 + r.w; ++x) {
        const bool line = ((x - r.x0) % period == period - 1) || ((y - r.y0) % period == period - 1);
        if (m[0][y][x] == 0.0f)
          for (int c = 0; c < 3; ++c) post.at(c, y, x) = pre.at(c, y, x) + (line ? roof[c] - 0.2f : roof[c]);
        m[0][y][x] = 1.0f;
      }
  }

  auto to_tensor = [size](const Canvas& c) {
    return torch::from_blob(const_cast<float*>(c.px.data()), {3, size, size}, torch::kFloat32).clone().clamp(-1, 1);
  };
  // Quantize to 8-bit levels so the in-memory set equals its PNG round trip.
  auto quantize = [](const torch::Tensor& x) { return ((x + 1.0) * 127.5).round() / 127.5 - 1.0; };
  Triplet t;
  t.pre = quantize(to_tensor(pre));
  t.post = quantize(to_tensor(post));
  t.post = torch::where(mask.expand({3, size, size}) > 0.5, t.post, t.pre);
  t.change_map = mask;
  t.id = id;
  return t;
}

}  // namespace

std::vector<Triplet> generate_synthetic(int64_t n, int64_t resolution, uint64_t seed, int64_t divisor) {
  if (n < 0) throw std::invalid_argument("sample count must be non-negative");
  if (resolution < 16 || divisor < 1 || resolution % divisor != 0)
    throw std::invalid_argument("synthetic resolution " + std::to_string(resolution) +
                                " must be >= 16 and divisible by " + std::to_string(divisor));
  std::mt19937_64 rng(seed);
  std::vector<Triplet> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "syn_%06lld", static_cast<long long>(i));
    out.push_back(synth_one(rng, resolution, id));
  }
  return out;
}

Triplet augment(const Triplet& t, std::mt19937_64& rng, const AugmentConfig& config) {
  const auto h = t.height(), w = t.width();
  const auto crop = config.crop > 0 ? config.crop : std::min(h, w);
  if (crop > h || crop > w)
    throw std::invalid_argument("crop " + std::to_string(crop) + " exceeds source " + std::to_string(h) + "x" +
                                std::to_string(w));
  const bool flip_h = uniform01(rng) < config.flip_probability;
  const bool flip_v = uniform01(rng) < config.flip_probability;
  const auto y0 = uniform_int(rng, 0, h - crop);
  const auto x0 = uniform_int(rng, 0, w - crop);
  auto apply = [&](torch::Tensor x) {
    if (flip_h) x = x.flip({2});
    if (flip_v) x = x.flip({1});
    return x.slice(1, y0, y0 + crop).slice(2, x0, x0 + crop).contiguous();
  };
  Triplet out{apply(t.pre), apply(t.change_map), apply(t.post), t.id};
  if (config.no_change_probability > 0 && uniform01(rng) < config.no_change_probability) {
    out.post = out.pre.clone();
    out.change_map = torch::zeros_like(out.change_map);
  }
  return out;
}

}  // namespace updiff
