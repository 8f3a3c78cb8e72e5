#include "updiff/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace updiff {

namespace {

std::vector<float> to_le_floats(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<float> v(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : v) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<uint32_t>(f)));
  }
  return v;
}

std::string shape_string(const torch::Tensor& t) {
  std::string s;
  for (int64_t i = 0; i < t.dim(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.size(i));
  }
  return s.empty() ? "scalar" : s;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

}  // namespace

std::string encode_tensor_blob(const std::string& name, const torch::Tensor& t) {
  if (name.find_first_of(" \n") != std::string::npos) throw std::invalid_argument("tensor name has whitespace");
  const auto data = to_le_floats(t);
  std::string blob = name + " " + shape_string(t) + " float32\n";
  blob.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  return blob;
}

std::pair<std::string, torch::Tensor> decode_tensor_blob(const std::string& blob) {
  const auto nl = blob.find('\n');
  if (nl == std::string::npos) throw std::runtime_error("tensor blob lacks a header line");
  std::istringstream header(blob.substr(0, nl));
  std::string name, shape, dtype;
  header >> name >> shape >> dtype;
  if (dtype != "float32") throw std::runtime_error("tensor '" + name + "': unsupported dtype '" + dtype + "'");
  std::vector<int64_t> dims;
  if (shape != "scalar") {
    std::istringstream ss(shape);
    for (std::string tok; std::getline(ss, tok, ',');) dims.push_back(std::stoll(tok));
  }
  int64_t numel = 1;
  for (auto d : dims) numel *= d;
  const auto payload = blob.size() - nl - 1;
  if (payload != static_cast<std::size_t>(numel) * sizeof(float))
    throw std::runtime_error("tensor '" + name + "': payload has " + std::to_string(payload) + " bytes, expected " +
                             std::to_string(numel * 4));
  std::vector<float> v(static_cast<std::size_t>(numel));
  std::memcpy(v.data(), blob.data() + nl + 1, payload);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : v) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<uint32_t>(f)));
  }
  return {name, torch::from_blob(v.data(), dims, torch::kFloat32).clone()};
}

std::string content_id(const std::map<std::string, torch::Tensor>& tensors) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    const auto v = to_le_floats(t);
    mix(v.data(), v.size() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const std::filesystem::path& dir, Checkpoint ck) {
  std::filesystem::create_directories(dir / "tensors");
  ck.manifest["format_version"] = kCheckpointFormatVersion;
  ck.manifest["id"] = content_id(ck.tensors);
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : ck.tensors) {
    write_text(dir / "tensors" / (name + ".bin"), encode_tensor_blob(name, t));
    names.push_back(name);
  }
  ck.manifest["tensors"] = names;
  write_text(dir / "manifest", ck.manifest.dump(2) + "\n");
}

nlohmann::json load_manifest(const std::filesystem::path& dir) {
  auto m = nlohmann::json::parse(read_text(dir / "manifest"));
  if (m.value("format_version", 0) != kCheckpointFormatVersion)
    throw std::runtime_error("checkpoint " + dir.string() + " has unsupported format version");
  return m;
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.manifest = load_manifest(dir);
  for (const auto& name : ck.manifest.at("tensors")) {
    auto [stored, t] = decode_tensor_blob(read_text(dir / "tensors" / (name.get<std::string>() + ".bin")));
    if (stored != name.get<std::string>())
      throw std::runtime_error("tensor blob " + name.get<std::string>() + " carries header name " + stored);
    ck.tensors.emplace(stored, std::move(t));
  }
  return ck;
}

std::map<std::string, torch::Tensor> named_state(const torch::nn::Module& module, const std::string& prefix) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : module.named_parameters()) out.emplace(prefix + p.key(), p.value().detach().clone());
  for (const auto& b : module.named_buffers()) out.emplace(prefix + b.key(), b.value().detach().clone());
  return out;
}

void load_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& tensors,
                const std::string& prefix) {
  torch::NoGradGuard guard;
  auto assign = [&](const std::string& key, torch::Tensor& target) {
    auto it = tensors.find(prefix + key);
    if (it == tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + prefix + key);
    if (!it->second.sizes().equals(target.sizes()))
      throw std::runtime_error("checkpoint tensor " + prefix + key + " has a different shape than the model");
    target.copy_(it->second);
  };
  for (auto& p : module.named_parameters()) assign(p.key(), p.value());
  for (auto& b : module.named_buffers()) assign(b.key(), b.value());
}

}  // namespace updiff
