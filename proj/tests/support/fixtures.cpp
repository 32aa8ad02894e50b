#include "fixtures.hpp"

#include <atomic>
#include <unistd.h>

namespace optimerge::testing {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::vector<float> random_values(std::mt19937_64& rng, std::size_t n, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(dist(rng));
  return v;
}

Tensor f32_tensor(std::vector<float> values, Shape shape) { return Tensor::from_f32(values, std::move(shape)); }

TensorMap random_model(std::mt19937_64& rng, std::size_t tensors, std::size_t max_dim) {
  std::uniform_int_distribution<std::size_t> dim(1, max_dim);
  static const char* suffixes[] = {"attn.q_proj.weight", "mlp.up_proj.weight", "input_layernorm.weight"};
  TensorMap tm;
  for (std::size_t i = 0; i < tensors; ++i) {
    const std::string name = "model.layers." + std::to_string(i / 3) + "." + suffixes[i % 3];
    Shape shape = i % 3 == 2 ? Shape{dim(rng)} : Shape{dim(rng), dim(rng)};
    tm.insert(name, f32_tensor(random_values(rng, shape_numel(shape)), shape));
  }
  return tm;
}

TensorMap perturbed(std::mt19937_64& rng, const TensorMap& like, double scale) {
  TensorMap out;
  for (const auto& [name, t] : like.tensors) {
    auto v = t.to_f32();
    const auto noise = random_values(rng, v.size(), scale);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += noise[i];
    out.insert(name, Tensor::from_f32(v, t.shape, t.dtype));
  }
  return out;
}

TensorMap random_container(std::mt19937_64& rng, std::size_t tensors) {
  static constexpr DType dtypes[] = {DType::F32, DType::F16, DType::BF16};
  std::uniform_int_distribution<int> rank(0, 3);
  std::uniform_int_distribution<std::uint64_t> extent(0, 6);
  std::uniform_int_distribution<int> pick(0, 2);
  std::uniform_int_distribution<std::uint32_t> bits;
  TensorMap tm;
  for (std::size_t i = 0; i < tensors; ++i) {
    Shape shape(static_cast<std::size_t>(rank(rng)));
    for (auto& s : shape) s = extent(rng);
    Tensor t;
    t.dtype = dtypes[pick(rng)];
    t.shape = shape;
    t.data.resize(shape_numel(shape) * dtype_size(t.dtype));
    for (auto& b : t.data) b = static_cast<std::byte>(bits(rng) & 0xff);
    tm.insert("t" + std::to_string(i) + "." + std::to_string(bits(rng) % 1000), std::move(t));
  }
  if (tensors % 2 == 1) tm.metadata["note"] = "seeded " + std::to_string(tensors);
  return tm;
}

}  // namespace optimerge::testing
