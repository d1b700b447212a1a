#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "stf/tensor.hpp"

namespace stf::test {

inline Tensor<double> randn(std::vector<int> shape, std::mt19937_64& rng, double lo = -1,
                            double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

inline Tensor<float> randnf(std::vector<int> shape, std::mt19937_64& rng, float lo = -1,
                            float hi = 1) {
  std::uniform_real_distribution<float> d(lo, hi);
  Tensor<float> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

// Unique scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("stf_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string operator/(const std::string& sub) const { return (path / sub).string(); }
};

}  // namespace stf::test
