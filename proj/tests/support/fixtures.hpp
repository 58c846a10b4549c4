#pragma once

// Micro model sizes for gradient checks and fast unit tests, plus small
// helpers shared across test files.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "iimt/iimt_model.hpp"
#include "iimt/teacher.hpp"
#include "iimt/tokenizer.hpp"

namespace iimt::testing {

// 16x16 images, patch 8, dim 8, one layer per stack.
TokenizerConfig micro_tokenizer_config();
ModelConfig micro_model_config();
TeacherConfig micro_teacher_config();

// Overwrites every parameter with N(0, scale^2) draws, so zero- or
// one-initialized tensors (norm gains, bias tables) take generic values.
void randomize(nn::ParameterStore& ps, std::uint64_t seed, double scale = 0.5);
// All parameters of a store as named tensors for gradcheck.
std::vector<std::pair<std::string, ad::Tensor>> named_params(const nn::ParameterStore& ps);

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale = 1.0);
std::vector<double> random_pixels(int images, int h, int w, std::uint64_t seed);

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

// Content hash of every regular file under dir (relative paths included).
std::string tree_hash(const std::filesystem::path& dir);
std::string file_hash(const std::filesystem::path& file);

}  // namespace iimt::testing
