#include "fixtures.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <unistd.h>

namespace iimt::testing {

namespace fs = std::filesystem;

TokenizerConfig micro_tokenizer_config() {
  TokenizerConfig c;
  c.image_height = c.image_width = 16;
  c.patch = 8;
  c.codebook_size = 8;
  c.code_dim = 4;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 8;
  c.encoder_layers = c.decoder_layers = 1;
  return c;
}

ModelConfig micro_model_config() {
  ModelConfig m;
  m.image_height = m.image_width = 16;
  m.patch = 8;
  m.model_dim = 8;
  m.num_heads = 2;
  m.ffn_dim = 8;
  m.encoder_layers = 2;
  m.text_layers = 1;
  m.image_layers = 1;
  m.tap_layer = 1;
  m.max_text_len = 12;
  m.codebook_size = 8;
  m.token_grid_h = m.token_grid_w = 2;
  return m;
}

TeacherConfig micro_teacher_config() {
  TeacherConfig t = TeacherConfig::for_student(micro_model_config());
  t.model_dim = 8;
  t.num_heads = 2;
  t.ffn_dim = 8;
  t.text_layers = t.image_layers = 1;
  t.channels1 = 2;
  t.channels2 = 3;
  t.channels3 = 4;
  return t;
}

void randomize(nn::ParameterStore& ps, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (const auto& [name, t] : ps.params()) {
    ad::Tensor p = t;
    for (double& v : p.data_mut()) v = d(rng);
  }
}

std::vector<std::pair<std::string, ad::Tensor>> named_params(const nn::ParameterStore& ps) { return ps.params(); }

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

std::vector<double> random_pixels(int images, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(images) * h * w * 3);
  for (double& x : v) x = d(rng);
  return v;
}

TempDir::TempDir(const std::string& tag) {
  static int counter = 0;
  path_ = fs::temp_directory_path() / ("iimt_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

namespace {

// 64-bit FNV-1a.
std::uint64_t fnv(const std::string& bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

}  // namespace

std::string file_hash(const fs::path& file) { return hex(fnv(read_all(file))); }

std::string tree_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ull;
  for (const fs::path& f : files) {
    h = fnv(f.generic_string() + '\0', h);
    h = fnv(read_all(dir / f), h);
  }
  return hex(h);
}

}  // namespace iimt::testing
