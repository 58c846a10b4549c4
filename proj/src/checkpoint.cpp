#include "iimt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "iimt/errors.hpp"

namespace iimt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'I', 'I', 'M', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v{};
    read(&v, sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    if (n > (1u << 28)) fail("implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void read(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!is_) fail("truncated file");
  }
  [[noreturn]] void fail(const std::string& what) { throw IoError("checkpoint " + path_ + ": " + what); }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, ckpt.version);
    put_string(os, ckpt.config);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& a : ckpt.arrays) {
      put_string(os, a.name);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
      for (int d : a.shape) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
      os.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(ad::Real)));
    }
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  char magic[8];
  r.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) r.fail("bad magic");
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != Checkpoint::kFormatVersion) r.fail("unsupported format version " + std::to_string(ckpt.version));
  ckpt.config = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) r.fail("bad rank for " + a.name);
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (1u << 30)) r.fail("bad dimension for " + a.name);
      a.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    if (n > (std::size_t{1} << 31)) r.fail("array too large: " + a.name);
    a.data.resize(n);
    r.read(a.data.data(), n * sizeof(ad::Real));
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

Checkpoint snapshot(const nn::ParameterStore& ps, std::string config) {
  Checkpoint ckpt;
  ckpt.config = std::move(config);
  for (const auto& [name, t] : ps.params())
    ckpt.arrays.push_back({name, t.shape(), std::vector<ad::Real>(t.data().begin(), t.data().end())});
  return ckpt;
}

void restore(nn::ParameterStore& ps, const Checkpoint& ckpt) {
  for (const auto& [name, t] : ps.params()) {
    const NamedArray* a = ckpt.find(name);
    if (a == nullptr) throw ContractError("checkpoint lacks parameter " + name);
    if (a->shape != t.shape())
      throw ContractError("checkpoint parameter " + name + " has shape " + ad::shape_str(a->shape) + ", model expects " + t.shape_string());
    ad::Tensor copy = t;
    std::copy(a->data.begin(), a->data.end(), copy.data_mut().begin());
  }
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw ContractError("average_checkpoints: empty list");
  Checkpoint out = ckpts.front();
  for (std::size_t c = 1; c < ckpts.size(); ++c) {
    if (ckpts[c].arrays.size() != out.arrays.size()) throw ContractError("average_checkpoints: parameter sets differ");
    for (std::size_t i = 0; i < out.arrays.size(); ++i) {
      const NamedArray& a = ckpts[c].arrays[i];
      if (a.name != out.arrays[i].name || a.shape != out.arrays[i].shape)
        throw ContractError("average_checkpoints: mismatch at " + out.arrays[i].name);
      for (std::size_t k = 0; k < a.data.size(); ++k) out.arrays[i].data[k] += a.data[k];
    }
  }
  const ad::Real n = static_cast<ad::Real>(ckpts.size());
  for (auto& a : out.arrays)
    for (auto& v : a.data) v /= n;
  return out;
}

}  // namespace iimt
