#pragma once

// Versioned binary parameter files shared by every trainable component.
//
// Layout (little-endian):
//   "IIMTCKPT" | u32 format_version | u32 n + config text (key = value lines)
//   u32 array count, then per array:
//   u32 n + name | u32 rank | u64 dims[rank] | f64 values[prod(dims)]

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "iimt/nn.hpp"

namespace iimt {

struct NamedArray {
  std::string name;
  ad::Shape shape;
  std::vector<ad::Real> data;
};

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t version = kFormatVersion;
  std::string config;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint snapshot(const nn::ParameterStore& ps, std::string config = {});
// Copies values into the store. Every store parameter must be present with the
// same shape; extra arrays in the checkpoint are ignored.
void restore(nn::ParameterStore& ps, const Checkpoint& ckpt);

// Elementwise mean per parameter. Names and shapes must agree.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts);

}  // namespace iimt
