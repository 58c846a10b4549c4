#pragma once

// Vector-quantized image tokenizer: a patch transformer encoder, a nearest
// neighbour codebook lookup and a transformer decoder back to pixels.

#include <span>
#include <string>
#include <vector>

#include "iimt/config.hpp"
#include "iimt/image.hpp"
#include "iimt/transformer.hpp"

namespace iimt {

using ad::Real;
using ad::Tensor;

struct TokenizerConfig {
  int image_height = 64;
  int image_width = 64;
  int patch = 8;
  int codebook_size = 512;
  int code_dim = 64;
  int model_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int encoder_layers = 4;
  int decoder_layers = 4;
  double beta = 0.25;  // commitment weight

  int grid_h() const { return image_height / patch; }
  int grid_w() const { return image_width / patch; }
  int num_tokens() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * 3; }
  int pixel_count() const { return image_height * image_width * 3; }

  void validate() const;
  void write(Config& c, const std::string& prefix) const;
  static TokenizerConfig read(const Config& c, const std::string& prefix);
};

// Images given as unit-range HWC values -> [batch * N, P*P*3] raster-ordered
// patches. Throws ShapeError when the image is not divisible by the patch.
std::vector<Real> patchify(std::span<const Real> pixels, int height, int width, int patch);
std::vector<Real> unpatchify(std::span<const Real> patches, int height, int width, int patch);

struct QuantizeResult {
  int index = 0;
  Real distance = 0;  // squared L2
};

// argmin_k |v - codebook[k]|^2, ties to the lowest k. codebook is [K, dim].
QuantizeResult quantize(std::span<const Real> v, const Tensor& codebook);

struct Stage1Loss {
  Tensor total;
  Tensor reconstruction;
  Tensor vq;          // moves codes toward (stopped) encoder outputs
  Tensor commitment;  // beta-weighted, moves encoder outputs toward (stopped) codes
  std::vector<int> tokens;
};

class Tokenizer {
 public:
  Tokenizer(const TokenizerConfig& cfg, std::uint64_t seed);

  const TokenizerConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return ps_; }
  const nn::ParameterStore& params() const { return ps_; }
  const Tensor& codebook() const { return codebook_; }

  // Continuous encoder outputs [batch * N, code_dim] for a batch of images.
  Tensor encode_continuous(std::span<const Real> pixels, int batch, nn::ForwardCtx& ctx) const;
  // Decoder output in patch space [batch * N, P*P*3] from code vectors.
  Tensor decode_codes(const Tensor& codes, int batch, nn::ForwardCtx& ctx) const;

  std::vector<int> encode(std::span<const Real> pixels, int batch = 1) const;
  std::vector<int> encode(const Image& img) const;
  // Unit pixels clamped to [0, 1]; RangeError on invalid indices.
  std::vector<Real> decode(std::span<const int> tokens, int batch = 1) const;
  Image decode_image(std::span<const int> tokens) const;

  // All three terms use per-element means.
  Stage1Loss loss(std::span<const Real> pixels, int batch, nn::ForwardCtx& ctx) const;

 private:
  void check_pixels(std::size_t n, int batch) const;

  TokenizerConfig cfg_;
  nn::ParameterStore ps_;
  nn::Linear enc_in_, enc_out_, dec_in_, dec_out_;
  Tensor enc_pos_, dec_pos_, codebook_;
  nn::EncoderStack encoder_, decoder_;
};

}  // namespace iimt
