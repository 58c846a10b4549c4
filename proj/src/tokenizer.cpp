#include "iimt/tokenizer.hpp"

#include <algorithm>
#include <limits>

#include "iimt/errors.hpp"

namespace iimt {

void TokenizerConfig::validate() const {
  if (patch <= 0 || image_height <= 0 || image_width <= 0) throw ConfigError("tokenizer: sizes must be positive");
  if (image_height % patch != 0 || image_width % patch != 0)
    throw ConfigError("tokenizer: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                      " is not divisible by patch " + std::to_string(patch));
  if (codebook_size < 2) throw ConfigError("tokenizer: codebook_size must be at least 2");
  if (code_dim <= 0 || encoder_layers <= 0 || decoder_layers <= 0) throw ConfigError("tokenizer: invalid model size");
  if (beta < 0) throw ConfigError("tokenizer: beta must be non-negative");
  nn::AttentionConfig{model_dim, num_heads, ffn_dim}.validate();
}

void TokenizerConfig::write(Config& c, const std::string& p) const {
  c.set(p + "image_height", std::to_string(image_height));
  c.set(p + "image_width", std::to_string(image_width));
  c.set(p + "patch", std::to_string(patch));
  c.set(p + "codebook_size", std::to_string(codebook_size));
  c.set(p + "code_dim", std::to_string(code_dim));
  c.set(p + "model_dim", std::to_string(model_dim));
  c.set(p + "num_heads", std::to_string(num_heads));
  c.set(p + "ffn_dim", std::to_string(ffn_dim));
  c.set(p + "encoder_layers", std::to_string(encoder_layers));
  c.set(p + "decoder_layers", std::to_string(decoder_layers));
  c.set(p + "beta", format_real(beta));
}

TokenizerConfig TokenizerConfig::read(const Config& c, const std::string& p) {
  TokenizerConfig t;
  t.image_height = c.get_int(p + "image_height", t.image_height);
  t.image_width = c.get_int(p + "image_width", t.image_width);
  t.patch = c.get_int(p + "patch", t.patch);
  t.codebook_size = c.get_int(p + "codebook_size", t.codebook_size);
  t.code_dim = c.get_int(p + "code_dim", t.code_dim);
  t.model_dim = c.get_int(p + "model_dim", t.model_dim);
  t.num_heads = c.get_int(p + "num_heads", t.num_heads);
  t.ffn_dim = c.get_int(p + "ffn_dim", t.ffn_dim);
  t.encoder_layers = c.get_int(p + "encoder_layers", t.encoder_layers);
  t.decoder_layers = c.get_int(p + "decoder_layers", t.decoder_layers);
  t.beta = c.get_real(p + "beta", t.beta);
  return t;
}

std::vector<Real> patchify(std::span<const Real> pixels, int height, int width, int patch) {
  if (patch <= 0 || height % patch != 0 || width % patch != 0)
    throw ShapeError("patchify: image " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by patch " + std::to_string(patch));
  const std::size_t per_image = static_cast<std::size_t>(height) * width * 3;
  if (pixels.size() % per_image != 0) throw ShapeError("patchify: pixel buffer does not hold whole images");
  const std::size_t batch = pixels.size() / per_image;
  const int gh = height / patch, gw = width / patch;
  std::vector<Real> out(pixels.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* img = pixels.data() + b * per_image;
    for (int pr = 0; pr < gh; ++pr)
      for (int pc = 0; pc < gw; ++pc)
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x)
            for (int c = 0; c < 3; ++c)
              out[o++] = img[((static_cast<std::size_t>(pr) * patch + y) * width + pc * patch + x) * 3 + c];
  }
  return out;
}

std::vector<Real> unpatchify(std::span<const Real> patches, int height, int width, int patch) {
  if (patch <= 0 || height % patch != 0 || width % patch != 0) throw ShapeError("unpatchify: indivisible image");
  const std::size_t per_image = static_cast<std::size_t>(height) * width * 3;
  if (patches.size() % per_image != 0) throw ShapeError("unpatchify: patch buffer does not hold whole images");
  const std::size_t batch = patches.size() / per_image;
  const int gh = height / patch, gw = width / patch;
  std::vector<Real> out(patches.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    Real* img = out.data() + b * per_image;
    for (int pr = 0; pr < gh; ++pr)
      for (int pc = 0; pc < gw; ++pc)
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x)
            for (int c = 0; c < 3; ++c)
              img[((static_cast<std::size_t>(pr) * patch + y) * width + pc * patch + x) * 3 + c] = patches[o++];
  }
  return out;
}

QuantizeResult quantize(std::span<const Real> v, const Tensor& codebook) {
  if (!codebook.defined() || codebook.rank() != 2) throw ConfigError("quantize: empty codebook");
  const int k = codebook.dim(0), d = codebook.dim(1);
  if (static_cast<int>(v.size()) != d)
    throw ShapeError("quantize: vector of size " + std::to_string(v.size()) + " vs code_dim " + std::to_string(d));
  auto cb = codebook.data();
  QuantizeResult best{0, std::numeric_limits<Real>::infinity()};
  for (int i = 0; i < k; ++i) {
    const Real* e = cb.data() + static_cast<std::size_t>(i) * d;
    Real dist = 0;
    for (int j = 0; j < d; ++j) dist += (v[j] - e[j]) * (v[j] - e[j]);
    if (dist < best.distance) best = {i, dist};
  }
  return best;
}

Tokenizer::Tokenizer(const TokenizerConfig& cfg, std::uint64_t seed) : cfg_(cfg), ps_(seed) {
  cfg_.validate();
  nn::AttentionConfig ac{cfg_.model_dim, cfg_.num_heads, cfg_.ffn_dim};
  const int n = cfg_.num_tokens();
  enc_in_ = nn::Linear(ps_, "tok.enc.in", cfg_.patch_dim(), cfg_.model_dim);
  enc_pos_ = ps_.normal("tok.enc.pos", {n, cfg_.model_dim}, 0.1);
  encoder_ = nn::EncoderStack(ps_, "tok.enc", ac, cfg_.encoder_layers);
  enc_out_ = nn::Linear(ps_, "tok.enc.out", cfg_.model_dim, cfg_.code_dim);
  const Real r = 1.0 / cfg_.codebook_size;
  codebook_ = ps_.uniform("tok.codebook", {cfg_.codebook_size, cfg_.code_dim}, -r, r);
  dec_in_ = nn::Linear(ps_, "tok.dec.in", cfg_.code_dim, cfg_.model_dim);
  dec_pos_ = ps_.normal("tok.dec.pos", {n, cfg_.model_dim}, 0.1);
  decoder_ = nn::EncoderStack(ps_, "tok.dec", ac, cfg_.decoder_layers);
  dec_out_ = nn::Linear(ps_, "tok.dec.out", cfg_.model_dim, cfg_.patch_dim());
}

void Tokenizer::check_pixels(std::size_t n, int batch) const {
  if (batch <= 0 || n != static_cast<std::size_t>(batch) * cfg_.pixel_count())
    throw ShapeError("tokenizer: expected " + std::to_string(batch) + " images of " + std::to_string(cfg_.image_height) +
                     "x" + std::to_string(cfg_.image_width) + "x3, got " + std::to_string(n) + " values");
}

Tensor Tokenizer::encode_continuous(std::span<const Real> pixels, int batch, nn::ForwardCtx& ctx) const {
  check_pixels(pixels.size(), batch);
  const int n = cfg_.num_tokens();
  Tensor patches = Tensor::from({batch * n, cfg_.patch_dim()},
                                patchify(pixels, cfg_.image_height, cfg_.image_width, cfg_.patch));
  Tensor h = ad::add_positional(enc_in_(patches), enc_pos_, n);
  h = encoder_.forward(h, {batch, n}, ctx);
  return enc_out_(h);
}

Tensor Tokenizer::decode_codes(const Tensor& codes, int batch, nn::ForwardCtx& ctx) const {
  const int n = cfg_.num_tokens();
  if (codes.rank() != 2 || codes.dim(0) != batch * n || codes.dim(1) != cfg_.code_dim)
    throw ShapeError("tokenizer decode: codes " + codes.shape_string() + " do not match the token grid");
  Tensor h = ad::add_positional(dec_in_(codes), dec_pos_, n);
  h = decoder_.forward(h, {batch, n}, ctx);
  return dec_out_(h);
}

std::vector<int> Tokenizer::encode(std::span<const Real> pixels, int batch) const {
  nn::ForwardCtx ctx;
  Tensor ze = encode_continuous(pixels, batch, ctx);
  const int d = cfg_.code_dim;
  std::vector<int> out(ze.dim(0));
  auto zv = ze.data();
#pragma omp parallel for schedule(static)
  for (int i = 0; i < ze.dim(0); ++i)
    out[i] = quantize(zv.subspan(static_cast<std::size_t>(i) * d, d), codebook_).index;
  return out;
}

std::vector<int> Tokenizer::encode(const Image& img) const {
  if (img.height != cfg_.image_height || img.width != cfg_.image_width)
    throw ShapeError("tokenizer: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     ", expected " + std::to_string(cfg_.image_height) + "x" + std::to_string(cfg_.image_width));
  const auto px = to_unit(img);
  return encode(px, 1);
}

std::vector<Real> Tokenizer::decode(std::span<const int> tokens, int batch) const {
  if (batch <= 0 || tokens.size() != static_cast<std::size_t>(batch) * cfg_.num_tokens())
    throw ShapeError("tokenizer decode: " + std::to_string(tokens.size()) + " tokens do not fill " +
                     std::to_string(batch) + " grids of " + std::to_string(cfg_.num_tokens()));
  for (int t : tokens)
    if (t < 0 || t >= cfg_.codebook_size)
      throw RangeError("visual token " + std::to_string(t) + " outside codebook of size " + std::to_string(cfg_.codebook_size));
  nn::ForwardCtx ctx;
  Tensor out = decode_codes(ad::embedding(codebook_, tokens), batch, ctx);
  auto px = unpatchify(out.data(), cfg_.image_height, cfg_.image_width, cfg_.patch);
  for (Real& v : px) v = std::clamp(v, 0.0, 1.0);
  return px;
}

Image Tokenizer::decode_image(std::span<const int> tokens) const {
  const auto px = decode(tokens, 1);
  return from_unit(px, cfg_.image_width, cfg_.image_height);
}

Stage1Loss Tokenizer::loss(std::span<const Real> pixels, int batch, nn::ForwardCtx& ctx) const {
  Stage1Loss out;
  Tensor ze = encode_continuous(pixels, batch, ctx);
  const int d = cfg_.code_dim;
  const int rows = ze.dim(0);
  out.tokens.resize(rows);
  auto zv = ze.data();
#pragma omp parallel for schedule(static)
  for (int i = 0; i < rows; ++i) out.tokens[i] = quantize(zv.subspan(static_cast<std::size_t>(i) * d, d), codebook_).index;
  Tensor zq = ad::embedding(codebook_, out.tokens);
  // Straight-through: forward value of zq, gradient copied onto ze.
  std::vector<Real> delta(ze.numel());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = zq.data()[i] - zv[i];
  Tensor st = ad::add(ze, Tensor::from(ze.shape(), std::move(delta)));
  Tensor recon = decode_codes(st, batch, ctx);
  Tensor target = Tensor::from(recon.shape(), patchify(pixels, cfg_.image_height, cfg_.image_width, cfg_.patch));
  out.reconstruction = ad::mse(recon, target);
  out.vq = ad::mse(ze.detach(), zq);
  out.commitment = ad::scale(ad::mse(ze, zq.detach()), cfg_.beta);
  out.total = ad::add(ad::add(out.reconstruction, out.vq), out.commitment);
  return out;
}

}  // namespace iimt
