#pragma once

// End-to-end in-image translation model: patch encoder, target text decoder,
// source text decoder (training only) and the image decoder that emits visual
// tokens from image and text memories.

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "iimt/config.hpp"
#include "iimt/image.hpp"
#include "iimt/tokenizer.hpp"
#include "iimt/transformer.hpp"

namespace iimt {

constexpr int kCharVocab = 256;
constexpr int kEos = 255;  // also the decoder start symbol
constexpr int kPad = 254;

// Byte string -> ids. RangeError on the reserved bytes.
std::vector<int> text_to_ids(const std::string& text);
std::string ids_to_text(std::span<const int> ids);

// Teacher-forced text batch: inputs [EOS, t...] padded with PAD, targets
// [t..., EOS] padded with -1.
struct TextBatch {
  int batch = 0;
  int len = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<int> lengths;  // valid input positions per item (text length + 1)
};
TextBatch make_text_batch(const std::vector<std::string>& texts, int max_len);

struct ModelConfig {
  int image_height = 64;
  int image_width = 64;
  int patch = 8;
  int model_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int encoder_layers = 4;
  int text_layers = 2;
  int image_layers = 2;
  int tap_layer = 0;  // 0 selects encoder_layers / 2
  int max_text_len = 96;
  int text_beam = 1;
  bool use_text_decoder = true;
  bool rel_pos_2d = true;
  // Visual-token grid, copied from the tokenizer.
  int codebook_size = 512;
  int token_grid_h = 8;
  int token_grid_w = 8;

  int num_patches() const { return (image_height / patch) * (image_width / patch); }
  int num_tokens() const { return token_grid_h * token_grid_w; }
  int tap() const { return tap_layer > 0 ? tap_layer : std::max(1, encoder_layers / 2); }

  void validate() const;
  void write(Config& c, const std::string& prefix) const;
  static ModelConfig read(const Config& c, const std::string& prefix);
};

// Encoder outputs for a batch: final states (after the stack's LayerNorm) and
// the normalized tapped states feeding the source text decoder.
struct EncoderStates {
  int batch = 0;
  int len = 0;  // patches + 1
  Tensor final_states;
  Tensor tapped;
};

struct TextDecoderParams {
  nn::Embedding embed;
  Tensor pos;
  std::vector<nn::DecoderLayer> layers;
  nn::LayerNorm final_ln;
  nn::Linear head;
};

struct TranslationOutput {
  std::string target_text;
  std::vector<int> visual_tokens;
  Image target_image;
  bool text_truncated = false;
};

class IimtModel {
 public:
  IimtModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return ps_; }
  const nn::ParameterStore& params() const { return ps_; }

  // Layer-0 encoder input: start token and projected patches plus positions.
  Tensor embed(std::span<const Real> pixels, int batch) const;
  // pixels: batch unit-range HWC images.
  EncoderStates encode(std::span<const Real> pixels, int batch, nn::ForwardCtx& ctx) const;

  // Final-layer states of the target text decoder over inputs ([batch * len, dim]).
  Tensor target_text_states(const EncoderStates& enc, const TextBatch& text, nn::ForwardCtx& ctx) const;
  Tensor target_text_logits(const Tensor& states) const { return tgt_.head(states); }
  // Source text decoder over the tapped encoder states; returns logits.
  Tensor source_text_logits(const EncoderStates& enc, const TextBatch& text, nn::ForwardCtx& ctx) const;

  // Image decoder, teacher-forced on tokens (batch * prefix_len, row-major per
  // item). Inputs are [BOS, tokens[0..prefix_len-1)]; returns logits
  // [batch * prefix_len, K]. txt_states/text are ignored without a text decoder.
  Tensor image_logits(const EncoderStates& enc, const Tensor* txt_states, const TextBatch* text,
                      std::span<const int> tokens, int prefix_len, nn::ForwardCtx& ctx,
                      std::vector<nn::FusionTrace>* traces = nullptr) const;

  // Greedy (or beam) text decoding for each image in the batch.
  std::vector<std::string> decode_text(const EncoderStates& enc, std::vector<bool>* truncated = nullptr) const;
  // Greedy raster-order decoding of exactly num_tokens() tokens per item.
  std::vector<int> decode_tokens(const EncoderStates& enc, const std::vector<std::string>& texts) const;

  std::vector<TranslationOutput> translate(std::span<const Real> pixels, int batch, const Tokenizer& tok) const;
  TranslationOutput translate(const Image& img, const Tokenizer& tok) const;

 private:
  Tensor run_text_decoder(const TextDecoderParams& p, const Tensor& memory, const EncoderStates& enc,
                          const TextBatch& text, nn::ForwardCtx& ctx) const;
  std::string beam_decode(const EncoderStates& enc, int item, bool* truncated) const;

  ModelConfig cfg_;
  nn::ParameterStore ps_;
  nn::Linear patch_proj_;
  Tensor start_token_, enc_pos_;
  nn::EncoderStack encoder_;
  nn::LayerNorm tap_ln_;
  TextDecoderParams tgt_, src_;
  nn::Embedding tok_embed_;
  Tensor tok_pos_;
  std::vector<nn::ImageDecoderLayer> img_layers_;
  nn::LayerNorm img_ln_;
  nn::Linear img_head_;
};

}  // namespace iimt
