#pragma once

// Text-to-image teacher used for distillation: a text encoder over the target
// text, a small residual conv stack over the source image, and an image
// decoder attending to both.

#include <span>
#include <string>
#include <vector>

#include "iimt/iimt_model.hpp"

namespace iimt {

struct TeacherConfig {
  int image_height = 64;
  int image_width = 64;
  int model_dim = 48;
  int num_heads = 4;
  int ffn_dim = 96;
  int text_layers = 2;
  int image_layers = 2;
  int channels1 = 16;
  int channels2 = 32;
  int channels3 = 48;
  int max_text_len = 96;
  bool rel_pos_2d = true;
  int codebook_size = 512;
  int token_grid_h = 8;
  int token_grid_w = 8;

  int feature_h() const { return image_height / 8; }
  int feature_w() const { return image_width / 8; }
  int num_tokens() const { return token_grid_h * token_grid_w; }

  // Width 0.75x the student (rounded to a multiple of the head count), same
  // depth, image size, text cap and token grid.
  static TeacherConfig for_student(const ModelConfig& student);

  void validate() const;
  void write(Config& c, const std::string& prefix) const;
  static TeacherConfig read(const Config& c, const std::string& prefix, const TeacherConfig& base);
};

class TeacherModel {
 public:
  TeacherModel(const TeacherConfig& cfg, std::uint64_t seed);

  const TeacherConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return ps_; }
  const nn::ParameterStore& params() const { return ps_; }

  // Conv feature memory [batch * feature_h * feature_w, model_dim].
  Tensor image_features(std::span<const Real> pixels, int batch) const;
  // Teacher-forced visual-token logits [batch * N, K]; tokens are the gold
  // sequences (batch * N).
  Tensor logits(std::span<const Real> pixels, const std::vector<std::string>& texts,
                std::span<const int> tokens, nn::ForwardCtx& ctx) const;
  // Row-wise softmax(logits / temperature), one row per gold token.
  std::vector<Real> distributions(std::span<const Real> pixels, const std::vector<std::string>& texts,
                                  std::span<const int> tokens, Real temperature = 1.0) const;

 private:
  struct ResBlock {
    Tensor w1, b1, w2, b2, ws, bs;
  };
  ResBlock make_block(const std::string& name, int cin, int cout);
  Tensor run_block(const ResBlock& blk, const Tensor& x) const;

  TeacherConfig cfg_;
  nn::ParameterStore ps_;
  std::vector<ResBlock> blocks_;
  nn::Linear feat_proj_;
  Tensor feat_pos_;
  nn::LayerNorm feat_ln_;
  nn::Embedding char_embed_;
  Tensor text_pos_;
  nn::EncoderStack text_encoder_;
  nn::Embedding tok_embed_;
  Tensor tok_pos_;
  std::vector<nn::ImageDecoderLayer> layers_;
  nn::LayerNorm final_ln_;
  nn::Linear head_;
};

}  // namespace iimt
