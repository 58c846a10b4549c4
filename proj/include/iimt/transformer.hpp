#pragma once

// Pre-norm transformer sub-layers shared by the tokenizer, the translation
// model and the teacher. Hidden states of a batch are stored as 2-D
// [batch * len, model_dim] tensors together with a SeqLayout.

#include <string>
#include <vector>

#include "iimt/nn.hpp"

namespace iimt::nn {

struct AttentionConfig {
  int model_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  Real dropout_rate = 0.0;
  bool causal = false;
  bool rel_pos_2d = false;

  void validate() const;
};

struct SeqLayout {
  int batch = 1;
  int len = 1;
  // Optional number of valid (non-padding) positions per batch item; only
  // consulted when the sequence serves as attention keys.
  const std::vector<int>* valid = nullptr;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg);

  // bias: [heads, q.len, kv.len] added to the logits before softmax.
  Tensor forward(const Tensor& xq, const SeqLayout& q, const Tensor& xkv, const SeqLayout& kv,
                 bool causal, const Tensor* bias = nullptr) const;

  Linear wq, wk, wv, wo;
  int heads = 1;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg);
  Tensor forward(const Tensor& x, ForwardCtx& ctx) const;

  Linear in, out;
};

class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg);
  Tensor forward(const Tensor& h, const SeqLayout& seq, ForwardCtx& ctx) const;

  AttentionConfig cfg;
  LayerNorm ln_attn, ln_ffn;
  MultiHeadAttention attn;
  FeedForward ffn;
};

// Causal self-attention, cross-attention over an encoder memory, FFN.
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg);
  Tensor forward(const Tensor& h, const SeqLayout& seq, const Tensor& memory,
                 const SeqLayout& mem, ForwardCtx& ctx) const;

  AttentionConfig cfg;
  LayerNorm ln_self, ln_cross, ln_ffn;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
};

// gate = sigmoid(img * W + txt * U); out = gate * img + (1 - gate) * txt
class GatedFusion {
 public:
  GatedFusion() = default;
  GatedFusion(ParameterStore& ps, const std::string& name, int dim);
  Tensor gate(const Tensor& img, const Tensor& txt) const;
  Tensor fuse(const Tensor& img, const Tensor& txt) const;

  Linear w_img, w_txt;
};

// Learned per-head logit bias indexed by the clipped 2-D displacement between
// two raster positions of a grid_h x grid_w grid.
class RelPos2D {
 public:
  RelPos2D() = default;
  RelPos2D(ParameterStore& ps, const std::string& name, int heads, int grid_h, int grid_w);

  int buckets() const { return (2 * grid_h - 1) * (2 * grid_w - 1); }
  // Column of the table for displacement (dr, dc), clamped to the table radius.
  int bucket(int dr, int dc) const;

  Tensor table;  // [heads, buckets]
  int grid_h = 1, grid_w = 1;
};

// Bias [heads, len, len] between the first len raster positions of a
// grid_h x grid_w grid (len defaults to the whole grid).
Tensor rel_pos_bias(int grid_h, int grid_w, const RelPos2D& rp, int len = -1);

// Intermediate streams of one image-decoder layer, for inspection.
struct FusionTrace {
  Tensor self_out;  // residual stream after self-attention
  Tensor img_stream;
  Tensor txt_stream;
  Tensor fused;
};

// Self-attention with 2-D relative bias, cross-attention over image memory and
// over text memory, gated fusion of the two streams, FFN. Without a text
// stream the fusion reduces to the image stream.
class ImageDecoderLayer {
 public:
  ImageDecoderLayer() = default;
  ImageDecoderLayer(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg,
                    int grid_h, int grid_w, bool text_stream);

  Tensor forward(const Tensor& h, const SeqLayout& seq, const Tensor& img_mem, const SeqLayout& img,
                 const Tensor* txt_mem, const SeqLayout* txt, ForwardCtx& ctx,
                 FusionTrace* trace = nullptr) const;

  AttentionConfig cfg;
  bool text_stream = true;
  int grid_h = 1, grid_w = 1;
  LayerNorm ln_self, ln_img, ln_txt, ln_ffn;
  MultiHeadAttention self_attn, cross_img, cross_txt;
  RelPos2D rel;
  GatedFusion gate;
  FeedForward ffn;
};

// Layers followed by a final LayerNorm. Optionally exposes the (un-normalized)
// output of the first `tap` layers.
class EncoderStack {
 public:
  EncoderStack() = default;
  EncoderStack(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg, int layers);
  Tensor forward(const Tensor& h, const SeqLayout& seq, ForwardCtx& ctx, int tap = -1,
                 Tensor* tapped = nullptr) const;

  std::vector<EncoderLayer> layers;
  LayerNorm final_ln;
};

}  // namespace iimt::nn
