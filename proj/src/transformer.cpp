#include "iimt/transformer.hpp"

#include <algorithm>

#include "iimt/errors.hpp"

namespace iimt::nn {

void AttentionConfig::validate() const {
  if (model_dim <= 0 || num_heads <= 0 || ffn_dim <= 0)
    throw ConfigError("attention config: dimensions must be positive");
  if (model_dim % num_heads != 0)
    throw ConfigError("attention config: model_dim " + std::to_string(model_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("attention config: dropout_rate must lie in [0, 1)");
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg) {
  cfg.validate();
  const int d = cfg.model_dim;
  wq = Linear(ps, name + ".q", d, d);
  wk = Linear(ps, name + ".k", d, d);
  wv = Linear(ps, name + ".v", d, d);
  wo = Linear(ps, name + ".o", d, d);
  heads = cfg.num_heads;
}

Tensor MultiHeadAttention::forward(const Tensor& xq, const SeqLayout& q, const Tensor& xkv,
                                   const SeqLayout& kv, bool causal, const Tensor* bias) const {
  if (q.batch != kv.batch) throw ShapeError("attention: query and key batch sizes differ");
  if (xq.dim(-1) != wq.w.dim(0) || xkv.dim(-1) != wk.w.dim(0))
    throw ShapeError("attention: input width " + xq.shape_string() + " / " + xkv.shape_string() +
                     " does not match model_dim " + std::to_string(wq.w.dim(0)));
  kernels::AttentionShape s;
  s.batch = q.batch;
  s.sq = q.len;
  s.sk = kv.len;
  s.dim = wq.w.dim(1);
  s.heads = heads;
  s.causal = causal;
  Tensor ctx = ad::attention(wq(xq), wk(xkv), wv(xkv), s, bias, kv.valid);
  return wo(ctx);
}

FeedForward::FeedForward(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg) {
  in = Linear(ps, name + ".in", cfg.model_dim, cfg.ffn_dim);
  out = Linear(ps, name + ".out", cfg.ffn_dim, cfg.model_dim);
}

Tensor FeedForward::forward(const Tensor& x, ForwardCtx& ctx) const { return out(ctx.drop(ad::gelu(in(x)))); }

EncoderLayer::EncoderLayer(ParameterStore& ps, const std::string& name, const AttentionConfig& c)
    : cfg(c),
      ln_attn(ps, name + ".ln_attn", c.model_dim),
      ln_ffn(ps, name + ".ln_ffn", c.model_dim),
      attn(ps, name + ".attn", c),
      ffn(ps, name + ".ffn", c) {}

Tensor EncoderLayer::forward(const Tensor& h, const SeqLayout& seq, ForwardCtx& ctx) const {
  Tensor x = ln_attn(h);
  Tensor a = ad::add(h, ctx.drop(attn.forward(x, seq, x, seq, cfg.causal)));
  return ad::add(a, ctx.drop(ffn.forward(ln_ffn(a), ctx)));
}

DecoderLayer::DecoderLayer(ParameterStore& ps, const std::string& name, const AttentionConfig& c)
    : cfg(c),
      ln_self(ps, name + ".ln_self", c.model_dim),
      ln_cross(ps, name + ".ln_cross", c.model_dim),
      ln_ffn(ps, name + ".ln_ffn", c.model_dim),
      self_attn(ps, name + ".self", c),
      cross_attn(ps, name + ".cross", c),
      ffn(ps, name + ".ffn", c) {}

Tensor DecoderLayer::forward(const Tensor& h, const SeqLayout& seq, const Tensor& memory,
                             const SeqLayout& mem, ForwardCtx& ctx) const {
  Tensor x = ln_self(h);
  Tensor a = ad::add(h, ctx.drop(self_attn.forward(x, seq, x, seq, true)));
  Tensor c = ad::add(a, ctx.drop(cross_attn.forward(ln_cross(a), seq, memory, mem, false)));
  return ad::add(c, ctx.drop(ffn.forward(ln_ffn(c), ctx)));
}

GatedFusion::GatedFusion(ParameterStore& ps, const std::string& name, int dim)
    : w_img(ps, name + ".w_img", dim, dim, false), w_txt(ps, name + ".w_txt", dim, dim, false) {}

Tensor GatedFusion::gate(const Tensor& img, const Tensor& txt) const {
  if (img.shape() != txt.shape())
    throw ContractError("gated fusion: stream shapes differ " + img.shape_string() + " vs " + txt.shape_string());
  return ad::sigmoid(ad::add(w_img(img), w_txt(txt)));
}

Tensor GatedFusion::fuse(const Tensor& img, const Tensor& txt) const {
  Tensor g = gate(img, txt);
  return ad::add(txt, ad::mul(g, ad::sub(img, txt)));
}

RelPos2D::RelPos2D(ParameterStore& ps, const std::string& name, int heads, int gh, int gw)
    : grid_h(gh), grid_w(gw) {
  if (gh <= 0 || gw <= 0) throw ConfigError("relative position grid must be positive");
  table = ps.constant(name, {heads, (2 * gh - 1) * (2 * gw - 1)}, 0.0);
}

int RelPos2D::bucket(int dr, int dc) const {
  dr = std::clamp(dr, -(grid_h - 1), grid_h - 1);
  dc = std::clamp(dc, -(grid_w - 1), grid_w - 1);
  return (dr + grid_h - 1) * (2 * grid_w - 1) + (dc + grid_w - 1);
}

Tensor rel_pos_bias(int grid_h, int grid_w, const RelPos2D& rp, int len) {
  const int n = grid_h * grid_w;
  if (len < 0) len = n;
  if (len == 0 || len > n) throw ContractError("relative bias: length " + std::to_string(len) + " exceeds grid of " + std::to_string(n));
  std::vector<int> idx(static_cast<std::size_t>(len) * len);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j)
      idx[static_cast<std::size_t>(i) * len + j] = rp.bucket(i / grid_w - j / grid_w, i % grid_w - j % grid_w);
  const int heads = rp.table.dim(0);
  return ad::reshape(ad::gather_cols(rp.table, idx), {heads, len, len});
}

ImageDecoderLayer::ImageDecoderLayer(ParameterStore& ps, const std::string& name, const AttentionConfig& c,
                                     int gh, int gw, bool with_text)
    : cfg(c),
      text_stream(with_text),
      grid_h(gh),
      grid_w(gw),
      ln_self(ps, name + ".ln_self", c.model_dim),
      ln_img(ps, name + ".ln_img", c.model_dim),
      ln_ffn(ps, name + ".ln_ffn", c.model_dim),
      self_attn(ps, name + ".self", c),
      cross_img(ps, name + ".cross_img", c),
      ffn(ps, name + ".ffn", c) {
  if (c.rel_pos_2d) rel = RelPos2D(ps, name + ".rel", c.num_heads, gh, gw);
  if (with_text) {
    ln_txt = LayerNorm(ps, name + ".ln_txt", c.model_dim);
    cross_txt = MultiHeadAttention(ps, name + ".cross_txt", c);
    gate = GatedFusion(ps, name + ".gate", c.model_dim);
  }
}

Tensor ImageDecoderLayer::forward(const Tensor& h, const SeqLayout& seq, const Tensor& img_mem,
                                  const SeqLayout& img, const Tensor* txt_mem, const SeqLayout* txt,
                                  ForwardCtx& ctx, FusionTrace* trace) const {
  if (seq.len > grid_h * grid_w)
    throw ContractError("image decoder: prefix of " + std::to_string(seq.len) + " tokens exceeds the " +
                        std::to_string(grid_h * grid_w) + "-token grid");
  if (text_stream && (txt_mem == nullptr || txt == nullptr))
    throw ContractError("image decoder: text memory required by this layer");
  Tensor bias;
  if (cfg.rel_pos_2d) bias = rel_pos_bias(grid_h, grid_w, rel, seq.len);
  Tensor x = ln_self(h);
  Tensor c = ad::add(h, ctx.drop(self_attn.forward(x, seq, x, seq, true, bias.defined() ? &bias : nullptr)));
  Tensor a = cross_img.forward(ln_img(c), seq, img_mem, img, false);
  Tensor fused = a;
  Tensor t;
  if (text_stream) {
    t = cross_txt.forward(ln_txt(c), seq, *txt_mem, *txt, false);
    fused = gate.fuse(a, t);
  }
  if (trace) *trace = FusionTrace{c, a, t, fused};
  Tensor f = ad::add(c, ctx.drop(fused));
  return ad::add(f, ctx.drop(ffn.forward(ln_ffn(f), ctx)));
}

EncoderStack::EncoderStack(ParameterStore& ps, const std::string& name, const AttentionConfig& cfg, int n) {
  if (n <= 0) throw ConfigError("encoder stack needs at least one layer");
  for (int i = 0; i < n; ++i) layers.emplace_back(ps, name + ".l" + std::to_string(i), cfg);
  final_ln = LayerNorm(ps, name + ".ln_final", cfg.model_dim);
}

Tensor EncoderStack::forward(const Tensor& h, const SeqLayout& seq, ForwardCtx& ctx, int tap, Tensor* tapped) const {
  Tensor x = h;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(x, seq, ctx);
    if (tapped && static_cast<int>(i) + 1 == tap) *tapped = x;
  }
  return final_ln(x);
}

}  // namespace iimt::nn
