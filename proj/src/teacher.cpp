#include "iimt/teacher.hpp"

#include <cmath>

#include "iimt/errors.hpp"

namespace iimt {

TeacherConfig TeacherConfig::for_student(const ModelConfig& s) {
  TeacherConfig t;
  t.image_height = s.image_height;
  t.image_width = s.image_width;
  t.num_heads = s.num_heads;
  const int width = static_cast<int>(std::lround(0.75 * s.model_dim));
  t.model_dim = std::max(s.num_heads, width / s.num_heads * s.num_heads);
  t.ffn_dim = std::max(1, static_cast<int>(std::lround(0.75 * s.ffn_dim)));
  t.text_layers = s.text_layers;
  t.image_layers = s.image_layers;
  t.max_text_len = s.max_text_len;
  t.rel_pos_2d = s.rel_pos_2d;
  t.codebook_size = s.codebook_size;
  t.token_grid_h = s.token_grid_h;
  t.token_grid_w = s.token_grid_w;
  return t;
}

void TeacherConfig::validate() const {
  if (image_height % 8 != 0 || image_width % 8 != 0)
    throw ConfigError("teacher: image size must be divisible by 8 for the three stride-2 conv blocks");
  nn::AttentionConfig{model_dim, num_heads, ffn_dim}.validate();
  if (text_layers <= 0 || image_layers <= 0) throw ConfigError("teacher: layer counts must be positive");
  if (channels1 <= 0 || channels2 <= 0 || channels3 <= 0) throw ConfigError("teacher: channel counts must be positive");
  if (max_text_len <= 0 || codebook_size < 2) throw ConfigError("teacher: invalid text cap or codebook");
}

void TeacherConfig::write(Config& c, const std::string& p) const {
  c.set(p + "model_dim", std::to_string(model_dim));
  c.set(p + "num_heads", std::to_string(num_heads));
  c.set(p + "ffn_dim", std::to_string(ffn_dim));
  c.set(p + "text_layers", std::to_string(text_layers));
  c.set(p + "image_layers", std::to_string(image_layers));
  c.set(p + "channels1", std::to_string(channels1));
  c.set(p + "channels2", std::to_string(channels2));
  c.set(p + "channels3", std::to_string(channels3));
}

TeacherConfig TeacherConfig::read(const Config& c, const std::string& p, const TeacherConfig& base) {
  TeacherConfig t = base;
  t.model_dim = c.get_int(p + "model_dim", t.model_dim);
  t.num_heads = c.get_int(p + "num_heads", t.num_heads);
  t.ffn_dim = c.get_int(p + "ffn_dim", t.ffn_dim);
  t.text_layers = c.get_int(p + "text_layers", t.text_layers);
  t.image_layers = c.get_int(p + "image_layers", t.image_layers);
  t.channels1 = c.get_int(p + "channels1", t.channels1);
  t.channels2 = c.get_int(p + "channels2", t.channels2);
  t.channels3 = c.get_int(p + "channels3", t.channels3);
  return t;
}

TeacherModel::ResBlock TeacherModel::make_block(const std::string& name, int cin, int cout) {
  ResBlock b;
  const Real s1 = 1.0 / std::sqrt(cin * 9.0), s2 = 1.0 / std::sqrt(cout * 9.0), ss = 1.0 / std::sqrt(static_cast<Real>(cin));
  b.w1 = ps_.normal(name + ".conv1.w", {cout, cin, 3, 3}, s1);
  b.b1 = ps_.constant(name + ".conv1.b", {cout}, 0.0);
  b.w2 = ps_.normal(name + ".conv2.w", {cout, cout, 3, 3}, s2);
  b.b2 = ps_.constant(name + ".conv2.b", {cout}, 0.0);
  b.ws = ps_.normal(name + ".skip.w", {cout, cin, 1, 1}, ss);
  b.bs = ps_.constant(name + ".skip.b", {cout}, 0.0);
  return b;
}

TeacherModel::TeacherModel(const TeacherConfig& cfg, std::uint64_t seed) : cfg_(cfg), ps_(seed) {
  cfg_.validate();
  nn::AttentionConfig ac{cfg_.model_dim, cfg_.num_heads, cfg_.ffn_dim};
  blocks_.push_back(make_block("t2i.conv.b0", 3, cfg_.channels1));
  blocks_.push_back(make_block("t2i.conv.b1", cfg_.channels1, cfg_.channels2));
  blocks_.push_back(make_block("t2i.conv.b2", cfg_.channels2, cfg_.channels3));
  const int m = cfg_.feature_h() * cfg_.feature_w();
  feat_proj_ = nn::Linear(ps_, "t2i.feat.proj", cfg_.channels3, cfg_.model_dim);
  feat_pos_ = ps_.normal("t2i.feat.pos", {m, cfg_.model_dim}, 0.1);
  feat_ln_ = nn::LayerNorm(ps_, "t2i.feat.ln", cfg_.model_dim);
  char_embed_ = nn::Embedding(ps_, "t2i.text.embed", kCharVocab, cfg_.model_dim, 0.3);
  text_pos_ = ps_.normal("t2i.text.pos", {cfg_.max_text_len + 1, cfg_.model_dim}, 0.1);
  text_encoder_ = nn::EncoderStack(ps_, "t2i.text", ac, cfg_.text_layers);
  nn::AttentionConfig ic = ac;
  ic.rel_pos_2d = cfg_.rel_pos_2d;
  tok_embed_ = nn::Embedding(ps_, "t2i.dec.embed", cfg_.codebook_size + 1, cfg_.model_dim, 0.3);
  tok_pos_ = ps_.normal("t2i.dec.pos", {cfg_.num_tokens(), cfg_.model_dim}, 0.1);
  for (int i = 0; i < cfg_.image_layers; ++i)
    layers_.emplace_back(ps_, "t2i.dec.l" + std::to_string(i), ic, cfg_.token_grid_h, cfg_.token_grid_w, true);
  final_ln_ = nn::LayerNorm(ps_, "t2i.dec.ln_final", cfg_.model_dim);
  head_ = nn::Linear(ps_, "t2i.dec.head", cfg_.model_dim, cfg_.codebook_size);
}

Tensor TeacherModel::run_block(const ResBlock& blk, const Tensor& x) const {
  Tensor y = ad::relu(ad::conv2d(x, blk.w1, &blk.b1, 2, 1));
  y = ad::conv2d(y, blk.w2, &blk.b2, 1, 1);
  Tensor s = ad::conv2d(x, blk.ws, &blk.bs, 2, 0);
  return ad::relu(ad::add(y, s));
}

Tensor TeacherModel::image_features(std::span<const Real> pixels, int batch) const {
  const int h = cfg_.image_height, w = cfg_.image_width;
  if (batch <= 0 || pixels.size() != static_cast<std::size_t>(batch) * h * w * 3)
    throw ShapeError("teacher: pixel buffer does not hold " + std::to_string(batch) + " images");
  // HWC -> CHW
  std::vector<Real> chw(pixels.size());
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          chw[((static_cast<std::size_t>(b) * 3 + c) * h + y) * w + x] = pixels[((static_cast<std::size_t>(b) * h + y) * w + x) * 3 + c];
  Tensor f = Tensor::from({batch, 3, h, w}, std::move(chw));
  for (const auto& blk : blocks_) f = run_block(blk, f);
  const int m = cfg_.feature_h() * cfg_.feature_w();
  f = ad::reshape(ad::permute(ad::reshape(f, {batch, cfg_.channels3, m}), {0, 2, 1}), {batch * m, cfg_.channels3});
  return feat_ln_(ad::add_positional(feat_proj_(f), feat_pos_, m));
}

Tensor TeacherModel::logits(std::span<const Real> pixels, const std::vector<std::string>& texts,
                            std::span<const int> tokens, nn::ForwardCtx& ctx) const {
  const int batch = static_cast<int>(texts.size());
  const int n = cfg_.num_tokens();
  const int k = cfg_.codebook_size;
  if (tokens.size() != static_cast<std::size_t>(batch) * n) throw ShapeError("teacher: token buffer does not match batch");
  Tensor feats = image_features(pixels, batch);
  const nn::SeqLayout img{batch, cfg_.feature_h() * cfg_.feature_w()};

  // Encoder input is the text followed by EOS.
  TextBatch tb = make_text_batch(texts, cfg_.max_text_len);
  std::vector<int> enc_in(tb.targets.size(), kPad);
  for (std::size_t i = 0; i < enc_in.size(); ++i)
    if (tb.targets[i] >= 0) enc_in[i] = tb.targets[i];
  Tensor th = ad::add_positional(char_embed_(enc_in), text_pos_, tb.len);
  const nn::SeqLayout txt{batch, tb.len, &tb.lengths};
  th = text_encoder_.forward(ctx.drop(th), txt, ctx);

  std::vector<int> inputs(tokens.size());
  for (int b = 0; b < batch; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * n;
    inputs[base] = k;
    for (int i = 1; i < n; ++i) {
      const int t = tokens[base + i - 1];
      if (t < 0 || t >= k) throw RangeError("visual token " + std::to_string(t) + " outside codebook");
      inputs[base + i] = t;
    }
  }
  Tensor h = ctx.drop(ad::add_positional(tok_embed_(inputs), tok_pos_, n));
  const nn::SeqLayout seq{batch, n};
  for (const auto& layer : layers_) h = layer.forward(h, seq, feats, img, &th, &txt, ctx);
  return head_(final_ln_(h));
}

std::vector<Real> TeacherModel::distributions(std::span<const Real> pixels, const std::vector<std::string>& texts,
                                              std::span<const int> tokens, Real temperature) const {
  if (temperature <= 0) throw ConfigError("teacher: temperature must be positive");
  nn::ForwardCtx ctx;
  Tensor z = ad::scale(logits(pixels, texts, tokens, ctx), 1.0 / temperature);
  Tensor p = ad::softmax(z, -1);
  return {p.data().begin(), p.data().end()};
}

}  // namespace iimt
