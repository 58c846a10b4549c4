#include "iimt/iimt_model.hpp"

#include <cmath>
#include <limits>

#include "iimt/errors.hpp"

namespace iimt {

std::vector<int> text_to_ids(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) {
    if (c == kEos || c == kPad) throw RangeError("text contains reserved byte " + std::to_string(c));
    ids.push_back(c);
  }
  return ids;
}

std::string ids_to_text(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= kCharVocab) throw RangeError("char id " + std::to_string(id) + " outside vocabulary");
    if (id == kEos) break;
    if (id == kPad) continue;
    out.push_back(static_cast<char>(id));
  }
  return out;
}

TextBatch make_text_batch(const std::vector<std::string>& texts, int max_len) {
  if (texts.empty()) throw ContractError("text batch: no texts");
  TextBatch tb;
  tb.batch = static_cast<int>(texts.size());
  for (const auto& t : texts) {
    if (static_cast<int>(t.size()) > max_len)
      throw ContractError("text of " + std::to_string(t.size()) + " bytes exceeds max_text_len " + std::to_string(max_len));
    tb.len = std::max(tb.len, static_cast<int>(t.size()) + 1);
  }
  tb.inputs.assign(static_cast<std::size_t>(tb.batch) * tb.len, kPad);
  tb.targets.assign(static_cast<std::size_t>(tb.batch) * tb.len, -1);
  for (int b = 0; b < tb.batch; ++b) {
    const auto ids = text_to_ids(texts[b]);
    const std::size_t base = static_cast<std::size_t>(b) * tb.len;
    tb.inputs[base] = kEos;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      tb.inputs[base + i + 1] = ids[i];
      tb.targets[base + i] = ids[i];
    }
    tb.targets[base + ids.size()] = kEos;
    tb.lengths.push_back(static_cast<int>(ids.size()) + 1);
  }
  return tb;
}

void ModelConfig::validate() const {
  if (patch <= 0 || image_height % patch != 0 || image_width % patch != 0)
    throw ConfigError("model: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                      " is not divisible by patch " + std::to_string(patch));
  nn::AttentionConfig{model_dim, num_heads, ffn_dim}.validate();
  if (encoder_layers <= 0 || image_layers <= 0 || text_layers <= 0) throw ConfigError("model: layer counts must be positive");
  if (tap() < 1 || tap() > encoder_layers)
    throw ConfigError("model: tap_layer " + std::to_string(tap_layer) + " outside [1, " + std::to_string(encoder_layers) + "]");
  if (max_text_len <= 0) throw ConfigError("model: max_text_len must be positive");
  if (text_beam <= 0) throw ConfigError("model: text_beam must be positive");
  if (codebook_size < 2 || token_grid_h <= 0 || token_grid_w <= 0) throw ConfigError("model: invalid visual-token grid");
}

void ModelConfig::write(Config& c, const std::string& p) const {
  c.set(p + "image_height", std::to_string(image_height));
  c.set(p + "image_width", std::to_string(image_width));
  c.set(p + "patch", std::to_string(patch));
  c.set(p + "model_dim", std::to_string(model_dim));
  c.set(p + "num_heads", std::to_string(num_heads));
  c.set(p + "ffn_dim", std::to_string(ffn_dim));
  c.set(p + "encoder_layers", std::to_string(encoder_layers));
  c.set(p + "text_layers", std::to_string(text_layers));
  c.set(p + "image_layers", std::to_string(image_layers));
  c.set(p + "tap_layer", std::to_string(tap_layer));
  c.set(p + "max_text_len", std::to_string(max_text_len));
  c.set(p + "text_beam", std::to_string(text_beam));
  c.set(p + "use_text_decoder", use_text_decoder ? "true" : "false");
  c.set(p + "rel_pos_2d", rel_pos_2d ? "true" : "false");
}

ModelConfig ModelConfig::read(const Config& c, const std::string& p) {
  ModelConfig m;
  m.image_height = c.get_int(p + "image_height", m.image_height);
  m.image_width = c.get_int(p + "image_width", m.image_width);
  m.patch = c.get_int(p + "patch", m.patch);
  m.model_dim = c.get_int(p + "model_dim", m.model_dim);
  m.num_heads = c.get_int(p + "num_heads", m.num_heads);
  m.ffn_dim = c.get_int(p + "ffn_dim", m.ffn_dim);
  m.encoder_layers = c.get_int(p + "encoder_layers", m.encoder_layers);
  m.text_layers = c.get_int(p + "text_layers", m.text_layers);
  m.image_layers = c.get_int(p + "image_layers", m.image_layers);
  m.tap_layer = c.get_int(p + "tap_layer", m.tap_layer);
  m.max_text_len = c.get_int(p + "max_text_len", m.max_text_len);
  m.text_beam = c.get_int(p + "text_beam", m.text_beam);
  m.use_text_decoder = c.get_bool(p + "use_text_decoder", m.use_text_decoder);
  m.rel_pos_2d = c.get_bool(p + "rel_pos_2d", m.rel_pos_2d);
  return m;
}

namespace {

TextDecoderParams make_text_decoder(nn::ParameterStore& ps, const std::string& name, const ModelConfig& cfg,
                                    const nn::AttentionConfig& ac) {
  TextDecoderParams p;
  p.embed = nn::Embedding(ps, name + ".embed", kCharVocab, cfg.model_dim, 0.3);
  p.pos = ps.normal(name + ".pos", {cfg.max_text_len + 1, cfg.model_dim}, 0.1);
  for (int i = 0; i < cfg.text_layers; ++i) p.layers.emplace_back(ps, name + ".l" + std::to_string(i), ac);
  p.final_ln = nn::LayerNorm(ps, name + ".ln_final", cfg.model_dim);
  p.head = nn::Linear(ps, name + ".head", cfg.model_dim, kCharVocab);
  return p;
}

int argmax_row(std::span<const Real> row, int skip = -1) {
  int best = -1;
  Real bv = -std::numeric_limits<Real>::infinity();
  for (int j = 0; j < static_cast<int>(row.size()); ++j)
    if (j != skip && row[j] > bv) {
      bv = row[j];
      best = j;
    }
  return best;
}

}  // namespace

IimtModel::IimtModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), ps_(seed) {
  cfg_.validate();
  nn::AttentionConfig ac{cfg_.model_dim, cfg_.num_heads, cfg_.ffn_dim};
  const int n = cfg_.num_patches();
  patch_proj_ = nn::Linear(ps_, "enc.patch", cfg_.patch * cfg_.patch * 3, cfg_.model_dim);
  start_token_ = ps_.normal("enc.start", {1, cfg_.model_dim}, 0.1);
  enc_pos_ = ps_.normal("enc.pos", {n + 1, cfg_.model_dim}, 0.1);
  encoder_ = nn::EncoderStack(ps_, "enc", ac, cfg_.encoder_layers);
  tap_ln_ = nn::LayerNorm(ps_, "enc.ln_tap", cfg_.model_dim);
  if (cfg_.use_text_decoder) tgt_ = make_text_decoder(ps_, "ttd", cfg_, ac);
  src_ = make_text_decoder(ps_, "std", cfg_, ac);
  nn::AttentionConfig ic = ac;
  ic.rel_pos_2d = cfg_.rel_pos_2d;
  tok_embed_ = nn::Embedding(ps_, "imgdec.embed", cfg_.codebook_size + 1, cfg_.model_dim, 0.3);
  tok_pos_ = ps_.normal("imgdec.pos", {cfg_.num_tokens(), cfg_.model_dim}, 0.1);
  for (int i = 0; i < cfg_.image_layers; ++i)
    img_layers_.emplace_back(ps_, "imgdec.l" + std::to_string(i), ic, cfg_.token_grid_h, cfg_.token_grid_w,
                             cfg_.use_text_decoder);
  img_ln_ = nn::LayerNorm(ps_, "imgdec.ln_final", cfg_.model_dim);
  img_head_ = nn::Linear(ps_, "imgdec.head", cfg_.model_dim, cfg_.codebook_size);
}

Tensor IimtModel::embed(std::span<const Real> pixels, int batch) const {
  const std::size_t per = static_cast<std::size_t>(cfg_.image_height) * cfg_.image_width * 3;
  if (batch <= 0 || pixels.size() != per * batch)
    throw ShapeError("model: expected " + std::to_string(batch) + " images of " + std::to_string(cfg_.image_height) + "x" +
                     std::to_string(cfg_.image_width) + "x3, got " + std::to_string(pixels.size()) + " values");
  const int n = cfg_.num_patches();
  const int pd = cfg_.patch * cfg_.patch * 3;
  Tensor patches = Tensor::from({batch * n, pd}, patchify(pixels, cfg_.image_height, cfg_.image_width, cfg_.patch));
  Tensor e = patch_proj_(patches);
  std::vector<Tensor> parts;
  for (int b = 0; b < batch; ++b) {
    parts.push_back(start_token_);
    parts.push_back(ad::slice(e, 0, b * n, n));
  }
  return ad::add_positional(ad::concat(parts, 0), enc_pos_, n + 1);
}

EncoderStates IimtModel::encode(std::span<const Real> pixels, int batch, nn::ForwardCtx& ctx) const {
  EncoderStates out;
  out.batch = batch;
  out.len = cfg_.num_patches() + 1;
  Tensor tapped;
  out.final_states = encoder_.forward(embed(pixels, batch), {batch, out.len}, ctx, cfg_.tap(), &tapped);
  out.tapped = tap_ln_(tapped);
  return out;
}

Tensor IimtModel::run_text_decoder(const TextDecoderParams& p, const Tensor& memory, const EncoderStates& enc,
                                   const TextBatch& text, nn::ForwardCtx& ctx) const {
  if (text.batch != enc.batch) throw ShapeError("text batch does not match encoder batch");
  Tensor h = ad::add_positional(p.embed(text.inputs), p.pos, text.len);
  h = ctx.drop(h);
  const nn::SeqLayout seq{text.batch, text.len};
  const nn::SeqLayout mem{enc.batch, enc.len};
  for (const auto& layer : p.layers) h = layer.forward(h, seq, memory, mem, ctx);
  return p.final_ln(h);
}

Tensor IimtModel::target_text_states(const EncoderStates& enc, const TextBatch& text, nn::ForwardCtx& ctx) const {
  if (!cfg_.use_text_decoder) throw ContractError("model was built without a target text decoder");
  return run_text_decoder(tgt_, enc.final_states, enc, text, ctx);
}

Tensor IimtModel::source_text_logits(const EncoderStates& enc, const TextBatch& text, nn::ForwardCtx& ctx) const {
  return src_.head(run_text_decoder(src_, enc.tapped, enc, text, ctx));
}

Tensor IimtModel::image_logits(const EncoderStates& enc, const Tensor* txt_states, const TextBatch* text,
                               std::span<const int> tokens, int prefix_len, nn::ForwardCtx& ctx,
                               std::vector<nn::FusionTrace>* traces) const {
  const int k = cfg_.codebook_size;
  if (prefix_len <= 0 || prefix_len > cfg_.num_tokens())
    throw ContractError("image decoder: prefix of " + std::to_string(prefix_len) + " tokens exceeds the " +
                        std::to_string(cfg_.num_tokens()) + "-token grid");
  if (tokens.size() != static_cast<std::size_t>(enc.batch) * prefix_len)
    throw ShapeError("image decoder: token buffer does not match batch x prefix");
  std::vector<int> inputs(tokens.size());
  for (int b = 0; b < enc.batch; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * prefix_len;
    inputs[base] = k;
    for (int i = 1; i < prefix_len; ++i) {
      const int t = tokens[base + i - 1];
      if (t < 0 || t >= k) throw RangeError("visual token " + std::to_string(t) + " outside codebook of size " + std::to_string(k));
      inputs[base + i] = t;
    }
  }
  Tensor h = ctx.drop(ad::add_positional(tok_embed_(inputs), tok_pos_, prefix_len));
  const nn::SeqLayout seq{enc.batch, prefix_len};
  const nn::SeqLayout img{enc.batch, enc.len};
  nn::SeqLayout txt;
  if (cfg_.use_text_decoder) {
    if (txt_states == nullptr || text == nullptr) throw ContractError("image decoder needs target text states");
    txt = {text->batch, text->len, &text->lengths};
  }
  if (traces) traces->clear();
  for (const auto& layer : img_layers_) {
    nn::FusionTrace tr;
    h = layer.forward(h, seq, enc.final_states, img, cfg_.use_text_decoder ? txt_states : nullptr,
                      cfg_.use_text_decoder ? &txt : nullptr, ctx, traces ? &tr : nullptr);
    if (traces) traces->push_back(tr);
  }
  return img_head_(img_ln_(h));
}

std::string IimtModel::beam_decode(const EncoderStates& enc, int item, bool* truncated) const {
  struct Hyp {
    std::string text;
    Real score = 0;
    bool done = false;
    bool cut = false;  // stopped at the length cap without an end symbol
  };
  const int beam = cfg_.text_beam;
  Tensor memory = ad::slice(enc.final_states, 0, item * enc.len, enc.len);
  std::vector<Hyp> hyps{Hyp{}};
  for (int step = 0; step <= cfg_.max_text_len; ++step) {
    if (std::all_of(hyps.begin(), hyps.end(), [](const Hyp& h) { return h.done; })) break;
    std::vector<std::string> texts;
    for (const auto& h : hyps) texts.push_back(h.text);
    const TextBatch tb = make_text_batch(texts, cfg_.max_text_len);
    EncoderStates rep{tb.batch, enc.len, ad::repeat_rows(memory, tb.batch), Tensor()};
    nn::ForwardCtx ctx;
    Tensor logits = tgt_.head(run_text_decoder(tgt_, rep.final_states, rep, tb, ctx));
    Tensor probs = ad::softmax(logits, -1);
    std::vector<Hyp> next;
    for (int b = 0; b < tb.batch; ++b) {
      if (hyps[b].done) {
        next.push_back(hyps[b]);
        continue;
      }
      const std::size_t row = static_cast<std::size_t>(b) * tb.len + tb.lengths[b] - 1;
      auto p = probs.data().subspan(row * kCharVocab, kCharVocab);
      const bool at_cap = static_cast<int>(hyps[b].text.size()) >= cfg_.max_text_len;
      Real other = 0;  // mass that would continue past the cap
      for (int c = 0; c < kCharVocab; ++c) {
        if (c == kPad) continue;
        Hyp h = hyps[b];
        if (c == kEos) {
          h.score += std::log(std::max(p[c], 1e-300));
          h.done = true;
        } else if (!at_cap) {
          h.score += std::log(std::max(p[c], 1e-300));
          h.text.push_back(static_cast<char>(c));
        } else {
          other += p[c];
          continue;
        }
        next.push_back(std::move(h));
      }
      if (at_cap) {
        Hyp h = hyps[b];
        h.score += std::log(std::max(other, 1e-300));
        h.done = h.cut = true;
        next.push_back(std::move(h));
      }
    }
    std::stable_sort(next.begin(), next.end(), [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
    if (static_cast<int>(next.size()) > beam) next.resize(beam);
    if (next.empty()) break;
    hyps = std::move(next);
  }
  const Hyp* best = nullptr;
  for (const auto& h : hyps)
    if (h.done && (!best || h.score > best->score)) best = &h;
  if (truncated) *truncated = best == nullptr || best->cut;
  return best ? best->text : hyps.front().text;
}

std::vector<std::string> IimtModel::decode_text(const EncoderStates& enc, std::vector<bool>* truncated) const {
  if (!cfg_.use_text_decoder) throw ContractError("model was built without a target text decoder");
  const int batch = enc.batch;
  std::vector<std::string> texts(batch);
  std::vector<bool> done(batch, false), cut(batch, false);
  if (cfg_.text_beam > 1) {
    for (int b = 0; b < batch; ++b) {
      bool t = false;
      texts[b] = beam_decode(enc, b, &t);
      cut[b] = t;
    }
  } else {
    for (int step = 0; step <= cfg_.max_text_len; ++step) {
      if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
      const TextBatch tb = make_text_batch(texts, cfg_.max_text_len);
      nn::ForwardCtx ctx;
      Tensor logits = tgt_.head(target_text_states(enc, tb, ctx));
      for (int b = 0; b < batch; ++b) {
        if (done[b]) continue;
        const std::size_t row = static_cast<std::size_t>(b) * tb.len + tb.lengths[b] - 1;
        const int c = argmax_row(logits.data().subspan(row * kCharVocab, kCharVocab), kPad);
        if (c == kEos) {
          done[b] = true;
        } else if (static_cast<int>(texts[b].size()) >= cfg_.max_text_len) {
          done[b] = true;
          cut[b] = true;
        } else {
          texts[b].push_back(static_cast<char>(c));
        }
      }
    }
    for (int b = 0; b < batch; ++b)
      if (!done[b]) cut[b] = true;
  }
  if (truncated) *truncated = cut;
  return texts;
}

std::vector<int> IimtModel::decode_tokens(const EncoderStates& enc, const std::vector<std::string>& texts) const {
  const int batch = enc.batch;
  const int n = cfg_.num_tokens();
  const int k = cfg_.codebook_size;
  TextBatch tb;
  Tensor txt;
  nn::ForwardCtx ctx;
  if (cfg_.use_text_decoder) {
    tb = make_text_batch(texts, cfg_.max_text_len);
    txt = target_text_states(enc, tb, ctx);
  }
  std::vector<std::vector<int>> gen(batch);
  for (int t = 0; t < n; ++t) {
    std::vector<int> buf(static_cast<std::size_t>(batch) * (t + 1), 0);
    for (int b = 0; b < batch; ++b) std::copy(gen[b].begin(), gen[b].end(), buf.begin() + static_cast<std::size_t>(b) * (t + 1));
    Tensor logits = image_logits(enc, txt.defined() ? &txt : nullptr, txt.defined() ? &tb : nullptr, buf, t + 1, ctx);
    for (int b = 0; b < batch; ++b) {
      const std::size_t row = static_cast<std::size_t>(b) * (t + 1) + t;
      gen[b].push_back(argmax_row(logits.data().subspan(row * k, k)));
    }
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch) * n);
  for (const auto& g : gen) out.insert(out.end(), g.begin(), g.end());
  return out;
}

std::vector<TranslationOutput> IimtModel::translate(std::span<const Real> pixels, int batch, const Tokenizer& tok) const {
  if (tok.config().num_tokens() != cfg_.num_tokens() || tok.config().codebook_size != cfg_.codebook_size)
    throw ConfigError("tokenizer grid/codebook does not match the translation model");
  nn::ForwardCtx ctx;
  const EncoderStates enc = encode(pixels, batch, ctx);
  std::vector<bool> cut(batch, false);
  std::vector<std::string> texts(batch);
  if (cfg_.use_text_decoder) texts = decode_text(enc, &cut);
  const std::vector<int> tokens = decode_tokens(enc, texts);
  const int n = cfg_.num_tokens();
  std::vector<TranslationOutput> out(batch);
  for (int b = 0; b < batch; ++b) {
    out[b].target_text = texts[b];
    out[b].text_truncated = cut[b];
    out[b].visual_tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(b) * n, tokens.begin() + static_cast<std::ptrdiff_t>(b + 1) * n);
    out[b].target_image = tok.decode_image(out[b].visual_tokens);
  }
  return out;
}

TranslationOutput IimtModel::translate(const Image& img, const Tokenizer& tok) const {
  if (img.height != cfg_.image_height || img.width != cfg_.image_width)
    throw ShapeError("input image is " + std::to_string(img.width) + "x" + std::to_string(img.height) + ", model expects " +
                     std::to_string(cfg_.image_width) + "x" + std::to_string(cfg_.image_height));
  const auto px = to_unit(img);
  return translate(px, 1, tok).front();
}

}  // namespace iimt
