#include "overfit.hpp"

#include <cmath>

#include "iimt/synthesis.hpp"

namespace iimt::testing {

std::vector<IimtExample> overfit_examples(int n, std::uint64_t seed) {
  const RenderSpec spec;
  const auto& atlas = GlyphAtlas::builtin();
  const auto corpus = toy_parallel_corpus(8 * n, seed);
  std::vector<IimtExample> out;
  for (std::size_t i = 0; i < corpus.size() && static_cast<int>(out.size()) < n; ++i) {
    try {
      const RenderedPair p = synth_pair(corpus[i].first, corpus[i].second, spec, atlas, nn::mix_seed(seed, i));
      IimtExample e;
      e.id = std::to_string(i);
      e.src_pixels = to_unit(p.src.image);
      e.tgt_pixels = to_unit(p.tgt.image);
      e.src_text = p.src.text;
      e.tgt_text = p.tgt.text;
      out.push_back(std::move(e));
    } catch (const RejectionError&) {
    }
  }
  return out;
}

TokenizerConfig overfit_tokenizer_config() {
  TokenizerConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.code_dim = 16;
  return c;
}

Stage1Config overfit_stage1_config() {
  Stage1Config c;
  c.steps = 3000;
  c.batch_size = 16;
  c.lr = 1e-3;
  return c;
}

ModelConfig overfit_model_config(const TokenizerConfig& tok) {
  ModelConfig m;
  m.codebook_size = tok.codebook_size;
  m.token_grid_h = tok.grid_h();
  m.token_grid_w = tok.grid_w();
  return m;
}

TeacherTrainConfig overfit_teacher_config() {
  TeacherTrainConfig c;
  c.steps = 800;
  c.batch_size = 16;
  c.weight_decay = 0.0;
  return c;
}

Stage2Config overfit_stage2_config() {
  Stage2Config c;
  c.label_smoothing = 0.0;
  c.dropout = 0.0;
  c.weight_decay = 0.0;
  c.max_epochs = 20;
  c.steps_per_epoch = 25;
  c.avg_last_n = 5;
  c.early_stop_patience = 1000;
  return c;
}

void attach_tokens(std::vector<IimtExample>& data, const Tokenizer& tok) {
  for (IimtExample& e : data) e.tokens = tok.encode(e.tgt_pixels, 1);
}

OverfitScores overfit_scores(const IimtModel& m, const Tokenizer& tok, const std::vector<IimtExample>& data) {
  OverfitScores s;
  if (data.empty()) return s;
  int text = 0, tokens = 0;
  for (const IimtExample& e : data) {
    const auto out = m.translate(e.src_pixels, 1, tok);
    text += out[0].target_text == e.tgt_text;
    tokens += out[0].visual_tokens == e.tokens;
  }
  s.text_exact = static_cast<double>(text) / data.size();
  s.token_exact = static_cast<double>(tokens) / data.size();
  return s;
}

double tokenizer_mae(const Tokenizer& tok, const std::vector<IimtExample>& data) {
  double sum = 0;
  std::size_t count = 0;
  for (const IimtExample& e : data) {
    const auto rec = tok.decode(tok.encode(e.tgt_pixels, 1), 1);
    for (std::size_t k = 0; k < rec.size(); ++k) sum += std::abs(rec[k] - e.tgt_pixels[k]);
    count += rec.size();
  }
  return count ? sum / count : 0.0;
}

}  // namespace iimt::testing
