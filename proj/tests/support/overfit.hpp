#pragma once

// The 32-pair overfit suite shared by the training tests and the acceptance
// binary: data, model sizes and step budgets.

#include <vector>

#include "iimt/iimt_model.hpp"
#include "iimt/teacher.hpp"
#include "iimt/tokenizer.hpp"
#include "iimt/training.hpp"

namespace iimt::testing {

// First n toy-corpus pairs that render without rejection, with pixels and
// texts filled; tokens are left empty.
std::vector<IimtExample> overfit_examples(int n = 32, std::uint64_t seed = 5);

// Tokenizer: 2+2 layers, code_dim 16, 3000 steps at batch 16.
TokenizerConfig overfit_tokenizer_config();
Stage1Config overfit_stage1_config();

// Student at the default desk size.
ModelConfig overfit_model_config(const TokenizerConfig& tok);
// 800 steps at batch 16.
TeacherTrainConfig overfit_teacher_config();
// 20 epochs of 25 steps, no smoothing, no dropout: the suite measures
// memorization.
Stage2Config overfit_stage2_config();

void attach_tokens(std::vector<IimtExample>& data, const Tokenizer& tok);

struct OverfitScores {
  double text_exact = 0;   // greedy target text == gold
  double token_exact = 0;  // full visual-token sequence == gold
};
OverfitScores overfit_scores(const IimtModel& m, const Tokenizer& tok, const std::vector<IimtExample>& data);

// Round-trip per-pixel MAE of the tokenizer over the target images.
double tokenizer_mae(const Tokenizer& tok, const std::vector<IimtExample>& data);

}  // namespace iimt::testing
