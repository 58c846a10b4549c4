#pragma once

// Text and image similarity metrics: IoU, corpus BLEU, box-matched BLEU,
// SSIM and WER.

#include <array>
#include <string>
#include <vector>

#include "iimt/glyphs.hpp"
#include "iimt/image.hpp"
#include "iimt/synthesis.hpp"

namespace iimt {

double iou(const Box& a, const Box& b);

std::vector<std::string> split_words(const std::string& text);

// Sufficient statistics of BLEU; corpus BLEU is a function of their sum.
struct BleuStats {
  std::array<long long, 4> matches{};  // clipped n-gram matches, n = 1..4
  std::array<long long, 4> totals{};   // hypothesis n-grams
  long long hyp_len = 0, ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
  // 0..100; zero when any precision is zero (no smoothing).
  double score() const;
};

BleuStats bleu_stats(const std::string& hypothesis, const std::string& reference);
// UndefinedScoreError on an empty corpus, ContractError on a length mismatch.
double corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);

// Each hypothesis box keeps its single best-IoU reference (strictly greater
// IoU wins, so the first reference wins ties) when that IoU is at least the
// threshold. References may be matched more than once.
struct MatchedPair {
  int hyp = 0, ref = 0;
  double iou = 0;
};
std::vector<MatchedPair> match_boxes(const std::vector<TextBox>& hyps, const std::vector<TextBox>& refs,
                                     double threshold = 0.5);

struct StructureSegment {
  std::string hypothesis, reference;  // matched texts joined top to bottom
  int matched = 0;
  int unmatched_hyps = 0;
  int unmatched_refs = 0;  // references no hypothesis selected
};
StructureSegment structure_segment(const std::vector<TextBox>& hyps, const std::vector<TextBox>& refs,
                                   double threshold = 0.5);

struct StructureBleu {
  double score = 0;
  bool no_matches = false;
  StructureSegment segment;
};
// Box-level scoring of one image pair read by the oracle OCR.
StructureBleu structure_bleu(const Image& generated, const Image& reference,
                             const GlyphAtlas& atlas = GlyphAtlas::builtin());
StructureBleu structure_bleu_boxes(const std::vector<TextBox>& hyps, const std::vector<TextBox>& refs);

// Mean SSIM over pixels and RGB channels: 11x11 Gaussian window (sigma 1.5)
// truncated and renormalized at the borders, K1 = 0.01, K2 = 0.03, L = 255.
// ContractError when sizes differ.
double ssim(const Image& a, const Image& b);

// Word-level edit distance over reference length. UndefinedScoreError for an
// empty reference.
double wer(const std::string& hypothesis, const std::string& reference);
int word_edit_distance(const std::vector<std::string>& hyp, const std::vector<std::string>& ref);

}  // namespace iimt
