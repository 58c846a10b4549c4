#pragma once

// Independent reference computations for the metric and loss tests. Each one
// is written from the textbook definition and shares no code with the
// library.

#include <string>
#include <vector>

#include "iimt/image.hpp"

namespace iimt::testing {

// Corpus BLEU from raw n-gram counts (string-keyed maps, no smoothing), x100.
double brute_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs);

// Mean SSIM evaluated window by window with explicit 2-D Gaussian weights.
double direct_ssim(const Image& a, const Image& b);

// Word edit distance by memoized recursion.
int recursive_edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Index of the nearest row of codebook[k * dim ...] by linear scan; first wins ties.
int nearest_row(const std::vector<double>& v, const std::vector<double>& codebook, int dim);

// -log softmax(row)[target] with an optional smoothed target distribution.
double row_cross_entropy(const std::vector<double>& logits, int target, double smoothing = 0.0);

std::vector<std::string> words(const std::string& s);

}  // namespace iimt::testing
