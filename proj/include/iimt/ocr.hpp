#pragma once

// Template-matching OCR for images drawn with the built-in glyph atlas. It
// knows the exact glyph masks and the fixed cell pitch, so on clean renderings
// it is exact; on generated images it reads whatever the pixels spell.

#include <string>
#include <vector>

#include "iimt/glyphs.hpp"
#include "iimt/image.hpp"
#include "iimt/synthesis.hpp"

namespace iimt {

struct OcrResult {
  std::vector<TextBox> boxes;  // one per text line, top to bottom
  double angle_deg = 0;        // estimated skew

  // Line texts joined by single spaces.
  std::string text() const;
};

// Darkness relative to the background in [0, 1] per pixel (row-major). The
// background is the modal color, or the per-channel median when no color
// dominates.
std::vector<double> darkness_map(const Image& img);

// Skew maximizing the variance of the row-projection profile of the darkness.
double estimate_skew(const std::vector<double>& dark, int width, int height);

OcrResult oracle_ocr(const Image& img, const GlyphAtlas& atlas = GlyphAtlas::builtin());

}  // namespace iimt
