#pragma once

// Built-in monospaced bitmap font: printable ASCII plus the Latin-1 letters
// needed for German and French. Text is handled as Latin-1 byte strings.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace iimt {

struct Glyph {
  unsigned char code = 0;
  std::array<std::uint8_t, 8> rows{};  // bit 4 is the leftmost column

  bool ink(int row, int col) const { return (rows[row] >> (4 - col)) & 1u; }
  int ink_count() const;
};

class GlyphAtlas {
 public:
  static constexpr int kMaskWidth = 5;
  static constexpr int kMaskHeight = 8;  // 7 body rows and a descender row

  static const GlyphAtlas& builtin();

  int mask_width() const { return kMaskWidth; }
  int mask_height() const { return kMaskHeight; }
  int advance() const { return 6; }     // horizontal cell pitch
  int line_pitch() const { return 9; }  // vertical cell pitch

  bool has(unsigned char c) const { return index_[c] >= 0; }
  // RangeError for bytes without a glyph.
  const Glyph& glyph(unsigned char c) const;
  const std::vector<Glyph>& glyphs() const { return glyphs_; }
  std::string alphabet() const;

 private:
  GlyphAtlas();
  std::vector<Glyph> glyphs_;
  std::array<int, 256> index_{};
};

// RangeError for code points above U+00FF or malformed input.
std::string utf8_to_latin1(const std::string& utf8);
std::string latin1_to_utf8(const std::string& latin1);

}  // namespace iimt
