#include "iimt/glyphs.hpp"

#include <bit>
#include <cstdio>

#include "iimt/errors.hpp"

namespace iimt {

namespace {

const Glyph kFont[] = {
    {0x20, {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
    {0x21, {0x04, 0x04, 0x04, 0x04, 0x04, 0x00, 0x04, 0x00}},
    {0x22, {0x0A, 0x0A, 0x0A, 0x00, 0x00, 0x00, 0x00, 0x00}},
    {0x23, {0x0A, 0x0A, 0x1F, 0x0A, 0x1F, 0x0A, 0x0A, 0x00}},
    {0x24, {0x04, 0x0F, 0x14, 0x0E, 0x05, 0x1E, 0x04, 0x00}},
    {0x25, {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03, 0x00}},
    {0x26, {0x0C, 0x12, 0x14, 0x08, 0x15, 0x12, 0x0D, 0x00}},
    {0x27, {0x04, 0x04, 0x08, 0x00, 0x00, 0x00, 0x00, 0x00}},
    {0x28, {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02, 0x00}},
    {0x29, {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08, 0x00}},
    {0x2A, {0x00, 0x04, 0x15, 0x0E, 0x15, 0x04, 0x00, 0x00}},
    {0x2B, {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00, 0x00}},
    {0x2C, {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
    {0x2D, {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00, 0x00}},
    {0x2E, {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C, 0x00}},
    {0x2F, {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00, 0x00}},
    {0x30, {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E, 0x00}},
    {0x31, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E, 0x00}},
    {0x32, {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F, 0x00}},
    {0x33, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E, 0x00}},
    {0x34, {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02, 0x00}},
    {0x35, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E, 0x00}},
    {0x36, {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E, 0x00}},
    {0x37, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08, 0x00}},
    {0x38, {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E, 0x00}},
    {0x39, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C, 0x00}},
    {0x3A, {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00, 0x00}},
    {0x3B, {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x04, 0x08, 0x00}},
    {0x3C, {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02, 0x00}},
    {0x3D, {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {0x3E, {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08, 0x00}},
    {0x3F, {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04, 0x00}},
    {0x40, {0x0E, 0x11, 0x01, 0x0D, 0x15, 0x15, 0x0E, 0x00}},
    {0x41, {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11, 0x00}},
    {0x42, {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E, 0x00}},
    {0x43, {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E, 0x00}},
    {0x44, {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C, 0x00}},
    {0x45, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F, 0x00}},
    {0x46, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10, 0x00}},
    {0x47, {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F, 0x00}},
    {0x48, {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11, 0x00}},
    {0x49, {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E, 0x00}},
    {0x4A, {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C, 0x00}},
    {0x4B, {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11, 0x00}},
    {0x4C, {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F, 0x00}},
    {0x4D, {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11, 0x00}},
    {0x4E, {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x00}},
    {0x4F, {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E, 0x00}},
    {0x50, {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10, 0x00}},
    {0x51, {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D, 0x00}},
    {0x52, {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11, 0x00}},
    {0x53, {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E, 0x00}},
    {0x54, {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04, 0x00}},
    {0x55, {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E, 0x00}},
    {0x56, {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04, 0x00}},
    {0x57, {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A, 0x00}},
    {0x58, {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11, 0x00}},
    {0x59, {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04, 0x00}},
    {0x5A, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F, 0x00}},
    {0x5B, {0x0E, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0E, 0x00}},
    {0x5C, {0x00, 0x10, 0x08, 0x04, 0x02, 0x01, 0x00, 0x00}},
    {0x5D, {0x0E, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0E, 0x00}},
    {0x5E, {0x04, 0x0A, 0x11, 0x00, 0x00, 0x00, 0x00, 0x00}},
    {0x5F, {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {0x60, {0x08, 0x04, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00}},
    {0x61, {0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F, 0x00}},
    {0x62, {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E, 0x00}},
    {0x63, {0x00, 0x00, 0x0F, 0x10, 0x10, 0x10, 0x0F, 0x00}},
    {0x64, {0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F, 0x00}},
    {0x65, {0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E, 0x00}},
    {0x66, {0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08, 0x00}},
    {0x67, {0x00, 0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E}},
    {0x68, {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11, 0x00}},
    {0x69, {0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E, 0x00}},
    {0x6A, {0x02, 0x00, 0x06, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {0x6B, {0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12, 0x00}},
    {0x6C, {0x08, 0x08, 0x08, 0x08, 0x08, 0x08, 0x06, 0x00}},
    {0x6D, {0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11, 0x00}},
    {0x6E, {0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11, 0x00}},
    {0x6F, {0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E, 0x00}},
    {0x70, {0x00, 0x00, 0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10}},
    {0x71, {0x00, 0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x01}},
    {0x72, {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10, 0x00}},
    {0x73, {0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E, 0x00}},
    {0x74, {0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06, 0x00}},
    {0x75, {0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D, 0x00}},
    {0x76, {0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04, 0x00}},
    {0x77, {0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A, 0x00}},
    {0x78, {0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x00}},
    {0x79, {0x00, 0x00, 0x11, 0x11, 0x11, 0x0F, 0x01, 0x0E}},
    {0x7A, {0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F, 0x00}},
    {0x7B, {0x02, 0x04, 0x04, 0x08, 0x04, 0x04, 0x02, 0x00}},
    {0x7C, {0x04, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {0x7D, {0x08, 0x04, 0x04, 0x02, 0x04, 0x04, 0x08, 0x00}},
    {0x7E, {0x00, 0x00, 0x08, 0x15, 0x02, 0x00, 0x00, 0x00}},
    {0xC4, {0x0A, 0x00, 0x0E, 0x11, 0x1F, 0x11, 0x11, 0x00}},
    {0xC9, {0x02, 0x04, 0x1F, 0x10, 0x1E, 0x10, 0x1F, 0x00}},
    {0xD6, {0x11, 0x0E, 0x11, 0x11, 0x11, 0x11, 0x0E, 0x00}},
    {0xDC, {0x11, 0x00, 0x11, 0x11, 0x11, 0x11, 0x0E, 0x00}},
    {0xDF, {0x0C, 0x12, 0x12, 0x14, 0x12, 0x11, 0x16, 0x00}},
    {0xE0, {0x08, 0x04, 0x0E, 0x01, 0x0F, 0x11, 0x0F, 0x00}},
    {0xE2, {0x04, 0x0A, 0x0E, 0x01, 0x0F, 0x11, 0x0F, 0x00}},
    {0xE4, {0x0A, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F, 0x00}},
    {0xE7, {0x00, 0x00, 0x0F, 0x10, 0x10, 0x10, 0x0F, 0x06}},
    {0xE8, {0x08, 0x04, 0x0E, 0x11, 0x1F, 0x10, 0x0E, 0x00}},
    {0xE9, {0x02, 0x04, 0x0E, 0x11, 0x1F, 0x10, 0x0E, 0x00}},
    {0xEA, {0x04, 0x0A, 0x0E, 0x11, 0x1F, 0x10, 0x0E, 0x00}},
    {0xEB, {0x0A, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E, 0x00}},
    {0xEE, {0x04, 0x0A, 0x00, 0x0C, 0x04, 0x04, 0x0E, 0x00}},
    {0xEF, {0x0A, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E, 0x00}},
    {0xF4, {0x04, 0x0A, 0x0E, 0x11, 0x11, 0x11, 0x0E, 0x00}},
    {0xF6, {0x0A, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E, 0x00}},
    {0xF9, {0x08, 0x04, 0x11, 0x11, 0x11, 0x13, 0x0D, 0x00}},
    {0xFB, {0x04, 0x0A, 0x11, 0x11, 0x11, 0x13, 0x0D, 0x00}},
    {0xFC, {0x0A, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D, 0x00}},
    {0xFF, {0x0A, 0x00, 0x11, 0x11, 0x11, 0x0F, 0x01, 0x0E}},
};

}  // namespace

int Glyph::ink_count() const {
  int n = 0;
  for (auto r : rows) n += std::popcount(r);
  return n;
}

GlyphAtlas::GlyphAtlas() : glyphs_(std::begin(kFont), std::end(kFont)) {
  index_.fill(-1);
  for (std::size_t i = 0; i < glyphs_.size(); ++i) index_[glyphs_[i].code] = static_cast<int>(i);
}

const GlyphAtlas& GlyphAtlas::builtin() {
  static const GlyphAtlas atlas;
  return atlas;
}

const Glyph& GlyphAtlas::glyph(unsigned char c) const {
  if (index_[c] < 0) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%02X", c);
    throw RangeError(std::string("no glyph for byte ") + buf);
  }
  return glyphs_[index_[c]];
}

std::string GlyphAtlas::alphabet() const {
  std::string s;
  for (const Glyph& g : glyphs_) s.push_back(static_cast<char>(g.code));
  return s;
}

std::string utf8_to_latin1(const std::string& utf8) {
  std::string out;
  out.reserve(utf8.size());
  for (std::size_t i = 0; i < utf8.size(); ++i) {
    const auto b = static_cast<unsigned char>(utf8[i]);
    if (b < 0x80) {
      out.push_back(static_cast<char>(b));
    } else if ((b & 0xE0) == 0xC0 && i + 1 < utf8.size()) {
      const auto c = static_cast<unsigned char>(utf8[i + 1]);
      if ((c & 0xC0) != 0x80) throw RangeError("malformed UTF-8 at byte " + std::to_string(i));
      const unsigned cp = ((b & 0x1Fu) << 6) | (c & 0x3Fu);
      if (cp > 0xFF) throw RangeError("code point U+" + std::to_string(cp) + " is outside Latin-1");
      out.push_back(static_cast<char>(cp));
      ++i;
    } else {
      throw RangeError("character at byte " + std::to_string(i) + " is outside Latin-1");
    }
  }
  return out;
}

std::string latin1_to_utf8(const std::string& latin1) {
  std::string out;
  out.reserve(latin1.size() * 2);
  for (char ch : latin1) {
    const auto b = static_cast<unsigned char>(ch);
    if (b < 0x80) {
      out.push_back(ch);
    } else {
      out.push_back(static_cast<char>(0xC0 | (b >> 6)));
      out.push_back(static_cast<char>(0x80 | (b & 0x3F)));
    }
  }
  return out;
}

}  // namespace iimt
