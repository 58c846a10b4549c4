#pragma once

// Synthetic paired text images: greedy word wrap into a fixed-pitch grid,
// black glyphs over a random background, and one random rotation plus
// translation applied to the whole text block.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iimt/config.hpp"
#include "iimt/glyphs.hpp"
#include "iimt/image.hpp"

namespace iimt {

// Half-open pixel rectangle [x_min, x_max) x [y_min, y_max).
struct Box {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long long area() const { return valid() ? static_cast<long long>(width()) * height() : 0; }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool operator==(const Box&) const = default;
};

struct TextBox {
  std::string text;  // Latin-1
  Box box;
  bool operator==(const TextBox&) const = default;
};

// A sample that cannot be rendered: unknown glyph or text that leaves the image.
struct RejectionError : std::runtime_error {
  enum class Reason { kUnknownGlyph, kOverflow };
  RejectionError(Reason r, const std::string& what) : std::runtime_error(what), reason(r) {}
  Reason reason;
};

struct RenderSpec {
  int width = 64;
  int height = 64;
  int margin = 4;
  double max_rotation_deg = 8.0;
  int max_translation_px = 4;
  double min_background_luminance = 0.45;  // fraction of full scale

  int max_line_chars(const GlyphAtlas& a) const;
  int max_lines(const GlyphAtlas& a) const;
  void validate() const;
  void write(Config& c, const std::string& prefix) const;
  static RenderSpec read(const Config& c, const std::string& prefix);
};

struct Placement {
  double rotation_deg = 0;
  int dx = 0, dy = 0;
  Rgb background{255, 255, 255};
};

struct RenderedSample {
  Image image;
  std::string text;                    // whitespace-normalized input
  std::vector<std::string> lines;
  std::vector<TextBox> layout_boxes;   // per line, before the transform
  std::vector<TextBox> boxes;          // per line, bounding boxes of the transformed layout boxes
  Placement placement;
};

// Collapses runs of whitespace to one space and trims the ends.
std::string normalize_text(const std::string& text);
// Greedy wrap; RejectionError(kOverflow) when a word is longer than a line.
std::vector<std::string> wrap_text(const std::string& text, int max_chars);

double luminance(Rgb c);  // in [0, 1]
Rgb sample_background(const RenderSpec& spec, std::uint64_t seed);
Placement sample_placement(const RenderSpec& spec, std::uint64_t seed);

// Deterministic given the placement.
RenderedSample render_placed(const std::string& text, const RenderSpec& spec, const GlyphAtlas& atlas,
                             const Placement& placement);
RenderedSample render(const std::string& text, const RenderSpec& spec, const GlyphAtlas& atlas, std::uint64_t seed);

// Source and target share rotation and translation; backgrounds are drawn
// independently. Throws RejectionError if either side cannot be rendered.
struct RenderedPair {
  RenderedSample src, tgt;
};
RenderedPair synth_pair(const std::string& src, const std::string& tgt, const RenderSpec& spec, const GlyphAtlas& atlas,
                        std::uint64_t seed);

// ---------------------------------------------------------------- dataset

struct ManifestRecord {
  std::string id;
  std::string src_image_path;  // relative to the dataset directory
  std::string tgt_image_path;
  std::string src_text;  // Latin-1 in memory, UTF-8 on disk
  std::string tgt_text;
  std::vector<TextBox> src_boxes;
  std::vector<TextBox> tgt_boxes;
  double rotation_deg = 0;
  std::pair<int, int> translation_px{0, 0};
  bool operator==(const ManifestRecord&) const = default;
};

std::string manifest_line(const ManifestRecord& r);
ManifestRecord parse_manifest_line(const std::string& line);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
// IoError naming the path (and line) on failure.
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

struct SplitRatios {
  double train = 0.8, valid = 0.1, test = 0.1;
};

struct DatasetSummary {
  int train = 0, valid = 0, test = 0;
  int rejected_overflow = 0;
  int rejected_glyph = 0;
  double rejection_rate() const;
};

using ParallelCorpus = std::vector<std::pair<std::string, std::string>>;  // Latin-1

// Tab-separated UTF-8 lines "source<TAB>target"; malformed lines are skipped
// and counted.
ParallelCorpus read_parallel_corpus(const std::filesystem::path& path, int* skipped = nullptr);

// Writes manifest.{train,valid,test}.jsonl and images/ under out_dir.
DatasetSummary build_dataset(const ParallelCorpus& corpus, const RenderSpec& spec, const SplitRatios& ratios,
                             std::uint64_t seed, const std::filesystem::path& out_dir,
                             const GlyphAtlas& atlas = GlyphAtlas::builtin());

// Small German-English corpus from a fixed grammar, sentences short enough for
// 64x64 images. Deterministic under seed; distinct pairs while they last.
ParallelCorpus toy_parallel_corpus(int count, std::uint64_t seed);

}  // namespace iimt
