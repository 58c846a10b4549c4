#pragma once

// Corpus evaluation of generated target images against a dataset manifest.

#include <filesystem>
#include <string>
#include <vector>

#include "iimt/glyphs.hpp"
#include "iimt/metrics.hpp"
#include "iimt/synthesis.hpp"

namespace iimt {

struct EvalOptions {
  // Bucket k holds source WER in [edges[k], edges[k + 1]).
  std::vector<double> wer_edges{0.0, 1e-9, 0.25, 0.5, 1e9};
};

struct ExampleMetrics {
  std::string id;
  bool missing = false;
  std::string hypothesis;  // OCR text of the generated image
  std::string reference;   // manifest target text
  BleuStats bleu;
  double sentence_bleu = 0;
  StructureSegment structure;
  BleuStats structure_bleu;
  double ssim = 0;
  double wer = 0;         // generated OCR text vs target text
  double source_wer = 0;  // OCR of the source image vs source text
  int bucket = 0;
};

struct BucketRow {
  double lo = 0, hi = 0;
  int count = 0;
  double bleu = 0;
};

struct MetricReport {
  double bleu = 0;
  double structure_bleu = 0;
  bool structure_no_matches = false;
  double ssim = 0;
  double wer = 0;  // total word edits over total reference words
  int matched = 0;
  int unmatched_hyps = 0;
  int unmatched_refs = 0;
  std::vector<std::string> missing;
  std::vector<ExampleMetrics> examples;
  std::vector<BucketRow> buckets;

  std::string json() const;
  std::string bucket_csv() const;
};

// Output image for a record: <outputs>/<id>.png, else the source image stem.
std::filesystem::path output_image_path(const std::filesystem::path& outputs, const ManifestRecord& r);

// Aggregates per-example values into the corpus fields and buckets.
void aggregate(MetricReport& report, const EvalOptions& opt);

MetricReport evaluate_corpus(const std::filesystem::path& outputs, const std::filesystem::path& manifest,
                             const EvalOptions& opt = {}, const GlyphAtlas& atlas = GlyphAtlas::builtin());

}  // namespace iimt
