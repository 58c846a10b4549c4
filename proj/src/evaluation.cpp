#include "iimt/evaluation.hpp"

#include <sstream>

#include <json.hpp>

#include "iimt/errors.hpp"
#include "iimt/ocr.hpp"

namespace iimt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json stats_json(const BleuStats& s) {
  return {{"matches", s.matches}, {"totals", s.totals}, {"hyp_len", s.hyp_len}, {"ref_len", s.ref_len}};
}

}  // namespace

fs::path output_image_path(const fs::path& outputs, const ManifestRecord& r) {
  const fs::path by_id = outputs / (r.id + ".png");
  if (fs::exists(by_id)) return by_id;
  return outputs / (fs::path(r.src_image_path).stem().string() + ".png");
}

void aggregate(MetricReport& rep, const EvalOptions& opt) {
  BleuStats text, structure;
  long long edits = 0, ref_words = 0;
  double ssim_sum = 0;
  rep.matched = rep.unmatched_hyps = rep.unmatched_refs = 0;
  rep.missing.clear();
  const std::size_t nb = opt.wer_edges.size() < 2 ? 0 : opt.wer_edges.size() - 1;
  std::vector<BleuStats> bucket_stats(nb);
  rep.buckets.assign(nb, {});
  for (std::size_t k = 0; k < nb; ++k) rep.buckets[k] = {opt.wer_edges[k], opt.wer_edges[k + 1], 0, 0};
  for (const ExampleMetrics& e : rep.examples) {
    text += e.bleu;
    structure += e.structure_bleu;
    ssim_sum += e.ssim;
    const auto r = split_words(e.reference);
    edits += word_edit_distance(split_words(e.hypothesis), r);
    ref_words += static_cast<long long>(r.size());
    rep.matched += e.structure.matched;
    rep.unmatched_hyps += e.structure.unmatched_hyps;
    rep.unmatched_refs += e.structure.unmatched_refs;
    if (e.missing) rep.missing.push_back(e.id);
    if (e.bucket >= 0 && static_cast<std::size_t>(e.bucket) < nb) {
      bucket_stats[e.bucket] += e.bleu;
      ++rep.buckets[e.bucket].count;
    }
  }
  if (rep.examples.empty()) throw UndefinedScoreError("evaluation: empty manifest");
  rep.bleu = text.score();
  rep.structure_no_matches = rep.matched == 0;
  rep.structure_bleu = rep.structure_no_matches ? 0.0 : structure.score();
  rep.ssim = ssim_sum / static_cast<double>(rep.examples.size());
  rep.wer = ref_words ? static_cast<double>(edits) / static_cast<double>(ref_words) : 0.0;
  for (std::size_t k = 0; k < nb; ++k) rep.buckets[k].bleu = rep.buckets[k].count ? bucket_stats[k].score() : 0.0;
}

std::string MetricReport::json() const {
  nlohmann::json ex = nlohmann::json::array();
  for (const ExampleMetrics& e : examples)
    ex.push_back({{"id", e.id},
                  {"missing", e.missing},
                  {"hypothesis", latin1_to_utf8(e.hypothesis)},
                  {"reference", latin1_to_utf8(e.reference)},
                  {"bleu", e.sentence_bleu},
                  {"bleu_stats", stats_json(e.bleu)},
                  {"structure_bleu", e.structure.matched ? e.structure_bleu.score() : 0.0},
                  {"structure_stats", stats_json(e.structure_bleu)},
                  {"matched", e.structure.matched},
                  {"unmatched_hyps", e.structure.unmatched_hyps},
                  {"unmatched_refs", e.structure.unmatched_refs},
                  {"ssim", e.ssim},
                  {"wer", e.wer},
                  {"source_wer", e.source_wer},
                  {"bucket", e.bucket}});
  nlohmann::json bk = nlohmann::json::array();
  for (const BucketRow& b : buckets) bk.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"bleu", b.bleu}});
  nlohmann::json j{{"bleu", bleu},
                   {"structure_bleu", structure_bleu},
                   {"structure_no_matches", structure_no_matches},
                   {"ssim", ssim},
                   {"wer", wer},
                   {"matched", matched},
                   {"unmatched_hyps", unmatched_hyps},
                   {"unmatched_refs", unmatched_refs},
                   {"missing", missing},
                   {"buckets", bk},
                   {"examples", ex}};
  return j.dump(2);
}

std::string MetricReport::bucket_csv() const {
  std::ostringstream out;
  out << "wer_lo,wer_hi,count,bleu\n";
  for (const BucketRow& b : buckets) out << format_real(b.lo) << ',' << format_real(b.hi) << ',' << b.count << ',' << format_real(b.bleu) << '\n';
  return out.str();
}

MetricReport evaluate_corpus(const fs::path& outputs, const fs::path& manifest, const EvalOptions& opt,
                             const GlyphAtlas& atlas) {
  if (opt.wer_edges.size() < 2 || !std::is_sorted(opt.wer_edges.begin(), opt.wer_edges.end()))
    throw ConfigError("evaluate: wer bucket edges must be an increasing list of at least two values");
  const auto records = read_manifest(manifest);
  if (records.empty()) throw UndefinedScoreError("evaluate: manifest " + manifest.string() + " has no records");
  const fs::path root = manifest.parent_path();
  MetricReport rep;
  rep.examples.resize(records.size());
  std::vector<std::string> errors(records.size());

#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      const ManifestRecord& r = records[i];
      ExampleMetrics& e = rep.examples[i];
      e.id = r.id;
      e.reference = r.tgt_text;
      const Image ref = read_png(root / r.tgt_image_path);
      const fs::path out = output_image_path(outputs, r);
      Image gen;
      if (fs::exists(out)) {
        gen = read_png(out);
        if (gen.width != ref.width || gen.height != ref.height)
          throw ShapeError("evaluate: " + out.string() + " is " + std::to_string(gen.width) + "x" +
                           std::to_string(gen.height) + ", reference is " + std::to_string(ref.width) + "x" +
                           std::to_string(ref.height));
      } else {
        e.missing = true;
        gen = Image::filled(ref.width, ref.height, {255, 255, 255});
      }
      const OcrResult hyp = e.missing ? OcrResult{} : oracle_ocr(gen, atlas);
      const OcrResult refocr = oracle_ocr(ref, atlas);
      e.hypothesis = hyp.text();
      e.bleu = bleu_stats(e.hypothesis, e.reference);
      e.sentence_bleu = e.bleu.score();
      e.structure = structure_segment(hyp.boxes, refocr.boxes);
      if (e.structure.matched) e.structure_bleu = bleu_stats(e.structure.hypothesis, e.structure.reference);
      e.ssim = ssim(gen, ref);
      e.wer = wer(e.hypothesis, e.reference);
      e.source_wer = wer(oracle_ocr(read_png(root / r.src_image_path), atlas).text(), r.src_text);
      e.bucket = -1;
      for (std::size_t k = 0; k + 1 < opt.wer_edges.size(); ++k)
        if (e.source_wer >= opt.wer_edges[k] && e.source_wer < opt.wer_edges[k + 1]) e.bucket = static_cast<int>(k);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  }
  for (const std::string& e : errors)
    if (!e.empty()) throw IoError(e);
  aggregate(rep, opt);
  return rep;
}

}  // namespace iimt
