#include "iimt/cli.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "iimt/checkpoint.hpp"
#include "iimt/errors.hpp"
#include "iimt/evaluation.hpp"
#include "iimt/synthesis.hpp"
#include "iimt/training.hpp"

namespace iimt {

namespace fs = std::filesystem;

namespace {

constexpr char kTokenizerCkpt[] = "checkpoints/tokenizer.ckpt";
constexpr char kTeacherCkpt[] = "checkpoints/teacher.ckpt";
constexpr char kIimtCkpt[] = "checkpoints/iimt.ckpt";

// Init streams for the three models, derived from the run seed.
constexpr std::uint64_t kTokenizerInit = 0x701;
constexpr std::uint64_t kIimtInit = 0x702;
constexpr std::uint64_t kTeacherInit = 0x703;

struct Common {
  std::string config;
  std::string seed;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config, "configuration file (key = value lines)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "run seed");
  auto* o = app->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  app->add_option("--set", c.sets, "override one key: --set stage2.alpha=0.5")->take_all();
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f << text;
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + p.string() + ": " + ec.message());
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ConfigError(what + " not found: " + p.string());
}

void require_stage(const fs::path& run, const char* rel, const std::string& stage) {
  const fs::path p = run / rel;
  if (!fs::is_regular_file(p))
    throw ConfigError("missing " + p.string() + "; run `iimt train " + stage + " --out " + run.string() + "` first");
}

// Stage seeds default to the run seed.
std::uint64_t run_seed(const Config& c) { return c.get_u64("seed", 1); }

void apply_stage_seeds(Config& c) {
  const std::string s = std::to_string(run_seed(c));
  for (const char* k : {"synth.seed", "stage1.seed", "teacher_train.seed", "stage2.seed"})
    if (!c.has(k)) c.set(k, s);
}

SplitRatios read_ratios(const Config& c) {
  SplitRatios r;
  r.train = c.get_real("synth.train_ratio", r.train);
  r.valid = c.get_real("synth.valid_ratio", r.valid);
  r.test = c.get_real("synth.test_ratio", r.test);
  return r;
}

TokenizerConfig tokenizer_config(const Config& c) {
  TokenizerConfig t = TokenizerConfig::read(c, "tokenizer.");
  t.validate();
  return t;
}

// Student config with the visual-token grid and image size of the tokenizer.
ModelConfig model_config(const Config& c, const TokenizerConfig& tok) {
  ModelConfig m = ModelConfig::read(c, "model.");
  if (m.image_height != tok.image_height || m.image_width != tok.image_width)
    throw ConfigError("model image size " + std::to_string(m.image_width) + "x" + std::to_string(m.image_height) +
                      " differs from the tokenizer's " + std::to_string(tok.image_width) + "x" +
                      std::to_string(tok.image_height));
  m.codebook_size = tok.codebook_size;
  m.token_grid_h = tok.grid_h();
  m.token_grid_w = tok.grid_w();
  m.validate();
  return m;
}

TeacherConfig teacher_config(const Config& c, const ModelConfig& m) {
  TeacherConfig t = TeacherConfig::read(c, "teacher.", TeacherConfig::for_student(m));
  t.validate();
  return t;
}

Config component_config(const auto& cfg, const std::string& prefix) {
  Config c;
  cfg.write(c, prefix);
  return c;
}

Tokenizer load_tokenizer(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  const Config c = Config::parse(ck.config, path.string());
  TokenizerConfig cfg = TokenizerConfig::read(c, "tokenizer.");
  cfg.validate();
  Tokenizer tok(cfg, 0);
  restore(tok.params(), ck);
  return tok;
}

IimtModel load_model(const fs::path& path, const TokenizerConfig& tok) {
  const Checkpoint ck = load_checkpoint(path);
  const Config c = Config::parse(ck.config, path.string());
  ModelConfig cfg = ModelConfig::read(c, "model.");
  cfg.codebook_size = tok.codebook_size;
  cfg.token_grid_h = tok.grid_h();
  cfg.token_grid_w = tok.grid_w();
  cfg.validate();
  IimtModel m(cfg, 0);
  restore(m.params(), ck);
  return m;
}

TeacherModel load_teacher(const fs::path& path, const ModelConfig& student) {
  const Checkpoint ck = load_checkpoint(path);
  const Config c = Config::parse(ck.config, path.string());
  TeacherConfig cfg = TeacherConfig::read(c, "teacher.", TeacherConfig::for_student(student));
  cfg.validate();
  TeacherModel t(cfg, 0);
  restore(t.params(), ck);
  return t;
}

std::vector<IimtExample> load_split(const fs::path& data, const std::string& split, int width, int height) {
  const auto records = read_manifest(data / ("manifest." + split + ".jsonl"));
  std::vector<IimtExample> out(records.size());
  std::vector<std::string> errors(records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      const ManifestRecord& r = records[i];
      const Image src = read_png(data / r.src_image_path), tgt = read_png(data / r.tgt_image_path);
      for (const Image* im : {&src, &tgt})
        if (im->width != width || im->height != height)
          throw ShapeError("dataset image for " + r.id + " is " + std::to_string(im->width) + "x" +
                           std::to_string(im->height) + ", model expects " + std::to_string(width) + "x" +
                           std::to_string(height));
      out[i].id = r.id;
      out[i].src_pixels = to_unit(src);
      out[i].tgt_pixels = to_unit(tgt);
      out[i].src_text = r.src_text;
      out[i].tgt_text = r.tgt_text;
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const std::string& e : errors)
    if (!e.empty()) throw IoError(e);
  return out;
}

void attach_tokens(std::vector<IimtExample>& data, const Tokenizer& tok) {
  const int n = tok.config().num_tokens();
  constexpr int kChunk = 16;
  for (std::size_t s = 0; s < data.size(); s += kChunk) {
    const std::size_t e = std::min(data.size(), s + kChunk);
    std::vector<Real> px;
    for (std::size_t i = s; i < e; ++i) px.insert(px.end(), data[i].tgt_pixels.begin(), data[i].tgt_pixels.end());
    const auto ids = tok.encode(px, static_cast<int>(e - s));
    for (std::size_t i = s; i < e; ++i)
      data[i].tokens.assign(ids.begin() + (i - s) * n, ids.begin() + (i - s + 1) * n);
  }
}

// Log lines from earlier runs up to the step a resumed run restarts at.
class StepLog {
 public:
  StepLog(const fs::path& path, const fs::path& state_dir) : path_(path) {
    int resume = 0;
    const fs::path st = state_dir / "state.ckpt";
    if (fs::exists(st)) resume = Config::parse(load_checkpoint(st).config, st.string()).get_int("train.step", 0);
    std::vector<std::string> keep;
    if (resume > 0 && fs::exists(path)) {
      std::ifstream in(path);
      std::string line;
      while (std::getline(in, line)) {
        try {
          if (nlohmann::json::parse(line).at("step").get<int>() < resume) keep.push_back(line);
        } catch (const std::exception&) {
        }
      }
    }
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path.string());
    for (const std::string& l : keep) out_ << l << '\n';
    out_.flush();
  }
  void operator()(const std::string& line) {
    out_ << line << '\n';
    out_.flush();
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

struct TrainArgs {
  Common common;
  std::string data;
  int stop_after = -1;
  int save_every = 0;
  bool fresh = false;
};

struct RunPaths {
  fs::path run, data, state, log;
};

RunPaths prepare_run(const TrainArgs& a, const std::string& stage, const Config& cfg) {
  RunPaths p{a.common.out, a.data, fs::path(a.common.out) / "state" / stage, fs::path(a.common.out) / "logs" / (stage + ".jsonl")};
  for (const char* split : {"train", "valid"}) require_file(p.data / ("manifest." + std::string(split) + ".jsonl"), "dataset manifest");
  ensure_dir(p.run / "checkpoints");
  ensure_dir(p.run / "logs");
  if (a.fresh) fs::remove_all(p.state);
  ensure_dir(p.state);
  write_text(p.run / ("config.train_" + stage + ".txt"), cfg.serialize());
  return p;
}

TrainHooks make_hooks(const TrainArgs& a, const RunPaths& p, StepLog& log, const Config& cfg) {
  TrainHooks h;
  h.on_log = [&log](const std::string& l) { log(l); };
  h.state_dir = p.state;
  h.save_every = a.save_every > 0 ? a.save_every : cfg.get_int("train.save_every", h.save_every);
  h.stop_after = a.stop_after;
  return h;
}

int report_stop(const TrainSummary& s, const std::string& stage, std::ostream& out) {
  if (s.interrupted) {
    out << stage << ": stopped at step " << s.steps_done << "; rerun the same command to resume\n";
    return kExitOk;
  }
  out << stage << ": finished at step " << s.steps_done << "\n";
  return kExitOk;
}

int cmd_train_tokenizer(const TrainArgs& a, std::ostream& out) {
  const Config cfg = resolve_config(a.common.config, a.common.sets, a.common.seed);
  const TokenizerConfig tc = tokenizer_config(cfg);
  const Stage1Config sc = Stage1Config::read(cfg, "stage1.");
  sc.validate();
  const RunPaths p = prepare_run(a, "tokenizer", cfg);

  const auto train = load_split(p.data, "train", tc.image_width, tc.image_height);
  if (train.empty()) throw ConfigError("dataset " + p.data.string() + " has no training examples");
  std::vector<std::vector<Real>> images;
  for (const IimtExample& e : train) {
    images.push_back(e.src_pixels);
    images.push_back(e.tgt_pixels);
  }
  Tokenizer tok(tc, nn::mix_seed(run_seed(cfg), kTokenizerInit));
  StepLog log(p.log, p.state);
  const TrainSummary s = train_stage1(tok, images, sc, make_hooks(a, p, log, cfg));
  if (!s.interrupted) save_checkpoint(p.run / kTokenizerCkpt, snapshot(tok.params(), component_config(tc, "tokenizer.").serialize()));
  return report_stop(s, "tokenizer", out);
}

int cmd_train_teacher(const TrainArgs& a, std::ostream& out) {
  const Config cfg = resolve_config(a.common.config, a.common.sets, a.common.seed);
  const fs::path run = a.common.out;
  require_stage(run, kTokenizerCkpt, "tokenizer");
  const Tokenizer tok = load_tokenizer(run / kTokenizerCkpt);
  const ModelConfig mc = model_config(cfg, tok.config());
  const TeacherConfig tc = teacher_config(cfg, mc);
  const TeacherTrainConfig sc = TeacherTrainConfig::read(cfg, "teacher_train.");
  sc.validate();
  const RunPaths p = prepare_run(a, "teacher", cfg);

  auto train = load_split(p.data, "train", tc.image_width, tc.image_height);
  if (train.empty()) throw ConfigError("dataset " + p.data.string() + " has no training examples");
  attach_tokens(train, tok);
  TeacherModel teacher(tc, nn::mix_seed(run_seed(cfg), kTeacherInit));
  StepLog log(p.log, p.state);
  const TrainSummary s = train_teacher(teacher, train, sc, make_hooks(a, p, log, cfg));
  if (!s.interrupted)
    save_checkpoint(p.run / kTeacherCkpt, snapshot(teacher.params(), component_config(tc, "teacher.").serialize()));
  return report_stop(s, "teacher", out);
}

int cmd_train_iimt(const TrainArgs& a, std::ostream& out) {
  const Config cfg = resolve_config(a.common.config, a.common.sets, a.common.seed);
  const fs::path run = a.common.out;
  require_stage(run, kTokenizerCkpt, "tokenizer");
  const Stage2Config sc = Stage2Config::read(cfg, "stage2.");
  sc.validate();
  if (sc.gamma > 0) require_stage(run, kTeacherCkpt, "teacher");
  const Tokenizer tok = load_tokenizer(run / kTokenizerCkpt);
  const ModelConfig mc = model_config(cfg, tok.config());
  std::optional<TeacherModel> teacher;
  if (sc.gamma > 0) teacher.emplace(load_teacher(run / kTeacherCkpt, mc));
  const RunPaths p = prepare_run(a, "iimt", cfg);

  auto train = load_split(p.data, "train", mc.image_width, mc.image_height);
  auto valid = load_split(p.data, "valid", mc.image_width, mc.image_height);
  if (train.empty()) throw ConfigError("dataset " + p.data.string() + " has no training examples");
  attach_tokens(train, tok);
  attach_tokens(valid, tok);
  IimtModel model(mc, nn::mix_seed(run_seed(cfg), kIimtInit));
  StepLog log(p.log, p.state);
  const TrainSummary s =
      train_stage2(model, teacher ? &*teacher : nullptr, train, valid, sc, make_hooks(a, p, log, cfg));
  if (!s.interrupted) save_checkpoint(p.run / kIimtCkpt, snapshot(model.params(), component_config(mc, "model.").serialize()));
  if (s.early_stopped) out << "iimt: early stop, best validation loss " << format_real(s.best_valid) << "\n";
  if (s.epochs_averaged) out << "iimt: averaged the last " << s.epochs_averaged << " epoch snapshots\n";
  return report_stop(s, "iimt", out);
}

struct SynthArgs {
  Common common;
  std::string corpus;
  int toy = 0;
};

int cmd_synth(const SynthArgs& a, std::ostream& out, std::ostream& err) {
  if (a.corpus.empty() == (a.toy <= 0)) throw ConfigError("synth: give exactly one of --corpus and --toy");
  const Config cfg = resolve_config(a.common.config, a.common.sets, a.common.seed);
  const RenderSpec spec = RenderSpec::read(cfg, "synth.");
  spec.validate();
  const SplitRatios ratios = read_ratios(cfg);
  const std::uint64_t seed = cfg.get_u64("synth.seed", run_seed(cfg));
  int skipped = 0;
  ParallelCorpus corpus;
  if (!a.corpus.empty()) {
    require_file(a.corpus, "corpus");
    corpus = read_parallel_corpus(a.corpus, &skipped);
  } else {
    corpus = toy_parallel_corpus(a.toy, seed);
  }
  const fs::path dir = a.common.out;
  ensure_dir(dir);
  write_text(dir / "config.synth.txt", cfg.serialize());
  const DatasetSummary s = build_dataset(corpus, spec, ratios, seed, dir);
  const nlohmann::json j{{"train", s.train},
                         {"valid", s.valid},
                         {"test", s.test},
                         {"rejected_overflow", s.rejected_overflow},
                         {"rejected_glyph", s.rejected_glyph},
                         {"skipped_lines", skipped},
                         {"rejection_rate", s.rejection_rate()}};
  write_text(dir / "summary.json", j.dump(2) + "\n");
  if (skipped) err << "synth: skipped " << skipped << " malformed corpus lines\n";
  out << "synth: " << s.train << " train, " << s.valid << " valid, " << s.test << " test, "
      << s.rejected_overflow + s.rejected_glyph << " rejected\n";
  const double ceiling = cfg.get_real("synth.max_rejection_rate", 1.0);
  if (s.rejection_rate() > ceiling) {
    err << "synth: rejection rate " << format_real(s.rejection_rate()) << " exceeds synth.max_rejection_rate "
        << format_real(ceiling) << "\n";
    return kExitPartial;
  }
  return kExitOk;
}

struct TranslateArgs {
  Common common;
  std::string run;
  std::vector<std::string> inputs;
  std::string manifest;
};

int cmd_translate(const TranslateArgs& a, std::ostream& out, std::ostream& err) {
  if (a.inputs.empty() == a.manifest.empty()) throw ConfigError("translate: give --input or --manifest");
  const Config cfg = resolve_config(a.common.config, a.common.sets, a.common.seed);
  const fs::path run = a.run;
  require_stage(run, kTokenizerCkpt, "tokenizer");
  require_stage(run, kIimtCkpt, "iimt");

  // (output name, input path)
  std::vector<std::pair<std::string, fs::path>> jobs;
  if (!a.manifest.empty()) {
    require_file(a.manifest, "manifest");
    const fs::path root = fs::path(a.manifest).parent_path();
    for (const ManifestRecord& r : read_manifest(a.manifest)) jobs.emplace_back(r.id, root / r.src_image_path);
  }
  for (const std::string& in : a.inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const fs::path& f : files) jobs.emplace_back(f.stem().string(), f);
    } else {
      jobs.emplace_back(fs::path(in).stem().string(), in);
    }
  }
  std::map<std::string, int> seen;
  for (const auto& j : jobs)
    if (++seen[j.first] > 1) throw ConfigError("translate: two inputs map to output name " + j.first);

  const Tokenizer tok = load_tokenizer(run / kTokenizerCkpt);
  const IimtModel model = load_model(run / kIimtCkpt, tok.config());
  const ModelConfig& mc = model.config();
  const fs::path dir = a.common.out;
  ensure_dir(dir);
  write_text(dir / "config.translate.txt", cfg.serialize());

  const int batch = std::max(1, cfg.get_int("translate.batch_size", 16));
  std::vector<std::string> errors;
  std::vector<std::pair<std::size_t, std::vector<Real>>> pending;
  int written = 0;
  auto flush = [&]() {
    if (pending.empty()) return;
    std::vector<Real> px;
    for (const auto& p : pending) px.insert(px.end(), p.second.begin(), p.second.end());
    const auto res = model.translate(px, static_cast<int>(pending.size()), tok);
    for (std::size_t k = 0; k < pending.size(); ++k) {
      const std::string& name = jobs[pending[k].first].first;
      write_png(dir / (name + ".png"), res[k].target_image);
      write_text(dir / (name + ".txt"), latin1_to_utf8(res[k].target_text) + "\n");
      ++written;
    }
    pending.clear();
  };
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    try {
      const Image img = read_png(jobs[i].second);
      if (img.width != mc.image_width || img.height != mc.image_height)
        throw ShapeError(jobs[i].second.string() + " is " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + ", model expects " + std::to_string(mc.image_width) + "x" +
                         std::to_string(mc.image_height));
      pending.emplace_back(i, to_unit(img));
    } catch (const IoError& e) {
      errors.push_back(nlohmann::json{{"input", jobs[i].second.string()}, {"error", e.what()}}.dump());
    } catch (const ShapeError& e) {
      errors.push_back(nlohmann::json{{"input", jobs[i].second.string()}, {"error", e.what()}}.dump());
    }
    if (static_cast<int>(pending.size()) == batch) flush();
  }
  flush();
  std::string log;
  for (const std::string& e : errors) log += e + "\n";
  write_text(dir / "errors.jsonl", log);
  out << "translate: " << written << " written, " << errors.size() << " failed\n";
  if (!errors.empty()) {
    err << "translate: " << errors.size() << " inputs failed; see " << (dir / "errors.jsonl").string() << "\n";
    return kExitPartial;
  }
  return kExitOk;
}

struct EvaluateArgs {
  Common common;
  std::string outputs;
  std::string manifest;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const Config cfg = resolve_config(a.common.config, a.common.sets, a.common.seed);
  if (!fs::is_directory(a.outputs)) throw ConfigError("outputs directory not found: " + a.outputs);
  require_file(a.manifest, "manifest");
  EvalOptions opt;
  opt.wer_edges = cfg.get_reals("eval.wer_edges", opt.wer_edges);
  const fs::path dir = a.common.out;
  ensure_dir(dir);
  write_text(dir / "config.evaluate.txt", cfg.serialize());
  const MetricReport rep = evaluate_corpus(a.outputs, a.manifest, opt);
  write_text(dir / "report.json", rep.json() + "\n");
  write_text(dir / "wer_buckets.csv", rep.bucket_csv());
  out << "evaluate: bleu " << format_real(rep.bleu) << ", structure-bleu " << format_real(rep.structure_bleu)
      << ", ssim " << format_real(rep.ssim) << ", " << rep.missing.size() << " missing outputs\n";
  return kExitOk;
}

}  // namespace

Config default_config() {
  Config c;
  c.set("seed", "1");
  RenderSpec{}.write(c, "synth.");
  const SplitRatios r;
  c.set("synth.seed", "1");
  c.set("synth.train_ratio", format_real(r.train));
  c.set("synth.valid_ratio", format_real(r.valid));
  c.set("synth.test_ratio", format_real(r.test));
  c.set("synth.max_rejection_rate", "0.5");
  TokenizerConfig{}.write(c, "tokenizer.");
  ModelConfig{}.write(c, "model.");
  TeacherConfig::for_student(ModelConfig{}).write(c, "teacher.");
  Stage1Config{}.write(c, "stage1.");
  TeacherTrainConfig{}.write(c, "teacher_train.");
  Stage2Config{}.write(c, "stage2.");
  c.set("train.save_every", std::to_string(TrainHooks{}.save_every));
  c.set("translate.batch_size", "16");
  std::string edges;
  for (double e : EvalOptions{}.wer_edges) edges += (edges.empty() ? "" : ",") + format_real(e);
  c.set("eval.wer_edges", edges);
  return c;
}

Config resolve_config(const std::string& config_path, const std::vector<std::string>& sets, const std::string& seed) {
  const Config known = default_config();
  Config c;
  if (!config_path.empty()) c = Config::load(config_path);
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    Config one = Config::parse(s.substr(0, eq) + " = " + s.substr(eq + 1), "--set");
    c.merge(one);
  }
  if (!seed.empty()) c.merge(Config::parse("seed = " + seed, "--seed"));
  const auto unknown = c.unknown_keys(known);
  if (!unknown.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const std::string& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  run_seed(c);  // validates the seed value
  apply_stage_seeds(c);
  // Teacher sizes default to the student-derived ones.
  Config full = known;
  full.merge(c);
  TeacherConfig::for_student(ModelConfig::read(full, "model.")).write(full, "teacher.");
  full.merge(c);
  return full;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"In-image machine translation toolkit"};
  app.name("iimt");
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "render a parallel corpus into a paired-image dataset");
  add_common(s, synth.common);
  s->add_option("--corpus", synth.corpus, "UTF-8 TSV corpus: source<TAB>target per line");
  s->add_option("--toy", synth.toy, "use N pairs of the built-in toy German-English corpus");

  auto* train = app.add_subcommand("train", "train one pipeline stage");
  train->require_subcommand(1);
  std::map<std::string, TrainArgs> targs;
  for (const char* stage : {"tokenizer", "teacher", "iimt"}) {
    TrainArgs& t = targs[stage];
    auto* sub = train->add_subcommand(stage, std::string("train the ") + stage);
    add_common(sub, t.common);
    sub->add_option("--data", t.data, "dataset directory")->required();
    sub->add_option("--save-every", t.save_every, "steps between resumable state saves");
    sub->add_flag("--fresh", t.fresh, "discard saved state and start from step 0");
    sub->add_option("--stop-after-steps", t.stop_after)->group("");
  }

  TranslateArgs tr;
  auto* t = app.add_subcommand("translate", "translate source images into target images");
  add_common(t, tr.common);
  t->add_option("--run", tr.run, "run directory holding checkpoints/")->required();
  t->add_option("--input", tr.inputs, "PNG files or directories of PNG files");
  t->add_option("--manifest", tr.manifest, "translate every source image of a dataset manifest");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "score translated images against a manifest");
  add_common(e, ev.common);
  e->add_option("--outputs", ev.outputs, "directory of generated PNGs")->required();
  e->add_option("--manifest", ev.manifest, "dataset manifest")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& pe) {
    return app.exit(pe, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out, err);
    if (t->parsed()) return cmd_translate(tr, out, err);
    if (e->parsed()) return cmd_evaluate(ev, out);
    for (auto& [stage, ta] : targs) {
      if (!train->get_subcommand(stage)->parsed()) continue;
      if (stage == "tokenizer") return cmd_train_tokenizer(ta, out);
      if (stage == "teacher") return cmd_train_teacher(ta, out);
      return cmd_train_iimt(ta, out);
    }
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace iimt
