#include "iimt/training.hpp"

#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "iimt/errors.hpp"

namespace iimt {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> batch_indices(std::uint64_t seed, int step, int batch, int n) {
  if (n <= 0 || batch <= 0) throw ConfigError("batch_indices: empty dataset or batch");
  std::vector<int> out;
  out.reserve(batch);
  long long pass = -1;
  std::vector<int> perm(n);
  for (int i = 0; i < batch; ++i) {
    const long long p = static_cast<long long>(step) * batch + i;
    const long long e = p / n;
    if (e != pass) {
      pass = e;
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(nn::mix_seed(seed, static_cast<std::uint64_t>(e)));
      for (int k = n - 1; k > 0; --k) {
        std::uniform_int_distribution<int> pick(0, k);
        std::swap(perm[k], perm[pick(rng)]);
      }
    }
    out.push_back(perm[p % n]);
  }
  return out;
}

namespace {

constexpr char kStateFile[] = "state.ckpt";

void check_finite(double v, const char* term, int step) {
  if (!std::isfinite(v))
    throw NumericalError("non-finite " + std::string(term) + " loss at step " + std::to_string(step));
}

void save_state(const fs::path& dir, const nn::ParameterStore& ps, const AdamW& opt, int step, const Config& extra) {
  Checkpoint c = snapshot(ps);
  opt.save_state(c);
  Config meta = extra;
  meta.set("train.step", std::to_string(step));
  c.config += meta.serialize();
  save_checkpoint(dir / kStateFile, c);
}

// Restores params and optimizer; returns the saved step and metadata.
std::optional<std::pair<int, Config>> load_state(const fs::path& dir, nn::ParameterStore& ps, AdamW& opt) {
  if (dir.empty() || !fs::exists(dir / kStateFile)) return std::nullopt;
  const Checkpoint c = load_checkpoint(dir / kStateFile);
  restore(ps, c);
  opt.load_state(c);
  Config meta = Config::parse(c.config, (dir / kStateFile).string());
  return std::make_pair(meta.get_int("train.step", 0), meta);
}

int effective_batch(int batch, int n) { return std::min(batch, n); }

void write_common(Config& c, const std::string& p, int steps, int batch, double lr, double end_lr, double power,
                  int warmup, double wd, double clip, std::uint64_t seed) {
  c.set(p + "steps", std::to_string(steps));
  c.set(p + "batch_size", std::to_string(batch));
  c.set(p + "lr", format_real(lr));
  c.set(p + "end_lr", format_real(end_lr));
  c.set(p + "lr_power", format_real(power));
  c.set(p + "warmup", std::to_string(warmup));
  c.set(p + "weight_decay", format_real(wd));
  c.set(p + "clip_norm", format_real(clip));
  c.set(p + "seed", std::to_string(seed));
}

void validate_common(const char* what, int steps, int batch, double lr, int warmup, double wd) {
  const std::string w(what);
  if (steps <= 0) throw ConfigError(w + ": steps must be positive");
  if (batch <= 0) throw ConfigError(w + ": batch_size must be positive");
  if (!(lr > 0)) throw ConfigError(w + ": lr must be positive");
  if (warmup < 0) throw ConfigError(w + ": warmup must be non-negative");
  if (wd < 0) throw ConfigError(w + ": weight_decay must be non-negative");
}

}  // namespace

// ---------------------------------------------------------------- stage 1

void Stage1Config::validate() const { validate_common("stage1", steps, batch_size, lr, warmup, weight_decay); }

void Stage1Config::write(Config& c, const std::string& p) const {
  write_common(c, p, steps, batch_size, lr, end_lr, lr_power, warmup, weight_decay, clip_norm, seed);
}

Stage1Config Stage1Config::read(const Config& c, const std::string& p) {
  Stage1Config s;
  s.steps = c.get_int(p + "steps", s.steps);
  s.batch_size = c.get_int(p + "batch_size", s.batch_size);
  s.lr = c.get_real(p + "lr", s.lr);
  s.end_lr = c.get_real(p + "end_lr", s.end_lr);
  s.lr_power = c.get_real(p + "lr_power", s.lr_power);
  s.warmup = c.get_int(p + "warmup", s.warmup);
  s.weight_decay = c.get_real(p + "weight_decay", s.weight_decay);
  s.clip_norm = c.get_real(p + "clip_norm", s.clip_norm);
  s.seed = c.get_u64(p + "seed", s.seed);
  return s;
}

std::string Stage1LogEntry::json() const {
  return nlohmann::json{{"step", step}, {"l_rec", rec}, {"l_vq", vq}, {"l_commit", commit}, {"l_total", total}, {"lr", lr}}.dump();
}

TrainSummary train_stage1(Tokenizer& tok, const std::vector<std::vector<Real>>& images, const Stage1Config& cfg,
                          const TrainHooks& hooks, std::vector<Stage1LogEntry>* log) {
  cfg.validate();
  if (images.empty()) throw ConfigError("stage1: empty image dataset");
  const int n = static_cast<int>(images.size());
  const int batch = effective_batch(cfg.batch_size, n);
  AdamW opt(tok.params(), {0.9, 0.99, 1e-8, cfg.weight_decay, cfg.clip_norm});
  const LrSchedule sched{cfg.lr, cfg.end_lr, cfg.lr_power, cfg.warmup, cfg.steps};
  TrainSummary sum;
  int step = 0;
  if (auto st = load_state(hooks.state_dir, tok.params(), opt)) step = st->first;
  int ran = 0;
  for (; step < cfg.steps; ++step) {
    if (hooks.stop_after >= 0 && ran >= hooks.stop_after) {
      sum.interrupted = true;
      break;
    }
    const auto idx = batch_indices(cfg.seed, step, batch, n);
    std::vector<Real> px;
    px.reserve(static_cast<std::size_t>(batch) * images[0].size());
    for (int i : idx) px.insert(px.end(), images[i].begin(), images[i].end());
    ad::Tape tape;
    Stage1Loss loss;
    {
      ad::TapeScope scope(tape);
      nn::ForwardCtx ctx{true, 0.0, nn::mix_seed(cfg.seed, 0x51u + step)};
      loss = tok.loss(px, batch, ctx);
    }
    Stage1LogEntry e{step, loss.reconstruction.item(), loss.vq.item(), loss.commitment.item(), loss.total.item(), sched.at(step)};
    check_finite(e.rec, "reconstruction", step);
    check_finite(e.vq, "vq", step);
    check_finite(e.commit, "commitment", step);
    tape.backward(loss.total);
    opt.step(e.lr);
    if (log) log->push_back(e);
    if (hooks.on_log) hooks.on_log(e.json());
    ++ran;
    if (!hooks.state_dir.empty() && hooks.save_every > 0 && (step + 1) % hooks.save_every == 0)
      save_state(hooks.state_dir, tok.params(), opt, step + 1, {});
  }
  if (!hooks.state_dir.empty()) save_state(hooks.state_dir, tok.params(), opt, step, {});
  sum.steps_done = step;
  return sum;
}

// ---------------------------------------------------------------- teacher

void TeacherTrainConfig::validate() const {
  validate_common("teacher", steps, batch_size, lr, warmup, weight_decay);
  if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("teacher: label_smoothing must lie in [0, 1)");
  if (dropout < 0 || dropout >= 1) throw ConfigError("teacher: dropout must lie in [0, 1)");
}

void TeacherTrainConfig::write(Config& c, const std::string& p) const {
  write_common(c, p, steps, batch_size, lr, end_lr, lr_power, warmup, weight_decay, clip_norm, seed);
  c.set(p + "label_smoothing", format_real(label_smoothing));
  c.set(p + "dropout", format_real(dropout));
}

TeacherTrainConfig TeacherTrainConfig::read(const Config& c, const std::string& p) {
  TeacherTrainConfig s;
  s.steps = c.get_int(p + "steps", s.steps);
  s.batch_size = c.get_int(p + "batch_size", s.batch_size);
  s.lr = c.get_real(p + "lr", s.lr);
  s.end_lr = c.get_real(p + "end_lr", s.end_lr);
  s.lr_power = c.get_real(p + "lr_power", s.lr_power);
  s.warmup = c.get_int(p + "warmup", s.warmup);
  s.weight_decay = c.get_real(p + "weight_decay", s.weight_decay);
  s.clip_norm = c.get_real(p + "clip_norm", s.clip_norm);
  s.seed = c.get_u64(p + "seed", s.seed);
  s.label_smoothing = c.get_real(p + "label_smoothing", s.label_smoothing);
  s.dropout = c.get_real(p + "dropout", s.dropout);
  return s;
}

std::string TeacherLogEntry::json() const { return nlohmann::json{{"step", step}, {"l_ce", ce}, {"lr", lr}}.dump(); }

Tensor teacher_loss(const TeacherModel& t, const std::vector<const IimtExample*>& batch, double smoothing,
                    nn::ForwardCtx& ctx) {
  std::vector<Real> px;
  std::vector<std::string> texts;
  std::vector<int> tokens;
  for (const IimtExample* e : batch) {
    px.insert(px.end(), e->src_pixels.begin(), e->src_pixels.end());
    texts.push_back(e->tgt_text);
    tokens.insert(tokens.end(), e->tokens.begin(), e->tokens.end());
  }
  Tensor logits = t.logits(px, texts, tokens, ctx);
  return ad::cross_entropy(logits, tokens, smoothing);
}

TrainSummary train_teacher(TeacherModel& teacher, const std::vector<IimtExample>& data, const TeacherTrainConfig& cfg,
                           const TrainHooks& hooks, std::vector<TeacherLogEntry>* log) {
  cfg.validate();
  if (data.empty()) throw ConfigError("teacher: empty dataset");
  const int n = static_cast<int>(data.size());
  const int batch = effective_batch(cfg.batch_size, n);
  AdamW opt(teacher.params(), {0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm});
  const LrSchedule sched{cfg.lr, cfg.end_lr, cfg.lr_power, cfg.warmup, cfg.steps};
  TrainSummary sum;
  int step = 0;
  if (auto st = load_state(hooks.state_dir, teacher.params(), opt)) step = st->first;
  int ran = 0;
  for (; step < cfg.steps; ++step) {
    if (hooks.stop_after >= 0 && ran >= hooks.stop_after) {
      sum.interrupted = true;
      break;
    }
    std::vector<const IimtExample*> items;
    for (int i : batch_indices(cfg.seed, step, batch, n)) items.push_back(&data[i]);
    ad::Tape tape;
    Tensor loss;
    {
      ad::TapeScope scope(tape);
      nn::ForwardCtx ctx{true, cfg.dropout, nn::mix_seed(cfg.seed, 0x7eull + step)};
      loss = teacher_loss(teacher, items, cfg.label_smoothing, ctx);
    }
    TeacherLogEntry e{step, loss.item(), sched.at(step)};
    check_finite(e.ce, "teacher cross-entropy", step);
    tape.backward(loss);
    opt.step(e.lr);
    if (log) log->push_back(e);
    if (hooks.on_log) hooks.on_log(e.json());
    ++ran;
    if (!hooks.state_dir.empty() && hooks.save_every > 0 && (step + 1) % hooks.save_every == 0)
      save_state(hooks.state_dir, teacher.params(), opt, step + 1, {});
  }
  if (!hooks.state_dir.empty()) save_state(hooks.state_dir, teacher.params(), opt, step, {});
  sum.steps_done = step;
  return sum;
}

// ---------------------------------------------------------------- stage 2

void Stage2Config::validate() const {
  if (alpha < 0 || beta_w < 0 || gamma < 0) throw ConfigError("stage2: loss weights must be non-negative");
  validate_common("stage2", max_epochs * steps_per_epoch, batch_size, lr, warmup, weight_decay);
  if (max_epochs <= 0 || steps_per_epoch <= 0) throw ConfigError("stage2: max_epochs and steps_per_epoch must be positive");
  if (early_stop_patience < 1) throw ConfigError("stage2: early_stop_patience must be at least 1");
  if (avg_last_n < 1) throw ConfigError("stage2: avg_last_n must be at least 1");
  if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("stage2: label_smoothing must lie in [0, 1)");
  if (dropout < 0 || dropout >= 1) throw ConfigError("stage2: dropout must lie in [0, 1)");
  if (!(kd_temperature > 0)) throw ConfigError("stage2: kd_temperature must be positive");
}

void Stage2Config::write(Config& c, const std::string& p) const {
  c.set(p + "alpha", format_real(alpha));
  c.set(p + "beta_w", format_real(beta_w));
  c.set(p + "gamma", format_real(gamma));
  c.set(p + "lr", format_real(lr));
  c.set(p + "end_lr", format_real(end_lr));
  c.set(p + "lr_power", format_real(lr_power));
  c.set(p + "warmup", std::to_string(warmup));
  c.set(p + "weight_decay", format_real(weight_decay));
  c.set(p + "clip_norm", format_real(clip_norm));
  c.set(p + "label_smoothing", format_real(label_smoothing));
  c.set(p + "dropout", format_real(dropout));
  c.set(p + "max_epochs", std::to_string(max_epochs));
  c.set(p + "steps_per_epoch", std::to_string(steps_per_epoch));
  c.set(p + "batch_size", std::to_string(batch_size));
  c.set(p + "early_stop_patience", std::to_string(early_stop_patience));
  c.set(p + "avg_last_n", std::to_string(avg_last_n));
  c.set(p + "per_token_norm", per_token_norm ? "true" : "false");
  c.set(p + "kd_temperature", format_real(kd_temperature));
  c.set(p + "seed", std::to_string(seed));
}

Stage2Config Stage2Config::read(const Config& c, const std::string& p) {
  Stage2Config s;
  s.alpha = c.get_real(p + "alpha", s.alpha);
  s.beta_w = c.get_real(p + "beta_w", s.beta_w);
  s.gamma = c.get_real(p + "gamma", s.gamma);
  s.lr = c.get_real(p + "lr", s.lr);
  s.end_lr = c.get_real(p + "end_lr", s.end_lr);
  s.lr_power = c.get_real(p + "lr_power", s.lr_power);
  s.warmup = c.get_int(p + "warmup", s.warmup);
  s.weight_decay = c.get_real(p + "weight_decay", s.weight_decay);
  s.clip_norm = c.get_real(p + "clip_norm", s.clip_norm);
  s.label_smoothing = c.get_real(p + "label_smoothing", s.label_smoothing);
  s.dropout = c.get_real(p + "dropout", s.dropout);
  s.max_epochs = c.get_int(p + "max_epochs", s.max_epochs);
  s.steps_per_epoch = c.get_int(p + "steps_per_epoch", s.steps_per_epoch);
  s.batch_size = c.get_int(p + "batch_size", s.batch_size);
  s.early_stop_patience = c.get_int(p + "early_stop_patience", s.early_stop_patience);
  s.avg_last_n = c.get_int(p + "avg_last_n", s.avg_last_n);
  s.per_token_norm = c.get_bool(p + "per_token_norm", s.per_token_norm);
  s.kd_temperature = c.get_real(p + "kd_temperature", s.kd_temperature);
  s.seed = c.get_u64(p + "seed", s.seed);
  return s;
}

Stage2Batch make_stage2_batch(const std::vector<const IimtExample*>& items) {
  if (items.empty()) throw ContractError("stage2 batch: no examples");
  Stage2Batch b;
  b.size = static_cast<int>(items.size());
  for (const IimtExample* e : items) {
    b.src_pixels.insert(b.src_pixels.end(), e->src_pixels.begin(), e->src_pixels.end());
    b.src_texts.push_back(e->src_text);
    b.tgt_texts.push_back(e->tgt_text);
    b.tokens.insert(b.tokens.end(), e->tokens.begin(), e->tokens.end());
  }
  return b;
}

namespace {

struct TermMask {
  bool ocr, tit, kd;
};

Stage2Terms compute_terms(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx,
                          TermMask mask, bool need_iimt) {
  const ModelConfig& mc = m.config();
  const int n = mc.num_tokens();
  if (b.tokens.size() != static_cast<std::size_t>(b.size) * n)
    throw ShapeError("stage2: batch carries " + std::to_string(b.tokens.size()) + " visual tokens, expected " +
                     std::to_string(b.size * n));
  const ad::Reduction red = cfg.per_token_norm ? ad::Reduction::kMean : ad::Reduction::kSum;
  Stage2Terms t;
  t.iimt = t.ocr = t.tit = t.kd = Tensor::scalar(0.0);
  const EncoderStates enc = m.encode(b.src_pixels, b.size, ctx);
  Tensor txt;
  TextBatch tgt;
  if (mc.use_text_decoder) {
    tgt = make_text_batch(b.tgt_texts, mc.max_text_len);
    txt = m.target_text_states(enc, tgt, ctx);
    if (mask.tit) t.tit = ad::cross_entropy(m.target_text_logits(txt), tgt.targets, cfg.label_smoothing, red, b.size);
  }
  if (need_iimt || mask.kd) {
    Tensor logits = m.image_logits(enc, txt.defined() ? &txt : nullptr, txt.defined() ? &tgt : nullptr, b.tokens, n, ctx);
    if (need_iimt) t.iimt = ad::cross_entropy(logits, b.tokens, cfg.label_smoothing, red, b.size);
    if (mask.kd) {
      if (b.kd_targets.size() != static_cast<std::size_t>(b.size) * n * mc.codebook_size)
        throw ContractError("stage2: distillation targets missing for the batch");
      t.kd = ad::soft_cross_entropy(logits, b.kd_targets, 1.0, red, b.size);
    }
  }
  if (mask.ocr) {
    const TextBatch src = make_text_batch(b.src_texts, mc.max_text_len);
    t.ocr = ad::cross_entropy(m.source_text_logits(enc, src, ctx), src.targets, cfg.label_smoothing, red, b.size);
  }
  t.total = t.iimt;
  if (mask.ocr) t.total = ad::add(t.total, ad::scale(t.ocr, cfg.alpha));
  if (mask.tit) t.total = ad::add(t.total, ad::scale(t.tit, cfg.beta_w));
  if (mask.kd) t.total = ad::add(t.total, ad::scale(t.kd, cfg.gamma));
  return t;
}

}  // namespace

Stage2Terms stage2_losses(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx) {
  const TermMask mask{cfg.alpha != 0, cfg.beta_w != 0 && m.config().use_text_decoder, cfg.gamma != 0};
  return compute_terms(m, b, cfg, ctx, mask, true);
}

Tensor loss_iimt(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx) {
  return compute_terms(m, b, cfg, ctx, {false, false, false}, true).iimt;
}

Tensor loss_ocr(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx) {
  return compute_terms(m, b, cfg, ctx, {true, false, false}, false).ocr;
}

Tensor loss_tit(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx) {
  if (!m.config().use_text_decoder) throw ContractError("loss_tit: model has no target text decoder");
  return compute_terms(m, b, cfg, ctx, {false, true, false}, false).tit;
}

Tensor loss_kd(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx) {
  Stage2Config c = cfg;
  return compute_terms(m, b, c, ctx, {false, false, true}, false).kd;
}

std::string Stage2LogEntry::json() const {
  return nlohmann::json{{"step", step}, {"l_iimt", iimt}, {"l_ocr", ocr}, {"l_tit", tit},
                        {"l_kd", kd},     {"l_total", total}, {"lr", lr}}
      .dump();
}

namespace {

void attach_kd(Stage2Batch& b, const TeacherModel* teacher, const Stage2Config& cfg,
               const std::vector<const IimtExample*>& items) {
  if (cfg.gamma == 0) return;
  if (teacher == nullptr) throw ConfigError("stage2: gamma > 0 requires a trained teacher");
  // The teacher reads the source image and the target text.
  std::vector<Real> px;
  std::vector<std::string> texts;
  std::vector<int> tokens;
  for (const IimtExample* e : items) {
    px.insert(px.end(), e->src_pixels.begin(), e->src_pixels.end());
    texts.push_back(e->tgt_text);
    tokens.insert(tokens.end(), e->tokens.begin(), e->tokens.end());
  }
  b.kd_targets = teacher->distributions(px, texts, tokens, cfg.kd_temperature);
}

std::string join_ints(const std::deque<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

fs::path epoch_path(const fs::path& dir, int epoch) { return dir / ("epoch_" + std::to_string(epoch) + ".ckpt"); }

}  // namespace

double evaluate_stage2(const IimtModel& student, const TeacherModel* teacher, const std::vector<IimtExample>& data,
                       const Stage2Config& cfg) {
  if (data.empty()) throw ConfigError("stage2 evaluation: empty dataset");
  double total = 0;
  for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
    std::vector<const IimtExample*> items;
    for (std::size_t i = start; i < std::min(data.size(), start + cfg.batch_size); ++i) items.push_back(&data[i]);
    Stage2Batch b = make_stage2_batch(items);
    attach_kd(b, teacher, cfg, items);
    nn::ForwardCtx ctx;
    total += stage2_losses(student, b, cfg, ctx).total.item() * b.size;
  }
  return total / data.size();
}

TrainSummary train_stage2(IimtModel& student, const TeacherModel* teacher, const std::vector<IimtExample>& train,
                          const std::vector<IimtExample>& valid, const Stage2Config& cfg, const TrainHooks& hooks,
                          std::vector<Stage2LogEntry>* log) {
  cfg.validate();
  if (train.empty()) throw ConfigError("stage2: empty training set");
  if (cfg.gamma != 0 && teacher == nullptr) throw ConfigError("stage2: gamma > 0 requires a trained teacher");
  const int n = static_cast<int>(train.size());
  const int batch = effective_batch(cfg.batch_size, n);
  const int total_steps = cfg.total_steps();
  AdamW opt(student.params(), {0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm});
  const LrSchedule sched{cfg.lr, cfg.end_lr, cfg.lr_power, cfg.warmup, total_steps};

  // Frozen teacher targets for the training set, computed once.
  std::vector<std::vector<Real>> kd_cache;
  if (cfg.gamma != 0) {
    kd_cache.resize(n);
    for (int start = 0; start < n; start += batch) {
      std::vector<const IimtExample*> items;
      for (int i = start; i < std::min(n, start + batch); ++i) items.push_back(&train[i]);
      Stage2Batch b;
      attach_kd(b, teacher, cfg, items);
      const std::size_t per = b.kd_targets.size() / items.size();
      for (std::size_t i = 0; i < items.size(); ++i)
        kd_cache[start + i].assign(b.kd_targets.begin() + i * per, b.kd_targets.begin() + (i + 1) * per);
    }
  }

  TrainSummary sum;
  sum.best_valid = std::numeric_limits<double>::infinity();
  int step = 0;
  int bad_epochs = 0;
  std::deque<int> snapshots;  // epoch ids held on disk or in memory
  std::vector<Checkpoint> mem_snapshots;
  const bool persist = !hooks.state_dir.empty();
  if (auto st = load_state(hooks.state_dir, student.params(), opt)) {
    step = st->first;
    const Config& meta = st->second;
    bad_epochs = meta.get_int("train.bad_epochs", 0);
    sum.best_valid = meta.get_real("train.best_valid", sum.best_valid);
    sum.early_stopped = meta.get_bool("train.early_stopped", false);
    for (double e : meta.get_reals("train.snapshots", {})) snapshots.push_back(static_cast<int>(e));
  }
  auto meta_config = [&] {
    Config m;
    m.set("train.bad_epochs", std::to_string(bad_epochs));
    m.set("train.best_valid", format_real(sum.best_valid));
    m.set("train.early_stopped", sum.early_stopped ? "true" : "false");
    m.set("train.snapshots", join_ints(snapshots));
    return m;
  };

  int ran = 0;
  while (step < total_steps && !sum.early_stopped) {
    if (hooks.stop_after >= 0 && ran >= hooks.stop_after) {
      sum.interrupted = true;
      break;
    }
    std::vector<const IimtExample*> items;
    const auto idx = batch_indices(cfg.seed, step, batch, n);
    for (int i : idx) items.push_back(&train[i]);
    Stage2Batch b = make_stage2_batch(items);
    if (cfg.gamma != 0)
      for (int i : idx) b.kd_targets.insert(b.kd_targets.end(), kd_cache[i].begin(), kd_cache[i].end());

    ad::Tape tape;
    Stage2Terms t;
    {
      ad::TapeScope scope(tape);
      nn::ForwardCtx ctx{true, cfg.dropout, nn::mix_seed(cfg.seed, 0x2000000ull + step)};
      t = stage2_losses(student, b, cfg, ctx);
    }
    Stage2LogEntry e{step, t.iimt.item(), t.ocr.item(), t.tit.item(), t.kd.item(), t.total.item(), sched.at(step)};
    check_finite(e.iimt, "l_iimt", step);
    check_finite(e.ocr, "l_ocr", step);
    check_finite(e.tit, "l_tit", step);
    check_finite(e.kd, "l_kd", step);
    tape.backward(t.total);
    opt.step(e.lr);
    if (log) log->push_back(e);
    if (hooks.on_log) hooks.on_log(e.json());
    ++step;
    ++ran;

    if (step % cfg.steps_per_epoch == 0) {
      const int epoch = step / cfg.steps_per_epoch;
      snapshots.push_back(epoch);
      if (persist) {
        save_checkpoint(epoch_path(hooks.state_dir, epoch), snapshot(student.params()));
      } else {
        mem_snapshots.push_back(snapshot(student.params()));
      }
      while (static_cast<int>(snapshots.size()) > cfg.avg_last_n) {
        if (persist) fs::remove(epoch_path(hooks.state_dir, snapshots.front()));
        else mem_snapshots.erase(mem_snapshots.begin());
        snapshots.pop_front();
      }
      if (!valid.empty()) {
        const double v = evaluate_stage2(student, teacher, valid, cfg);
        if (v < sum.best_valid) {
          sum.best_valid = v;
          bad_epochs = 0;
        } else if (++bad_epochs >= cfg.early_stop_patience) {
          sum.early_stopped = true;
        }
      }
      if (persist) save_state(hooks.state_dir, student.params(), opt, step, meta_config());
    }
  }
  if (persist) save_state(hooks.state_dir, student.params(), opt, step, meta_config());
  sum.steps_done = step;
  if (sum.interrupted) return sum;

  if (!snapshots.empty()) {
    std::vector<Checkpoint> cks;
    if (persist) {
      for (int e : snapshots) cks.push_back(load_checkpoint(epoch_path(hooks.state_dir, e)));
    } else {
      cks = mem_snapshots;
    }
    restore(student.params(), average_checkpoints(cks));
    sum.epochs_averaged = static_cast<int>(cks.size());
  }
  if (!std::isfinite(sum.best_valid)) sum.best_valid = 0;
  return sum;
}

}  // namespace iimt
