#pragma once

// Training loops for the three stages: tokenizer reconstruction, teacher
// pretraining, and the joint translation objective
//   L = L_iimt + alpha * L_ocr + beta_w * L_tit + gamma * L_kd.
// Every loop derives its batch order and dropout masks from (seed, step), so a
// run resumed from a saved state retraces the uninterrupted run exactly.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "iimt/checkpoint.hpp"
#include "iimt/config.hpp"
#include "iimt/iimt_model.hpp"
#include "iimt/optim.hpp"
#include "iimt/teacher.hpp"
#include "iimt/tokenizer.hpp"

namespace iimt {

struct IimtExample {
  std::string id;
  std::vector<Real> src_pixels;  // unit-range HWC
  std::vector<Real> tgt_pixels;
  std::string src_text;
  std::string tgt_text;
  std::vector<int> tokens;  // tokenizer encoding of the target image
};

// Sample indices for one step: position p = step * batch + i walks through
// seeded per-pass permutations of [0, n).
std::vector<int> batch_indices(std::uint64_t seed, int step, int batch, int n);

struct TrainHooks {
  std::function<void(const std::string& json_line)> on_log;
  // Directory for resumable state; empty disables persistence.
  std::filesystem::path state_dir;
  int save_every = 100;  // steps between state saves (stage-2 saves at epoch ends)
  // Stop (as if interrupted) after this many steps in this call; < 0 disables.
  int stop_after = -1;
};

struct TrainSummary {
  int steps_done = 0;  // global step count reached
  bool interrupted = false;
  bool early_stopped = false;
  double best_valid = 0;
  int epochs_averaged = 0;
};

// ---------------------------------------------------------------- stage 1

struct Stage1Config {
  int steps = 2000;
  int batch_size = 16;
  double lr = 1e-3;
  double end_lr = 0.0;
  double lr_power = 1.0;
  int warmup = 50;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
  void write(Config& c, const std::string& prefix) const;
  static Stage1Config read(const Config& c, const std::string& prefix);
};

struct Stage1LogEntry {
  int step = 0;
  double rec = 0, vq = 0, commit = 0, total = 0, lr = 0;
  std::string json() const;
};

TrainSummary train_stage1(Tokenizer& tok, const std::vector<std::vector<Real>>& images, const Stage1Config& cfg,
                          const TrainHooks& hooks = {}, std::vector<Stage1LogEntry>* log = nullptr);

// ---------------------------------------------------------------- teacher

struct TeacherTrainConfig {
  int steps = 1500;
  int batch_size = 16;
  double lr = 1e-3;
  double end_lr = 0.0;
  double lr_power = 1.0;
  int warmup = 50;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double label_smoothing = 0.0;
  double dropout = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
  void write(Config& c, const std::string& prefix) const;
  static TeacherTrainConfig read(const Config& c, const std::string& prefix);
};

struct TeacherLogEntry {
  int step = 0;
  double ce = 0, lr = 0;
  std::string json() const;
};

// Mean per-token cross-entropy of the teacher on gold tokens.
Tensor teacher_loss(const TeacherModel& t, const std::vector<const IimtExample*>& batch, double smoothing,
                    nn::ForwardCtx& ctx);

TrainSummary train_teacher(TeacherModel& teacher, const std::vector<IimtExample>& data, const TeacherTrainConfig& cfg,
                           const TrainHooks& hooks = {}, std::vector<TeacherLogEntry>* log = nullptr);

// ---------------------------------------------------------------- stage 2

struct Stage2Config {
  double alpha = 1.0;   // OCR weight
  double beta_w = 1.0;  // TIT weight
  double gamma = 1.0;   // KD weight
  double lr = 1e-3;
  double end_lr = 0.0;
  double lr_power = 1.0;
  int warmup = 100;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double label_smoothing = 0.1;
  double dropout = 0.1;
  int max_epochs = 100;
  int steps_per_epoch = 20;
  int batch_size = 16;
  int early_stop_patience = 10;
  int avg_last_n = 10;
  bool per_token_norm = true;
  double kd_temperature = 1.0;
  std::uint64_t seed = 1;

  int total_steps() const { return max_epochs * steps_per_epoch; }
  void validate() const;
  void write(Config& c, const std::string& prefix) const;
  static Stage2Config read(const Config& c, const std::string& prefix);
};

struct Stage2Batch {
  int size = 0;
  std::vector<Real> src_pixels;
  std::vector<std::string> src_texts;
  std::vector<std::string> tgt_texts;
  std::vector<int> tokens;
  std::vector<Real> kd_targets;  // [size * N * K] teacher distributions, empty without KD
};

Stage2Batch make_stage2_batch(const std::vector<const IimtExample*>& items);

struct Stage2Terms {
  Tensor iimt, ocr, tit, kd, total;
};

// Terms with zero weight are not computed and reported as 0. KD needs
// batch.kd_targets when gamma > 0.
Stage2Terms stage2_losses(const IimtModel& m, const Stage2Batch& batch, const Stage2Config& cfg, nn::ForwardCtx& ctx);

// Individual terms, each from its own forward pass.
Tensor loss_iimt(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx);
Tensor loss_ocr(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx);
Tensor loss_tit(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx);
Tensor loss_kd(const IimtModel& m, const Stage2Batch& b, const Stage2Config& cfg, nn::ForwardCtx& ctx);

struct Stage2LogEntry {
  int step = 0;
  double iimt = 0, ocr = 0, tit = 0, kd = 0, total = 0, lr = 0;
  std::string json() const;
};

// Trains the student with frozen teacher (may be null when gamma == 0). On
// return the student holds the mean of the last avg_last_n epoch snapshots
// (or its current weights when no epoch completed).
TrainSummary train_stage2(IimtModel& student, const TeacherModel* teacher, const std::vector<IimtExample>& train,
                          const std::vector<IimtExample>& valid, const Stage2Config& cfg, const TrainHooks& hooks = {},
                          std::vector<Stage2LogEntry>* log = nullptr);

// Validation objective (no dropout, no gradient), averaged over batches.
double evaluate_stage2(const IimtModel& student, const TeacherModel* teacher, const std::vector<IimtExample>& data,
                       const Stage2Config& cfg);

}  // namespace iimt
