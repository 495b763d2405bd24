#pragma once

#include "leukodetr/checkpoint.hpp"
#include "leukodetr/config.hpp"
#include "leukodetr/data.hpp"
#include "leukodetr/detector.hpp"
#include "leukodetr/optimizer.hpp"

namespace leukodetr {

struct EpochLog {
  int64_t epoch = 0;
  double class_loss = 0, l1_loss = 0, giou_loss = 0, total = 0;
  double grad_norm = 0;
};

struct InferSummary {
  int64_t images = 0;
  int64_t boxes = 0;
  std::vector<std::string> errors;  // unreadable files, skipped
  std::string detections_json;
};

// float32 train/eval/infer driver behind the CLI. All randomness flows from
// the run seed through named streams, so single-threaded runs reproduce.
class Runner {
 public:
  explicit Runner(RunConfig cfg);

  // Returns the final checkpoint path. resume_path may be empty.
  std::string train(const std::string& resume_path = "");

  // Evaluates a checkpoint on split_json (defaults to data.test_json) and
  // writes <out>/reports/eval.json.
  EvalResult evaluate(const std::string& ckpt_path, const std::string& split_json = "");

  // Runs detection over every image in a directory, writing overlays and
  // <out>/reports/detections.json. gt_json optionally supplies black
  // ground-truth boxes by file name.
  InferSummary infer(const std::string& ckpt_path, const std::string& images_dir,
                     double threshold, const std::string& gt_json = "");

  const std::vector<EpochLog>& epoch_logs() const { return epoch_logs_; }
  const std::vector<double>& iteration_losses() const { return iteration_losses_; }
  const RunConfig& config() const { return cfg_; }

 private:
  void save_checkpoint(const std::string& path, LeukoDetector<float>& model,
                       AdamW<float>& optim, int64_t epoch, int64_t iter,
                       std::mt19937_64& shuffle_rng, std::mt19937_64& aug_rng,
                       std::mt19937_64& dropout_rng) const;

  RunConfig cfg_;
  std::vector<EpochLog> epoch_logs_;
  std::vector<double> iteration_losses_;
};

}  // namespace leukodetr
