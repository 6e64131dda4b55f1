#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pera/config.hpp"
#include "pera/data.hpp"
#include "pera/objective.hpp"
#include "pera/optim.hpp"
#include "pera/schedule.hpp"

namespace pera {

struct ModelState {
  NetworkParams<float> student;
  NetworkParams<float> teacher;
  MatF center;  // 1 x K
  AdamW<float> optimizer;
  std::int64_t step = 0;  // number of completed steps
};

/// Student drawn from the trainer seed; the teacher starts as an exact copy.
ModelState init_state(const RunConfig& config);

struct StepMetrics {
  std::int64_t step = 0;
  ScheduleValues schedule;
  LossBreakdown loss;
  double teacher_entropy = 0.0;  // entropy of the batch-mean teacher distribution
  double teacher_std = 0.0;      // mean over prototypes of the batch std of teacher logits
  double grad_norm = 0.0;
};

/// One optimisation step: views and masks, forward/backward, AdamW with the
/// scheduled (lr, wd), EMA teacher update, then the center update. The loss
/// uses the center from before this step.
StepMetrics train_step(ModelState& state, const ImageBatch& batch, const RunConfig& config,
                       const ScheduleShape& shape);

struct PretrainOptions {
  std::filesystem::path output_dir;  // metrics log and checkpoints; empty keeps everything in memory
  std::optional<std::int64_t> stop_at_step;  // stop early (schedule still spans the full run)
  std::function<void(const StepMetrics&)> on_step;
};

struct PretrainResult {
  ModelState state;
  std::vector<StepMetrics> metrics;
};

/// Runs from `initial` (or a fresh state) to the end of the schedule.
PretrainResult pretrain(const RunConfig& config, const Dataset& dataset,
                        const PretrainOptions& options = {},
                        std::optional<ModelState> initial = std::nullopt);

/// One metrics record as a single line of JSON with a fixed field order:
/// step, lr, wd, ema_m, tpt_t, l_cls, l_mse, teacher_entropy, teacher_std.
std::string metrics_line(const StepMetrics& m);
StepMetrics parse_metrics_line(const std::string& line);

/// Builds the dataset a config describes (synthetic or manifest folder).
Dataset dataset_from_config(const RunConfig& config);

}  // namespace pera
