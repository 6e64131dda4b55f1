#pragma once

#include <cstdint>

#include "pera/config.hpp"

namespace pera {

struct ScheduleValues {
  double lr = 0.0;
  double wd = 0.0;
  double ema_m = 0.0;
  double tpt_t = 0.0;
};

struct ScheduleShape {
  std::int64_t steps_per_epoch = 1;
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;
};

ScheduleShape schedule_shape(const TrainConfig& config, std::size_t dataset_size);

/// Closed-form schedule values at `step`, valid for step in [0, total_steps]:
///   lr:    linear 0 -> base_lr over warmup, then cosine to final_lr at total
///   wd:    cosine from weight_decay_start up to weight_decay_end
///   ema_m: cosine from ema_momentum_start up to ema_momentum_end
///   tpt_t: per epoch, linear to tpt_t_max over its warmup, then constant
ScheduleValues schedule_values(std::int64_t step, const TrainConfig& config,
                               const ScheduleShape& shape);

}  // namespace pera
