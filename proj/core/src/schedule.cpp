#include "pera/schedule.hpp"

#include <cmath>

#include "pera/error.hpp"

namespace pera {

ScheduleShape schedule_shape(const TrainConfig& config, std::size_t dataset_size) {
  require(dataset_size > 0, ErrorKind::kConfig, "schedule: empty dataset");
  ScheduleShape s;
  s.steps_per_epoch =
      static_cast<std::int64_t>((dataset_size + config.batch_size - 1) / config.batch_size);
  s.total_steps = s.steps_per_epoch * config.epochs;
  s.warmup_steps = static_cast<std::int64_t>(std::llround(config.warmup_epochs * s.steps_per_epoch));
  return s;
}

namespace {

// Half-cosine from `from` (progress 0) to `to` (progress 1).
double cosine(double from, double to, double progress) {
  return to + 0.5 * (from - to) * (1.0 + std::cos(M_PI * progress));
}

}  // namespace

ScheduleValues schedule_values(std::int64_t step, const TrainConfig& config,
                               const ScheduleShape& shape) {
  if (step < 0 || step > shape.total_steps) {
    fail(ErrorKind::kContract, "schedule: step " + std::to_string(step) + " outside [0, " +
                                   std::to_string(shape.total_steps) + "]");
  }
  ScheduleValues v;
  const auto total = static_cast<double>(shape.total_steps);
  const auto warm = static_cast<double>(shape.warmup_steps);
  const auto s = static_cast<double>(step);
  if (step < shape.warmup_steps) {
    v.lr = config.base_lr * s / warm;
  } else {
    const double span = total - warm;
    v.lr = span > 0 ? cosine(config.base_lr, config.final_lr, (s - warm) / span) : config.base_lr;
  }
  v.wd = cosine(config.weight_decay_start, config.weight_decay_end, s / total);
  v.ema_m = cosine(config.ema_momentum_start, config.ema_momentum_end, s / total);
  const auto epoch = static_cast<double>(step / shape.steps_per_epoch);
  if (epoch < config.tpt_t_warmup_epochs) {
    v.tpt_t = config.tpt_t_start +
              (config.tpt_t_max - config.tpt_t_start) * epoch / config.tpt_t_warmup_epochs;
  } else {
    v.tpt_t = config.tpt_t_max;
  }
  return v;
}

}  // namespace pera
