#include <doctest.h>

#include "pera/error.hpp"
#include "pera/schedule.hpp"

using namespace pera;

namespace {

TrainConfig table_config() {
  TrainConfig t;
  t.epochs = 5;
  t.batch_size = 5;
  t.warmup_epochs = 1.0;
  t.base_lr = 1e-3;
  t.final_lr = 1e-5;
  t.weight_decay_start = 0.04;
  t.weight_decay_end = 0.4;
  t.ema_momentum_start = 0.992;
  t.ema_momentum_end = 1.0;
  t.tpt_t_start = 0.04;
  t.tpt_t_max = 0.07;
  t.tpt_t_warmup_epochs = 2.0;
  return t;
}

struct Row {
  int step;
  double lr, wd, ema_m, tpt_t;
};

// Computed separately from the closed forms: linear warmup then half-cosine
// for lr, half-cosine ramps for wd and ema_m, per-epoch linear ramp for tpt_t.
const Row kTable[] = {
    {0, 0, 0.03999999999999998, 0.99199999999999999, 0.040000000000000001},
    {1, 0.00050000000000000001, 0.048809827066872313, 0.99219577393481939, 0.040000000000000001},
    {2, 0.001, 0.074376941012509468, 0.99276393202250024, 0.055000000000000007},
    {3, 0.00096232036859308695, 0.11419865458735484, 0.99364885899083011, 0.055000000000000007},
    {4, 0.00085501785668734098, 0.16437694101250946, 0.99476393202250024, 0.070000000000000007},
    {5, 0.00069442829902071951, 0.22, 0.996, 0.070000000000000007},
    {6, 0.00050500000000000002, 0.27562305898749051, 0.99723606797749975, 0.070000000000000007},
    {7, 0.00031557170097928059, 0.32580134541264516, 0.99835114100916988, 0.070000000000000007},
    {8, 0.00015498214331265901, 0.36562305898749053, 0.99923606797749975, 0.070000000000000007},
    {9, 4.7679631406913064e-05, 0.39119017293312763, 0.9998042260651806, 0.070000000000000007},
    {10, 1.0000000000000001e-05, 0.40000000000000002, 1, 0.070000000000000007},
};

}  // namespace

TEST_CASE("schedule shape") {
  const ScheduleShape s = schedule_shape(table_config(), 10);
  CHECK(s.steps_per_epoch == 2);
  CHECK(s.total_steps == 10);
  CHECK(s.warmup_steps == 2);
  CHECK(schedule_shape(table_config(), 11).steps_per_epoch == 3);
  CHECK_THROWS_AS(schedule_shape(table_config(), 0), Error);
}

TEST_CASE("schedule matches the reference table") {
  const TrainConfig cfg = table_config();
  const ScheduleShape shape = schedule_shape(cfg, 10);
  for (const Row& r : kTable) {
    const ScheduleValues v = schedule_values(r.step, cfg, shape);
    INFO("step " << r.step);
    CHECK(v.lr == doctest::Approx(r.lr).epsilon(1e-12));
    CHECK(v.wd == doctest::Approx(r.wd).epsilon(1e-12));
    CHECK(v.ema_m == doctest::Approx(r.ema_m).epsilon(1e-12));
    CHECK(v.tpt_t == doctest::Approx(r.tpt_t).epsilon(1e-12));
  }
}

TEST_CASE("schedule boundaries") {
  TrainConfig cfg;
  const ScheduleShape shape = schedule_shape(cfg, 640);
  CHECK(schedule_values(0, cfg, shape).lr == 0.0);
  CHECK(schedule_values(shape.warmup_steps, cfg, shape).lr == cfg.base_lr);
  CHECK(schedule_values(shape.total_steps, cfg, shape).lr == doctest::Approx(cfg.final_lr));
  const auto late = shape.steps_per_epoch * static_cast<std::int64_t>(cfg.tpt_t_warmup_epochs + 1);
  CHECK(schedule_values(late, cfg, shape).tpt_t == cfg.tpt_t_max);
  CHECK_THROWS_AS(schedule_values(-1, cfg, shape), Error);
  CHECK_THROWS_AS(schedule_values(shape.total_steps + 1, cfg, shape), Error);
}

TEST_CASE("schedules are monotone on their segments") {
  TrainConfig cfg;
  const ScheduleShape shape = schedule_shape(cfg, 640);
  ScheduleValues prev = schedule_values(0, cfg, shape);
  for (std::int64_t s = 1; s <= shape.total_steps; ++s) {
    const ScheduleValues v = schedule_values(s, cfg, shape);
    if (s <= shape.warmup_steps) {
      CHECK(v.lr > prev.lr);
    } else {
      CHECK(v.lr <= prev.lr);
    }
    CHECK(v.wd >= prev.wd);
    CHECK(v.ema_m >= prev.ema_m);
    CHECK(v.tpt_t >= prev.tpt_t);
    prev = v;
  }
}
