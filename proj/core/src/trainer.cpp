#include "pera/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "pera/checkpoint.hpp"
#include "pera/error.hpp"
#include "pera/pipeline.hpp"
#include "pera/rng.hpp"

namespace pera {

ModelState init_state(const RunConfig& config) {
  ModelState state;
  Rng rng{config.trainer.seed, 0x1417};
  state.student = init_network<float>(config.backbone, config.head, rng);
  state.teacher = state.student;
  state.center = MatF::Zero(1, config.head.prototypes);
  state.optimizer = AdamW<float>::init(state.student);
  return state;
}

StepMetrics train_step(ModelState& state, const ImageBatch& batch, const RunConfig& config,
                       const ScheduleShape& shape) {
  const TrainConfig& tc = config.trainer;
  require(batch.size() > 0, ErrorKind::kContract, "train_step: empty batch");
  require(state.step < shape.total_steps, ErrorKind::kContract,
          "train_step: schedule already complete at step " + std::to_string(state.step));
  StepMetrics metrics;
  metrics.step = state.step;
  metrics.schedule = schedule_values(state.step, tc, shape);

  const StepInputs<float> inputs = prepare_inputs<float>(batch, config, tc.seed, state.step);
  Rng drop_rng{tc.seed, static_cast<std::uint64_t>(state.step), 0xd209};
  const DropPath drop = DropPath::sample(config.backbone, inputs.batch, drop_rng);

  StepOptions options;
  options.temps = {tc.tpt_s, metrics.schedule.tpt_t};
  options.mse_weight = tc.mse_weight;
  options.pixel_prediction = tc.toggles.pixel_prediction;
  options.mse_through_encoder = tc.mse_through_encoder;

  NetworkParams<float> grads = zeros_like(state.student);
  StepOutputs<float> out;
  try {
    out = forward_backward(state.student, state.teacher, config.backbone, inputs, state.center,
                           options, &drop, &grads);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNumerical) throw;
    fail(ErrorKind::kTraining, "step " + std::to_string(state.step) + ": " + e.what());
  }
  if (!std::isfinite(out.loss.total)) {
    fail(ErrorKind::kTraining, "step " + std::to_string(state.step) + ": non-finite loss");
  }
  metrics.loss = out.loss;
  metrics.grad_norm = clip_grad_norm(grads, tc.clip_grad);
  if (!std::isfinite(metrics.grad_norm)) {
    fail(ErrorKind::kTraining, "step " + std::to_string(state.step) + ": non-finite gradient");
  }

  state.optimizer.step(state.student, grads, metrics.schedule.lr, metrics.schedule.wd,
                       {tc.adam_beta1, tc.adam_beta2, tc.adam_eps});
  ema_update(state.teacher, state.student, metrics.schedule.ema_m);

  const MatF centered = out.teacher_logits.rowwise() - state.center.row(0);
  const MatF p_t = softmax_h(centered, metrics.schedule.tpt_t);
  const MatF mean_p = p_t.colwise().mean();
  metrics.teacher_entropy = row_entropy(mean_p)(0);
  const MatF dev = out.teacher_logits.rowwise() - out.teacher_logits.colwise().mean();
  metrics.teacher_std =
      (dev.array().square().colwise().mean().sqrt()).mean();

  state.center = updated_center(state.center, out.teacher_logits, tc.center_momentum);
  ++state.step;
  return metrics;
}

std::string metrics_line(const StepMetrics& m) {
  Json j;
  j["step"] = m.step;
  j["lr"] = m.schedule.lr;
  j["wd"] = m.schedule.wd;
  j["ema_m"] = m.schedule.ema_m;
  j["tpt_t"] = m.schedule.tpt_t;
  j["l_cls"] = m.loss.l_cls;
  j["l_mse"] = m.loss.l_mse;
  j["teacher_entropy"] = m.teacher_entropy;
  j["teacher_std"] = m.teacher_std;
  return j.dump();
}

StepMetrics parse_metrics_line(const std::string& line) {
  StepMetrics m;
  try {
    const Json j = Json::parse(line);
    m.step = j.at("step").get<std::int64_t>();
    m.schedule.lr = j.at("lr").get<double>();
    m.schedule.wd = j.at("wd").get<double>();
    m.schedule.ema_m = j.at("ema_m").get<double>();
    m.schedule.tpt_t = j.at("tpt_t").get<double>();
    m.loss.l_cls = j.at("l_cls").get<double>();
    m.loss.l_mse = j.at("l_mse").get<double>();
    m.teacher_entropy = j.at("teacher_entropy").get<double>();
    m.teacher_std = j.at("teacher_std").get<double>();
  } catch (const Json::exception& e) {
    fail(ErrorKind::kIo, std::string("malformed metrics record: ") + e.what());
  }
  return m;
}

Dataset dataset_from_config(const RunConfig& config) {
  if (config.data.source == "synthetic") {
    return generate_synthetic_dataset(config.data.num_images, config.backbone.image_size,
                                      config.data.num_classes, config.data.seed);
  }
  if (config.data.source == "folder") {
    require(!config.data.manifest.empty(), ErrorKind::kConfig,
            "data.manifest is required for the folder source");
    return load_image_folder(config.data.root, Manifest::read(config.data.manifest),
                             config.backbone.image_size);
  }
  fail(ErrorKind::kConfig, "unknown data.source '" + config.data.source + "'");
}

namespace {

std::string step_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%06lld", static_cast<long long>(step));
  return buf;
}

}  // namespace

PretrainResult pretrain(const RunConfig& config, const Dataset& dataset,
                        const PretrainOptions& options, std::optional<ModelState> initial) {
  config.validate();
  require(dataset.image_size == config.backbone.image_size, ErrorKind::kConfig,
          "pretrain: dataset image size " + std::to_string(dataset.image_size) +
              " does not match backbone.image_size " + std::to_string(config.backbone.image_size));
  const ScheduleShape shape = schedule_shape(config.trainer, dataset.size());
  const BatchStream stream(dataset, config.trainer.batch_size, config.trainer.seed, true);

  PretrainResult result;
  result.state = initial ? std::move(*initial) : init_state(config);
  ModelState& state = result.state;
  const std::int64_t stop =
      std::min(shape.total_steps, options.stop_at_step.value_or(shape.total_steps));

  std::ofstream log;
  if (!options.output_dir.empty()) {
    std::filesystem::create_directories(options.output_dir);
    const auto mode = state.step == 0 ? std::ios::trunc : std::ios::app;
    log.open(options.output_dir / "metrics.jsonl", std::ios::out | mode);
    if (!log) fail(ErrorKind::kIo, "cannot open metrics log in '" + options.output_dir.string() + "'");
  }
  while (state.step < stop) {
    const std::int64_t epoch = state.step / shape.steps_per_epoch;
    const auto index = static_cast<std::size_t>(state.step % shape.steps_per_epoch);
    const ImageBatch batch = stream.batch(epoch, index);
    StepMetrics m = train_step(state, batch, config, shape);
    if (log.is_open()) {
      log << metrics_line(m) << '\n';
      if (!log) fail(ErrorKind::kIo, "failed writing metrics log");
    }
    if (options.on_step) options.on_step(m);
    result.metrics.push_back(m);
    const int every = config.trainer.checkpoint_every;
    if (!options.output_dir.empty() && every > 0 && state.step % every == 0 && state.step < stop) {
      save_checkpoint(state, config, options.output_dir / "checkpoints" / step_name(state.step));
    }
  }
  if (log.is_open()) log.flush();
  if (!options.output_dir.empty()) save_checkpoint(state, config, options.output_dir / "checkpoint");
  return result;
}

}  // namespace pera
