#pragma once

#include <vector>

#include "pera/config.hpp"
#include "pera/data.hpp"
#include "pera/model.hpp"
#include "pera/objective.hpp"
#include "pera/views.hpp"

namespace pera {

/// Augmented, masked, patchified batch ready for a forward pass.
template <class T>
struct StepInputs {
  int batch = 0;
  Mat<T> student_pixels;  // (B * N) x pixel_dim, after colour distortion
  Mat<T> teacher_pixels;  // (B * N) x pixel_dim
  Mat<T> target_pixels;   // (B * N) x pixel_dim, student view before colour
  std::vector<TriMask> masks;
};

struct StepOptions {
  Temperatures temps;
  double mse_weight = 1.0;
  bool pixel_prediction = true;
  bool mse_through_encoder = true;
};

template <class T>
struct StepOutputs {
  LossBreakdown loss;
  Mat<T> student_logits;  // B x K
  Mat<T> teacher_logits;  // B x K
  Mat<T> predictions;     // (B * L) x pixel_dim
  Mat<T> targets;         // (B * L) x pixel_dim
  int student_tokens = 0;  // per sample, after injection
  int teacher_tokens = 0;
};

/// Ratios actually used for masking under the toggles: with pixel prediction
/// off the learnable share is folded into the student part.
MaskRatios effective_ratios(const TrainConfig& config);

/// Builds the view pair and mask for every image of the batch. Randomness for
/// sample i comes from the stream (seed, step, i), so the result does not
/// depend on batch composition or on anything that ran earlier.
template <class T>
StepInputs<T> prepare_inputs(const ImageBatch& batch, const RunConfig& config, std::uint64_t seed,
                             std::int64_t step);

/// Full loss of one step. Teacher parameters and the center are constants.
/// When `grads` is non-null it receives d(total)/d(student params), added to
/// whatever it already holds.
template <class T>
StepOutputs<T> forward_backward(const NetworkParams<T>& student, const NetworkParams<T>& teacher,
                                const BackboneConfig& cfg, const StepInputs<T>& inputs,
                                const Mat<T>& center, const StepOptions& options,
                                const DropPath* drop, NetworkParams<T>* grads);

}  // namespace pera
