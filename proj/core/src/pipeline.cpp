#include "pera/pipeline.hpp"

#include "pera/error.hpp"
#include "pera/rng.hpp"

namespace pera {

MaskRatios effective_ratios(const TrainConfig& config) {
  MaskRatios r = config.mask_ratios;
  if (!config.toggles.pixel_prediction) {
    r.s += r.l;
    r.l = 0.0;
  }
  return r;
}

template <class T>
StepInputs<T> prepare_inputs(const ImageBatch& batch, const RunConfig& config, std::uint64_t seed,
                             std::int64_t step) {
  require(batch.size() > 0, ErrorKind::kContract, "prepare_inputs: empty batch");
  const BackboneConfig& bb = config.backbone;
  const int n = bb.num_patches();
  const int b = static_cast<int>(batch.size());
  const MaskRatios ratios = effective_ratios(config.trainer);
  StepInputs<T> in;
  in.batch = b;
  in.student_pixels.resize(static_cast<Eigen::Index>(b) * n, bb.pixel_dim());
  in.teacher_pixels.resize(in.student_pixels.rows(), in.student_pixels.cols());
  in.target_pixels.resize(in.student_pixels.rows(), in.student_pixels.cols());
  in.masks.resize(b);
  for (int i = 0; i < b; ++i) {
    Rng rng{seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i), 0x71e4};
    const ViewPair pair = make_view_pair(batch.images[i], rng, config.augment,
                                         config.trainer.toggles.spatial_alignment, bb.image_size);
    in.student_pixels.middleRows(i * n, n) = patchify<T>(pair.student_view, bb.patch_size);
    in.teacher_pixels.middleRows(i * n, n) = patchify<T>(pair.teacher_view, bb.patch_size);
    in.target_pixels.middleRows(i * n, n) = patchify<T>(pair.student_target, bb.patch_size);
    in.masks[i] = config.trainer.toggles.disjoint_mask ? sample_trimask(n, ratios, rng)
                                                       : TriMask::dense(n);
  }
  return in;
}

template <class T>
StepOutputs<T> forward_backward(const NetworkParams<T>& student, const NetworkParams<T>& teacher,
                                const BackboneConfig& cfg, const StepInputs<T>& inputs,
                                const Mat<T>& center, const StepOptions& options,
                                const DropPath* drop, NetworkParams<T>* grads) {
  const int b = inputs.batch;
  const int n = cfg.num_patches();
  const int d = cfg.embed_dim;
  require(b >= 1 && static_cast<int>(inputs.masks.size()) == b &&
              inputs.student_pixels.rows() == static_cast<Eigen::Index>(b) * n,
          ErrorKind::kInternal, "forward_backward: inputs do not match the batch");
  const auto ns = static_cast<int>(inputs.masks[0].s_idx.size());
  const auto nl = static_cast<int>(inputs.masks[0].l_idx.size());
  const auto nt = static_cast<int>(inputs.masks[0].t_idx.size());
  for (const auto& m : inputs.masks) {
    require(m.num_patches == n && static_cast<int>(m.s_idx.size()) == ns &&
                static_cast<int>(m.l_idx.size()) == nl && static_cast<int>(m.t_idx.size()) == nt,
            ErrorKind::kInternal, "forward_backward: masks differ in part sizes within a batch");
  }
  const int t1 = 1 + ns;
  const int tt = 1 + nt;

  const Mat<T> s_emb = patch_embed(student, inputs.student_pixels);
  const Mat<T> t_emb = patch_embed(teacher, inputs.teacher_pixels);
  Mat<T> visible(static_cast<Eigen::Index>(b) * t1, d);
  Mat<T> mask_tokens(static_cast<Eigen::Index>(b) * nl, d);
  Mat<T> teacher_tokens(static_cast<Eigen::Index>(b) * tt, d);
  Mat<T> targets(static_cast<Eigen::Index>(b) * nl, cfg.pixel_dim());
  for (int i = 0; i < b; ++i) {
    const Mat<T> s_rows = s_emb.middleRows(i * n, n);
    const Mat<T> t_rows = t_emb.middleRows(i * n, n);
    const Mat<T> px_rows = inputs.target_pixels.middleRows(i * n, n);
    const auto s_in = assemble_inputs<T>(s_rows, t_rows, inputs.masks[i], student.cls_token,
                                         student.mask_token, student.pos_embed, px_rows);
    const auto t_in = assemble_inputs<T>(s_rows, t_rows, inputs.masks[i], teacher.cls_token,
                                         teacher.mask_token, teacher.pos_embed, px_rows);
    visible.middleRows(i * t1, t1) = s_in.student_visible;
    mask_tokens.middleRows(i * nl, nl) = s_in.student_mask;
    targets.middleRows(i * nl, nl) = s_in.targets;
    teacher_tokens.middleRows(i * tt, tt) = t_in.teacher;
  }

  EncoderCache<T> enc_cache;
  const EncoderOutput<T> enc =
      encode_student(student, cfg, visible, mask_tokens, b, drop, grads ? &enc_cache : nullptr);
  const Mat<T> t_cls = encode_teacher(teacher, cfg, teacher_tokens, b);

  StepOutputs<T> out;
  out.student_tokens = t1 + nl;
  out.teacher_tokens = tt;
  ProjectorCache<T> proj_cache;
  out.student_logits = project(student, enc.cls, &proj_cache);
  out.teacher_logits = project(teacher, t_cls);
  Mat<T> d_student_logits;
  out.loss.l_cls = cls_loss(out.student_logits, out.teacher_logits, center, options.temps,
                            grads ? &d_student_logits : nullptr);
  out.loss.w = options.mse_weight;
  Mat<T> d_pred;
  const bool predict = options.pixel_prediction && nl > 0;
  if (predict) {
    out.predictions = predict_pixels(student, enc.mask_out);
    out.targets = targets;
    out.loss.l_mse = mse_loss(out.predictions, targets, 1.0, grads ? &d_pred : nullptr);
  }
  out.loss.total = out.loss.l_cls + options.mse_weight * out.loss.l_mse;
  if (grads == nullptr) return out;

  const Mat<T> d_cls = project_backward(student, proj_cache, d_student_logits, *grads);
  Mat<T> d_mask_out = Mat<T>::Zero(enc.mask_out.rows(), d);
  if (predict) {
    d_pred *= static_cast<T>(options.mse_weight);
    grads->predictor.w.noalias() += enc.mask_out.transpose() * d_pred;
    grads->predictor.b += d_pred.colwise().sum();
    if (options.mse_through_encoder) d_mask_out.noalias() = d_pred * student.predictor.w.transpose();
  }
  Mat<T> d_visible, d_mask_tokens;
  encode_student_backward(student, cfg, enc_cache, d_cls, d_mask_out, *grads, d_visible, d_mask_tokens);

  Mat<T> d_emb = Mat<T>::Zero(static_cast<Eigen::Index>(b) * n, d);
  for (int i = 0; i < b; ++i) {
    const TriMask& m = inputs.masks[i];
    const auto cls_row = d_visible.row(i * t1);
    grads->cls_token += cls_row;
    grads->pos_embed.row(0) += cls_row;
    for (int k = 0; k < ns; ++k) {
      const int p = m.s_idx[k];
      const auto row = d_visible.row(i * t1 + 1 + k);
      d_emb.row(i * n + p) += row;
      grads->pos_embed.row(1 + p) += row;
    }
    for (int k = 0; k < nl; ++k) {
      const int p = m.l_idx[k];
      const auto row = d_mask_tokens.row(i * nl + k);
      grads->mask_token += row;
      grads->pos_embed.row(1 + p) += row;
    }
  }
  grads->patch_embed.w.noalias() += normalize_pixels(inputs.student_pixels).transpose() * d_emb;
  grads->patch_embed.b += d_emb.colwise().sum();
  return out;
}

#define PERA_INSTANTIATE_PIPELINE(T)                                                              \
  template StepInputs<T> prepare_inputs<T>(const ImageBatch&, const RunConfig&, std::uint64_t,   \
                                           std::int64_t);                                        \
  template StepOutputs<T> forward_backward<T>(const NetworkParams<T>&, const NetworkParams<T>&,  \
                                              const BackboneConfig&, const StepInputs<T>&,       \
                                              const Mat<T>&, const StepOptions&, const DropPath*, \
                                              NetworkParams<T>*);

PERA_INSTANTIATE_PIPELINE(float)
PERA_INSTANTIATE_PIPELINE(double)

}  // namespace pera
