#pragma once

#include <array>
#include <memory>
#include <vector>

#include "pera/image.hpp"
#include "pera/rng.hpp"
#include "pera/tensor.hpp"

namespace pera {

struct SpatialParams {
  bool hflip = false;
  bool vflip = false;
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  int target_size = 0;

  bool operator==(const SpatialParams&) const = default;
};

enum class ColorOp { kBrightness, kContrast, kSaturation, kHue };

struct ColorParams {
  std::array<ColorOp, 4> order{ColorOp::kBrightness, ColorOp::kContrast, ColorOp::kSaturation,
                               ColorOp::kHue};
  bool jitter = false;  // whether the four ops run at all
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;  // fraction of a full turn
  bool grayscale = false;
};

struct AugmentConfig {
  double crop_scale_min = 0.32;
  double crop_scale_max = 1.0;
  double crop_ratio_min = 3.0 / 4.0;
  double crop_ratio_max = 4.0 / 3.0;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double jitter_prob = 0.0;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
  double grayscale_prob = 0.0;
};

struct ViewPair {
  Image student_view;
  Image teacher_view;
  /// Student view after the spatial transform only; source of pixel targets.
  Image student_target;
  /// Aligned pairs point at the same record.
  std::shared_ptr<const SpatialParams> student_spatial;
  std::shared_ptr<const SpatialParams> teacher_spatial;
  ColorParams student_color;
  ColorParams teacher_color;

  bool spatially_aligned() const { return student_spatial == teacher_spatial; }
};

SpatialParams sample_spatial(int src_h, int src_w, int target_size, const AugmentConfig& cfg,
                             Rng& rng);
ColorParams sample_color(const AugmentConfig& cfg, Rng& rng);
Image apply_spatial(const Image& image, const SpatialParams& params);
Image apply_color(const Image& image, const ColorParams& params);

/// Student and teacher views of one image. With spatial_alignment, one crop
/// and flip record drives both views; colour distortion is always sampled
/// independently per view.
ViewPair make_view_pair(const Image& image, Rng& rng, const AugmentConfig& cfg,
                        bool spatial_alignment, int target_size);

struct MaskRatios {
  double s = 0.3;
  double l = 0.2;
  double t = 0.5;

  bool operator==(const MaskRatios&) const = default;
};

struct PartSizes {
  int s = 0;
  int l = 0;
  int t = 0;
};

/// |t| and |l| rounded half-up from the ratios, |s| takes the remainder.
/// Throws a configuration error if s or t would be empty.
PartSizes part_sizes(int num_patches, const MaskRatios& ratios);

/// Disjoint partition of patch indices [0, N) into student-visible (s),
/// learnable mask slots (l), and teacher-visible (t) parts. Each index list is
/// sorted ascending.
struct TriMask {
  int num_patches = 0;
  std::vector<int> s_idx;
  std::vector<int> l_idx;
  std::vector<int> t_idx;

  /// Every index visible to both networks, l empty.
  static TriMask dense(int num_patches);
};

TriMask sample_trimask(int num_patches, const MaskRatios& ratios, Rng& rng);

/// Checks the partition law: pairwise disjoint, union equals [0, N).
bool is_partition(const TriMask& mask);

/// Token matrices for one sample. The student sequence is
/// [cls, s-patches, mask slots]; the teacher sequence is [cls, t-patches].
/// Every token carries the positional embedding of its original index
/// (row 0 of pos_embed is the cls position).
template <class T>
struct AssembledInputs {
  Mat<T> student_visible;  // (1 + |s|) x D
  Mat<T> student_mask;     // |l| x D
  Mat<T> teacher;          // (1 + |t|) x D
  Mat<T> targets;          // |l| x pixel_dim, pre-colour student pixels

  Mat<T> student_tokens() const;
};

template <class T>
AssembledInputs<T> assemble_inputs(const Mat<T>& student_patches, const Mat<T>& teacher_patches,
                                   const TriMask& mask, const Mat<T>& cls_token,
                                   const Mat<T>& mask_token, const Mat<T>& pos_embed,
                                   const Mat<T>& target_pixels);

/// Splits an image into non-overlapping patches, one row per patch in raster
/// order, each row laid out as (py, px, channel).
template <class T>
Mat<T> patchify(const Image& image, int patch_size);

/// Inverse of patchify for a full grid of patch rows.
template <class T>
Image unpatchify(const Mat<T>& patches, int grid, int patch_size);

}  // namespace pera
