#include "pera/views.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pera/error.hpp"

namespace pera {

SpatialParams sample_spatial(int src_h, int src_w, int target_size, const AugmentConfig& cfg,
                             Rng& rng) {
  if (src_h < 1 || src_w < 1 || target_size < 1) {
    fail(ErrorKind::kAugmentation, "spatial augmentation: empty source or target size");
  }
  if (!(cfg.crop_scale_min > 0.0) || cfg.crop_scale_min > cfg.crop_scale_max ||
      cfg.crop_scale_max > 1.0 || !(cfg.crop_ratio_min > 0.0) ||
      cfg.crop_ratio_min > cfg.crop_ratio_max) {
    fail(ErrorKind::kAugmentation, "spatial augmentation: infeasible crop scale/ratio bounds");
  }
  SpatialParams p;
  p.target_size = target_size;
  const double area = static_cast<double>(src_h) * src_w;
  const double log_lo = std::log(cfg.crop_ratio_min);
  const double log_hi = std::log(cfg.crop_ratio_max);
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target_area = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target_area * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target_area / ratio)));
    if (w > 0 && h > 0 && w <= src_w && h <= src_h) {
      p.height = h;
      p.width = w;
      p.top = static_cast<int>(rng.below(static_cast<std::uint64_t>(src_h - h) + 1));
      p.left = static_cast<int>(rng.below(static_cast<std::uint64_t>(src_w - w) + 1));
      found = true;
    }
  }
  if (!found) {
    // Centre crop clamped to the ratio bounds.
    const double in_ratio = static_cast<double>(src_w) / src_h;
    if (in_ratio < cfg.crop_ratio_min) {
      p.width = src_w;
      p.height = std::max(1, static_cast<int>(std::lround(src_w / cfg.crop_ratio_min)));
    } else if (in_ratio > cfg.crop_ratio_max) {
      p.height = src_h;
      p.width = std::max(1, static_cast<int>(std::lround(src_h * cfg.crop_ratio_max)));
    } else {
      p.height = src_h;
      p.width = src_w;
    }
    p.height = std::min(p.height, src_h);
    p.width = std::min(p.width, src_w);
    p.top = (src_h - p.height) / 2;
    p.left = (src_w - p.width) / 2;
  }
  p.hflip = rng.bernoulli(cfg.hflip_prob);
  p.vflip = rng.bernoulli(cfg.vflip_prob);
  return p;
}

ColorParams sample_color(const AugmentConfig& cfg, Rng& rng) {
  ColorParams p;
  p.jitter = rng.bernoulli(cfg.jitter_prob);
  // Every field is drawn whether or not jitter applies so that the stream
  // position does not depend on the coin above.
  const auto perm = rng.permutation(4);
  for (int i = 0; i < 4; ++i) p.order[i] = static_cast<ColorOp>(perm[i]);
  p.brightness = rng.uniform(std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
  p.contrast = rng.uniform(std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
  p.saturation = rng.uniform(std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
  p.hue = rng.uniform(-cfg.hue, cfg.hue);
  p.grayscale = rng.bernoulli(cfg.grayscale_prob);
  return p;
}

Image apply_spatial(const Image& image, const SpatialParams& p) {
  if (p.height < 1 || p.width < 1 || p.top < 0 || p.left < 0 || p.top + p.height > image.height ||
      p.left + p.width > image.width) {
    fail(ErrorKind::kAugmentation, "crop box outside source image");
  }
  Image out = crop_resize_bilinear(image, p.top, p.left, p.height, p.width, p.target_size,
                                   p.target_size);
  if (p.hflip || p.vflip) {
    Image flipped(out.height, out.width);
    for (int y = 0; y < out.height; ++y) {
      const int sy = p.vflip ? out.height - 1 - y : y;
      for (int x = 0; x < out.width; ++x) {
        const int sx = p.hflip ? out.width - 1 - x : x;
        for (int c = 0; c < 3; ++c) flipped.at(y, x, c) = out.at(sy, sx, c);
      }
    }
    out = std::move(flipped);
  }
  return out;
}

namespace {

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
  } else if (mx == r) {
    h = std::fmod((g - b) / d + 6.0f, 6.0f) / 6.0f;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0f) / 6.0f;
  } else {
    h = ((r - g) / d + 4.0f) / 6.0f;
  }
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = h * 6.0f;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s);
  const float q = v * (1 - s * f);
  const float t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

void apply_op(Image& img, ColorOp op, const ColorParams& p) {
  const std::size_t n = img.pixels.size() / 3;
  float* px = img.pixels.data();
  switch (op) {
    case ColorOp::kBrightness:
      for (std::size_t i = 0; i < 3 * n; ++i) px[i] = clamp01(px[i] * static_cast<float>(p.brightness));
      break;
    case ColorOp::kContrast: {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
      mean /= static_cast<double>(n);
      const auto c = static_cast<float>(p.contrast);
      const auto m = static_cast<float>(mean);
      for (std::size_t i = 0; i < 3 * n; ++i) px[i] = clamp01((px[i] - m) * c + m);
      break;
    }
    case ColorOp::kSaturation: {
      const auto s = static_cast<float>(p.saturation);
      for (std::size_t i = 0; i < n; ++i) {
        const float g = luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
        for (int c = 0; c < 3; ++c) px[3 * i + c] = clamp01(g + (px[3 * i + c] - g) * s);
      }
      break;
    }
    case ColorOp::kHue: {
      if (p.hue == 0.0) break;
      const auto shift = static_cast<float>(p.hue);
      for (std::size_t i = 0; i < n; ++i) {
        float h, s, v;
        rgb_to_hsv(px[3 * i], px[3 * i + 1], px[3 * i + 2], h, s, v);
        h = h + shift;
        h -= std::floor(h);
        hsv_to_rgb(h, s, v, px[3 * i], px[3 * i + 1], px[3 * i + 2]);
      }
      break;
    }
  }
}

}  // namespace

Image apply_color(const Image& image, const ColorParams& p) {
  Image out = image;
  if (p.jitter) {
    for (ColorOp op : p.order) apply_op(out, op, p);
  }
  if (p.grayscale) {
    const std::size_t n = out.pixels.size() / 3;
    for (std::size_t i = 0; i < n; ++i) {
      float* px = &out.pixels[3 * i];
      const float g = luma(px[0], px[1], px[2]);
      px[0] = px[1] = px[2] = g;
    }
  }
  return out;
}

ViewPair make_view_pair(const Image& image, Rng& rng, const AugmentConfig& cfg,
                        bool spatial_alignment, int target_size) {
  require(!image.empty(), ErrorKind::kAugmentation, "make_view_pair: empty image");
  ViewPair pair;
  auto student_spatial = std::make_shared<const SpatialParams>(
      sample_spatial(image.height, image.width, target_size, cfg, rng));
  pair.student_spatial = student_spatial;
  pair.teacher_spatial =
      spatial_alignment ? student_spatial
                        : std::make_shared<const SpatialParams>(
                              sample_spatial(image.height, image.width, target_size, cfg, rng));
  pair.student_color = sample_color(cfg, rng);
  pair.teacher_color = sample_color(cfg, rng);

  pair.student_target = apply_spatial(image, *pair.student_spatial);
  Image teacher_base =
      spatial_alignment ? pair.student_target : apply_spatial(image, *pair.teacher_spatial);
  pair.student_view = apply_color(pair.student_target, pair.student_color);
  pair.teacher_view = apply_color(teacher_base, pair.teacher_color);
  return pair;
}

// ---------------------------------------------------------------------------
// Disjoint masks

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5 + 1e-9)); }

}  // namespace

PartSizes part_sizes(int num_patches, const MaskRatios& r) {
  require(num_patches >= 3, ErrorKind::kConfig, "trimask: need at least 3 patches");
  for (double v : {r.s, r.l, r.t}) {
    require(v >= 0.0 && v <= 1.0, ErrorKind::kConfig, "trimask: ratios must lie in [0,1]");
  }
  require(std::abs(r.s + r.l + r.t - 1.0) <= 1e-9, ErrorKind::kConfig,
          "trimask: ratios must sum to 1");
  PartSizes sizes;
  sizes.t = round_half_up(r.t * num_patches);
  sizes.l = round_half_up(r.l * num_patches);
  sizes.s = num_patches - sizes.t - sizes.l;
  require(sizes.t >= 1, ErrorKind::kConfig, "trimask: teacher part would be empty");
  require(sizes.s >= 1, ErrorKind::kConfig, "trimask: student part would be empty");
  return sizes;
}

TriMask TriMask::dense(int num_patches) {
  TriMask m;
  m.num_patches = num_patches;
  m.s_idx.resize(num_patches);
  std::iota(m.s_idx.begin(), m.s_idx.end(), 0);
  m.t_idx = m.s_idx;
  return m;
}

TriMask sample_trimask(int num_patches, const MaskRatios& ratios, Rng& rng) {
  const PartSizes sizes = part_sizes(num_patches, ratios);
  const auto perm = rng.permutation(num_patches);
  TriMask m;
  m.num_patches = num_patches;
  m.s_idx.assign(perm.begin(), perm.begin() + sizes.s);
  m.l_idx.assign(perm.begin() + sizes.s, perm.begin() + sizes.s + sizes.l);
  m.t_idx.assign(perm.begin() + sizes.s + sizes.l, perm.end());
  std::sort(m.s_idx.begin(), m.s_idx.end());
  std::sort(m.l_idx.begin(), m.l_idx.end());
  std::sort(m.t_idx.begin(), m.t_idx.end());
  return m;
}

bool is_partition(const TriMask& mask) {
  std::vector<int> hits(static_cast<std::size_t>(mask.num_patches), 0);
  for (const auto* part : {&mask.s_idx, &mask.l_idx, &mask.t_idx}) {
    for (int i : *part) {
      if (i < 0 || i >= mask.num_patches) return false;
      ++hits[i];
    }
  }
  return std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; });
}

// ---------------------------------------------------------------------------
// Input assembly

template <class T>
Mat<T> AssembledInputs<T>::student_tokens() const {
  Mat<T> out(student_visible.rows() + student_mask.rows(), student_visible.cols());
  out.topRows(student_visible.rows()) = student_visible;
  out.bottomRows(student_mask.rows()) = student_mask;
  return out;
}

template <class T>
AssembledInputs<T> assemble_inputs(const Mat<T>& student_patches, const Mat<T>& teacher_patches,
                                   const TriMask& mask, const Mat<T>& cls_token,
                                   const Mat<T>& mask_token, const Mat<T>& pos_embed,
                                   const Mat<T>& target_pixels) {
  const int n = mask.num_patches;
  const auto d = student_patches.cols();
  if (student_patches.rows() != n || teacher_patches.rows() != n || teacher_patches.cols() != d ||
      pos_embed.rows() != n + 1 || pos_embed.cols() != d || cls_token.cols() != d ||
      mask_token.cols() != d || target_pixels.rows() != n) {
    fail(ErrorKind::kInternal, "assemble_inputs: shape mismatch between patches and mask");
  }
  AssembledInputs<T> out;
  out.student_visible.resize(1 + static_cast<Eigen::Index>(mask.s_idx.size()), d);
  out.student_visible.row(0) = cls_token + pos_embed.row(0);
  for (std::size_t k = 0; k < mask.s_idx.size(); ++k) {
    const int i = mask.s_idx[k];
    out.student_visible.row(1 + k) = student_patches.row(i) + pos_embed.row(1 + i);
  }
  out.student_mask.resize(static_cast<Eigen::Index>(mask.l_idx.size()), d);
  out.targets.resize(static_cast<Eigen::Index>(mask.l_idx.size()), target_pixels.cols());
  for (std::size_t k = 0; k < mask.l_idx.size(); ++k) {
    const int i = mask.l_idx[k];
    out.student_mask.row(k) = mask_token + pos_embed.row(1 + i);
    out.targets.row(k) = target_pixels.row(i);
  }
  out.teacher.resize(1 + static_cast<Eigen::Index>(mask.t_idx.size()), d);
  out.teacher.row(0) = cls_token + pos_embed.row(0);
  for (std::size_t k = 0; k < mask.t_idx.size(); ++k) {
    const int i = mask.t_idx[k];
    out.teacher.row(1 + k) = teacher_patches.row(i) + pos_embed.row(1 + i);
  }
  return out;
}

template <class T>
Mat<T> patchify(const Image& image, int patch_size) {
  require(patch_size >= 1 && image.height % patch_size == 0 && image.width % patch_size == 0,
          ErrorKind::kConfig, "patchify: image size not divisible by patch size");
  const int gh = image.height / patch_size;
  const int gw = image.width / patch_size;
  Mat<T> out(gh * gw, patch_size * patch_size * 3);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int row = gy * gw + gx;
      int col = 0;
      for (int py = 0; py < patch_size; ++py) {
        for (int px = 0; px < patch_size; ++px) {
          for (int c = 0; c < 3; ++c) {
            out(row, col++) = static_cast<T>(image.at(gy * patch_size + py, gx * patch_size + px, c));
          }
        }
      }
    }
  }
  return out;
}

template <class T>
Image unpatchify(const Mat<T>& patches, int grid, int patch_size) {
  require(patches.rows() == grid * grid && patches.cols() == patch_size * patch_size * 3,
          ErrorKind::kContract, "unpatchify: shape mismatch");
  Image img(grid * patch_size, grid * patch_size);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int row = gy * grid + gx;
      int col = 0;
      for (int py = 0; py < patch_size; ++py) {
        for (int px = 0; px < patch_size; ++px) {
          for (int c = 0; c < 3; ++c) {
            img.at(gy * patch_size + py, gx * patch_size + px, c) = static_cast<float>(patches(row, col++));
          }
        }
      }
    }
  }
  return img;
}

#define PERA_INSTANTIATE_VIEWS(T)                                                              \
  template struct AssembledInputs<T>;                                                          \
  template AssembledInputs<T> assemble_inputs<T>(const Mat<T>&, const Mat<T>&, const TriMask&, \
                                                 const Mat<T>&, const Mat<T>&, const Mat<T>&,  \
                                                 const Mat<T>&);                               \
  template Mat<T> patchify<T>(const Image&, int);                                              \
  template Image unpatchify<T>(const Mat<T>&, int, int);

PERA_INSTANTIATE_VIEWS(float)
PERA_INSTANTIATE_VIEWS(double)

}  // namespace pera
