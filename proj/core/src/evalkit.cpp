#include "pera/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "pera/error.hpp"
#include "pera/optim.hpp"
#include "pera/rng.hpp"
#include "pera/trainer.hpp"
#include "pera/views.hpp"

namespace pera {

namespace {

constexpr int kFeatureChunk = 32;

MatF encode_dense_batch(const NetworkParams<float>& params, const BackboneConfig& cfg,
                        const std::vector<Image>& images, std::size_t begin, std::size_t end) {
  const int t = cfg.num_patches() + 1;
  MatF tokens(static_cast<Eigen::Index>(end - begin) * t, cfg.embed_dim);
  for (std::size_t i = begin; i < end; ++i) {
    tokens.middleRows(static_cast<Eigen::Index>(i - begin) * t, t) = dense_tokens(params, cfg, images[i]);
  }
  return encode_teacher(params, cfg, tokens, static_cast<int>(end - begin));
}

MatF dense_features(const NetworkParams<float>& params, const BackboneConfig& cfg,
                    const std::vector<Image>& images) {
  MatF out(static_cast<Eigen::Index>(images.size()), cfg.embed_dim);
  for (std::size_t b = 0; b < images.size(); b += kFeatureChunk) {
    const std::size_t e = std::min(images.size(), b + kFeatureChunk);
    out.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) =
        encode_dense_batch(params, cfg, images, b, e);
  }
  return out;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  return out;
}

void check_written(const std::ofstream& out, const std::filesystem::path& path) {
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Features and probing

FeatureMatrix extract_features(const NetworkParams<float>& params, const BackboneConfig& cfg,
                               const Dataset& dataset, const std::string& source) {
  require(dataset.image_size == cfg.image_size, ErrorKind::kContract,
          "extract_features: dataset images are " + std::to_string(dataset.image_size) +
              " px, backbone expects " + std::to_string(cfg.image_size));
  require(params.pos_embed.rows() == cfg.num_patches() + 1 &&
              params.patch_embed.w.rows() == cfg.pixel_dim(),
          ErrorKind::kContract, "extract_features: parameters do not match the backbone");
  FeatureMatrix f;
  f.rows = dense_features(params, cfg, dataset.images);
  f.labels = dataset.labels;
  f.source = source;
  require(f.rows.allFinite(), ErrorKind::kNumerical, "extract_features: non-finite features");
  return f;
}

FeatureMatrix extract_features(const Checkpoint& checkpoint, const Dataset& dataset,
                               bool use_teacher) {
  const auto& params = use_teacher ? checkpoint.state.teacher : checkpoint.state.student;
  return extract_features(params, checkpoint.config.backbone, dataset,
                          std::string(use_teacher ? "teacher" : "student") + "@step" +
                              std::to_string(checkpoint.state.step));
}

ProbeSplit stratified_split(const std::vector<std::optional<int>>& labels, double train_ratio,
                            std::uint64_t seed) {
  require(train_ratio > 0.0 && train_ratio < 1.0, ErrorKind::kConfig,
          "probe train_ratio must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i].has_value() && *labels[i] >= 0, ErrorKind::kContract,
            "linear probe needs a non-negative label for every image");
    const auto c = static_cast<std::size_t>(*labels[i]);
    if (by_class.size() <= c) by_class.resize(c + 1);
    by_class[c].push_back(i);
  }
  ProbeSplit split;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto& members = by_class[c];
    if (members.empty()) continue;
    Rng rng{seed, 0x5b17, c};
    const auto order = rng.permutation(members.size());
    auto k = static_cast<std::size_t>(std::floor(train_ratio * members.size() + 0.5));
    k = std::clamp<std::size_t>(k, 1, std::max<std::size_t>(1, members.size() - 1));
    for (std::size_t j = 0; j < members.size(); ++j) {
      (j < k ? split.train : split.test).push_back(members[order[j]]);
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

ProbeResult linear_probe(const FeatureMatrix& features, const ProbeConfig& cfg) {
  require(static_cast<std::size_t>(features.rows.rows()) == features.labels.size(),
          ErrorKind::kContract, "linear_probe: feature rows and labels differ in count");
  const ProbeSplit split = stratified_split(features.labels, cfg.train_ratio, cfg.seed);
  int num_classes = 0;
  std::vector<bool> present;
  for (const auto& l : features.labels) {
    num_classes = std::max(num_classes, *l + 1);
    if (present.size() <= static_cast<std::size_t>(*l)) present.resize(*l + 1, false);
    present[*l] = true;
  }
  require(std::count(present.begin(), present.end(), true) >= 2, ErrorKind::kContract,
          "linear_probe: need at least two classes");
  require(!split.test.empty(), ErrorKind::kContract, "linear_probe: empty test split");

  const MatD x = features.rows.cast<double>();
  const Eigen::Index d = x.cols();
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d);
  for (auto i : split.train) mean += x.row(static_cast<Eigen::Index>(i));
  mean /= static_cast<double>(split.train.size());
  Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(d);
  for (auto i : split.train) var += (x.row(static_cast<Eigen::Index>(i)) - mean).array().square().matrix();
  var /= static_cast<double>(split.train.size());
  const Eigen::RowVectorXd inv_std =
      var.unaryExpr([](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 1.0; });
  auto standardized = [&](const std::vector<std::size_t>& idx) {
    MatD out(static_cast<Eigen::Index>(idx.size()), d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.row(static_cast<Eigen::Index>(r)) =
          (x.row(static_cast<Eigen::Index>(idx[r])) - mean).cwiseProduct(inv_std);
    }
    return out;
  };
  const MatD xtr = standardized(split.train);
  const MatD xte = standardized(split.test);
  std::vector<int> ytr, yte;
  for (auto i : split.train) ytr.push_back(*features.labels[i]);
  for (auto i : split.test) yte.push_back(*features.labels[i]);

  MatD w = MatD::Zero(d, num_classes), b = MatD::Zero(1, num_classes);
  MatD mw = w, vw = w, mb = b, vb = b;
  const auto ntr = static_cast<std::size_t>(xtr.rows());
  const std::size_t bs = std::min<std::size_t>(ntr, static_cast<std::size_t>(std::max(1, cfg.batch_size)));
  const std::size_t per_epoch = (ntr + bs - 1) / bs;
  const double total = static_cast<double>(per_epoch) * cfg.epochs;
  std::int64_t t = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng{cfg.seed, 0x9b0e, static_cast<std::uint64_t>(epoch)};
    const auto order = rng.permutation(ntr);
    for (std::size_t start = 0; start < ntr; start += bs) {
      const std::size_t stop = std::min(ntr, start + bs);
      const auto rows = static_cast<Eigen::Index>(stop - start);
      MatD xb(rows, d);
      for (std::size_t r = start; r < stop; ++r) xb.row(static_cast<Eigen::Index>(r - start)) = xtr.row(static_cast<Eigen::Index>(order[r]));
      MatD logits = (xb * w).rowwise() + b.row(0);
      logits = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
      logits = logits.array().colwise() / logits.rowwise().sum().array();
      for (std::size_t r = start; r < stop; ++r) logits(static_cast<Eigen::Index>(r - start), ytr[order[r]]) -= 1.0;
      logits /= static_cast<double>(rows);
      const MatD gw = xb.transpose() * logits;
      const MatD gb = logits.colwise().sum();
      const double lr = 0.5 * cfg.lr * (1.0 + std::cos(M_PI * static_cast<double>(t) / total));
      ++t;
      adamw_update(w, gw, mw, vw, t, lr, cfg.weight_decay, AdamWConfig{});
      adamw_update(b, gb, mb, vb, t, lr, 0.0, AdamWConfig{});
    }
  }
  auto accuracy = [&](const MatD& xs, const std::vector<int>& ys) {
    const MatD logits = (xs * w).rowwise() + b.row(0);
    std::size_t correct = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index arg;
      logits.row(r).maxCoeff(&arg);
      if (arg == ys[static_cast<std::size_t>(r)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ys.size());
  };
  ProbeResult result;
  result.overall_accuracy = accuracy(xte, yte);
  result.train_accuracy = accuracy(xtr, ytr);
  result.train_size = split.train.size();
  result.test_size = split.test.size();
  result.num_classes = num_classes;
  return result;
}

Dataset probe_dataset(const RunConfig& config) {
  Dataset ds;
  if (config.data.source == "synthetic") {
    ds = generate_synthetic_dataset(config.probe.num_images, config.backbone.image_size,
                                    config.data.num_classes, config.probe.data_seed);
  } else {
    ds = dataset_from_config(config);
  }
  require(ds.has_labels(), ErrorKind::kContract, "probe dataset has unlabelled images");
  return ds;
}

// ---------------------------------------------------------------------------
// Reconstruction

Image make_triptych(const Image& a, const Image& b, const Image& c, int gap) {
  require(a.height == b.height && b.height == c.height, ErrorKind::kContract,
          "make_triptych: panel heights differ");
  Image out(a.height, a.width + b.width + c.width + 2 * gap, 1.0f);
  int x0 = 0;
  for (const Image* panel : {&a, &b, &c}) {
    for (int y = 0; y < panel->height; ++y) {
      for (int x = 0; x < panel->width; ++x) {
        for (int ch = 0; ch < 3; ++ch) out.at(y, x0 + x, ch) = panel->at(y, x, ch);
      }
    }
    x0 += panel->width + gap;
  }
  return out;
}

namespace {

Reconstruction reconstruct_with(const NetworkParams<float>& student, const BackboneConfig& cfg,
                                const Image& image, double mask_fraction, Rng& rng) {
  require(mask_fraction >= 0.0 && mask_fraction <= 1.0, ErrorKind::kContract,
          "reconstruct: mask fraction must lie in [0, 1]");
  require(image.height == cfg.image_size && image.width == cfg.image_size, ErrorKind::kContract,
          "reconstruct: image size does not match the backbone");
  const int n = cfg.num_patches();
  const int l = static_cast<int>(std::floor(mask_fraction * n + 0.5 + 1e-9));
  const auto order = rng.permutation(static_cast<std::size_t>(n));
  std::vector<int> l_idx(order.begin(), order.begin() + l);
  std::vector<int> s_idx(order.begin() + l, order.end());
  std::sort(l_idx.begin(), l_idx.end());
  std::sort(s_idx.begin(), s_idx.end());

  const MatF pixels = patchify<float>(image, cfg.patch_size);
  Reconstruction r;
  r.ground_truth = image;
  r.masked_patches = l;
  if (l == 0) {
    r.masked = image;
    r.reconstruction = image;
    r.composite = make_triptych(r.masked, r.reconstruction, r.ground_truth);
    return r;
  }
  const MatF emb = patch_embed(student, pixels);
  MatF visible(1 + static_cast<Eigen::Index>(s_idx.size()), cfg.embed_dim);
  visible.row(0) = student.cls_token + student.pos_embed.row(0);
  for (std::size_t k = 0; k < s_idx.size(); ++k) {
    visible.row(1 + static_cast<Eigen::Index>(k)) = emb.row(s_idx[k]) + student.pos_embed.row(1 + s_idx[k]);
  }
  MatF mask(l, cfg.embed_dim);
  for (int k = 0; k < l; ++k) mask.row(k) = student.mask_token + student.pos_embed.row(1 + l_idx[k]);
  const auto out = encode_student<float>(student, cfg, visible, mask, 1, nullptr, nullptr);
  const MatF pred = predict_pixels(student, out.mask_out);

  MatF masked_px = pixels, recon_px = pixels;
  double sq = 0.0;
  for (int k = 0; k < l; ++k) {
    const int p = l_idx[k];
    sq += (pred.row(k) - pixels.row(p)).squaredNorm();
    masked_px.row(p).setConstant(0.5f);
    recon_px.row(p) = pred.row(k).cwiseMax(0.0f).cwiseMin(1.0f);
  }
  r.masked_mse = sq / (static_cast<double>(l) * cfg.pixel_dim());
  r.masked = unpatchify(masked_px, cfg.grid(), cfg.patch_size);
  r.reconstruction = unpatchify(recon_px, cfg.grid(), cfg.patch_size);
  r.composite = make_triptych(r.masked, r.reconstruction, r.ground_truth);
  return r;
}

}  // namespace

Reconstruction reconstruct(const NetworkParams<float>& student, const BackboneConfig& cfg,
                           const Image& image, double mask_fraction, std::uint64_t seed) {
  Rng rng{seed, 0x7ec0};
  return reconstruct_with(student, cfg, image, mask_fraction, rng);
}

Reconstruction reconstruct(const Checkpoint& checkpoint, const Image& image, double mask_fraction,
                           std::uint64_t seed) {
  require(checkpoint.config.trainer.toggles.pixel_prediction, ErrorKind::kCapability,
          "reconstruct: checkpoint was trained without pixel prediction");
  return reconstruct(checkpoint.state.student, checkpoint.config.backbone, image, mask_fraction, seed);
}

double masked_reconstruction_mse(const NetworkParams<float>& student, const BackboneConfig& cfg,
                                 const Dataset& dataset, double mask_fraction, std::uint64_t seed) {
  require(dataset.size() > 0, ErrorKind::kContract, "masked_reconstruction_mse: empty dataset");
  double total = 0.0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    Rng rng{seed, i, 0x7ec0};
    total += reconstruct_with(student, cfg, dataset.images[i], mask_fraction, rng).masked_mse;
  }
  return total / static_cast<double>(dataset.size());
}

// ---------------------------------------------------------------------------
// Feature statistics

Histogram::Histogram(double lo_, double hi_, int bins) : lo(lo_), hi(hi_), counts(bins, 0) {}

void Histogram::add(double value) {
  const int bins = static_cast<int>(counts.size());
  int k = static_cast<int>(std::floor((value - lo) / (hi - lo) * bins));
  counts[static_cast<std::size_t>(std::clamp(k, 0, bins - 1))] += 1;
}

std::size_t Histogram::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

double Histogram::bin_center(int bin) const {
  return lo + (bin + 0.5) * (hi - lo) / static_cast<double>(counts.size());
}

double Histogram::max_bin_fraction() const {
  const std::size_t n = total();
  if (n == 0) return 0.0;
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(n);
}

FeatureStats feature_stats(const NetworkParams<float>& student,
                           const NetworkParams<float>& teacher, const BackboneConfig& cfg,
                           const Dataset& dataset) {
  const MatD s = dense_features(student, cfg, dataset.images).cast<double>();
  const MatD t = dense_features(teacher, cfg, dataset.images).cast<double>();
  FeatureStats stats;
  const MatD diff = s - t;
  const double n = static_cast<double>(diff.size());
  for (Eigen::Index i = 0; i < diff.size(); ++i) {
    stats.diff.add(diff.data()[i]);
    stats.values.add(t.data()[i]);
  }
  if (n > 0) {
    stats.mean_abs_diff = diff.cwiseAbs().sum() / n;
    const double dm = diff.sum() / n;
    stats.diff_std = std::sqrt((diff.array() - dm).square().sum() / n);
    const double tm = t.sum() / n;
    stats.value_std = std::sqrt((t.array() - tm).square().sum() / n);
  }
  return stats;
}

void write_feature_stats_csv(const FeatureStats& stats, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "kind,bin,center,count,fraction\n";
  for (const auto& [kind, h] : {std::pair<const char*, const Histogram*>{"diff", &stats.diff},
                                {"value", &stats.values}}) {
    const double total = static_cast<double>(std::max<std::size_t>(1, h->total()));
    for (std::size_t k = 0; k < h->counts.size(); ++k) {
      out << kind << ',' << k << ',' << h->bin_center(static_cast<int>(k)) << ',' << h->counts[k]
          << ',' << h->counts[k] / total << '\n';
    }
  }
  check_written(out, path);

  auto summary_path = path;
  summary_path.replace_filename(path.stem().string() + "_summary.csv");
  auto summary = open_csv(summary_path);
  summary << "statistic,value\n"
          << "mean_abs_diff," << stats.mean_abs_diff << '\n'
          << "diff_std," << stats.diff_std << '\n'
          << "diff_max_bin_fraction," << stats.diff.max_bin_fraction() << '\n'
          << "value_std," << stats.value_std << '\n'
          << "value_max_bin_fraction," << stats.values.max_bin_fraction() << '\n';
  check_written(summary, summary_path);
}

// ---------------------------------------------------------------------------
// 2-D embedding

Embedding2d embed_2d(const MatF& features) {
  require(features.rows() >= 2, ErrorKind::kContract, "embed_2d: need at least two rows");
  const MatD x = features.cast<double>();
  const MatD centered = x.rowwise() - x.colwise().mean();
  Embedding2d e;
  e.coords = MatD::Zero(x.rows(), 2);
  e.explained_variance = {0.0, 0.0};
  if (centered.cwiseAbs().maxCoeff() < 1e-12) {
    e.degenerate = true;
    return e;
  }
  const MatD cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<MatD> solver(cov);
  const Eigen::Index d = cov.rows();
  for (int k = 0; k < 2 && k < d; ++k) {
    Eigen::VectorXd axis = solver.eigenvectors().col(d - 1 - k);
    Eigen::Index arg;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    e.coords.col(k) = centered * axis;
    e.explained_variance[static_cast<std::size_t>(k)] = std::max(0.0, solver.eigenvalues()(d - 1 - k));
  }
  return e;
}

double silhouette_score(const MatD& points, const std::vector<int>& labels) {
  const auto n = static_cast<std::size_t>(points.rows());
  require(labels.size() == n, ErrorKind::kContract, "silhouette_score: label count mismatch");
  if (n < 2) return 0.0;
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> sizes(static_cast<std::size_t>(classes), 0);
  for (int l : labels) sizes[static_cast<std::size_t>(l)]++;
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      sums[static_cast<std::size_t>(labels[j])] +=
          (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
    }
    const int own = labels[i];
    if (sizes[static_cast<std::size_t>(own)] <= 1) continue;
    const double a = sums[static_cast<std::size_t>(own)] / (sizes[static_cast<std::size_t>(own)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) {
      if (c != own && sizes[static_cast<std::size_t>(c)] > 0) {
        b = std::min(b, sums[static_cast<std::size_t>(c)] / sizes[static_cast<std::size_t>(c)]);
      }
    }
    if (!std::isfinite(b)) continue;
    const double m = std::max(a, b);
    if (m > 0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

void write_embedding_csv(const Embedding2d& embedding, const FeatureMatrix& features,
                         const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "index,label,x,y\n";
  for (Eigen::Index i = 0; i < embedding.coords.rows(); ++i) {
    const auto& l = features.labels[static_cast<std::size_t>(i)];
    out << i << ',' << (l ? std::to_string(*l) : std::string()) << ',' << embedding.coords(i, 0)
        << ',' << embedding.coords(i, 1) << '\n';
  }
  check_written(out, path);
}

void write_features_csv(const FeatureMatrix& features, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "index,label";
  for (Eigen::Index k = 0; k < features.rows.cols(); ++k) out << ",f" << k;
  out << '\n';
  out.precision(9);
  for (Eigen::Index i = 0; i < features.rows.rows(); ++i) {
    const auto& l = features.labels[static_cast<std::size_t>(i)];
    out << i << ',' << (l ? std::to_string(*l) : std::string());
    for (Eigen::Index k = 0; k < features.rows.cols(); ++k) out << ',' << features.rows(i, k);
    out << '\n';
  }
  check_written(out, path);
}

// ---------------------------------------------------------------------------
// Attention maps

Image render_attention(const NetworkParams<float>& params, const BackboneConfig& cfg,
                       const Image& image) {
  const MatF maps = attention_maps(params, cfg, image);
  const int size = cfg.image_size, grid = cfg.grid(), gap = 2;
  Image out(size, (size + gap) * (cfg.heads + 1) - gap, 1.0f);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, x, c);
  for (int h = 0; h < cfg.heads; ++h) {
    const float peak = std::max(maps.row(h).maxCoeff(), 1e-12f);
    const int x0 = (h + 1) * (size + gap);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const int p = (y * grid / size) * grid + x * grid / size;
        const float a = maps(h, p) / peak;
        out.at(y, x0 + x, 0) = a;
        out.at(y, x0 + x, 1) = a * a;
        out.at(y, x0 + x, 2) = 0.25f * (1.0f - a);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cost accounting

namespace {

RoleCost role_cost(const std::string& role, const BackboneConfig& bb, std::int64_t early_tokens,
                   std::int64_t late_tokens, int inject) {
  RoleCost r;
  r.role = role;
  r.tokens = std::max(early_tokens, late_tokens);
  const double d = bb.embed_dim, mlp = bb.mlp_dim();
  for (int layer = 0; layer < bb.depth; ++layer) {
    const double t = static_cast<double>(layer < inject ? early_tokens : late_tokens);
    r.linear_flops += 2.0 * t * (4.0 * d * d + 2.0 * d * mlp);
    r.attention_flops += 2.0 * 2.0 * t * t * d;
    r.peak_activations += t * (8.0 * d + 2.0 * mlp) + bb.heads * t * t;
  }
  return r;
}

double ratio(const RoleCost& a, const RoleCost& b, const RoleCost& c, const RoleCost& d,
             double RoleCost::*field) {
  return (a.*field + b.*field) / (c.*field + d.*field);
}

}  // namespace

std::optional<double> CostReport::step_time_ratio() const {
  if (!dense_step_seconds || !sparse_step_seconds || *sparse_step_seconds <= 0.0) return std::nullopt;
  return *dense_step_seconds / *sparse_step_seconds;
}

CostReport cost_account(const BackboneConfig& backbone, const HeadConfig& head,
                        const MaskRatios& ratios) {
  backbone.validate();
  const int n = backbone.num_patches();
  const PartSizes sizes = part_sizes(n, ratios);
  CostReport r;
  r.num_patches = n;
  r.ratios = ratios;
  const std::int64_t student_tokens = 1 + sizes.s + sizes.l;
  const std::int64_t teacher_tokens = 1 + sizes.t;
  r.student = role_cost("student", backbone, student_tokens, student_tokens, 0);
  r.teacher = role_cost("teacher", backbone, teacher_tokens, teacher_tokens, 0);
  r.dense_student = role_cost("dense_student", backbone, n + 1, n + 1, 0);
  r.dense_teacher = role_cost("dense_teacher", backbone, n + 1, n + 1, 0);
  r.linear_ratio = ratio(r.dense_student, r.dense_teacher, r.student, r.teacher, &RoleCost::linear_flops);
  r.attention_ratio =
      ratio(r.dense_student, r.dense_teacher, r.student, r.teacher, &RoleCost::attention_flops);
  const RoleCost injected =
      role_cost("student_injected", backbone, 1 + sizes.s, student_tokens, backbone.injection());
  r.injected_linear_ratio =
      ratio(r.dense_student, r.dense_teacher, injected, r.teacher, &RoleCost::linear_flops);
  r.injected_attention_ratio =
      ratio(r.dense_student, r.dense_teacher, injected, r.teacher, &RoleCost::attention_flops);
  const double d = backbone.embed_dim;
  r.head_flops = 2.0 * (d * head.hidden_dim + static_cast<double>(head.hidden_dim) * head.hidden_dim +
                        static_cast<double>(head.hidden_dim) * head.bottleneck_dim +
                        static_cast<double>(head.bottleneck_dim) * head.prototypes) +
                 2.0 * sizes.l * d * backbone.pixel_dim();
  return r;
}

void measure_step_time(CostReport& report, const RunConfig& config, int steps, int warmup) {
  require(steps >= 1 && warmup >= 0, ErrorKind::kContract, "measure_step_time: steps must be >= 1");
  const Dataset data = generate_synthetic_dataset(config.trainer.batch_size, config.backbone.image_size,
                                                  std::max(2, config.data.num_classes), config.data.seed);
  ImageBatch batch;
  batch.images = data.images;
  batch.labels = data.labels;
  batch.indices.resize(data.size());
  std::iota(batch.indices.begin(), batch.indices.end(), std::size_t{0});

  auto time_config = [&](bool sparse) {
    RunConfig c = config;
    c.trainer.toggles.disjoint_mask = sparse;
    c.trainer.toggles.pixel_prediction = sparse;
    c.trainer.epochs = std::max(c.trainer.epochs, steps + warmup + 2);
    c.trainer.warmup_epochs = std::min(c.trainer.warmup_epochs, 1.0);
    const ScheduleShape shape = schedule_shape(c.trainer, data.size());
    ModelState state = init_state(c);
    for (int i = 0; i < warmup; ++i) train_step(state, batch, c, shape);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < steps; ++i) train_step(state, batch, c, shape);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / steps;
  };
  report.dense_step_seconds = time_config(false);
  report.sparse_step_seconds = time_config(true);
}

void write_cost_csv(const CostReport& report, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "metric,value\n";
  out << "num_patches," << report.num_patches << '\n'
      << "ratio_s," << report.ratios.s << '\n'
      << "ratio_l," << report.ratios.l << '\n'
      << "ratio_t," << report.ratios.t << '\n';
  for (const RoleCost* r : {&report.student, &report.teacher, &report.dense_student, &report.dense_teacher}) {
    out << r->role << ".tokens," << r->tokens << '\n'
        << r->role << ".linear_flops," << r->linear_flops << '\n'
        << r->role << ".attention_flops," << r->attention_flops << '\n'
        << r->role << ".peak_activations," << r->peak_activations << '\n';
  }
  out << "linear_ratio," << report.linear_ratio << '\n'
      << "attention_ratio," << report.attention_ratio << '\n'
      << "injected_linear_ratio," << report.injected_linear_ratio << '\n'
      << "injected_attention_ratio," << report.injected_attention_ratio << '\n'
      << "head_flops," << report.head_flops << '\n';
  if (report.dense_step_seconds) out << "dense_step_seconds," << *report.dense_step_seconds << '\n';
  if (report.sparse_step_seconds) out << "sparse_step_seconds," << *report.sparse_step_seconds << '\n';
  if (auto r = report.step_time_ratio()) out << "step_time_ratio," << *r << '\n';
  check_written(out, path);
}

}  // namespace pera
