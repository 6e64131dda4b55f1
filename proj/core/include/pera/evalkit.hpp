#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pera/checkpoint.hpp"
#include "pera/config.hpp"
#include "pera/data.hpp"
#include "pera/model.hpp"

namespace pera {

// ---------------------------------------------------------------------------
// Frozen features and linear probing

struct FeatureMatrix {
  MatF rows;  // one cls feature per image
  std::vector<std::optional<int>> labels;
  std::string source;
};

/// Dense (unmasked) forward per image; rows are the normalised cls outputs.
FeatureMatrix extract_features(const NetworkParams<float>& params, const BackboneConfig& cfg,
                               const Dataset& dataset, const std::string& source = {});
FeatureMatrix extract_features(const Checkpoint& checkpoint, const Dataset& dataset,
                               bool use_teacher);

struct ProbeSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Per class, round(ratio * count) images (at least one, at most count - 1)
/// go to the training side. Order within each side is ascending.
ProbeSplit stratified_split(const std::vector<std::optional<int>>& labels, double train_ratio,
                            std::uint64_t seed);

struct ProbeResult {
  double overall_accuracy = 0.0;  // test OA in [0, 1]
  double train_accuracy = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  int num_classes = 0;
};

/// Softmax regression on standardised frozen features, trained with AdamW and
/// a cosine learning rate for cfg.epochs epochs. Uses cfg.train_ratio and
/// cfg.seed; deterministic given (features, cfg).
ProbeResult linear_probe(const FeatureMatrix& features, const ProbeConfig& cfg);

/// Labelled evaluation set for a run: the folder dataset itself, or a fresh
/// synthetic set drawn from probe.data_seed.
Dataset probe_dataset(const RunConfig& config);

// ---------------------------------------------------------------------------
// Reconstruction

struct Reconstruction {
  Image masked;          // input with the masked patches greyed out
  Image reconstruction;  // input with predictions pasted into the masked slots
  Image ground_truth;
  Image composite;       // masked | reconstruction | ground truth
  double masked_mse = 0.0;
  int masked_patches = 0;
};

/// Masks round(fraction * N) patches as mask slots, encodes the rest with the
/// student, and renders the predictor output into the masked slots.
Reconstruction reconstruct(const NetworkParams<float>& student, const BackboneConfig& cfg,
                           const Image& image, double mask_fraction, std::uint64_t seed);
/// Capability error when the checkpoint was trained without pixel prediction.
Reconstruction reconstruct(const Checkpoint& checkpoint, const Image& image, double mask_fraction,
                           std::uint64_t seed);

/// Mean masked-region MSE over a dataset; image i uses mask seed (seed, i).
double masked_reconstruction_mse(const NetworkParams<float>& student, const BackboneConfig& cfg,
                                 const Dataset& dataset, double mask_fraction, std::uint64_t seed);

Image make_triptych(const Image& a, const Image& b, const Image& c, int gap = 2);

// ---------------------------------------------------------------------------
// Feature statistics

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;  // values outside [lo, hi] land in the edge bins

  Histogram(double lo, double hi, int bins);
  void add(double value);
  std::size_t total() const;
  double bin_center(int bin) const;
  double max_bin_fraction() const;
};

struct FeatureStats {
  Histogram diff{-2.0, 2.0, 51};    // student - teacher cls, per image and channel
  Histogram values{-5.0, 5.0, 51};  // pooled teacher cls values
  double mean_abs_diff = 0.0;
  double diff_std = 0.0;
  double value_std = 0.0;
};

FeatureStats feature_stats(const NetworkParams<float>& student,
                           const NetworkParams<float>& teacher, const BackboneConfig& cfg,
                           const Dataset& dataset);
/// Histogram rows (kind, bin, center, count, fraction) to `path`; summary
/// statistics to `<stem>_summary.csv` next to it.
void write_feature_stats_csv(const FeatureStats& stats, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// 2-D embedding

struct Embedding2d {
  MatD coords;  // rows x 2
  std::vector<double> explained_variance;
  bool degenerate = false;  // constant features: coordinates are all zero
};

/// PCA to two dimensions. Component signs are fixed so that the largest
/// loading of each component is positive.
Embedding2d embed_2d(const MatF& features);

/// Mean silhouette over rows with Euclidean distance; rows with a singleton
/// label count as 0.
double silhouette_score(const MatD& points, const std::vector<int>& labels);

void write_embedding_csv(const Embedding2d& embedding, const FeatureMatrix& features,
                         const std::filesystem::path& path);
void write_features_csv(const FeatureMatrix& features, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Attention maps

/// Last-layer cls attention per head, upsampled to the image and laid out
/// next to it as one strip.
Image render_attention(const NetworkParams<float>& params, const BackboneConfig& cfg,
                       const Image& image);

// ---------------------------------------------------------------------------
// Cost accounting

struct RoleCost {
  std::string role;
  std::int64_t tokens = 0;     // per sample, largest sequence length
  double linear_flops = 0.0;   // qkv, output projection and MLP
  double attention_flops = 0.0;
  double peak_activations = 0.0;  // elements held for backward, one sample
};

struct CostReport {
  int num_patches = 0;
  MaskRatios ratios;
  RoleCost student;        // |s| + |l| + 1 tokens in every layer
  RoleCost teacher;        // |t| + 1 tokens
  RoleCost dense_student;  // N + 1 tokens
  RoleCost dense_teacher;
  double linear_ratio = 0.0;     // dense / sparse
  double attention_ratio = 0.0;
  /// Same ratios with the student running |s| + 1 tokens before injection.
  double injected_linear_ratio = 0.0;
  double injected_attention_ratio = 0.0;
  double head_flops = 0.0;  // projector and predictor per sample, reported apart
  std::optional<double> dense_step_seconds;
  std::optional<double> sparse_step_seconds;

  std::optional<double> step_time_ratio() const;
};

CostReport cost_account(const BackboneConfig& backbone, const HeadConfig& head,
                        const MaskRatios& ratios);

/// Times `steps` training steps of the dense baseline (DM and PP off) and of
/// the sparse configuration after `warmup` untimed steps each; fills the
/// empirical fields.
void measure_step_time(CostReport& report, const RunConfig& config, int steps, int warmup = 1);

void write_cost_csv(const CostReport& report, const std::filesystem::path& path);

}  // namespace pera
