#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pera/model.hpp"
#include "pera/views.hpp"

namespace pera {

using Json = nlohmann::ordered_json;

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "folder"
  std::string root;                  // folder source: image root
  std::string manifest;              // folder source: manifest path
  int num_images = 640;
  int num_classes = 4;
  std::uint64_t seed = 0;
};

/// Component switches for the ablation grid.
struct Toggles {
  bool spatial_alignment = true;  // SA
  bool disjoint_mask = true;      // DM
  bool pixel_prediction = true;   // PP
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double base_lr = 1e-3;
  double warmup_epochs = 1.0;
  double final_lr = 1e-5;
  double weight_decay_start = 0.04;
  double weight_decay_end = 0.4;
  double ema_momentum_start = 0.98;
  double ema_momentum_end = 1.0;
  double tpt_s = 0.1;
  double tpt_t_start = 0.03;
  double tpt_t_max = 0.03;
  double tpt_t_warmup_epochs = 7.5;
  MaskRatios mask_ratios;
  double mse_weight = 1.0;
  double center_momentum = 0.9;
  Toggles toggles;
  bool mse_through_encoder = true;
  double clip_grad = 3.0;  // global L2 norm; 0 disables
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  std::uint64_t seed = 0;
};

struct ProbeConfig {
  double train_ratio = 0.2;
  int epochs = 100;
  int batch_size = 32;
  double lr = 1e-2;
  double weight_decay = 1e-4;
  bool use_teacher = true;
  int num_images = 1000;         // synthetic evaluation set size
  std::uint64_t data_seed = 1000;  // synthetic evaluation set seed
  std::uint64_t seed = 0;
};

struct RunConfig {
  DataConfig data;
  BackboneConfig backbone;
  HeadConfig head;
  AugmentConfig augment;
  TrainConfig trainer;
  ProbeConfig probe;

  void validate() const;
};

Json to_json(const RunConfig& config);

/// Strict conversion: every key must exist in the default layout and carry a
/// value of a compatible type. Missing keys keep their defaults.
RunConfig config_from_json(const Json& json);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& config, const std::filesystem::path& path);

/// Applies `a.b.c=value` overrides. The value is parsed as JSON when possible,
/// otherwise taken as a string. Unknown keys are configuration errors.
RunConfig apply_overrides(const RunConfig& config, const std::vector<std::string>& assignments);

/// Every addressable key with its default value, in declaration order.
std::vector<std::pair<std::string, std::string>> flattened_keys(const RunConfig& config);

/// FNV-1a over the compact JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& config);

}  // namespace pera
