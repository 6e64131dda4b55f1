#include "pera/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pera/error.hpp"

namespace pera {

void RunConfig::validate() const {
  backbone.validate();
  head.validate();
  require(data.source == "synthetic" || data.source == "folder", ErrorKind::kConfig,
          "data.source must be 'synthetic' or 'folder'");
  require(data.num_images >= 1, ErrorKind::kConfig, "data.num_images must be >= 1");
  require(data.num_classes >= 2 && data.num_classes <= 16, ErrorKind::kConfig,
          "data.num_classes must lie in [2, 16]");
  const TrainConfig& t = trainer;
  require(t.epochs >= 1, ErrorKind::kConfig, "trainer.epochs must be >= 1");
  require(t.batch_size >= 1, ErrorKind::kConfig, "trainer.batch_size must be >= 1");
  require(t.warmup_epochs >= 0.0 && t.warmup_epochs < t.epochs, ErrorKind::kConfig,
          "trainer.warmup_epochs must lie in [0, epochs)");
  require(t.base_lr > 0.0 && t.final_lr >= 0.0, ErrorKind::kConfig,
          "trainer: learning rates must be positive");
  require(t.weight_decay_start >= 0.0 && t.weight_decay_end >= 0.0, ErrorKind::kConfig,
          "trainer: weight decay must be >= 0");
  require(t.ema_momentum_start >= 0.0 && t.ema_momentum_start <= 1.0 &&
              t.ema_momentum_end >= 0.0 && t.ema_momentum_end <= 1.0,
          ErrorKind::kConfig, "trainer: ema momentum must lie in [0,1]");
  require(t.tpt_s > 0.0 && t.tpt_t_start > 0.0 && t.tpt_t_max > 0.0, ErrorKind::kConfig,
          "trainer: temperatures must be > 0");
  require(t.tpt_t_warmup_epochs >= 0.0, ErrorKind::kConfig,
          "trainer.tpt_t_warmup_epochs must be >= 0");
  require(t.center_momentum >= 0.0 && t.center_momentum <= 1.0, ErrorKind::kConfig,
          "trainer.center_momentum must lie in [0,1]");
  require(t.mse_weight >= 0.0, ErrorKind::kConfig, "trainer.mse_weight must be >= 0");
  require(t.clip_grad >= 0.0, ErrorKind::kConfig, "trainer.clip_grad must be >= 0");
  require(t.checkpoint_every >= 0, ErrorKind::kConfig, "trainer.checkpoint_every must be >= 0");
  if (t.toggles.disjoint_mask) part_sizes(backbone.num_patches(), t.mask_ratios);
  require(probe.train_ratio > 0.0 && probe.train_ratio < 1.0, ErrorKind::kConfig,
          "probe.train_ratio must lie in (0,1)");
  require(probe.epochs >= 1 && probe.batch_size >= 1 && probe.lr > 0.0, ErrorKind::kConfig,
          "probe: epochs, batch_size and lr must be positive");
  require(probe.num_images >= 2, ErrorKind::kConfig, "probe.num_images must be >= 2");
}

Json to_json(const RunConfig& c) {
  Json j;
  j["data"] = {{"source", c.data.source},         {"root", c.data.root},
               {"manifest", c.data.manifest},     {"num_images", c.data.num_images},
               {"num_classes", c.data.num_classes}, {"seed", c.data.seed}};
  j["backbone"] = {{"image_size", c.backbone.image_size}, {"patch_size", c.backbone.patch_size},
                   {"depth", c.backbone.depth},           {"embed_dim", c.backbone.embed_dim},
                   {"heads", c.backbone.heads},           {"mlp_ratio", c.backbone.mlp_ratio},
                   {"drop_path_rate", c.backbone.drop_path_rate},
                   {"inject_layer", c.backbone.inject_layer}};
  j["head"] = {{"prototypes", c.head.prototypes},
               {"hidden_dim", c.head.hidden_dim},
               {"bottleneck_dim", c.head.bottleneck_dim}};
  const AugmentConfig& a = c.augment;
  j["augment"] = {{"crop_scale_min", a.crop_scale_min}, {"crop_scale_max", a.crop_scale_max},
                  {"crop_ratio_min", a.crop_ratio_min}, {"crop_ratio_max", a.crop_ratio_max},
                  {"hflip_prob", a.hflip_prob},         {"vflip_prob", a.vflip_prob},
                  {"jitter_prob", a.jitter_prob},       {"brightness", a.brightness},
                  {"contrast", a.contrast},             {"saturation", a.saturation},
                  {"hue", a.hue},                       {"grayscale_prob", a.grayscale_prob}};
  const TrainConfig& t = c.trainer;
  Json tj;
  tj["epochs"] = t.epochs;
  tj["batch_size"] = t.batch_size;
  tj["base_lr"] = t.base_lr;
  tj["warmup_epochs"] = t.warmup_epochs;
  tj["final_lr"] = t.final_lr;
  tj["weight_decay_start"] = t.weight_decay_start;
  tj["weight_decay_end"] = t.weight_decay_end;
  tj["ema_momentum_start"] = t.ema_momentum_start;
  tj["ema_momentum_end"] = t.ema_momentum_end;
  tj["tpt_s"] = t.tpt_s;
  tj["tpt_t_start"] = t.tpt_t_start;
  tj["tpt_t_max"] = t.tpt_t_max;
  tj["tpt_t_warmup_epochs"] = t.tpt_t_warmup_epochs;
  tj["mask_ratios"] = {{"s", t.mask_ratios.s}, {"l", t.mask_ratios.l}, {"t", t.mask_ratios.t}};
  tj["mse_weight"] = t.mse_weight;
  tj["center_momentum"] = t.center_momentum;
  tj["spatial_alignment"] = t.toggles.spatial_alignment;
  tj["disjoint_mask"] = t.toggles.disjoint_mask;
  tj["pixel_prediction"] = t.toggles.pixel_prediction;
  tj["mse_through_encoder"] = t.mse_through_encoder;
  tj["clip_grad"] = t.clip_grad;
  tj["adam_beta1"] = t.adam_beta1;
  tj["adam_beta2"] = t.adam_beta2;
  tj["adam_eps"] = t.adam_eps;
  tj["checkpoint_every"] = t.checkpoint_every;
  tj["seed"] = t.seed;
  j["trainer"] = std::move(tj);
  const ProbeConfig& p = c.probe;
  j["probe"] = {{"train_ratio", p.train_ratio}, {"epochs", p.epochs},
                {"batch_size", p.batch_size},   {"lr", p.lr},
                {"weight_decay", p.weight_decay}, {"use_teacher", p.use_teacher},
                {"num_images", p.num_images},   {"data_seed", p.data_seed},
                {"seed", p.seed}};
  return j;
}

namespace {

bool compatible(const Json& def, const Json& value) {
  if (def.is_boolean()) return value.is_boolean();
  if (def.is_string()) return value.is_string();
  if (def.is_number_integer()) {
    if (value.is_number_integer()) return true;
    return value.is_number_float() && std::floor(value.get<double>()) == value.get<double>();
  }
  if (def.is_number()) return value.is_number();
  if (def.is_object()) return value.is_object();
  return false;
}

void merge_strict(Json& base, const Json& patch, const std::string& prefix) {
  if (!patch.is_object()) fail(ErrorKind::kConfig, "'" + prefix + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) fail(ErrorKind::kConfig, "unknown key '" + key + "'");
    Json& slot = base[it.key()];
    if (!compatible(slot, it.value())) {
      fail(ErrorKind::kConfig, "key '" + key + "' expects " + slot.type_name() + ", got " +
                                   it.value().type_name());
    }
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else if (slot.is_number_unsigned() && it.value().is_number_integer()) {
      if (it.value().get<long long>() < 0) fail(ErrorKind::kConfig, "key '" + key + "' must be >= 0");
      slot = it.value().get<std::uint64_t>();
    } else if (slot.is_number_integer() && !slot.is_number_unsigned()) {
      slot = static_cast<long long>(it.value().get<double>());
    } else {
      slot = it.value();
    }
  }
}

template <class V>
void read(const Json& j, const char* key, V& out) {
  out = j.at(key).get<V>();
}

RunConfig from_merged(const Json& j) {
  RunConfig c;
  const Json& d = j.at("data");
  read(d, "source", c.data.source);
  read(d, "root", c.data.root);
  read(d, "manifest", c.data.manifest);
  read(d, "num_images", c.data.num_images);
  read(d, "num_classes", c.data.num_classes);
  read(d, "seed", c.data.seed);
  const Json& b = j.at("backbone");
  read(b, "image_size", c.backbone.image_size);
  read(b, "patch_size", c.backbone.patch_size);
  read(b, "depth", c.backbone.depth);
  read(b, "embed_dim", c.backbone.embed_dim);
  read(b, "heads", c.backbone.heads);
  read(b, "mlp_ratio", c.backbone.mlp_ratio);
  read(b, "drop_path_rate", c.backbone.drop_path_rate);
  read(b, "inject_layer", c.backbone.inject_layer);
  const Json& h = j.at("head");
  read(h, "prototypes", c.head.prototypes);
  read(h, "hidden_dim", c.head.hidden_dim);
  read(h, "bottleneck_dim", c.head.bottleneck_dim);
  const Json& a = j.at("augment");
  read(a, "crop_scale_min", c.augment.crop_scale_min);
  read(a, "crop_scale_max", c.augment.crop_scale_max);
  read(a, "crop_ratio_min", c.augment.crop_ratio_min);
  read(a, "crop_ratio_max", c.augment.crop_ratio_max);
  read(a, "hflip_prob", c.augment.hflip_prob);
  read(a, "vflip_prob", c.augment.vflip_prob);
  read(a, "jitter_prob", c.augment.jitter_prob);
  read(a, "brightness", c.augment.brightness);
  read(a, "contrast", c.augment.contrast);
  read(a, "saturation", c.augment.saturation);
  read(a, "hue", c.augment.hue);
  read(a, "grayscale_prob", c.augment.grayscale_prob);
  const Json& t = j.at("trainer");
  TrainConfig& tc = c.trainer;
  read(t, "epochs", tc.epochs);
  read(t, "batch_size", tc.batch_size);
  read(t, "base_lr", tc.base_lr);
  read(t, "warmup_epochs", tc.warmup_epochs);
  read(t, "final_lr", tc.final_lr);
  read(t, "weight_decay_start", tc.weight_decay_start);
  read(t, "weight_decay_end", tc.weight_decay_end);
  read(t, "ema_momentum_start", tc.ema_momentum_start);
  read(t, "ema_momentum_end", tc.ema_momentum_end);
  read(t, "tpt_s", tc.tpt_s);
  read(t, "tpt_t_start", tc.tpt_t_start);
  read(t, "tpt_t_max", tc.tpt_t_max);
  read(t, "tpt_t_warmup_epochs", tc.tpt_t_warmup_epochs);
  const Json& m = t.at("mask_ratios");
  read(m, "s", tc.mask_ratios.s);
  read(m, "l", tc.mask_ratios.l);
  read(m, "t", tc.mask_ratios.t);
  read(t, "mse_weight", tc.mse_weight);
  read(t, "center_momentum", tc.center_momentum);
  read(t, "spatial_alignment", tc.toggles.spatial_alignment);
  read(t, "disjoint_mask", tc.toggles.disjoint_mask);
  read(t, "pixel_prediction", tc.toggles.pixel_prediction);
  read(t, "mse_through_encoder", tc.mse_through_encoder);
  read(t, "clip_grad", tc.clip_grad);
  read(t, "adam_beta1", tc.adam_beta1);
  read(t, "adam_beta2", tc.adam_beta2);
  read(t, "adam_eps", tc.adam_eps);
  read(t, "checkpoint_every", tc.checkpoint_every);
  read(t, "seed", tc.seed);
  const Json& p = j.at("probe");
  read(p, "train_ratio", c.probe.train_ratio);
  read(p, "epochs", c.probe.epochs);
  read(p, "batch_size", c.probe.batch_size);
  read(p, "lr", c.probe.lr);
  read(p, "weight_decay", c.probe.weight_decay);
  read(p, "use_teacher", c.probe.use_teacher);
  read(p, "num_images", c.probe.num_images);
  read(p, "data_seed", c.probe.data_seed);
  read(p, "seed", c.probe.seed);
  return c;
}

void flatten(const Json& j, const std::string& prefix,
             std::vector<std::pair<std::string, std::string>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object()) {
      flatten(it.value(), key, out);
    } else {
      out.emplace_back(key, it.value().dump());
    }
  }
}

}  // namespace

RunConfig config_from_json(const Json& json) {
  Json merged = to_json(RunConfig{});
  merge_strict(merged, json, "");
  return from_merged(merged);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read config '" + path.string() + "'");
  Json j;
  try {
    j = Json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const Json::parse_error& e) {
    fail(ErrorKind::kConfig, "config '" + path.string() + "': " + e.what());
  }
  return config_from_json(j);
}

void save_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write config '" + path.string() + "'");
  out << to_json(config).dump(2) << '\n';
  if (!out) fail(ErrorKind::kIo, "failed writing config '" + path.string() + "'");
}

RunConfig apply_overrides(const RunConfig& config, const std::vector<std::string>& assignments) {
  Json merged = to_json(config);
  for (const std::string& assignment : assignments) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
      fail(ErrorKind::kConfig, "override '" + assignment + "' is not of the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    Json value;
    try {
      value = Json::parse(raw);
    } catch (const Json::parse_error&) {
      value = raw;
    }
    // Build the nested patch {"a": {"b": value}} for key "a.b".
    Json patch = value;
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
      Json wrapped;
      wrapped[*it] = std::move(patch);
      patch = std::move(wrapped);
    }
    Json probe = merged;
    merge_strict(probe, patch, "");
    // Reject overrides that replace a section with a scalar.
    const Json* cursor = &probe;
    for (const auto& part : parts) cursor = &cursor->at(part);
    if (cursor->is_object()) fail(ErrorKind::kConfig, "override '" + key + "' names a section, not a key");
    merged = std::move(probe);
  }
  return from_merged(merged);
}

std::vector<std::pair<std::string, std::string>> flattened_keys(const RunConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  flatten(to_json(config), "", out);
  return out;
}

std::string config_hash(const RunConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace pera
