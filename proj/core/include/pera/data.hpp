#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pera/image.hpp"

namespace pera {

struct Dataset {
  std::vector<Image> images;
  std::vector<std::optional<int>> labels;  // parallel to images
  std::vector<std::string> sources;        // file path or "synthetic:<index>"
  int image_size = 0;
  std::optional<int> num_classes;

  std::size_t size() const { return images.size(); }
  bool has_labels() const;
};

struct ManifestEntry {
  std::string path;
  std::optional<int> label;
  std::optional<double> resolution;  // meters per pixel
};

/// Tab-separated `path<TAB>label<TAB>resolution`; trailing fields optional,
/// blank lines and lines starting with '#' ignored.
struct Manifest {
  std::vector<ManifestEntry> entries;

  static Manifest parse(const std::string& text);
  static Manifest read(const std::filesystem::path& path);
  std::string serialize() const;
  void write(const std::filesystem::path& path) const;
};

/// Procedural scenes: a striped foreground object over a value-noise
/// background. The class fixes the shape family and the stripe period;
/// colours, placement, scale, and orientation are drawn independently of the
/// class. Labels are balanced (label = index mod num_classes).
Dataset generate_synthetic_dataset(int num_images, int image_size, int num_classes,
                                   std::uint64_t seed);

/// Decodes every manifest entry under `root` and resizes to image_size.
Dataset load_image_folder(const std::filesystem::path& root, const Manifest& manifest,
                          int image_size);

struct ImageBatch {
  std::vector<Image> images;
  std::vector<std::optional<int>> labels;
  std::vector<std::size_t> indices;

  std::size_t size() const { return images.size(); }
};

/// Epoch-indexed batch stream. The visiting order of epoch e is a permutation
/// derived from (seed, e), so any epoch can be replayed independently.
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, int batch_size, std::uint64_t seed, bool shuffle);

  std::size_t batches_per_epoch() const;
  std::vector<std::size_t> epoch_order(std::int64_t epoch) const;
  ImageBatch batch(std::int64_t epoch, std::size_t index) const;

  /// Sequential access over one epoch; returns nullopt at the epoch end and
  /// advances to the next epoch.
  std::optional<ImageBatch> next();

 private:
  const Dataset* dataset_;
  int batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  std::int64_t epoch_ = 0;
  std::size_t cursor_ = 0;
};

inline BatchStream make_batches(const Dataset& dataset, int batch_size, std::uint64_t seed,
                                bool shuffle) {
  return BatchStream(dataset, batch_size, seed, shuffle);
}

}  // namespace pera
