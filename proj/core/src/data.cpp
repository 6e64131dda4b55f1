#include "pera/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "pera/error.hpp"
#include "pera/rng.hpp"

namespace pera {

bool Dataset::has_labels() const {
  return !labels.empty() && std::all_of(labels.begin(), labels.end(),
                                        [](const auto& l) { return l.has_value(); });
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

Manifest Manifest::parse(const std::string& text) {
  Manifest manifest;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() > 3) {
      fail(ErrorKind::kIngestion, "manifest line " + std::to_string(line_no) + ": too many fields");
    }
    ManifestEntry entry;
    entry.path = trim(fields[0]);
    if (entry.path.empty()) {
      fail(ErrorKind::kIngestion, "manifest line " + std::to_string(line_no) + ": empty path");
    }
    try {
      if (fields.size() > 1 && !trim(fields[1]).empty()) {
        std::size_t used = 0;
        const std::string f = trim(fields[1]);
        entry.label = std::stoi(f, &used);
        if (used != f.size() || *entry.label < 0) throw std::invalid_argument(f);
      }
      if (fields.size() > 2 && !trim(fields[2]).empty()) {
        std::size_t used = 0;
        const std::string f = trim(fields[2]);
        entry.resolution = std::stod(f, &used);
        if (used != f.size() || !(*entry.resolution > 0)) throw std::invalid_argument(f);
      }
    } catch (const std::logic_error&) {
      fail(ErrorKind::kIngestion,
           "manifest line " + std::to_string(line_no) + ": malformed label or resolution");
    }
    if (!seen.insert(entry.path).second) {
      fail(ErrorKind::kIngestion, "manifest: duplicate path '" + entry.path + "'");
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot read manifest '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

std::string Manifest::serialize() const {
  std::ostringstream out;
  for (const auto& e : entries) {
    out << e.path << '\t';
    if (e.label) out << *e.label;
    out << '\t';
    if (e.resolution) out << *e.resolution;
    out << '\n';
  }
  return out.str();
}

void Manifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write manifest '" + path.string() + "'");
  out << "# path\tlabel\tresolution_m_per_px\n" << serialize();
  if (!out) fail(ErrorKind::kIo, "failed writing manifest '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

struct ValueNoise {
  int cells;
  std::vector<double> lattice;  // (cells+1)^2

  ValueNoise(int c, Rng& rng) : cells(c), lattice(static_cast<std::size_t>(c + 1) * (c + 1)) {
    for (double& v : lattice) v = rng.uniform();
  }

  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

  // u, v in [0,1]
  double operator()(double u, double v) const {
    const double x = u * cells;
    const double y = v * cells;
    const int x0 = std::min(static_cast<int>(x), cells - 1);
    const int y0 = std::min(static_cast<int>(y), cells - 1);
    const double fx = smooth(x - x0);
    const double fy = smooth(y - y0);
    const auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * (cells + 1) + xx]; };
    const double top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx;
    const double bottom = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx;
    return top * (1 - fy) + bottom * fy;
  }
};

enum class ShapeFamily { kDisk, kSquare, kTriangle, kRing };

bool inside_shape(ShapeFamily family, double x, double y, double r) {
  switch (family) {
    case ShapeFamily::kDisk:
      return x * x + y * y <= r * r;
    case ShapeFamily::kSquare:
      return std::max(std::abs(x), std::abs(y)) <= 0.8 * r;
    case ShapeFamily::kTriangle: {
      // Equilateral triangle with circumradius r, apex up.
      const double s3 = std::sqrt(3.0);
      return y <= 0.5 * r && (s3 * x - y) >= -r && (-s3 * x - y) >= -r;
    }
    case ShapeFamily::kRing: {
      const double d2 = x * x + y * y;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
  }
  return false;
}

constexpr std::array<double, 4> kStripePeriods = {16.0, 9.0, 5.0, 3.0};  // px at 64x64
constexpr double kClassTint = 0.08;
constexpr int kColourCells = 8;

Image render_scene(int size, int label, int num_classes, Rng& rng) {
  const auto family = static_cast<ShapeFamily>(label % 4);
  const int period_index = (label % 4 + label / 4) % 4;
  const double period = kStripePeriods[period_index] * size / 64.0;

  // Colour varies smoothly across the image; the class lives in shape and stripe period.
  std::vector<ValueNoise> fg, bg;
  for (int c = 0; c < 3; ++c) fg.emplace_back(kColourCells, rng);
  for (int c = 0; c < 3; ++c) bg.emplace_back(kColourCells, rng);
  const double tint = kClassTint * (label - 0.5 * (num_classes - 1)) / std::max(1, num_classes - 1);
  const double cx = rng.uniform(0.3, 0.7) * size;
  const double cy = rng.uniform(0.3, 0.7) * size;
  const double radius = rng.uniform(0.35, 0.5) * size;
  const double rotation = rng.uniform(0.0, 2.0 * M_PI);
  const double stripe_angle = rng.uniform(0.0, M_PI);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double cr = std::cos(rotation), sr = std::sin(rotation);
  const double dx = std::cos(stripe_angle), dy = std::sin(stripe_angle);

  Image image(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size;
      const double v = (y + 0.5) / size;
      const double px = x + 0.5 - cx;
      const double py = y + 0.5 - cy;
      const double rx = cr * px + sr * py;
      const double ry = -sr * px + cr * py;
      const bool object = inside_shape(family, rx, ry, radius);
      const bool stripe = std::sin(2.0 * M_PI * (px * dx + py * dy) / period + phase) > 0;
      for (int c = 0; c < 3; ++c) {
        const double a = fg[c](u, v);
        double value = object ? (stripe ? a : 1.0 - a) + tint : 0.15 + 0.7 * bg[c](u, v);
        value += rng.normal(0.0, 0.02);
        image.at(y, x, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return image;
}

}  // namespace

Dataset generate_synthetic_dataset(int num_images, int image_size, int num_classes,
                                   std::uint64_t seed) {
  require(num_images >= 1, ErrorKind::kConfig, "synthetic dataset: num_images must be >= 1");
  require(image_size >= 8, ErrorKind::kConfig, "synthetic dataset: image_size must be >= 8");
  require(num_classes >= 2 && num_classes <= 16, ErrorKind::kConfig,
          "synthetic dataset: num_classes must lie in [2, 16]");
  Dataset ds;
  ds.image_size = image_size;
  ds.num_classes = num_classes;
  ds.images.resize(num_images);
  ds.labels.resize(num_images);
  ds.sources.resize(num_images);
  for (int i = 0; i < num_images; ++i) {
    const int label = i % num_classes;
    Rng rng{seed, static_cast<std::uint64_t>(i), 0x5e7d};
    ds.images[i] = render_scene(image_size, label, num_classes, rng);
    ds.labels[i] = label;
    ds.sources[i] = "synthetic:" + std::to_string(i);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Folder ingestion

Dataset load_image_folder(const std::filesystem::path& root, const Manifest& manifest,
                          int image_size) {
  require(image_size >= 1, ErrorKind::kConfig, "load_image_folder: image_size must be >= 1");
  require(!manifest.entries.empty(), ErrorKind::kConfig, "load_image_folder: empty manifest");
  Dataset ds;
  ds.image_size = image_size;
  int max_label = -1;
  for (const auto& entry : manifest.entries) {
    const std::filesystem::path path = root / entry.path;
    if (!std::filesystem::is_regular_file(path)) {
      fail(ErrorKind::kIngestion, "missing image file '" + path.string() + "'");
    }
    Image decoded = read_image(path);
    ds.images.push_back(resize_bilinear(decoded, image_size, image_size));
    ds.labels.push_back(entry.label);
    ds.sources.push_back(path.string());
    if (entry.label) max_label = std::max(max_label, *entry.label);
  }
  if (max_label >= 0) ds.num_classes = max_label + 1;
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

BatchStream::BatchStream(const Dataset& dataset, int batch_size, std::uint64_t seed, bool shuffle)
    : dataset_(&dataset), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  require(batch_size >= 1, ErrorKind::kConfig, "batch_size must be >= 1");
  require(dataset.size() > 0, ErrorKind::kConfig, "cannot batch an empty dataset");
}

std::size_t BatchStream::batches_per_epoch() const {
  return (dataset_->size() + batch_size_ - 1) / batch_size_;
}

std::vector<std::size_t> BatchStream::epoch_order(std::int64_t epoch) const {
  const int n = static_cast<int>(dataset_->size());
  std::vector<std::size_t> order(n);
  if (shuffle_) {
    Rng rng{seed_, static_cast<std::uint64_t>(epoch), 0xba7c};
    const auto perm = rng.permutation(n);
    std::copy(perm.begin(), perm.end(), order.begin());
  } else {
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  return order;
}

ImageBatch BatchStream::batch(std::int64_t epoch, std::size_t index) const {
  require(index < batches_per_epoch(), ErrorKind::kContract, "batch index out of range");
  const auto order = epoch_order(epoch);
  const std::size_t begin = index * batch_size_;
  const std::size_t end = std::min(order.size(), begin + batch_size_);
  ImageBatch batch;
  for (std::size_t k = begin; k < end; ++k) {
    const std::size_t i = order[k];
    batch.images.push_back(dataset_->images[i]);
    batch.labels.push_back(dataset_->labels.empty() ? std::nullopt : dataset_->labels[i]);
    batch.indices.push_back(i);
  }
  return batch;
}

std::optional<ImageBatch> BatchStream::next() {
  if (cursor_ >= batches_per_epoch()) {
    cursor_ = 0;
    ++epoch_;
    return std::nullopt;
  }
  return batch(epoch_, cursor_++);
}

}  // namespace pera
