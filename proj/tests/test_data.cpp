#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <functional>

#include "oracles.hpp"
#include "pera/config.hpp"
#include "pera/data.hpp"
#include "pera/error.hpp"
#include "pera/evalkit.hpp"
#include "pera/image.hpp"
#include "pera/trainer.hpp"

using namespace pera;

namespace {

const std::filesystem::path kData = PERA_TEST_DATA;

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

}  // namespace

TEST_CASE("synthetic images are in range, balanced and reproducible") {
  const Dataset a = generate_synthetic_dataset(40, 32, 4, 7);
  const Dataset b = generate_synthetic_dataset(40, 32, 4, 7);
  const Dataset c = generate_synthetic_dataset(40, 32, 4, 8);
  CHECK(a.size() == 40);
  CHECK(a.image_size == 32);
  CHECK(a.num_classes == 4);
  std::vector<int> per_class(4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.images[i] == b.images[i]);
    CHECK(a.images[i].height == 32);
    const auto [lo, hi] = std::minmax_element(a.images[i].pixels.begin(), a.images[i].pixels.end());
    CHECK(*lo >= 0.0f);
    CHECK(*hi <= 1.0f);
    REQUIRE(a.labels[i].has_value());
    ++per_class[*a.labels[i]];
  }
  for (int n : per_class) CHECK(n == 10);
  CHECK_FALSE(a.images[0] == c.images[0]);
  CHECK(kind_of([] { generate_synthetic_dataset(0, 32, 4, 0); }) == ErrorKind::kConfig);
  CHECK(kind_of([] { generate_synthetic_dataset(4, 32, 1, 0); }) == ErrorKind::kConfig);
}

TEST_CASE("image i does not depend on the dataset size") {
  const Dataset small = generate_synthetic_dataset(5, 32, 4, 3);
  const Dataset large = generate_synthetic_dataset(50, 32, 4, 3);
  for (int i = 0; i < 5; ++i) CHECK(small.images[i] == large.images[i]);
}

TEST_CASE("raw pixel means separate the synthetic classes above chance") {
  const Dataset ds = generate_synthetic_dataset(400, 32, 4, 11);
  FeatureMatrix f;
  f.rows.resize(static_cast<Eigen::Index>(ds.size()), 3);
  f.labels = ds.labels;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double sum[3] = {0, 0, 0};
    const auto& px = ds.images[i].pixels;
    for (std::size_t k = 0; k < px.size(); ++k) sum[k % 3] += px[k];
    for (int c = 0; c < 3; ++c) f.rows(i, c) = static_cast<float>(sum[c] / (px.size() / 3));
  }
  ProbeConfig probe;
  const ProbeResult r = linear_probe(f, probe);
  CHECK(r.overall_accuracy > 0.25 + 0.05);
}

TEST_CASE("one epoch visits every image exactly once") {
  const Dataset ds = generate_synthetic_dataset(23, 16, 3, 0);
  BatchStream stream(ds, 5, 9, true);
  CHECK(stream.batches_per_epoch() == 5);
  for (std::int64_t epoch = 0; epoch < 3; ++epoch) {
    std::vector<std::size_t> seen;
    std::size_t images = 0;
    while (auto batch = stream.next()) {
      for (std::size_t k = 0; k < batch->size(); ++k) {
        CHECK(batch->images[k] == ds.images[batch->indices[k]]);
        CHECK(batch->labels[k] == ds.labels[batch->indices[k]]);
      }
      seen.insert(seen.end(), batch->indices.begin(), batch->indices.end());
      images += batch->size();
    }
    std::sort(seen.begin(), seen.end());
    CHECK(images == 23);
    for (std::size_t i = 0; i < 23; ++i) CHECK(seen[i] == i);
  }
  CHECK(stream.epoch_order(0) != stream.epoch_order(1));
  CHECK(BatchStream(ds, 5, 9, true).epoch_order(4) == stream.epoch_order(4));
  CHECK(kind_of([&] { stream.batch(0, 5); }) == ErrorKind::kContract);
}

TEST_CASE("manifest parse, serialize and errors") {
  const Manifest m = Manifest::parse("# comment\n\na.png\t2\t0.5\nsub/b.jpg\t\t\nc.png\t1\n");
  REQUIRE(m.entries.size() == 3);
  CHECK(m.entries[0].path == "a.png");
  CHECK(m.entries[0].label == 2);
  CHECK(m.entries[0].resolution == doctest::Approx(0.5));
  CHECK_FALSE(m.entries[1].label.has_value());
  CHECK(m.entries[2].label == 1);
  CHECK_FALSE(m.entries[2].resolution.has_value());
  const Manifest again = Manifest::parse(m.serialize());
  REQUIRE(again.entries.size() == 3);
  CHECK(again.entries[1].path == "sub/b.jpg");
  CHECK(again.entries[0].resolution == m.entries[0].resolution);

  CHECK(kind_of([] { Manifest::parse("a.png\t1\t2\t3\n"); }) == ErrorKind::kIngestion);
  CHECK(kind_of([] { Manifest::parse("\t1\n"); }) == ErrorKind::kIngestion);
  CHECK(kind_of([] { Manifest::parse("a.png\tx\n"); }) == ErrorKind::kIngestion);
  CHECK(kind_of([] { Manifest::parse("a.png\t1\na.png\t2\n"); }) == ErrorKind::kIngestion);
  CHECK(kind_of([] { Manifest::read("/nonexistent/manifest.tsv"); }) == ErrorKind::kIo);
}

TEST_CASE("decoding PNG and JPEG fixtures") {
  const Image jpg = read_image(kData / "red_8x6.jpg");
  CHECK(jpg.width == 8);
  CHECK(jpg.height == 6);
  CHECK(jpg.at(2, 3, 0) == doctest::Approx(200.0 / 255).epsilon(0.03));
  CHECK(jpg.at(2, 3, 1) == doctest::Approx(40.0 / 255).epsilon(0.15));
  const Image gray = read_image(kData / "gray_5x4.png");
  CHECK(gray.width == 5);
  CHECK(gray.at(1, 1, 2) == doctest::Approx(128.0 / 255));
  const Image rgba = read_image(kData / "rgba_3x2.png");
  CHECK(rgba.at(0, 0, 1) == doctest::Approx(20.0 / 255));
}

TEST_CASE("PNG write/read round trip and corrupt input") {
  oracle::TempDir dir("data");
  Image img(7, 9);
  for (std::size_t k = 0; k < img.pixels.size(); ++k) img.pixels[k] = static_cast<float>(k % 256) / 255;
  write_png(dir.path / "x.png", img);
  const Image back = read_image(dir.path / "x.png");
  CHECK(to_rgb8(back) == to_rgb8(img));

  std::ofstream(dir.path / "bad.png") << "\x89PNG garbage";
  CHECK(kind_of([&] { read_image(dir.path / "bad.png"); }) == ErrorKind::kIngestion);
  std::ofstream(dir.path / "bad.txt") << "hello world";
  CHECK(kind_of([&] { read_image(dir.path / "bad.txt"); }) == ErrorKind::kIngestion);
}

TEST_CASE("folder loading resizes and labels") {
  oracle::TempDir dir("folder");
  const Dataset ds = generate_synthetic_dataset(3, 24, 3, 2);
  Manifest m;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "img" + std::to_string(i) + ".png";
    write_png(dir.path / name, ds.images[i]);
    m.entries.push_back({name, ds.labels[i], std::nullopt});
  }
  const Dataset loaded = load_image_folder(dir.path, m, 16);
  CHECK(loaded.size() == 3);
  CHECK(loaded.images[0].width == 16);
  CHECK(loaded.labels[2] == ds.labels[2]);
  CHECK(loaded.num_classes == 3);

  m.entries.push_back({"missing.png", 0, std::nullopt});
  CHECK(kind_of([&] { load_image_folder(dir.path, m, 16); }) == ErrorKind::kIngestion);
}

TEST_CASE("bilinear resize of a constant image is constant") {
  Image img(5, 7, 0.25f);
  const Image out = resize_bilinear(img, 11, 3);
  for (float v : out.pixels) CHECK(v == doctest::Approx(0.25f));
  CHECK(resize_bilinear(img, 5, 7) == img);
}

TEST_CASE("dataset from config") {
  RunConfig cfg;
  cfg.data.num_images = 6;
  cfg.backbone.image_size = 16;
  cfg.backbone.patch_size = 4;
  const Dataset ds = dataset_from_config(cfg);
  CHECK(ds.size() == 6);
  CHECK(ds.image_size == 16);
  cfg.data.source = "folder";
  cfg.data.root = "/nonexistent";
  cfg.data.manifest = "/nonexistent/m.tsv";
  CHECK_THROWS_AS(dataset_from_config(cfg), Error);
}
