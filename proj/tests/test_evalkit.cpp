#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>

#include "oracles.hpp"
#include "pera/error.hpp"
#include "pera/evalkit.hpp"

using namespace pera;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

FeatureMatrix one_hot(int per_class, int classes) {
  FeatureMatrix f;
  f.rows = MatF::Zero(per_class * classes, classes);
  for (int i = 0; i < per_class * classes; ++i) {
    f.rows(i, i % classes) = 1.0f;
    f.labels.push_back(i % classes);
  }
  return f;
}

RunConfig small_config() {
  RunConfig cfg = oracle::tiny_config();
  cfg.data.num_images = 8;
  cfg.trainer.batch_size = 4;
  cfg.trainer.epochs = 2;
  return cfg;
}

}  // namespace

TEST_CASE("stratified split keeps the per-class ratio") {
  std::vector<std::optional<int>> labels;
  for (int i = 0; i < 50; ++i) labels.push_back(i % 5 == 0 ? 1 : 0);
  const ProbeSplit s = stratified_split(labels, 0.2, 4);
  CHECK(s.train.size() == 10);
  CHECK(s.test.size() == 40);
  int train_ones = 0;
  for (auto i : s.train) train_ones += *labels[i];
  CHECK(train_ones == 2);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 50);
  CHECK(std::is_sorted(s.train.begin(), s.train.end()));
  CHECK(stratified_split(labels, 0.2, 4).train == s.train);
  CHECK(stratified_split(labels, 0.2, 5).train != s.train);

  const std::vector<std::optional<int>> tiny = {0, 0, 1, 1};
  const ProbeSplit t = stratified_split(tiny, 0.01, 0);
  CHECK(t.train.size() == 2);
  CHECK(t.test.size() == 2);
  CHECK(kind_of([&] { stratified_split(tiny, 1.0, 0); }) == ErrorKind::kConfig);
  CHECK(kind_of([] { stratified_split({0, std::nullopt}, 0.5, 0); }) == ErrorKind::kContract);
}

TEST_CASE("linear probe on one-hot features is perfect") {
  ProbeConfig cfg;
  const ProbeResult r = linear_probe(one_hot(20, 4), cfg);
  CHECK(r.overall_accuracy == 1.0);
  CHECK(r.train_accuracy == 1.0);
  CHECK(r.num_classes == 4);
  CHECK(r.train_size + r.test_size == 80);
  CHECK(linear_probe(one_hot(20, 4), cfg).overall_accuracy == r.overall_accuracy);
}

TEST_CASE("features are unit-free cls outputs, one row per image") {
  const RunConfig cfg = small_config();
  const ModelState s = init_state(cfg);
  const Dataset ds = dataset_from_config(cfg);
  const FeatureMatrix f = extract_features(s.teacher, cfg.backbone, ds, "t");
  CHECK(f.rows.rows() == 8);
  CHECK(f.rows.cols() == cfg.backbone.embed_dim);
  CHECK(f.labels == ds.labels);
  CHECK(f.rows.allFinite());
}

TEST_CASE("reconstruction with nothing masked returns the input") {
  const RunConfig cfg = small_config();
  const ModelState s = init_state(cfg);
  const Dataset ds = dataset_from_config(cfg);
  const Reconstruction r = reconstruct(s.student, cfg.backbone, ds.images[0], 0.0, 1);
  CHECK(r.masked_patches == 0);
  CHECK(r.masked_mse == 0.0);
  CHECK(r.reconstruction == ds.images[0]);
  CHECK(r.composite.width == 3 * 16 + 2 * 2);
  CHECK(r.composite.height == 16);

  const Reconstruction most = reconstruct(s.student, cfg.backbone, ds.images[0], 0.7, 1);
  CHECK(most.masked_patches == 11);
  CHECK(most.masked_mse > 0.0);
  CHECK(most.ground_truth == ds.images[0]);
  CHECK(kind_of([&] { reconstruct(s.student, cfg.backbone, ds.images[0], 1.5, 1); }) ==
        ErrorKind::kContract);
}

TEST_CASE("reconstruction needs a pixel-prediction checkpoint") {
  RunConfig cfg = small_config();
  cfg.trainer.toggles.pixel_prediction = false;
  Checkpoint ckpt{cfg, init_state(cfg)};
  const Image img = dataset_from_config(cfg).images[0];
  CHECK(kind_of([&] { reconstruct(ckpt, img, 0.5, 0); }) == ErrorKind::kCapability);
  ckpt.config.trainer.toggles.pixel_prediction = true;
  CHECK_NOTHROW(reconstruct(ckpt, img, 0.5, 0));
}

TEST_CASE("identical student and teacher give a spike at zero difference") {
  const RunConfig cfg = small_config();
  const ModelState s = init_state(cfg);
  const FeatureStats st = feature_stats(s.student, s.teacher, cfg.backbone, dataset_from_config(cfg));
  CHECK(st.mean_abs_diff == 0.0);
  CHECK(st.diff_std == 0.0);
  CHECK(st.diff.max_bin_fraction() == 1.0);
  CHECK(st.diff.total() == 8u * static_cast<std::size_t>(cfg.backbone.embed_dim));
  CHECK(st.diff.bin_center(25) == doctest::Approx(0.0));

  Histogram h(0.0, 1.0, 4);
  h.add(-3.0);
  h.add(0.3);
  h.add(7.0);
  CHECK(h.counts == std::vector<std::size_t>{1, 1, 0, 1});
}

TEST_CASE("PCA of two points lies on the first axis") {
  MatF x(2, 3);
  x << 1, 2, 3, 3, 2, 1;
  const Embedding2d e = embed_2d(x);
  CHECK_FALSE(e.degenerate);
  CHECK(std::abs(e.coords(0, 0)) == doctest::Approx(std::sqrt(2.0)));
  CHECK(e.coords(0, 0) == doctest::Approx(-e.coords(1, 0)));
  CHECK(e.coords(0, 1) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(e.explained_variance[0] == doctest::Approx(4.0));
  CHECK(e.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-9));

  const Embedding2d flat = embed_2d(MatF::Ones(5, 3));
  CHECK(flat.degenerate);
  CHECK(kind_of([] { embed_2d(MatF::Ones(1, 3)); }) == ErrorKind::kContract);
}

TEST_CASE("silhouette of well separated clusters is near one") {
  MatD p(4, 1);
  p << 0.0, 0.1, 10.0, 10.1;
  CHECK(silhouette_score(p, {0, 0, 1, 1}) > 0.98);
  CHECK(silhouette_score(p, {0, 1, 0, 1}) < 0.0);
}

TEST_CASE("cost accounting follows the token-count closed forms") {
  BackboneConfig b;
  HeadConfig h;
  const MaskRatios r{0.3, 0.2, 0.5};
  b.image_size = 112;
  b.patch_size = 8;
  const CostReport c196 = cost_account(b, h, r);
  CHECK(c196.num_patches == 196);
  CHECK(c196.student.tokens == 99);
  CHECK(c196.teacher.tokens == 99);
  CHECK(c196.dense_student.tokens == 197);
  CHECK(c196.linear_ratio == doctest::Approx(394.0 / 198.0).epsilon(1e-12));
  CHECK(c196.attention_ratio == doctest::Approx(2.0 * 197 * 197 / (99.0 * 99 * 2)).epsilon(1e-12));

  b.image_size = 512;
  b.patch_size = 16;
  const CostReport c1024 = cost_account(b, h, r);
  CHECK(c1024.student.tokens == 513);
  CHECK(c1024.teacher.tokens == 513);
  CHECK(c1024.linear_ratio == doctest::Approx(2050.0 / 1026.0).epsilon(1e-12));
  CHECK(c1024.attention_ratio == doctest::Approx(2.0 * 1025 * 1025 / (2.0 * 513 * 513)).epsilon(1e-12));
  CHECK(c1024.injected_linear_ratio > c1024.linear_ratio);
  CHECK_FALSE(c1024.step_time_ratio().has_value());
  CHECK(c1024.student.peak_activations < c1024.dense_student.peak_activations);

  oracle::TempDir dir("cost");
  write_cost_csv(c1024, dir.path / "cost.csv");
  std::ifstream in(dir.path / "cost.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "metric,value");
}
