#include <doctest.h>

#include <fstream>
#include <functional>
#include <iterator>
#include <string>

#include "oracles.hpp"
#include "pera/checkpoint.hpp"
#include "pera/error.hpp"

using namespace pera;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig cfg = oracle::tiny_config();
  cfg.data.num_images = 8;
  cfg.trainer.batch_size = 4;
  cfg.trainer.epochs = 10;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

bool same_params(NetworkParams<float> a, NetworkParams<float> b) {
  auto ra = param_refs(a);
  auto rb = param_refs(b);
  if (ra.size() != rb.size()) return false;
  for (std::size_t k = 0; k < ra.size(); ++k)
    if (*ra[k].tensor != *rb[k].tensor) return false;
  return true;
}

}  // namespace

TEST_CASE("save, load and save again is byte-identical") {
  const RunConfig cfg = small_config();
  PretrainOptions opt;
  opt.stop_at_step = 3;
  const PretrainResult r = pretrain(cfg, dataset_from_config(cfg), opt);
  oracle::TempDir dir("ckpt");
  save_checkpoint(r.state, cfg, dir.path / "a");
  const Checkpoint loaded = load_checkpoint(dir.path / "a");
  CHECK(loaded.state.step == 3);
  CHECK(config_hash(loaded.config) == config_hash(cfg));
  CHECK(same_params(loaded.state.student, r.state.student));
  CHECK(same_params(loaded.state.teacher, r.state.teacher));
  CHECK(loaded.state.center == r.state.center);
  save_checkpoint(loaded.state, loaded.config, dir.path / "b");
  for (const char* f : {"index.json", "tensors.bin", "meta.json"}) {
    INFO(f);
    CHECK(slurp(dir.path / "a" / f) == slurp(dir.path / "b" / f));
  }
  save_checkpoint(loaded.state, loaded.config, dir.path / "a");
  CHECK(slurp(dir.path / "a" / "tensors.bin") == slurp(dir.path / "b" / "tensors.bin"));
}

TEST_CASE("damaged checkpoints raise checkpoint errors") {
  const RunConfig cfg = small_config();
  const ModelState state = init_state(cfg);
  oracle::TempDir dir("ckpt-bad");
  const fs::path p = dir.path / "c";
  save_checkpoint(state, cfg, p);

  CHECK(kind_of([&] { load_checkpoint(dir.path / "missing"); }) == ErrorKind::kCheckpoint);

  const std::string blob = slurp(p / "tensors.bin");
  std::ofstream(p / "tensors.bin", std::ios::binary) << blob.substr(0, blob.size() / 2);
  CHECK(kind_of([&] { load_checkpoint(p); }) == ErrorKind::kCheckpoint);
  std::ofstream(p / "tensors.bin", std::ios::binary) << blob << "xx";
  CHECK(kind_of([&] { load_checkpoint(p); }) == ErrorKind::kCheckpoint);
  std::ofstream(p / "tensors.bin", std::ios::binary) << blob;
  CHECK_NOTHROW(load_checkpoint(p));

  const std::string meta = slurp(p / "meta.json");
  std::ofstream(p / "meta.json") << meta.substr(0, meta.size() / 3);
  CHECK(kind_of([&] { load_checkpoint(p); }) == ErrorKind::kCheckpoint);
  std::string bumped = meta;
  const std::string key = "\"format_version\": 1";
  const auto at = bumped.find(key);
  REQUIRE(at != std::string::npos);
  bumped.replace(at, key.size(), "\"format_version\": 9");
  std::ofstream(p / "meta.json") << bumped;
  CHECK(kind_of([&] { load_checkpoint(p); }) == ErrorKind::kCheckpoint);
}

TEST_CASE("resuming from a saved checkpoint reproduces the uninterrupted run") {
  const RunConfig cfg = small_config();
  const Dataset ds = dataset_from_config(cfg);
  oracle::TempDir dir("ckpt-resume");
  PretrainOptions full;
  full.stop_at_step = 12;
  const PretrainResult ref = pretrain(cfg, ds, full);

  PretrainOptions first;
  first.stop_at_step = 2;
  first.output_dir = dir.path;
  pretrain(cfg, ds, first);
  Checkpoint ckpt = load_checkpoint(dir.path / "checkpoint");
  REQUIRE(ckpt.state.step == 2);
  PretrainOptions second = full;
  second.output_dir = dir.path;
  const PretrainResult rest = pretrain(ckpt.config, ds, second, std::move(ckpt.state));
  REQUIRE(rest.metrics.size() == 10);
  double worst = 0.0;
  for (std::size_t i = 0; i < rest.metrics.size(); ++i)
    worst = std::max(worst, std::abs(rest.metrics[i].loss.total - ref.metrics[2 + i].loss.total));
  CHECK(worst <= 1e-6);

  std::ifstream log(dir.path / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 12);
}
