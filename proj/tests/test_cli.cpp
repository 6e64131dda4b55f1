#include <doctest.h>

#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "pera/config.hpp"
#include "pera/data.hpp"
#include "pera_cli/cli.hpp"

using namespace pera;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> tiny_sets() {
  return {"--set",
          "backbone.image_size=16",
          "backbone.patch_size=4",
          "backbone.embed_dim=16",
          "backbone.depth=2",
          "backbone.heads=2",
          "head.prototypes=16",
          "head.hidden_dim=16",
          "head.bottleneck_dim=8",
          "data.num_images=8",
          "trainer.batch_size=4",
          "trainer.epochs=2",
          "probe.num_images=20",
          "probe.epochs=5"};
}

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST_CASE("help lists every config key") {
  const Run r = run({"pretrain", "--help"});
  CHECK(r.code == 0);
  for (const auto& [key, value] : flattened_keys(RunConfig{})) {
    INFO(key);
    CHECK(r.out.find(key) != std::string::npos);
  }
}

TEST_CASE("usage and configuration errors map to exit codes") {
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"no-such-command"}).code == cli::kUsage);
  const Run bad = run({"pretrain", "--set", "trainer.bogus=1"});
  CHECK(bad.code == cli::kConfigError);
  CHECK(bad.err.find("trainer.bogus") != std::string::npos);
  CHECK(std::count(bad.err.begin(), bad.err.end(), '\n') == 1);
  CHECK(run({"pretrain", "--set", "trainer.mask_ratios.s=0.9"}).code == cli::kConfigError);
  CHECK(run({"probe", "--checkpoint", "/nonexistent/ckpt"}).code == cli::kIoError);
  CHECK(run({"pretrain", "--config", "/nonexistent/cfg.json"}).code != cli::kOk);
}

TEST_CASE("synth-data writes images and a manifest") {
  oracle::TempDir dir("cli-synth");
  const Run r = run({"synth-data", "--out", dir.path.string(), "--num-images", "6", "--size", "16",
                     "--classes", "3"});
  REQUIRE(r.code == 0);
  const Manifest m = Manifest::read(dir.path / "manifest.tsv");
  REQUIRE(m.entries.size() == 6);
  CHECK(m.entries[4].label == 1);
  const Dataset ds = load_image_folder(dir.path, m, 16);
  CHECK(ds.num_classes == 3);
}

TEST_CASE("pretrain, probe, visualize and bench run end to end") {
  oracle::TempDir dir("cli-e2e");
  const auto sets = tiny_sets();
  const fs::path pre = dir.path / "pre";
  REQUIRE(run(with({"pretrain", "--quiet", "--out", pre.string()}, sets)).code == 0);
  CHECK(lines_of(pre / "metrics.jsonl").size() == 4);
  CHECK(fs::exists(pre / "checkpoint" / "tensors.bin"));

  const fs::path probe = dir.path / "probe";
  REQUIRE(run({"probe", "--checkpoint", (pre / "checkpoint").string(), "--out", probe.string()}).code == 0);
  CHECK(lines_of(probe / "probe.csv").size() == 2);

  const fs::path vis = dir.path / "vis";
  const Run v = run({"visualize", "--checkpoint", (pre / "checkpoint").string(), "--num-images", "2",
                     "--out", vis.string()});
  REQUIRE(v.code == 0);
  CHECK(fs::exists(vis / "reconstruction.csv"));
  CHECK(fs::exists(vis / "feature_stats.csv"));
  CHECK(fs::exists(vis / "embedding_pca.csv"));

  const fs::path bench = dir.path / "bench";
  REQUIRE(run(with({"bench", "--out", bench.string()}, sets)).code == 0);
  CHECK(fs::exists(bench / "cost.csv"));
}

TEST_CASE("ablate emits every grid with its config columns") {
  oracle::TempDir dir("cli-ablate");
  auto sets = tiny_sets();
  sets.push_back("backbone.embed_dim=8");
  const Run r = run(with({"ablate", "--grid", "all", "--epochs", "1", "--out", dir.path.string()}, sets));
  REQUIRE(r.code == 0);
  const auto comp = lines_of(dir.path / "components.csv");
  const auto patch = lines_of(dir.path / "patch_size.csv");
  const auto ratios = lines_of(dir.path / "mask_ratios.csv");
  REQUIRE(comp.size() == 5);
  REQUIRE(patch.size() == 4);
  REQUIRE(ratios.size() == 5);
  CHECK(comp[0] == "Method,IBOT,SA,DM,PP,OA (TR=20%)");
  CHECK(patch[0] == "Method,Arch.,Patch size,OA (TR=20%)");
  CHECK(ratios[0] == "Method,s ratio,l ratio,t ratio,OA (TR=20%)");
  CHECK(ratios[1].rfind("PerA,30%,20%,50%,", 0) == 0);
  CHECK(run({"ablate", "--grid", "nope"}).code == cli::kUsage);
}
