#include "pera_cli/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "pera/checkpoint.hpp"
#include "pera/config.hpp"
#include "pera/error.hpp"
#include "pera/evalkit.hpp"
#include "pera/trainer.hpp"

namespace pera::cli {

namespace fs = std::filesystem;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("--config", args.path, "JSON config file (defaults apply to missing keys)");
  app->add_option("--set", args.overrides, "Override one config key, e.g. --set trainer.seed=7")
      ->type_name("KEY=VALUE")
      ->take_all();
}

RunConfig resolve_config(const ConfigArgs& args) {
  RunConfig config = args.path.empty() ? RunConfig{} : load_config(args.path);
  config = apply_overrides(config, args.overrides);
  config.validate();
  return config;
}

std::string config_keys_help() {
  std::ostringstream s;
  s << "Config keys (defaults):\n";
  for (const auto& [key, value] : flattened_keys(RunConfig{})) s << "  " << key << " = " << value << '\n';
  return s.str();
}

/// `out` when given, else <root>/<command>-<timestamp>[-k] with root from
/// --out-root, PERA_OUTPUT_ROOT, or ./runs.
fs::path run_directory(const std::string& command, const std::string& out, const std::string& root) {
  fs::path dir;
  if (!out.empty()) {
    dir = out;
  } else {
    fs::path base = root;
    if (base.empty()) {
      const char* env = std::getenv("PERA_OUTPUT_ROOT");
      base = env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
    }
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    dir = base / (command + "-" + stamp);
    for (int k = 2; fs::exists(dir); ++k) dir = base / (command + "-" + stamp + "-" + std::to_string(k));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create output directory '" + dir.string() + "'");
  return dir;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return kConfigError;
    case ErrorKind::kIo:
    case ErrorKind::kIngestion:
    case ErrorKind::kCheckpoint: return kIoError;
    default: return kRuntimeError;
  }
}

std::string percent(double fraction) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << 100.0 * fraction;
  return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  f << text;
  if (!f) fail(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// synth-data

struct SynthArgs {
  ConfigArgs config;
  std::string out;
  std::string out_root;
  std::optional<int> num_images, size, classes;
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  RunConfig cfg = resolve_config(a.config);
  const int n = a.num_images.value_or(cfg.data.num_images);
  const int size = a.size.value_or(cfg.backbone.image_size);
  const int classes = a.classes.value_or(cfg.data.num_classes);
  const std::uint64_t seed = a.seed.value_or(cfg.data.seed);
  const Dataset ds = generate_synthetic_dataset(n, size, classes, seed);
  const fs::path dir = run_directory("synth-data", a.out, a.out_root);
  fs::create_directories(dir / "images");
  Manifest manifest;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.png", i);
    write_png(dir / name, ds.images[i]);
    manifest.entries.push_back({name, ds.labels[i], std::nullopt});
  }
  manifest.write(dir / "manifest.tsv");
  out << "wrote " << ds.size() << " images (" << size << "px, " << classes << " classes) to "
      << dir.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  ConfigArgs config;
  std::string out;
  std::string out_root;
  std::string resume;
  std::optional<std::int64_t> stop_at;
  bool quiet = false;
};

int run_pretrain(const PretrainArgs& a, std::ostream& out) {
  RunConfig cfg = resolve_config(a.config);
  std::optional<ModelState> initial;
  if (!a.resume.empty()) {
    Checkpoint ckpt = load_checkpoint(a.resume);
    if (config_hash(ckpt.config) != config_hash(cfg)) {
      fail(ErrorKind::kConfig, "resume: checkpoint config differs from the requested config");
    }
    initial = std::move(ckpt.state);
  }
  const Dataset ds = dataset_from_config(cfg);
  const fs::path dir = run_directory("pretrain", a.out, a.out_root);
  save_config(cfg, dir / "config.json");
  PretrainOptions opt;
  opt.output_dir = dir;
  opt.stop_at_step = a.stop_at;
  if (!a.quiet) {
    opt.on_step = [&](const StepMetrics& m) {
      if (m.step % 50 == 0) {
        out << "step " << m.step << "  l_cls " << std::setprecision(4) << m.loss.l_cls << "  l_mse "
            << m.loss.l_mse << "  entropy " << m.teacher_entropy << '\n';
      }
    };
  }
  const PretrainResult r = pretrain(cfg, ds, opt, std::move(initial));
  out << "finished at step " << r.state.step << "; checkpoint " << (dir / "checkpoint").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  ConfigArgs config;
  std::string checkpoint;
  std::string out;
  std::string out_root;
  bool random_init = false;
  bool student = false;
};

int run_probe(const ProbeArgs& a, std::ostream& out) {
  RunConfig cfg;
  std::optional<Checkpoint> ckpt;
  if (!a.checkpoint.empty()) {
    ckpt = load_checkpoint(a.checkpoint);
    cfg = ckpt->config;
  }
  if (!a.config.path.empty()) cfg = load_config(a.config.path);
  cfg = apply_overrides(cfg, a.config.overrides);
  cfg.validate();
  require(ckpt.has_value() || a.random_init, ErrorKind::kConfig,
          "probe needs --checkpoint or --random-init");
  const Dataset ds = probe_dataset(cfg);
  const bool teacher = !a.student && cfg.probe.use_teacher;
  FeatureMatrix f;
  std::string source;
  if (a.random_init) {
    const ModelState init = init_state(cfg);
    source = "random-init";
    f = extract_features(teacher ? init.teacher : init.student, cfg.backbone, ds, source);
  } else {
    require(ckpt->config.backbone.image_size == cfg.backbone.image_size &&
                ckpt->config.backbone.patch_size == cfg.backbone.patch_size &&
                ckpt->config.backbone.embed_dim == cfg.backbone.embed_dim &&
                ckpt->config.backbone.depth == cfg.backbone.depth,
            ErrorKind::kContract, "probe: backbone overrides do not match the checkpoint");
    f = extract_features(*ckpt, ds, teacher);
    source = f.source;
  }
  const ProbeResult r = linear_probe(f, cfg.probe);
  const fs::path dir = run_directory("probe", a.out, a.out_root);
  save_config(cfg, dir / "config.json");
  std::ostringstream csv;
  csv << "source,train_ratio,train_size,test_size,num_classes,oa\n"
      << source << ',' << cfg.probe.train_ratio << ',' << r.train_size << ',' << r.test_size << ','
      << r.num_classes << ',' << r.overall_accuracy << '\n';
  write_file(dir / "probe.csv", csv.str());
  out << source << ": OA " << percent(r.overall_accuracy) << "% (TR=" << percent(cfg.probe.train_ratio)
      << "%, " << r.train_size << " train / " << r.test_size << " test)\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationRow {
  std::vector<std::string> cells;  // config columns
  RunConfig config;
  double oa = 0.0;
};

struct AblationTable {
  std::string name;
  std::vector<std::string> header;  // config columns, OA appended
  std::vector<AblationRow> rows;
};

std::string check(bool on) { return on ? "✓" : ""; }

AblationTable components_grid(const RunConfig& base) {
  AblationTable t{"components", {"Method", "IBOT", "SA", "DM", "PP"}, {}};
  const bool rows[4][3] = {{true, false, false}, {true, true, false}, {false, true, true}, {true, true, true}};
  for (const auto& r : rows) {
    RunConfig c = base;
    c.trainer.toggles = {r[0], r[1], r[2]};
    t.rows.push_back({{"PerA", check(false), check(r[0]), check(r[1]), check(r[2])}, c, 0.0});
  }
  return t;
}

std::string arch_name(const BackboneConfig& b) {
  return "ViT-D" + std::to_string(b.embed_dim) + "-L" + std::to_string(b.depth);
}

AblationTable patch_grid(const RunConfig& base) {
  AblationTable t{"patch_size", {"Method", "Arch.", "Patch size"}, {}};
  for (int p : {16, 14, 8}) {
    RunConfig c = base;
    c.backbone.image_size = 112;
    c.backbone.patch_size = p;
    t.rows.push_back({{"PerA", arch_name(c.backbone), std::to_string(p)}, c, 0.0});
  }
  return t;
}

AblationTable ratio_grid(const RunConfig& base) {
  AblationTable t{"mask_ratios", {"Method", "s ratio", "l ratio", "t ratio"}, {}};
  const int rows[4][3] = {{30, 20, 50}, {20, 30, 50}, {20, 20, 60}, {30, 10, 60}};
  for (const auto& r : rows) {
    RunConfig c = base;
    c.trainer.mask_ratios = {r[0] / 100.0, r[1] / 100.0, r[2] / 100.0};
    t.rows.push_back({{"PerA", std::to_string(r[0]) + "%", std::to_string(r[1]) + "%",
                       std::to_string(r[2]) + "%"},
                      c, 0.0});
  }
  return t;
}

double run_ablation_row(const RunConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  save_config(config, dir / "config.json");
  const Dataset ds = dataset_from_config(config);
  PretrainOptions opt;
  opt.output_dir = dir;
  const PretrainResult r = pretrain(config, ds, opt);
  const Dataset probe_ds = probe_dataset(config);
  const auto& params = config.probe.use_teacher ? r.state.teacher : r.state.student;
  const FeatureMatrix f = extract_features(params, config.backbone, probe_ds);
  const ProbeResult pr = linear_probe(f, config.probe);
  write_file(dir / "probe.csv", "oa\n" + std::to_string(pr.overall_accuracy) + "\n");
  return pr.overall_accuracy;
}

std::string csv_cell(const std::string& s) {
  return s.find_first_of(",\"") == std::string::npos ? s : "\"" + s + "\"";
}

void emit_table(const AblationTable& t, const fs::path& dir, std::ostream& out) {
  std::ostringstream csv;
  for (const auto& h : t.header) csv << csv_cell(h) << ',';
  csv << "OA (TR=20%)\n";
  for (const auto& row : t.rows) {
    for (const auto& c : row.cells) csv << csv_cell(c) << ',';
    csv << percent(row.oa) << '\n';
  }
  write_file(dir / (t.name + ".csv"), csv.str());

  out << t.name << '\n';
  for (const auto& h : t.header) out << std::setw(12) << std::left << h;
  out << "OA (TR=20%)\n";
  for (const auto& row : t.rows) {
    for (const auto& c : row.cells) {
      // the check mark is one column wide but three bytes long
      const int pad = c == "✓" ? 14 : 12;
      out << std::setw(pad) << std::left << c;
    }
    out << percent(row.oa) << '\n';
  }
}

struct AblateArgs {
  ConfigArgs config;
  std::string grid = "all";
  std::string out;
  std::string out_root;
  std::optional<int> epochs;
  int jobs = 1;
};

int run_ablate(const AblateArgs& a, std::ostream& out) {
  RunConfig base = resolve_config(a.config);
  if (a.epochs) {
    base.trainer.epochs = *a.epochs;
    base.trainer.warmup_epochs = std::min(base.trainer.warmup_epochs, 0.1 * *a.epochs);
    base.trainer.tpt_t_warmup_epochs = std::min(base.trainer.tpt_t_warmup_epochs, 0.15 * *a.epochs);
  }
  std::vector<AblationTable> tables;
  if (a.grid == "sa" || a.grid == "all") tables.push_back(components_grid(base));
  if (a.grid == "patch" || a.grid == "all") tables.push_back(patch_grid(base));
  if (a.grid == "ratios" || a.grid == "all") tables.push_back(ratio_grid(base));
  for (auto& t : tables) {
    for (auto& row : t.rows) row.config.validate();
  }
  const fs::path dir = run_directory("ablate", a.out, a.out_root);
  save_config(base, dir / "config.json");

  struct Job {
    AblationRow* row;
    fs::path dir;
  };
  std::vector<Job> jobs;
  for (auto& t : tables) {
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      jobs.push_back({&t.rows[i], dir / t.name / ("row" + std::to_string(i))});
    }
  }
  const std::size_t width = static_cast<std::size_t>(std::max(1, a.jobs));
  for (std::size_t start = 0; start < jobs.size(); start += width) {
    std::vector<std::future<double>> running;
    const std::size_t stop = std::min(jobs.size(), start + width);
    for (std::size_t j = start; j < stop; ++j) {
      running.push_back(std::async(width > 1 ? std::launch::async : std::launch::deferred,
                                   [&job = jobs[j]] { return run_ablation_row(job.row->config, job.dir); }));
    }
    for (std::size_t j = start; j < stop; ++j) {
      jobs[j].row->oa = running[j - start].get();
      out << "run " << (j + 1) << "/" << jobs.size() << " (" << jobs[j].dir.parent_path().filename().string()
          << "): OA " << percent(jobs[j].row->oa) << "%\n";
    }
  }
  for (const auto& t : tables) emit_table(t, dir, out);
  return kOk;
}

// ---------------------------------------------------------------------------
// visualize

struct VisualizeArgs {
  ConfigArgs config;
  std::string checkpoint;
  std::vector<std::string> what{"attention", "reconstruction", "histograms", "embedding"};
  std::string out;
  std::string out_root;
  int num_images = 4;
  double mask_fraction = 0.7;
};

int run_visualize(const VisualizeArgs& a, std::ostream& out, std::ostream& err) {
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  RunConfig cfg = ckpt.config;
  if (!a.config.path.empty()) cfg = load_config(a.config.path);
  cfg = apply_overrides(cfg, a.config.overrides);
  const Dataset ds = probe_dataset(cfg);
  require(ds.image_size == ckpt.config.backbone.image_size, ErrorKind::kContract,
          "visualize: dataset image size does not match the checkpoint");
  const fs::path dir = run_directory("visualize", a.out, a.out_root);
  save_config(cfg, dir / "config.json");
  const auto wants = [&](const char* k) { return std::find(a.what.begin(), a.what.end(), k) != a.what.end(); };
  const std::size_t count = std::min<std::size_t>(ds.size(), static_cast<std::size_t>(std::max(0, a.num_images)));
  const BackboneConfig& bb = ckpt.config.backbone;

  if (wants("attention")) {
    for (std::size_t i = 0; i < count; ++i) {
      write_png(dir / ("attention_" + std::to_string(i) + ".png"),
                render_attention(ckpt.state.teacher, bb, ds.images[i]));
    }
    out << "attention maps: " << count << " images\n";
  }
  if (wants("reconstruction")) {
    if (!ckpt.config.trainer.toggles.pixel_prediction && a.what.size() > 1) {
      err << "note: checkpoint trained without pixel prediction; skipping reconstructions\n";
    } else {
      std::ostringstream csv;
      csv << "index,mask_fraction,masked_patches,masked_mse\n";
      for (std::size_t i = 0; i < count; ++i) {
        const Reconstruction r = reconstruct(ckpt, ds.images[i], a.mask_fraction, i);
        write_png(dir / ("reconstruction_" + std::to_string(i) + ".png"), r.composite);
        csv << i << ',' << a.mask_fraction << ',' << r.masked_patches << ',' << r.masked_mse << '\n';
      }
      write_file(dir / "reconstruction.csv", csv.str());
      out << "reconstructions: " << count << " triptychs at mask fraction " << a.mask_fraction << '\n';
    }
  }
  if (wants("histograms")) {
    const FeatureStats stats = feature_stats(ckpt.state.student, ckpt.state.teacher, bb, ds);
    write_feature_stats_csv(stats, dir / "feature_stats.csv");
    out << "feature stats: mean |student - teacher| " << stats.mean_abs_diff
        << ", value max-bin fraction " << stats.values.max_bin_fraction() << '\n';
  }
  if (wants("embedding")) {
    const FeatureMatrix f = extract_features(ckpt, ds, cfg.probe.use_teacher);
    const Embedding2d e = embed_2d(f.rows);
    if (e.degenerate) err << "warning: constant features; embedding coordinates are all zero\n";
    write_embedding_csv(e, f, dir / "embedding_pca.csv");
    write_features_csv(f, dir / "features.csv");
    std::vector<int> labels;
    for (const auto& l : f.labels) labels.push_back(l.value_or(0));
    out << "embedding: " << f.rows.rows() << " points, silhouette " << silhouette_score(f.rows.cast<double>(), labels)
        << '\n';
  }
  out << "outputs in " << dir.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  ConfigArgs config;
  std::string out;
  std::string out_root;
  bool empirical = false;
  int steps = 5;
};

int run_bench(const BenchArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve_config(a.config);
  CostReport r = cost_account(cfg.backbone, cfg.head, cfg.trainer.mask_ratios);
  if (a.empirical) measure_step_time(r, cfg, a.steps);
  const fs::path dir = run_directory("bench", a.out, a.out_root);
  save_config(cfg, dir / "config.json");
  write_cost_csv(r, dir / "cost.csv");
  out << std::setprecision(4) << "N=" << r.num_patches << "  tokens sparse " << r.student.tokens << "+"
      << r.teacher.tokens << " vs dense " << r.dense_student.tokens << "+" << r.dense_teacher.tokens << '\n'
      << "linear-term FLOP ratio dense/sparse " << r.linear_ratio << '\n'
      << "attention-term FLOP ratio dense/sparse " << r.attention_ratio << '\n';
  if (auto ratio = r.step_time_ratio()) {
    out << "step time dense " << *r.dense_step_seconds << " s, sparse " << *r.sparse_step_seconds
        << " s, ratio " << *ratio << '\n';
  }
  return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PerA self-supervised pre-training and evaluation toolkit", "pera"};
  app.require_subcommand(1);
  app.footer(config_keys_help());

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "Write a synthetic labelled dataset as PNGs plus a manifest");
  add_config_options(s, synth.config);
  s->add_option("--out", synth.out, "Output directory");
  s->add_option("--out-root", synth.out_root, "Parent of the timestamped run directory");
  s->add_option("--num-images", synth.num_images);
  s->add_option("--size", synth.size, "Image side in pixels");
  s->add_option("--classes", synth.classes);
  s->add_option("--seed", synth.seed);

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Pre-train student/teacher networks");
  add_config_options(p, pre.config);
  p->add_option("--out", pre.out, "Output directory");
  p->add_option("--out-root", pre.out_root, "Parent of the timestamped run directory");
  p->add_option("--resume", pre.resume, "Continue from a checkpoint directory");
  p->add_option("--stop-at-step", pre.stop_at, "Stop early; the schedule still spans the full run");
  p->add_flag("--quiet", pre.quiet);

  AblateArgs abl;
  auto* ab = app.add_subcommand("ablate", "Run the component, patch-size and mask-ratio grids");
  add_config_options(ab, abl.config);
  ab->add_option("--grid", abl.grid, "sa | patch | ratios | all")
      ->check(CLI::IsMember({"sa", "patch", "ratios", "all"}));
  ab->add_option("--epochs", abl.epochs, "Pre-training epochs per run (warmups scale down with it)");
  ab->add_option("--jobs", abl.jobs, "Runs to execute in parallel")->check(CLI::PositiveNumber);
  ab->add_option("--out", abl.out, "Output directory");
  ab->add_option("--out-root", abl.out_root, "Parent of the timestamped run directory");

  ProbeArgs prb;
  auto* pr = app.add_subcommand("probe", "Linear probe on frozen cls features");
  add_config_options(pr, prb.config);
  pr->add_option("--checkpoint", prb.checkpoint, "Checkpoint directory");
  pr->add_flag("--random-init", prb.random_init, "Probe a freshly initialised network instead");
  pr->add_flag("--student", prb.student, "Use the student encoder instead of the teacher");
  pr->add_option("--out", prb.out, "Output directory");
  pr->add_option("--out-root", prb.out_root, "Parent of the timestamped run directory");

  VisualizeArgs vis;
  auto* v = app.add_subcommand("visualize", "Attention maps, reconstructions, feature histograms, 2-D embedding");
  add_config_options(v, vis.config);
  v->add_option("--checkpoint", vis.checkpoint, "Checkpoint directory")->required();
  v->add_option("--what", vis.what, "Any of attention, reconstruction, histograms, embedding")
      ->check(CLI::IsMember({"attention", "reconstruction", "histograms", "embedding"}));
  v->add_option("--num-images", vis.num_images);
  v->add_option("--mask-fraction", vis.mask_fraction)->check(CLI::Range(0.0, 1.0));
  v->add_option("--out", vis.out, "Output directory");
  v->add_option("--out-root", vis.out_root, "Parent of the timestamped run directory");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Token, FLOP and activation accounting, optional step timing");
  add_config_options(b, bench.config);
  b->add_flag("--empirical", bench.empirical, "Also time dense and sparse training steps");
  b->add_option("--steps", bench.steps, "Timed steps per configuration")->check(CLI::PositiveNumber);
  b->add_option("--out", bench.out, "Output directory");
  b->add_option("--out-root", bench.out_root, "Parent of the timestamped run directory");

  for (auto* sub : {s, p, ab, pr, v, b}) sub->footer(config_keys_help());

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\nrun with --help for usage\n";
    return kUsage;
  }

  try {
    if (s->parsed()) return run_synth(synth, out);
    if (p->parsed()) return run_pretrain(pre, out);
    if (ab->parsed()) return run_ablate(abl, out);
    if (pr->parsed()) return run_probe(prb, out);
    if (v->parsed()) return run_visualize(vis, out, err);
    if (b->parsed()) return run_bench(bench, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error (io): " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsage;
}

}  // namespace pera::cli
