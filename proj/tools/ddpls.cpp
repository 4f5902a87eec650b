// Command-line entry point: dataset generation, training, evaluation, beta
// sweeps, density analysis and plot-data export.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ddpls/datasets.hpp"
#include "ddpls/eval.hpp"
#include "ddpls/experiment.hpp"
#include "ddpls/image.hpp"
#include "ddpls/pseudolabel.hpp"
#include "ddpls/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ddpls;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitEmpty = 4;

class EmptyData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::string config;
  std::uint64_t seed = 0;
  double beta = 0.0;
  int fraction = 0;
  int iters = 0;
  double alpha = 0.0;
  std::string sample_ratio;
  std::string selection;
  double fixed_ratio = 0.0;
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Training seed");
  cmd->add_option("--beta", o.beta, "Density-guided selection multiplier");
  cmd->add_option("--fraction", o.fraction, "Labeled percent of the synthetic training set");
  cmd->add_option("--iters", o.iters, "Iteration budget");
  cmd->add_option("--alpha", o.alpha, "Unsupervised loss weight");
  cmd->add_option("--sample-ratio", o.sample_ratio, "Labeled:unlabeled batch ratio, e.g. 2:1 or 1:0");
  cmd->add_option("--selection", o.selection, "Pseudo-label selection: ddpls or fixed")
      ->check(CLI::IsMember({"ddpls", "fixed"}));
  cmd->add_option("--fixed-ratio", o.fixed_ratio, "Percent of pixels kept by fixed selection");
}

std::pair<int, int> parse_ratio(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("sample ratio must look like L:U");
  try {
    return {std::stoi(text.substr(0, colon)), std::stoi(text.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("sample ratio must look like L:U");
  }
}

ExperimentConfig resolve_config(const CLI::App* cmd, const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment(o.config);
  if (cmd->count("--seed")) c.train.seed = o.seed;
  if (cmd->count("--beta")) c.train.beta = o.beta;
  if (cmd->count("--fraction")) {
    if (!is_fraction_preset(o.fraction)) throw ConfigError("fraction must be one of 1, 5, 10, 20, 30");
    c.data.labeled_percent = o.fraction;
  }
  if (cmd->count("--iters")) c.train.iterations = o.iters;
  if (cmd->count("--alpha")) c.train.alpha = o.alpha;
  if (cmd->count("--sample-ratio")) c.train.sample_ratio = parse_ratio(o.sample_ratio);
  if (cmd->count("--selection")) {
    c.train.selection = o.selection == "ddpls" ? SelectionMode::kDensityGuided : SelectionMode::kFixedRatio;
  }
  if (cmd->count("--fixed-ratio")) c.train.fixed_ratio = o.fixed_ratio;
  c.train.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

// ---- gen-data ----

struct GenDataArgs {
  Overrides o;
  int n = 200;
  int test_n = 50;
  std::string out;
};

int cmd_gen_data(const CLI::App* cmd, const GenDataArgs& a) {
  ExperimentConfig c = resolve_config(cmd, a.o);
  DensityProfile profile = c.data.profile;
  if (cmd->count("--seed")) profile.seed = a.o.seed;
  if (a.n <= 0) throw ConfigError("empty dataset");
  if (a.test_n < 0) throw ConfigError("--test-n must be non-negative");
  if (!cmd->count("--fraction") && !is_fraction_preset(static_cast<int>(c.data.labeled_percent)) ) {
    throw ConfigError("fraction must be one of 1, 5, 10, 20, 30");
  }
  const fs::path root(a.out);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "labels", ec);
  if (ec || !fs::is_directory(root / "images")) throw std::runtime_error("cannot create output directory " + a.out);

  std::vector<SceneSample> train = generate_split(profile, "train", a.n);
  split_labeled(train, c.data.labeled_percent, profile.seed);
  const std::vector<SceneSample> test = generate_split(profile, "test", a.test_n);

  const ClassTable classes = ClassTable::synthetic(profile.class_count);
  Manifest m;
  m.classes = classes.names;
  m.image_size = profile.image_size;
  std::size_t labeled = 0;
  auto emit = [&](const SceneSample& s, const std::string& split) {
    const std::string image = "images/" + s.id + ".png";
    const std::string label = "labels/" + s.id + ".txt";
    write_png((root / image).string(), s.image);
    write_text(root / label, serialize_dota_annotations(s.boxes, classes));
    m.samples.push_back({s.id, image, label, s.is_labeled, split});
  };
  for (const auto& s : train) {
    emit(s, "train");
    labeled += s.is_labeled;
  }
  for (const auto& s : test) emit(s, "test");
  save_manifest(m, (root / "manifest.json").string());
  std::cout << "wrote " << train.size() << " training images (" << labeled << " labeled, " << train.size() - labeled
            << " unlabeled) and " << test.size() << " test images to " << a.out << "\n";
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  Overrides o;
  std::string out;
  std::string resume;
  bool quiet = false;
};

int cmd_train(const CLI::App* cmd, const TrainArgs& a) {
  const ExperimentConfig c = resolve_config(cmd, a.o);
  const ExperimentData data = load_experiment_data(c.data);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.json", to_json(c).dump(2) + "\n");
  RunPaths paths;
  paths.out_dir = a.out;
  auto progress = [&](const StepReport& r) {
    if (a.quiet || (r.iteration + 1) % 500 != 0) return;
    std::cerr << "iter " << r.iteration + 1 << " l_s " << r.l_s << " l_u " << r.l_u;
    if (!r.pseudo.empty()) std::cerr << " s_pds " << r.mean_s_pds();
    std::cerr << "\n";
  };
  const RunResult result = run_training(c.train, data.train, data.test, paths, a.resume, progress);
  std::cout << "final teacher mAP " << result.final_eval.map << "\n";
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  Overrides o;
  std::string checkpoint;
  std::string model = "teacher";
  std::string out;
  double iou = 0.5;
};

int cmd_eval(const CLI::App* cmd, const EvalArgs& a) {
  const ExperimentConfig c = resolve_config(cmd, a.o);
  ExperimentData data = load_experiment_data(c.data);
  if (data.test.empty()) throw EmptyData("no test images");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Detector detector(c.train.detector);
  const ParameterSet& params = ck.set(a.model);
  detector.init_params(0).require_same_layout(params);
  std::vector<std::vector<OrientedBox>> gts;
  for (const auto& s : data.test) gts.push_back(s.boxes);
  const EvalReport r = evaluate(predict(detector, params, data.test, c.train.decode), gts,
                                c.train.detector.num_classes, a.iou);
  const std::string text = report_to_json(r, data.class_names);
  if (a.out.empty()) {
    std::cout << text << "\n";
  } else {
    write_text(a.out, text + "\n");
  }
  return kExitOk;
}

// ---- sweep-beta ----

struct SweepArgs {
  Overrides o;
  std::vector<double> values{10, 50, 100, 300, 500, 700};
  std::string out;
};

int cmd_sweep_beta(const CLI::App* cmd, const SweepArgs& a) {
  const ExperimentConfig base = resolve_config(cmd, a.o);
  if (a.values.empty()) throw ConfigError("no beta values");
  const ExperimentData data = load_experiment_data(base.data);
  fs::create_directories(a.out);
  std::ostringstream csv;
  csv << "beta,map\n";
  for (double beta : a.values) {
    ExperimentConfig c = base;
    c.train.beta = beta;
    c.train.selection = SelectionMode::kDensityGuided;
    std::ostringstream name;
    name << "beta_" << beta;
    RunPaths paths;
    paths.out_dir = (fs::path(a.out) / name.str()).string();
    const RunResult r = run_training(c.train, data.train, data.test, paths);
    csv << beta << "," << r.final_eval.map << "\n";
    std::cerr << "beta " << beta << " mAP " << r.final_eval.map << "\n";
  }
  write_text(fs::path(a.out) / "beta_sweep.csv", csv.str());
  std::cout << csv.str();
  return kExitOk;
}

// ---- analyze-density ----

struct DensityArgs {
  Overrides o;
  int tile = TileSpec{}.tile_size;
  int overlap = TileSpec{}.overlap;
  std::string out;
};

json histogram_json(const DensityHistogram& h) {
  return {{"tiles", h.tiles}, {"mean", h.mean}, {"max", h.max}, {"empty_fraction", h.empty_fraction}, {"counts", h.counts}};
}

int cmd_analyze_density(const CLI::App* cmd, const DensityArgs& a) {
  const ExperimentConfig c = resolve_config(cmd, a.o);
  const ExperimentData data = load_experiment_data(c.data);
  const TileSpec spec{a.tile, a.overlap};
  spec.validate();
  json report;
  report["tile_size"] = a.tile;
  report["overlap"] = a.overlap;
  report["dataset"] = histogram_json(density_histogram(data.train, spec));
  if (c.data.manifest.empty()) {
    // Same object budget spread uniformly, as a reference layout.
    DensityProfile uniform = c.data.profile;
    uniform.background_fraction = 1.0;
    report["uniform_reference"] =
        histogram_json(density_histogram(generate_split(uniform, "train", c.data.train_count), spec));
  }
  const std::string text = report.dump(2);
  if (a.out.empty()) {
    std::cout << text << "\n";
  } else {
    write_text(a.out, text + "\n");
  }
  return kExitOk;
}

// ---- export-plots ----

struct PlotArgs {
  std::string log;
  std::string out;
};

int cmd_export_plots(const PlotArgs& a) {
  std::ifstream in(a.log);
  if (!in) throw std::runtime_error("cannot read " + a.log);
  std::ostringstream pds_curve;
  std::ostringstream pds_count;
  pds_curve << "iteration,mean_s_pds\n";
  pds_count << "s_pds,k_selected,confidence_sum,n_total\n";
  std::string line;
  std::size_t index = 0;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) {
      ++index;
      continue;
    }
    json rec;
    try {
      rec = json::parse(line);
      if (rec.at("type").get<std::string>() != "step" || rec.at("phase").get<std::string>() != "semi") {
        ++index;
        continue;
      }
      const auto& pseudo = rec.at("pseudo");
      if (pseudo.empty()) {
        ++index;
        continue;
      }
      pds_curve << rec.at("iteration").get<int>() << "," << json(rec.at("s_pds").get<double>()).dump() << "\n";
      for (const auto& p : pseudo) {
        pds_count << json(p.at("s_pds").get<double>()).dump() << "," << p.at("k_selected").get<std::size_t>() << ","
                  << json(p.at("confidence_sum").get<double>()).dump() << "," << p.at("n_total").get<std::size_t>()
                  << "\n";
      }
      ++rows;
    } catch (const json::exception& e) {
      throw std::runtime_error("corrupt metrics record " + std::to_string(index) + ": " + e.what());
    }
    ++index;
  }
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "pds_over_iterations.csv", pds_curve.str());
  write_text(fs::path(a.out) / "pds_vs_selected.csv", pds_count.str());
  if (rows == 0) throw EmptyData("log has no semi-supervised step records");
  std::cout << "exported " << rows << " records to " << a.out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Density-guided dense pseudo-label selection for semi-supervised oriented detection"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset with a manifest");
  add_override_flags(gen_cmd, gen.o);
  gen_cmd->add_option("--n", gen.n, "Training images");
  gen_cmd->add_option("--test-n", gen.test_n, "Test images");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run teacher-student training");
  add_override_flags(train_cmd, train.o);
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint directory to resume from");
  train_cmd->add_flag("--quiet", train.quiet, "No progress lines");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_override_flags(eval_cmd, ev.o);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--model", ev.model, "Parameter set inside the checkpoint");
  eval_cmd->add_option("--iou", ev.iou, "IoU threshold");
  eval_cmd->add_option("--out", ev.out, "Report path (stdout when omitted)");

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep-beta", "Train one arm per beta value");
  add_override_flags(sweep_cmd, sweep.o);
  sweep_cmd->add_option("--values", sweep.values, "Beta values");
  sweep_cmd->add_option("--out", sweep.out, "Output directory")->required();

  DensityArgs dens;
  auto* dens_cmd = app.add_subcommand("analyze-density", "Objects-per-tile statistics");
  add_override_flags(dens_cmd, dens.o);
  dens_cmd->add_option("--tile", dens.tile, "Tile size");
  dens_cmd->add_option("--overlap", dens.overlap, "Tile overlap");
  dens_cmd->add_option("--out", dens.out, "Report path (stdout when omitted)");

  PlotArgs plots;
  auto* plots_cmd = app.add_subcommand("export-plots", "Export PDS series from a metrics log as CSV");
  plots_cmd->add_option("--log", plots.log, "metrics.jsonl")->required();
  plots_cmd->add_option("--out", plots.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen_cmd, gen);
    if (*train_cmd) return cmd_train(train_cmd, train);
    if (*eval_cmd) return cmd_eval(eval_cmd, ev);
    if (*sweep_cmd) return cmd_sweep_beta(sweep_cmd, sweep);
    if (*dens_cmd) return cmd_analyze_density(dens_cmd, dens);
    if (*plots_cmd) return cmd_export_plots(plots);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const EmptyData& e) {
    std::cerr << "empty data: " << e.what() << "\n";
    return kExitEmpty;
  } catch (const TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\nsnapshot: " << e.snapshot() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
