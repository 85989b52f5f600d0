#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gamblenet/metrics.hpp"
#include "gamblenet/png_io.hpp"
#include "gamblenet/synthdata.hpp"
#include "gamblenet/training.hpp"

namespace gamblenet::harness {

inline constexpr int kExperimentSchemaVersion = 1;

/// Process exit status for an error code: 2 config, 3 IO, 4 numerical, 1 other.
int exit_code(ErrorCode code);

/// Dataset reference: an existing directory, or a spec generated on demand.
struct DatasetRef {
  std::filesystem::path dir;  // read from here when non-empty and present
  synth::SceneSpec spec = synth::roadsim64();
  int n = 600;
};

struct RunSpec {
  std::string name;  // run directory name; defaults to the method
  training::Method method = training::Method::kCe;
  nlohmann::json overrides = nlohmann::json::object();  // merged onto the method defaults
};

struct ExperimentConfig {
  DatasetRef dataset;
  std::vector<RunSpec> runs;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path out_dir = "runs";
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);
void validate(const ExperimentConfig& config);

/// Defaults for `method` at `seed` with the run's overrides applied.
training::TrainConfig resolve_run(const RunSpec& run, std::uint64_t seed);
std::filesystem::path run_dir(const std::filesystem::path& out_dir, const std::string& name, std::uint64_t seed);

/// Loads the dataset from `ref.dir`, or generates it there (or in memory when `ref.dir` is empty).
synth::Dataset load_or_generate(const DatasetRef& ref);

// Commands ------------------------------------------------------------------

/// Writes `n` samples of `spec` to `out_dir`; returns the manifest.
nlohmann::json cmd_generate(const synth::SceneSpec& spec, int n, const std::filesystem::path& out_dir);

struct TrainedRun {
  std::string name;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  training::RunResult result;
};

struct TrainOptions {
  bool resume = false;
  bool verbose = false;
};

/// Trains every (run, seed) pair; writes `experiment.json` into the output root.
std::vector<TrainedRun> cmd_train(const ExperimentConfig& config, const TrainOptions& options = {});

/// Evaluates a segmenter checkpoint on a dataset split against clean labels.
metrics::MetricReport cmd_eval(const std::filesystem::path& checkpoint, const synth::Dataset& dataset,
                               const std::string& split);

struct ReportCell {
  std::string run;
  std::string method;
  std::uint64_t seed = 0;
  bool present = false;
  double mean_iou = 0.0;
  double mean_bf = 0.0;
  double mean_hausdorff = 0.0;
  double confidence_window_mean = 0.0;
  std::string config_hash;
  std::string segmenter_hash;
  std::filesystem::path checkpoint;
};

struct MethodSummary {
  std::string run;
  int seeds = 0;
  double iou_mean = 0.0, iou_std = 0.0;
  double bf_mean = 0.0, bf_std = 0.0;
  double hausdorff_mean = 0.0, hausdorff_std = 0.0;
  double confidence_mean = 0.0, confidence_std = 0.0;
};

struct AuditEntry {
  std::string run;
  std::uint64_t seed = 0;
  bool ok = false;
  double max_abs_diff = 0.0;
};

struct ReportOptions {
  bool audit = false;
  double audit_fraction = 0.1;
  std::uint64_t audit_seed = 1;
  int panel_samples = 4;
};

struct ComparisonReport {
  std::vector<ReportCell> cells;
  std::vector<MethodSummary> summaries;
  std::vector<AuditEntry> audit;
  std::vector<std::filesystem::path> files;
};

/// Reads every run under `experiment_dir` and writes comparison tables,
/// confidence series and, for gambling runs, panel images.
ComparisonReport cmd_report(const std::filesystem::path& experiment_dir, const ReportOptions& options = {});

struct BetPixel {
  int row = 0;
  int col = 0;
  double weight = 0.0;
  double cross_entropy = 0.0;
};

struct BetInspection {
  Tensor bets;  // (1, H, W), sums to 1
  std::vector<BetPixel> top;
  double mean_ce = 0.0;
  double top_mean_ce = 0.0;
  double bet_cv = 0.0;  // std / mean of the weights
};

/// Betting map of `gambler` on `sample` given the segmenter's prediction,
/// with the `topk` highest-bet pixels and their cross entropy on clean labels.
BetInspection inspect_bets(models::Model& gambler, models::Model& segmenter, const synth::Sample& sample,
                           double bet_smoothing, int topk);

/// Loads both checkpoints, writes `bets.png`, `panel.png` and `bets.json` into `out_dir`.
BetInspection cmd_bet_inspect(const std::filesystem::path& gambler_ckpt, const std::filesystem::path& segmenter_ckpt,
                              const synth::Dataset& dataset, const std::string& split, int index, int topk,
                              const std::filesystem::path& out_dir);

/// Side-by-side rgb | ground truth | prediction | betting map (betting map
/// divided by its largest weight and mapped to [0, 255]; omitted when `bets` is empty).
io::Image8 render_panel(const synth::SceneSpec& spec, const synth::Sample& sample, const LabelMap& prediction,
                        const Tensor& bets);

}  // namespace gamblenet::harness
