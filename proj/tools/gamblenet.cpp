#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "gamblenet/harness.hpp"

using namespace gamblenet;

namespace {

std::filesystem::path output_root() {
  const char* env = std::getenv("GAMBLENET_OUT");
  return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::path("runs");
}

std::filesystem::path resolve_out(const std::string& flag, const std::string& fallback) {
  return flag.empty() ? output_root() / fallback : std::filesystem::path(flag);
}

synth::SceneSpec load_spec(const std::string& path) {
  if (path.empty()) return synth::roadsim64();
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open spec '" + path + "'");
  try {
    return synth::scene_spec_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, "malformed spec '" + path + "': " + e.what());
  }
}

synth::Dataset open_dataset(const std::string& dir) {
  require(!dir.empty(), ErrorCode::kConfig, "--dataset is required");
  return synth::read_dataset(dir);
}

void print_report(const metrics::MetricReport& r) { std::cout << metrics::report_csv(r); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gambling adversarial segmentation on synthetic road scenes"};
  app.require_subcommand(1);

  std::string config, method, out, dataset, checkpoint, gambler, split = "val";
  std::uint64_t seed = 1;
  int n = 600, topk = 10, index = 0, epochs = 0;
  bool resume = false, audit = false, verbose = false;

  auto* gen = app.add_subcommand("generate", "Render a synthetic dataset to disk");
  gen->add_option("--config", config, "Scene spec JSON (default: built-in roadsim-64)");
  gen->add_option("-n,--count", n, "Number of samples")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", seed, "Override the scene seed");
  gen->add_option("--out", out, "Output directory");

  auto* train = app.add_subcommand("train", "Train one or more methods");
  train->add_option("--config", config, "Experiment config JSON");
  train->add_option("--method", method, "ce | focal | adversarial | elgan | gambling");
  train->add_option("--seed", seed, "Seed for a single-method run");
  train->add_option("--epochs", epochs, "Epoch override for a single-method run")->check(CLI::PositiveNumber);
  train->add_option("--dataset", dataset, "Dataset directory (generated there if missing)");
  train->add_option("--out", out, "Experiment output directory");
  train->add_flag("--resume", resume, "Continue interrupted runs from their saved state");
  train->add_flag("-v,--verbose", verbose, "Print per-epoch progress");

  auto* eval = app.add_subcommand("eval", "Evaluate a segmenter checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Segmenter checkpoint")->required();
  eval->add_option("--dataset", dataset, "Dataset directory")->required();
  eval->add_option("--split", split, "train | val | all");
  eval->add_option("--out", out, "Directory for metrics.csv and metrics.json");

  auto* report = app.add_subcommand("report", "Summarise an experiment directory");
  report->add_option("--out", out, "Experiment directory")->required();
  report->add_flag("--audit", audit, "Re-verify 10% of the cells from their checkpoints");

  auto* bets = app.add_subcommand("bet-inspect", "Render a gambler's betting map");
  bets->add_option("--checkpoint", checkpoint, "Segmenter checkpoint")->required();
  bets->add_option("--gambler", gambler, "Gambler checkpoint (default: gambler.ckpt beside the segmenter)");
  bets->add_option("--dataset", dataset, "Dataset directory")->required();
  bets->add_option("--split", split, "train | val | all");
  bets->add_option("--index", index, "Sample index within the split")->check(CLI::NonNegativeNumber);
  bets->add_option("--topk", topk, "Number of highest-bet pixels to list")->check(CLI::NonNegativeNumber);
  bets->add_option("--out", out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      synth::SceneSpec spec = load_spec(config);
      if (gen->count("--seed") > 0) spec.seed = seed;
      const auto dir = resolve_out(out, "dataset");
      const auto manifest = harness::cmd_generate(spec, n, dir);
      std::cout << "wrote " << manifest.at("n").get<int>() << " samples to " << dir.string() << " (hash "
                << manifest.at("dataset_hash").get<std::string>() << ")\n";
    } else if (*train) {
      harness::ExperimentConfig exp;
      if (!config.empty()) {
        exp = harness::load_experiment(config);
        if (!method.empty()) {
          const auto m = training::method_from_string(method);
          std::erase_if(exp.runs, [&](const harness::RunSpec& r) { return r.method != m; });
          require(!exp.runs.empty(), ErrorCode::kConfig, "config has no run for method '" + method + "'");
        }
        if (train->count("--seed") > 0) exp.seeds = {seed};
      } else {
        require(!method.empty(), ErrorCode::kConfig, "train needs --config or --method");
        harness::RunSpec run;
        run.method = training::method_from_string(method);
        run.name = method;
        exp.runs = {run};
        exp.seeds = {seed};
      }
      if (epochs > 0)
        for (auto& r : exp.runs) r.overrides["epochs"] = epochs;
      if (!out.empty() || config.empty()) exp.out_dir = resolve_out(out, "experiment");
      if (!dataset.empty()) exp.dataset.dir = dataset;
      for (const auto& r : harness::cmd_train(exp, {resume, verbose})) {
        const auto& rec = r.result.log.records.back();
        std::cout << r.name << " seed " << r.seed << ": iou " << rec.mean_iou << " bf " << rec.mean_bf
                  << " hausdorff " << rec.mean_hausdorff << " confidence " << rec.confidence_mean << " -> "
                  << r.dir.string() << "\n";
      }
    } else if (*eval) {
      const auto report_data = harness::cmd_eval(checkpoint, open_dataset(dataset), split);
      print_report(report_data);
      if (!out.empty()) {
        std::filesystem::create_directories(out);
        std::ofstream(std::filesystem::path(out) / "metrics.csv") << metrics::report_csv(report_data);
        std::ofstream(std::filesystem::path(out) / "metrics.json") << metrics::report_json(report_data) << "\n";
      }
    } else if (*report) {
      harness::ReportOptions opts;
      opts.audit = audit;
      const auto r = harness::cmd_report(out, opts);
      for (const auto& s : r.summaries) {
        std::cout << s.run << " (" << s.seeds << " seeds): iou " << s.iou_mean << " +- " << s.iou_std << ", bf "
                  << s.bf_mean << " +- " << s.bf_std << ", hausdorff " << s.hausdorff_mean << " +- "
                  << s.hausdorff_std << ", confidence " << s.confidence_mean << " +- " << s.confidence_std << "\n";
      }
      for (const auto& c : r.cells)
        if (!c.present) std::cout << "missing: " << c.run << " seed " << c.seed << "\n";
      bool audit_ok = true;
      for (const auto& a : r.audit) {
        std::cout << "audit " << a.run << " seed " << a.seed << ": " << (a.ok ? "ok" : "MISMATCH")
                  << " (max diff " << a.max_abs_diff << ")\n";
        audit_ok = audit_ok && a.ok;
      }
      if (!audit_ok) return 1;
    } else if (*bets) {
      const std::filesystem::path seg_path = checkpoint;
      const std::filesystem::path gam_path = gambler.empty() ? seg_path.parent_path() / "gambler.ckpt" : std::filesystem::path(gambler);
      const auto dir = resolve_out(out, "bets");
      const auto bi = harness::cmd_bet_inspect(gam_path, seg_path, open_dataset(dataset), split, index, topk, dir);
      std::cout << "row,col,weight,cross_entropy\n";
      for (const auto& p : bi.top) std::cout << p.row << ',' << p.col << ',' << p.weight << ',' << p.cross_entropy << "\n";
      std::cout << "mean ce " << bi.mean_ce << ", top 5% mean ce " << bi.top_mean_ce << ", bet cv " << bi.bet_cv
                << " -> " << dir.string() << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return harness::exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
