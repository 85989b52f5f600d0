#include "gamblenet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "gamblenet/png_io.hpp"
#include "gamblenet/rng.hpp"

namespace gamblenet::harness {
namespace {

constexpr double kAuditTolerance = 1e-9;
constexpr double kProfitFraction = 0.05;

std::string hex(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write '" + path.string() + "'");
    out << text;
    out.flush();
    require(static_cast<bool>(out), ErrorCode::kIo, "failed writing '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorCode::kIo, "cannot move '" + tmp + "' into place");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, "malformed JSON in '" + path.string() + "': " + e.what());
  }
}

void make_dirs(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create directory '" + dir.string() + "'");
}

std::string num(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), ErrorCode::kConfig, where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    require(ok.count(key) > 0, ErrorCode::kConfig, "unknown key '" + key + "' in " + where);
  }
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

std::array<std::uint8_t, 3> class_colour(const synth::SceneSpec& spec, int k) {
  const auto& c = k == 0 ? spec.background : spec.classes.at(static_cast<std::size_t>(k - 1)).color;
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  return {q(c[0]), q(c[1]), q(c[2])};
}

std::span<const synth::Sample> split_of(const synth::Dataset& dataset, const std::string& split) {
  return dataset.split(split);
}

}  // namespace

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kInvalidArgument: return 2;
    case ErrorCode::kIo: return 3;
    case ErrorCode::kNumerical: return 4;
    default: return 1;
  }
}

// Experiment configuration ---------------------------------------------------

nlohmann::json to_json(const ExperimentConfig& config) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : config.runs) {
    runs.push_back({{"name", r.name}, {"method", training::to_string(r.method)}, {"overrides", r.overrides}});
  }
  nlohmann::json dataset = {{"spec", synth::to_json(config.dataset.spec)}, {"n", config.dataset.n}};
  if (!config.dataset.dir.empty()) dataset["dir"] = config.dataset.dir.string();
  return {{"schema_version", kExperimentSchemaVersion},
          {"dataset", dataset},
          {"runs", runs},
          {"seeds", config.seeds},
          {"out_dir", config.out_dir.string()}};
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  check_keys(j, {"schema_version", "dataset", "runs", "seeds", "out_dir"}, "experiment config");
  require(j.contains("schema_version") && j.at("schema_version") == kExperimentSchemaVersion, ErrorCode::kConfig,
          "experiment config schema_version must be " + std::to_string(kExperimentSchemaVersion));
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      check_keys(d, {"dir", "spec", "n"}, "dataset");
      if (d.contains("dir")) c.dataset.dir = d.at("dir").get<std::string>();
      if (d.contains("spec")) c.dataset.spec = synth::scene_spec_from_json(d.at("spec"));
      if (d.contains("n")) c.dataset.n = d.at("n").get<int>();
    }
    require(j.contains("runs"), ErrorCode::kConfig, "experiment config needs a runs list");
    for (const auto& r : j.at("runs")) {
      check_keys(r, {"name", "method", "overrides"}, "run");
      RunSpec run;
      run.method = training::method_from_string(r.at("method").get<std::string>());
      run.name = r.value("name", training::to_string(run.method));
      if (r.contains("overrides")) run.overrides = r.at("overrides");
      c.runs.push_back(run);
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, std::string("invalid experiment config: ") + e.what());
  }
  validate(c);
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, "malformed config '" + path.string() + "': " + e.what());
  }
  return experiment_from_json(j);
}

void validate(const ExperimentConfig& config) {
  require(!config.runs.empty(), ErrorCode::kConfig, "experiment needs at least one run");
  require(!config.seeds.empty(), ErrorCode::kConfig, "experiment needs at least one seed");
  require(config.dataset.n >= 0, ErrorCode::kConfig, "dataset size must be non-negative");
  synth::validate(config.dataset.spec);
  std::set<std::string> names;
  for (const auto& r : config.runs) {
    require(!r.name.empty() && r.name.find('/') == std::string::npos, ErrorCode::kConfig,
            "run name '" + r.name + "' is not a valid directory name");
    require(names.insert(r.name).second, ErrorCode::kConfig, "duplicate run name '" + r.name + "'");
    require(r.overrides.is_object(), ErrorCode::kConfig, "run overrides must be an object");
    resolve_run(r, config.seeds.front());
  }
  std::set<std::uint64_t> seeds(config.seeds.begin(), config.seeds.end());
  require(seeds.size() == config.seeds.size(), ErrorCode::kConfig, "duplicate seeds");
}

training::TrainConfig resolve_run(const RunSpec& run, std::uint64_t seed) {
  nlohmann::json j = training::to_json(training::default_config(run.method, seed));
  require(!run.overrides.contains("method") ||
              run.overrides.at("method") == training::to_string(run.method),
          ErrorCode::kConfig, "run overrides may not change the method");
  require(!run.overrides.contains("seed"), ErrorCode::kConfig, "seeds come from the experiment seed list");
  j.merge_patch(run.overrides);
  return training::train_config_from_json(j);
}

std::filesystem::path run_dir(const std::filesystem::path& out_dir, const std::string& name, std::uint64_t seed) {
  return out_dir / name / ("seed_" + std::to_string(seed));
}

synth::Dataset load_or_generate(const DatasetRef& ref) {
  if (ref.dir.empty()) return synth::generate_dataset(ref.spec, ref.n, -1);
  if (std::filesystem::exists(ref.dir / "manifest.json")) return synth::read_dataset(ref.dir);
  synth::write_dataset(ref.spec, ref.n, ref.dir);
  return synth::read_dataset(ref.dir);
}

// Commands -------------------------------------------------------------------

nlohmann::json cmd_generate(const synth::SceneSpec& spec, int n, const std::filesystem::path& out_dir) {
  return synth::write_dataset(spec, n, out_dir);
}

std::vector<TrainedRun> cmd_train(const ExperimentConfig& config, const TrainOptions& options) {
  validate(config);
  make_dirs(config.out_dir);
  ExperimentConfig resolved = config;
  if (resolved.dataset.dir.empty()) resolved.dataset.dir = config.out_dir / "dataset";
  resolved.dataset.dir = std::filesystem::absolute(resolved.dataset.dir);
  const synth::Dataset dataset = load_or_generate(resolved.dataset);
  resolved.dataset.spec = dataset.spec;
  resolved.dataset.n = static_cast<int>(dataset.samples.size());
  write_text(config.out_dir / "experiment.json", to_json(resolved).dump(2) + "\n");

  std::vector<TrainedRun> out;
  for (const auto& run : config.runs) {
    for (std::uint64_t seed : config.seeds) {
      TrainedRun tr{run.name, seed, run_dir(config.out_dir, run.name, seed), {}};
      training::RunOptions opts;
      opts.out_dir = tr.dir;
      opts.resume = options.resume && std::filesystem::exists(tr.dir / "state.json");
      opts.verbose = options.verbose;
      if (options.verbose) std::cerr << "[train] " << run.name << " seed " << seed << "\n";
      tr.result = training::run_training(resolve_run(run, seed), dataset, opts);
      out.push_back(std::move(tr));
    }
  }
  return out;
}

metrics::MetricReport cmd_eval(const std::filesystem::path& checkpoint, const synth::Dataset& dataset,
                               const std::string& split) {
  models::Model seg = models::load_checkpoint(checkpoint);
  require(seg.spec().role == models::Role::kSegmenter, ErrorCode::kConfig,
          "'" + checkpoint.string() + "' is not a segmenter checkpoint");
  const int c = dataset.spec.num_classes();
  require(seg.spec().output_channels == c, ErrorCode::kConfig,
          "checkpoint predicts " + std::to_string(seg.spec().output_channels) + " classes but the dataset has " +
              std::to_string(c));
  const auto samples = split_of(dataset, split);
  require(!samples.empty(), ErrorCode::kConfig, "split '" + split + "' is empty");
  return training::evaluate(seg, samples, c);
}

// Report ----------------------------------------------------------------------

io::Image8 render_panel(const synth::SceneSpec& spec, const synth::Sample& sample, const LabelMap& prediction,
                        const Tensor& bets) {
  const int h = sample.clean.height, w = sample.clean.width;
  require(prediction.height == h && prediction.width == w, ErrorCode::kShapeMismatch, "panel size mismatch");
  const int gap = 2;
  const int tiles = bets.empty() ? 3 : 4;
  io::Image8 img{tiles * w + (tiles - 1) * gap, h, 3, {}};
  img.pixels.assign(static_cast<std::size_t>(img.width) * h * 3, 255);
  auto put = [&](int tile, int r, int c, std::array<std::uint8_t, 3> rgb) {
    const std::size_t at = (static_cast<std::size_t>(r) * img.width + tile * (w + gap) + c) * 3;
    std::copy(rgb.begin(), rgb.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(at));
  };
  const io::Image8 rgb = io::to_rgb8(sample.rgb);
  const io::Image8 gray = bets.empty() ? io::Image8{} : io::to_gray8_normalized(bets);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * w + c;
      put(0, r, c, {rgb.pixels[p * 3], rgb.pixels[p * 3 + 1], rgb.pixels[p * 3 + 2]});
      put(1, r, c, class_colour(spec, sample.clean.classes[p]));
      put(2, r, c, class_colour(spec, prediction.classes[p]));
      if (!bets.empty()) put(3, r, c, {gray.pixels[p], gray.pixels[p], gray.pixels[p]});
    }
  }
  return img;
}

namespace {

std::vector<std::pair<std::string, std::uint64_t>> expected_cells(const std::filesystem::path& dir,
                                                                   const nlohmann::json* experiment) {
  std::vector<std::pair<std::string, std::uint64_t>> cells;
  if (experiment != nullptr) {
    const ExperimentConfig cfg = experiment_from_json(*experiment);
    for (const auto& r : cfg.runs)
      for (auto s : cfg.seeds) cells.emplace_back(r.name, s);
    return cells;
  }
  // No experiment record: discover run directories.
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    for (const auto& sub : std::filesystem::directory_iterator(entry.path())) {
      const std::string name = sub.path().filename().string();
      if (sub.is_directory() && name.rfind("seed_", 0) == 0 && std::filesystem::exists(sub.path() / "summary.json")) {
        cells.emplace_back(entry.path().filename().string(), std::stoull(name.substr(5)));
      }
    }
  }
  std::sort(cells.begin(), cells.end());
  return cells;
}

}  // namespace

ComparisonReport cmd_report(const std::filesystem::path& experiment_dir, const ReportOptions& options) {
  require(std::filesystem::is_directory(experiment_dir), ErrorCode::kIo,
          "experiment directory '" + experiment_dir.string() + "' does not exist");
  std::optional<nlohmann::json> experiment;
  if (std::filesystem::exists(experiment_dir / "experiment.json")) experiment = read_json(experiment_dir / "experiment.json");
  const auto cells = expected_cells(experiment_dir, experiment ? &*experiment : nullptr);

  ComparisonReport report;
  std::map<std::string, nlohmann::json> configs;
  for (const auto& [name, seed] : cells) {
    ReportCell cell;
    cell.run = name;
    cell.seed = seed;
    const auto dir = run_dir(experiment_dir, name, seed);
    if (std::filesystem::exists(dir / "summary.json")) {
      const nlohmann::json s = read_json(dir / "summary.json");
      if (s.contains("final")) {
        cell.present = true;
        cell.method = s.at("method");
        cell.mean_iou = s["final"]["mean_iou"];
        cell.mean_bf = s["final"]["mean_bf"];
        cell.mean_hausdorff = s["final"]["mean_hausdorff"];
        cell.confidence_window_mean = s["final"]["confidence_window_mean"];
        cell.config_hash = s.at("config_hash");
        cell.segmenter_hash = s.at("segmenter_hash");
        cell.checkpoint = dir / "segmenter.ckpt";
      }
    }
    report.cells.push_back(cell);
  }
  require(std::any_of(report.cells.begin(), report.cells.end(), [](const ReportCell& c) { return c.present; }),
          ErrorCode::kIo, "no completed runs under '" + experiment_dir.string() + "'");

  // Comparison table; missing cells stay as explicit gaps.
  std::ostringstream table;
  table << "run,method,seed,status,mean_iou,mean_bf,mean_hausdorff,confidence_window_mean,config_hash,segmenter_hash,"
           "checkpoint\n";
  for (const auto& c : report.cells) {
    table << c.run << ',' << c.method << ',' << c.seed << ',' << (c.present ? "ok" : "missing") << ',';
    if (c.present) {
      table << num(c.mean_iou) << ',' << num(c.mean_bf) << ',' << num(c.mean_hausdorff) << ','
            << num(c.confidence_window_mean) << ',' << c.config_hash << ',' << c.segmenter_hash << ','
            << std::filesystem::relative(c.checkpoint, experiment_dir).string();
    } else {
      table << ",,,,,,";
    }
    table << '\n';
  }
  write_text(experiment_dir / "comparison.csv", table.str());
  report.files.push_back(experiment_dir / "comparison.csv");

  std::vector<std::string> order;
  for (const auto& c : report.cells)
    if (std::find(order.begin(), order.end(), c.run) == order.end()) order.push_back(c.run);
  std::ostringstream summary;
  summary << "run,seeds,iou_mean,iou_std,bf_mean,bf_std,hausdorff_mean,hausdorff_std,confidence_mean,confidence_std\n";
  for (const auto& run : order) {
    std::vector<double> iou, bf, hd, conf;
    for (const auto& c : report.cells) {
      if (c.run != run || !c.present) continue;
      iou.push_back(c.mean_iou);
      bf.push_back(c.mean_bf);
      hd.push_back(c.mean_hausdorff);
      conf.push_back(c.confidence_window_mean);
    }
    MethodSummary m;
    m.run = run;
    m.seeds = static_cast<int>(iou.size());
    std::tie(m.iou_mean, m.iou_std) = mean_std(iou);
    std::tie(m.bf_mean, m.bf_std) = mean_std(bf);
    std::tie(m.hausdorff_mean, m.hausdorff_std) = mean_std(hd);
    std::tie(m.confidence_mean, m.confidence_std) = mean_std(conf);
    report.summaries.push_back(m);
    summary << run << ',' << m.seeds;
    if (m.seeds == 0) {
      summary << ",,,,,,,,\n";
      continue;
    }
    for (double v : {m.iou_mean, m.iou_std, m.bf_mean, m.bf_std, m.hausdorff_mean, m.hausdorff_std,
                     m.confidence_mean, m.confidence_std})
      summary << ',' << num(v);
    summary << '\n';
  }
  write_text(experiment_dir / "comparison_summary.csv", summary.str());
  report.files.push_back(experiment_dir / "comparison_summary.csv");

  // Confidence-over-time series, one file per completed cell.
  const auto series_dir = experiment_dir / "confidence";
  make_dirs(series_dir);
  for (const auto& c : report.cells) {
    if (!c.present) continue;
    const nlohmann::json s = read_json(run_dir(experiment_dir, c.run, c.seed) / "summary.json");
    const training::TrainLog log = training::TrainLog::from_json(s.at("log"));
    std::ostringstream csv;
    csv << "step,mean,std\n";
    for (const auto& r : log.records) csv << r.step << ',' << num(r.confidence_mean) << ',' << num(r.confidence_std) << '\n';
    const auto path = series_dir / (c.run + "_seed_" + std::to_string(c.seed) + ".csv");
    write_text(path, csv.str());
    report.files.push_back(path);
  }

  // Dataset is only needed for panels and audits.
  const bool want_panels = std::any_of(report.cells.begin(), report.cells.end(), [](const ReportCell& c) {
    return c.present && c.method == "gambling";
  });
  std::optional<synth::Dataset> dataset;
  auto need_dataset = [&]() -> const synth::Dataset& {
    if (!dataset) {
      require(experiment.has_value(), ErrorCode::kIo, "experiment.json is required to locate the dataset");
      dataset = load_or_generate(experiment_from_json(*experiment).dataset);
    }
    return *dataset;
  };

  if (want_panels && options.panel_samples > 0 && experiment) {
    const auto panel_dir = experiment_dir / "panels";
    make_dirs(panel_dir);
    const synth::Dataset& ds = need_dataset();
    const auto val = ds.validation();
    for (const auto& c : report.cells) {
      if (!c.present || c.method != "gambling") continue;
      const auto dir = run_dir(experiment_dir, c.run, c.seed);
      models::Model seg = models::load_checkpoint(dir / "segmenter.ckpt");
      models::Model gam = models::load_checkpoint(dir / "gambler.ckpt");
      const double beta = read_json(dir / "resolved_config.json").value("bet_smoothing", 0.02);
      const int count = std::min<int>(options.panel_samples, static_cast<int>(val.size()));
      for (int i = 0; i < count; ++i) {
        const BetInspection bi = inspect_bets(gam, seg, val[static_cast<std::size_t>(i)], beta, 0);
        const LabelMap pred = argmax(seg.predict(val[static_cast<std::size_t>(i)].rgb));
        const auto path = panel_dir / (c.run + "_seed_" + std::to_string(c.seed) + "_" + std::to_string(i) + ".png");
        io::write_png(path, render_panel(ds.spec, val[static_cast<std::size_t>(i)], pred, bi.bets));
        report.files.push_back(path);
      }
    }
  }

  if (options.audit) {
    std::vector<std::size_t> present;
    for (std::size_t i = 0; i < report.cells.size(); ++i)
      if (report.cells[i].present) present.push_back(i);
    Rng rng(options.audit_seed);
    for (std::size_t i = present.size(); i > 1; --i) std::swap(present[i - 1], present[rng.next() % i]);
    const auto count = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(options.audit_fraction * static_cast<double>(present.size()))));
    present.resize(std::min(count, present.size()));
    const synth::Dataset& ds = need_dataset();
    std::ostringstream audit_csv;
    audit_csv << "run,seed,ok,max_abs_diff\n";
    for (std::size_t idx : present) {
      const ReportCell& c = report.cells[idx];
      const auto dir = run_dir(experiment_dir, c.run, c.seed);
      const training::TrainConfig cfg = training::train_config_from_json(read_json(dir / "resolved_config.json"));
      models::Model seg = models::load_checkpoint(c.checkpoint);
      const auto m = training::evaluate(seg, ds.validation(), ds.spec.num_classes(), cfg.eval_samples);
      const nlohmann::json s = read_json(dir / "summary.json");
      AuditEntry e{c.run, c.seed, true, 0.0};
      for (auto [stored, fresh] : {std::pair{c.mean_iou, m.mean_iou}, std::pair{c.mean_bf, m.mean_bf},
                                   std::pair{c.mean_hausdorff, m.mean_hausdorff},
                                   std::pair{s["final"]["confidence_mean"].get<double>(), m.confidence.mean}}) {
        e.max_abs_diff = std::max(e.max_abs_diff, std::abs(stored - fresh));
      }
      e.ok = e.max_abs_diff <= kAuditTolerance && hex(seg.parameter_hash()) == c.segmenter_hash &&
             hex(training::config_hash(cfg)) == c.config_hash;
      report.audit.push_back(e);
      audit_csv << e.run << ',' << e.seed << ',' << (e.ok ? "true" : "false") << ',' << num(e.max_abs_diff) << '\n';
    }
    write_text(experiment_dir / "audit.csv", audit_csv.str());
    report.files.push_back(experiment_dir / "audit.csv");
  }
  return report;
}

// Betting maps ------------------------------------------------------------------

BetInspection inspect_bets(models::Model& gambler, models::Model& segmenter, const synth::Sample& sample,
                           double bet_smoothing, int topk) {
  require(gambler.spec().role == models::Role::kGambler, ErrorCode::kConfig, "not a gambler checkpoint");
  require(segmenter.spec().role == models::Role::kSegmenter, ErrorCode::kConfig, "not a segmenter checkpoint");
  const int c = segmenter.spec().output_channels;
  require(gambler.spec().input_channels == sample.rgb.channels() + c, ErrorCode::kConfig,
          "gambler and segmenter checkpoints disagree on the class count");
  require(topk >= 0, ErrorCode::kInvalidArgument, "topk must be non-negative");
  const Tensor pred = segmenter.predict(sample.rgb);
  const Tensor raw = gambler.predict(concat_channels(sample.rgb, pred));
  BetInspection out;
  out.bets = losses::normalize_betting_map(raw, bet_smoothing).weights;
  const Tensor ce = losses::pixel_cross_entropy(pred, sample.clean);
  const training::BetProfit profit = training::bet_profit(out.bets, pred, sample.clean, kProfitFraction);
  out.mean_ce = profit.mean_ce;
  out.top_mean_ce = profit.top_mean_ce;
  out.bet_cv = profit.bet_cv;

  std::vector<std::size_t> order(out.bets.size());
  std::iota(order.begin(), order.end(), 0);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(topk), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return out.bets[a] != out.bets[b] ? out.bets[a] > out.bets[b] : a < b;
                    });
  const int w = out.bets.width();
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t p = order[i];
    out.top.push_back({static_cast<int>(p) / w, static_cast<int>(p) % w, out.bets[p], ce[p]});
  }
  return out;
}

BetInspection cmd_bet_inspect(const std::filesystem::path& gambler_ckpt, const std::filesystem::path& segmenter_ckpt,
                              const synth::Dataset& dataset, const std::string& split, int index, int topk,
                              const std::filesystem::path& out_dir) {
  models::Model gam = models::load_checkpoint(gambler_ckpt);
  models::Model seg = models::load_checkpoint(segmenter_ckpt);
  require(seg.spec().output_channels == dataset.spec.num_classes(), ErrorCode::kConfig,
          "segmenter class count does not match the dataset");
  const auto samples = split_of(dataset, split);
  require(index >= 0 && static_cast<std::size_t>(index) < samples.size(), ErrorCode::kInvalidArgument,
          "sample index " + std::to_string(index) + " is outside split '" + split + "'");
  double beta = 0.02;
  const auto resolved = gambler_ckpt.parent_path() / "resolved_config.json";
  if (std::filesystem::exists(resolved)) beta = read_json(resolved).value("bet_smoothing", beta);

  const synth::Sample& sample = samples[static_cast<std::size_t>(index)];
  BetInspection bi = inspect_bets(gam, seg, sample, beta, topk);
  make_dirs(out_dir);
  io::write_png(out_dir / "bets.png", io::to_gray8_normalized(bi.bets));
  io::write_png(out_dir / "panel.png", render_panel(dataset.spec, sample, argmax(seg.predict(sample.rgb)), bi.bets));
  nlohmann::json top = nlohmann::json::array();
  for (const auto& p : bi.top) top.push_back({{"row", p.row}, {"col", p.col}, {"weight", p.weight}, {"cross_entropy", p.cross_entropy}});
  const nlohmann::json j = {{"split", split},         {"index", index},
                            {"bet_smoothing", beta},  {"mean_ce", bi.mean_ce},
                            {"top5pct_mean_ce", bi.top_mean_ce}, {"bet_cv", bi.bet_cv},
                            {"top", top}};
  write_text(out_dir / "bets.json", j.dump(2) + "\n");
  return bi;
}

}  // namespace gamblenet::harness
