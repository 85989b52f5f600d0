// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "gamblenet/harness.hpp"
#include "oracles.hpp"

using namespace gamblenet;

namespace {

// Trend-run settings shared by criteria 5-7.
constexpr int kTrendEpochs = 30;
constexpr int kTrendSamples = 600;  // 500 train / 100 val
const std::vector<std::uint64_t> kTrendSeeds = {1, 2, 3};
constexpr double kRunBudgetSeconds = 30 * 60;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

Tensor random_tensor(std::mt19937_64& rng, int c, int h, int w, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(c, h, w);
  for (double& v : t.values()) v = u(rng);
  return t;
}

void jitter(models::Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& p : m.parameters())
    for (double& v : p.value.values()) v += n(rng);
}

models::ArchitectureSpec small(models::Role role, int blocks, std::uint64_t seed) {
  models::ArchitectureSpec s;
  s.role = role;
  s.blocks = blocks;
  s.base_width = 4;
  s.seed = seed;
  return s;
}

// 1 ---------------------------------------------------------------------------

Outcome gradients() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t trial = 0; trial < 3; ++trial) {
    std::mt19937_64 rng(100 + trial);
    const int c = 3;
    const Tensor image = random_tensor(rng, 3, 4, 4);
    const LabelMap label = oracle::random_noise_map(rng, 4, 4, c);
    models::Model seg = models::build_segmenter(small(models::Role::kSegmenter, 2, 10 + trial), c);
    models::Model gam = models::build_gambler(small(models::Role::kGambler, 1, 20 + trial), c);
    jitter(seg, 30 + trial);
    jitter(gam, 40 + trial);
    for (auto scale : {losses::BetScale::kPerPixel, losses::BetScale::kBudget}) {
      gam.set_trainable(false);
      const auto s = models::gradient_check(seg, image, [&](nn::Graph& g, const models::Forward& f) {
        const nn::Var bets = nn::normalize_bets(g, gam.forward(g, nn::concat(g, g.constant(image), f.output)).output, 0.02);
        return nn::subtract(g, nn::cross_entropy(g, f.output, label), nn::gambling(g, f.output, label, bets, scale));
      });
      gam.set_trainable(true);
      const Tensor pred = seg.predict(image);
      const auto gr = models::gradient_check(gam, concat_channels(image, pred), [&](nn::Graph& g, const models::Forward& f) {
        return nn::gambling(g, g.constant(pred), label, nn::normalize_bets(g, f.output, 0.02), scale);
      });
      gam.set_trainable(false);
      const double flow_b = models::input_gradient_check(pred, [&](nn::Graph& g, nn::Var p) {
        const nn::Var bets = nn::normalize_bets(g, gam.forward(g, nn::concat(g, g.constant(image), p)).output, 0.02);
        return nn::subtract(g, nn::cross_entropy(g, p, label), nn::gambling(g, p, label, bets, scale));
      });
      gam.set_trainable(true);
      worst = std::max({worst, s.max_error(), gr.max_error(), flow_b});
      checked += s.checked + gr.checked + pred.size();
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= 1e-5 && secs < 120.0,
          fmt("max relative error %.2e over %zu coordinates (bound 1e-5), %.1f s", worst, checked, secs)};
}

// 2 ---------------------------------------------------------------------------

Outcome budget_and_zero_sum() {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> side(1, 24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  int calls = 0;
  for (int i = 0; i < 1000; ++i) {
    const double beta = std::array{0.0, 0.02, 1.0}[static_cast<std::size_t>(i % 3)];
    Tensor raw(1, side(rng), side(rng));
    for (double& v : raw.values()) v = u(rng);
    double s = 0.0;
    for (double v : losses::normalize_betting_map(raw, beta).weights.values()) s += v;
    worst = std::max(worst, std::abs(s - 1.0));
    ++calls;
  }

  int exact = 0, batches = 0;
  for (std::uint64_t t = 0; t < 10; ++t) {
    training::TrainConfig cfg = training::default_config(training::Method::kGambling, 50 + t);
    cfg.segmenter.base_width = 4;
    cfg.critic.base_width = 4;
    cfg.bet_scale = t % 2 == 0 ? losses::BetScale::kBudget : losses::BetScale::kPerPixel;
    training::Trainer tr(cfg, 4);
    for (int b = 0; b < 10; ++b) {
      training::Batch batch;
      const int n = 1 + b % 3;
      for (int k = 0; k < n; ++k) {
        batch.images.push_back(random_tensor(rng, 3, 16, 16));
        batch.labels.push_back(oracle::random_blob_map(rng, 16, 16, 4));
      }
      const double gam = tr.critic_gradient(batch).loss;
      const double seg = tr.segmenter_gradient(batch).adversarial_term;
      exact += gam + seg == 0.0;
      ++batches;
      // Move both players so later batches see different models.
      tr.critic_step(batch, 1e-3);
      tr.segmenter_step(batch, 1e-3);
    }
  }
  return {worst <= 1e-6 && exact == batches,
          fmt("%d maps, max |sum - 1| = %.2e; zero-sum exact on %d/%d batches", calls, worst, exact, batches)};
}

// 3 ---------------------------------------------------------------------------

Outcome focal_reduction() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> side(1, 16), classes(2, 8);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int c = classes(rng), h = side(rng), w = side(rng);
    const Tensor pred = oracle::random_prediction(rng, c, h, w);
    const LabelMap label = oracle::random_noise_map(rng, h, w, c);
    worst = std::max(worst, std::abs(losses::focal_loss(pred, label, 0.0) - losses::mean_cross_entropy(pred, label)));
  }
  return {worst <= 1e-12, fmt("100 instances, max |focal(0) - CE| = %.2e", worst)};
}

// 4 ---------------------------------------------------------------------------

Outcome metric_oracles() {
  std::mt19937_64 rng(4);
  double worst_hd = 0.0, worst_bf = 0.0;
  int hd_pairs = 0;
  for (int t = 0; t < 200; ++t) {
    const LabelMap a = t % 2 ? oracle::random_noise_map(rng, 16, 16, 4) : oracle::random_blob_map(rng, 16, 16, 4);
    const LabelMap b = oracle::random_blob_map(rng, 16, 16, 4);
    const auto ca = oracle::contours(a, 4), cb = oracle::contours(b, 4);
    const auto sa = metrics::extract_contours(a, 4), sb = metrics::extract_contours(b, 4);
    for (int k = 0; k < 4; ++k) {
      const auto& x = ca[std::size_t(k)];
      const auto& y = cb[std::size_t(k)];
      if (x.empty() || y.empty()) continue;
      worst_hd = std::max(worst_hd, std::abs(metrics::modified_hausdorff(sa.per_class[std::size_t(k)], sb.per_class[std::size_t(k)]) -
                                             oracle::hausdorff(x, y)));
      ++hd_pairs;
    }
    for (double tau : {0.0, 1.0, metrics::default_bf_tolerance(16, 16), 2.5}) {
      const auto expect = oracle::bf_mean(a, b, 4, tau);
      if (expect) worst_bf = std::max(worst_bf, std::abs(metrics::bf_score(a, b, 4, tau).mean - *expect));
    }
  }
  const double hand_hd = metrics::modified_hausdorff(std::vector<metrics::Point>{{0, 0}},
                                                     std::vector<metrics::Point>{{0, 0}, {0, 3}});
  LabelMap label(1, 4, 0), pred(1, 4, 0);
  label.classes = {1, 1, 0, 0};
  pred.classes = {0, 1, 1, 0};
  const double iou = *metrics::confusion_and_iou(pred, label, 2).per_class[1];
  const bool hands = hand_hd == 0.75 && iou == 1.0 / 3.0;
  return {worst_hd <= 1e-9 && worst_bf <= 1e-9 && hands,
          fmt("200 pairs: max Hausdorff diff %.2e over %d class pairs, max BF diff %.2e; hand values %.17g and %.17g",
              worst_hd, hd_pairs, worst_bf, hand_hd, iou)};
}

// Trend runs ------------------------------------------------------------------

harness::ExperimentConfig trend_experiment(const std::filesystem::path& root, const std::string& name, double noise,
                                           std::vector<training::Method> methods) {
  harness::ExperimentConfig exp;
  exp.dataset.spec = synth::roadsim64();
  exp.dataset.spec.noise_rate = noise;
  exp.dataset.n = kTrendSamples;
  exp.dataset.dir = root / (name + "_dataset");
  for (auto m : methods) {
    harness::RunSpec r;
    r.method = m;
    r.name = training::to_string(m);
    r.overrides = {{"epochs", kTrendEpochs}};
    exp.runs.push_back(r);
  }
  exp.seeds = kTrendSeeds;
  exp.out_dir = root / name;
  return exp;
}

struct TrendData {
  std::filesystem::path dir;
  harness::ComparisonReport report;
  double slowest_run = 0.0;
};

TrendData run_trend(const harness::ExperimentConfig& exp, bool reuse) {
  TrendData d;
  d.dir = exp.out_dir;
  const auto runs = harness::cmd_train(exp, {reuse, false});
  for (const auto& r : runs) {
    const double secs = r.result.log.records.back().wall_seconds;
    d.slowest_run = std::max(d.slowest_run, secs);
    std::cerr << fmt("  %s seed %llu: %.0f s\n", r.name.c_str(), static_cast<unsigned long long>(r.seed), secs);
  }
  harness::ReportOptions opts;
  opts.audit = true;
  d.report = harness::cmd_report(exp.out_dir, opts);
  return d;
}

const harness::MethodSummary& summary_of(const harness::ComparisonReport& r, const std::string& run) {
  for (const auto& s : r.summaries)
    if (s.run == run) return s;
  fail(ErrorCode::kIo, "no summary for run " + run);
}

bool audits_ok(const harness::ComparisonReport& r) {
  return !r.audit.empty() && std::all_of(r.audit.begin(), r.audit.end(), [](const auto& a) { return a.ok; });
}

std::string per_seed(const harness::ComparisonReport& r, const std::string& run, double harness::ReportCell::*field) {
  std::ostringstream out;
  out << "[";
  bool first = true;
  for (const auto& c : r.cells) {
    if (c.run != run || !c.present) continue;
    out << (first ? "" : " ") << fmt("%.4f", c.*field);
    first = false;
  }
  out << "]";
  return out.str();
}

// 5 ---------------------------------------------------------------------------

Outcome confidence_trend(const TrendData& d) {
  const double ce = summary_of(d.report, "ce").confidence_mean;
  const double adv = summary_of(d.report, "adversarial").confidence_mean;
  const double gam = summary_of(d.report, "gambling").confidence_mean;
  const bool ok = adv >= 0.97 && std::abs(gam - ce) <= 0.05 && adv - gam >= 0.03 &&
                  d.slowest_run <= kRunBudgetSeconds && audits_ok(d.report);
  const auto f = &harness::ReportCell::confidence_window_mean;
  return {ok, fmt("final-window confidence over 3 seeds: ce %.4f %s, adversarial %.4f %s, gambling %.4f %s; "
                  "adv >= 0.97, |gam - ce| = %.4f <= 0.05, adv - gam = %.4f >= 0.03; slowest run %.0f s",
                  ce, per_seed(d.report, "ce", f).c_str(), adv, per_seed(d.report, "adversarial", f).c_str(), gam,
                  per_seed(d.report, "gambling", f).c_str(), std::abs(gam - ce), adv - gam, d.slowest_run)};
}

// 6 ---------------------------------------------------------------------------

Outcome structural_trend(const TrendData& d) {
  const auto& ce = summary_of(d.report, "ce");
  const auto& gam = summary_of(d.report, "gambling");
  const bool ok = gam.bf_mean >= ce.bf_mean && gam.hausdorff_mean <= ce.hausdorff_mean &&
                  d.slowest_run <= kRunBudgetSeconds && audits_ok(d.report);
  return {ok, fmt("10%% label noise, 3 seeds: BF gambling %.4f vs ce %.4f (margin %+.4f); Hausdorff gambling %.3f vs "
                  "ce %.3f (margin %+.3f); IoU gambling %.4f vs ce %.4f",
                  gam.bf_mean, ce.bf_mean, gam.bf_mean - ce.bf_mean, gam.hausdorff_mean, ce.hausdorff_mean,
                  ce.hausdorff_mean - gam.hausdorff_mean, gam.iou_mean, ce.iou_mean)};
}

// 7 ---------------------------------------------------------------------------

Outcome profitability(const TrendData& d) {
  const synth::Dataset ds = synth::read_dataset(d.dir.parent_path() / (d.dir.filename().string() + "_dataset"));
  const auto val = ds.validation();
  bool ok = true;
  std::ostringstream detail;
  detail << "top-5% bet CE / mean CE on imperfect validation samples:";
  for (auto seed : kTrendSeeds) {
    const auto dir = harness::run_dir(d.dir, "gambling", seed);
    models::Model seg = models::load_checkpoint(dir / "segmenter.ckpt");
    models::Model gam = models::load_checkpoint(dir / "gambler.ckpt");
    double top = 0.0, mean = 0.0;
    int used = 0;
    for (const auto& s : val) {
      if (argmax(seg.predict(s.rgb)) == s.clean) continue;
      const auto bi = harness::inspect_bets(gam, seg, s, 0.02, 0);
      top += bi.top_mean_ce;
      mean += bi.mean_ce;
      ++used;
    }
    const double ratio = used > 0 ? top / mean : 0.0;
    ok = ok && used > 0 && ratio >= 1.5;
    detail << fmt(" seed %llu %.2fx (%d samples)", static_cast<unsigned long long>(seed), ratio, used);
  }
  detail << "; bound 1.5x";
  return {ok, detail.str()};
}

// 8 ---------------------------------------------------------------------------

Outcome plumbing(const std::filesystem::path& root) {
  const auto start = std::chrono::steady_clock::now();
  const auto dir = root / "smoke";
  std::filesystem::remove_all(dir);
  std::ostringstream detail;
  bool ok = true;

  // Dataset round trip.
  const synth::SceneSpec spec = synth::roadsim64();
  synth::write_dataset(spec, 50, dir / "dataset");
  const synth::Dataset disk = synth::read_dataset(dir / "dataset");
  const synth::Dataset mem = synth::generate_dataset(spec, 50, -1);
  bool same = disk.samples.size() == 50;
  for (std::size_t i = 0; same && i < 50; ++i) {
    same = disk.samples[i].rgb == mem.samples[i].rgb && disk.samples[i].clean == mem.samples[i].clean &&
           disk.samples[i].noisy == mem.samples[i].noisy;
  }
  ok = ok && same;
  detail << "round trip " << (same ? "ok" : "MISMATCH");

  // All five methods end to end.
  std::vector<std::string> failures;
  for (auto m : {training::Method::kCe, training::Method::kFocal, training::Method::kAdversarial,
                 training::Method::kElgan, training::Method::kGambling}) {
    training::TrainConfig cfg = training::default_config(m, 1);
    cfg.epochs = 2;
    try {
      const auto r = training::run_training(cfg, disk, {dir / training::to_string(m)});
      if (r.log.records.size() != 2) failures.push_back(training::to_string(m));
    } catch (const Error& e) {
      failures.push_back(std::string(training::to_string(m)) + ": " + e.what());
    }
  }
  ok = ok && failures.empty();
  detail << "; five methods " << (failures.empty() ? "ok" : "FAILED " + failures.front());

  // Determinism.
  training::TrainConfig cfg = training::default_config(training::Method::kGambling, 2);
  cfg.epochs = 2;
  const auto a = training::run_training(cfg, disk);
  const auto b = training::run_training(cfg, disk);
  const bool det = a.log.same_values(b.log) && a.segmenter_hash == b.segmenter_hash && a.critic_hash == b.critic_hash;
  ok = ok && det;
  detail << "; determinism " << (det ? "ok" : "MISMATCH");

  // Resume.
  training::RunOptions stop{dir / "resume"};
  stop.stop_after_epoch = 1;
  training::run_training(cfg, disk, stop);
  training::RunOptions cont{dir / "resume"};
  cont.resume = true;
  const auto resumed = training::run_training(cfg, disk, cont);
  const bool res = resumed.log.same_values(a.log) && resumed.segmenter_hash == a.segmenter_hash &&
                   resumed.critic_hash == a.critic_hash;
  ok = ok && res;
  detail << "; resume " << (res ? "ok" : "MISMATCH");

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ok = ok && secs < 300.0;
  detail << fmt("; %.0f s (bound 300 s)", secs);
  std::filesystem::remove_all(dir);
  return {ok, detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-8"};
  std::vector<int> only;
  std::string out = "acceptance_runs";
  bool reuse = false;
  app.add_option("criteria", only, "Criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--out", out, "Directory for trend-run artifacts");
  app.add_flag("--reuse", reuse, "Resume existing trend runs instead of retraining");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8}
                                              : std::set<int>(only.begin(), only.end());
  const std::filesystem::path root = std::filesystem::absolute(out);

  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!selected.count(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << " [" << name << "]: " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
  };

  report(1, "gradient correctness", gradients);
  report(2, "budget and zero-sum", budget_and_zero_sum);
  report(3, "focal reduction", focal_reduction);
  report(4, "metric oracles", metric_oracles);

  std::optional<TrendData> clean, noisy;
  auto clean_runs = [&]() -> const TrendData& {
    if (!clean) {
      std::cerr << "training clean trend runs\n";
      clean = run_trend(trend_experiment(root, "clean", 0.0,
                                         {training::Method::kCe, training::Method::kAdversarial,
                                          training::Method::kGambling}),
                        reuse);
    }
    return *clean;
  };
  report(5, "confidence trend", [&] { return confidence_trend(clean_runs()); });
  report(6, "structural gain under noise", [&] {
    std::cerr << "training noisy trend runs\n";
    noisy = run_trend(
        trend_experiment(root, "noisy", 0.1, {training::Method::kCe, training::Method::kGambling}), reuse);
    return structural_trend(*noisy);
  });
  report(7, "gambler profitability", [&] { return profitability(clean_runs()); });
  report(8, "determinism and plumbing", [&] { return plumbing(root); });

  std::cout << (failed == 0 ? "all selected criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
