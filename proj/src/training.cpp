#include "gamblenet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "gamblenet/rng.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace gamblenet::training {
namespace {

constexpr double kOnlineBudgetTolerance = 1e-6;
constexpr std::uint64_t kOrderSalt = 0x6f72646572ULL;
constexpr std::uint64_t kFlipSalt = 0x666c6970ULL;

// Freezes a model for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(models::Model* model) : model_(model) {
    if (model_ != nullptr) model_->set_trainable(false);
  }
  ~FreezeGuard() {
    if (model_ != nullptr) model_->set_trainable(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  models::Model* model_;
};

double sum_of(const Tensor& t) { return std::accumulate(t.values().begin(), t.values().end(), 0.0); }

void check_budget(const Tensor& bets) {
  const double total = sum_of(bets);
  require(std::abs(total - 1.0) <= kOnlineBudgetTolerance, ErrorCode::kNumerical,
          "betting map budget drifted to " + std::to_string(total));
}

// Training allocates and frees many mid-sized buffers per step; keeping them
// on the heap instead of fresh mmaps halves the wall time.
void tune_allocator() {
#ifdef __GLIBC__
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)once;
#endif
}

std::string fmt_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

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
  require(!ec, ErrorCode::kIo, "cannot finalise '" + path.string() + "': " + ec.message());
}

const char* bet_scale_name(losses::BetScale s) { return s == losses::BetScale::kBudget ? "budget" : "per_pixel"; }

losses::BetScale bet_scale_from(const std::string& s) {
  if (s == "budget") return losses::BetScale::kBudget;
  if (s == "per_pixel") return losses::BetScale::kPerPixel;
  fail(ErrorCode::kConfig, "unknown bet_scale '" + s + "'");
}

nlohmann::json adam_json(const AdamConfig& a) {
  return {{"learning_rate", a.learning_rate},
          {"beta1", a.beta1},
          {"beta2", a.beta2},
          {"epsilon", a.epsilon},
          {"weight_decay", a.weight_decay}};
}

AdamConfig adam_from(const nlohmann::json& j, AdamConfig a) {
  a.learning_rate = j.value("learning_rate", a.learning_rate);
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.epsilon = j.value("epsilon", a.epsilon);
  a.weight_decay = j.value("weight_decay", a.weight_decay);
  return a;
}

nlohmann::json record_json(const EvalRecord& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"learning_rate", r.learning_rate},
          {"segmenter_loss", r.segmenter_loss},
          {"critic_loss", r.critic_loss},
          {"cross_entropy", r.cross_entropy},
          {"adversarial_term", r.adversarial_term},
          {"mean_iou", r.mean_iou},
          {"mean_bf", r.mean_bf},
          {"mean_hausdorff", r.mean_hausdorff},
          {"confidence_mean", r.confidence_mean},
          {"confidence_std", r.confidence_std},
          {"wall_seconds", r.wall_seconds}};
}

}  // namespace

const char* to_string(Method method) {
  switch (method) {
    case Method::kCe: return "ce";
    case Method::kFocal: return "focal";
    case Method::kAdversarial: return "adversarial";
    case Method::kElgan: return "elgan";
    case Method::kGambling: return "gambling";
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  if (name == "ce") return Method::kCe;
  if (name == "focal") return Method::kFocal;
  if (name == "adversarial") return Method::kAdversarial;
  if (name == "elgan") return Method::kElgan;
  if (name == "gambling") return Method::kGambling;
  fail(ErrorCode::kConfig, "unknown method '" + name + "' (expected ce, focal, adversarial, elgan, gambling)");
}

bool has_critic(Method method) {
  return method == Method::kAdversarial || method == Method::kElgan || method == Method::kGambling;
}

// Adam ------------------------------------------------------------------------

void Adam::step(std::vector<nn::Parameter>& params, double learning_rate) {
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.emplace_back(p.value.channels(), p.value.height(), p.value.width());
      v_.emplace_back(p.value.channels(), p.value.height(), p.value.width());
    }
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    nn::Parameter& p = params[i];
    if (!p.trainable) continue;
    require(p.grad.same_shape(p.value), ErrorCode::kShapeMismatch, "missing gradient for " + p.name);
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k] + config_.weight_decay * p.value[k];
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g * g;
      p.value[k] -= learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
    }
  }
}

std::vector<models::NamedTensor> Adam::state(const std::string& prefix) const {
  std::vector<models::NamedTensor> out;
  Tensor steps(1, 1, 1);
  steps[0] = static_cast<double>(steps_);
  out.push_back({prefix + "steps", steps});
  for (std::size_t i = 0; i < m_.size(); ++i) {
    out.push_back({prefix + "m/" + std::to_string(i), m_[i]});
    out.push_back({prefix + "v/" + std::to_string(i), v_[i]});
  }
  return out;
}

void Adam::load_state(const std::vector<models::NamedTensor>& tensors, const std::string& prefix) {
  m_.clear();
  v_.clear();
  steps_ = 0;
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    const std::string key = t.name.substr(prefix.size());
    if (key == "steps") {
      steps_ = static_cast<std::int64_t>(t.value[0]);
    } else if (key.rfind("m/", 0) == 0) {
      m_.push_back(t.value);
    } else if (key.rfind("v/", 0) == 0) {
      v_.push_back(t.value);
    }
  }
  require(m_.size() == v_.size(), ErrorCode::kIo, "optimizer state is incomplete");
}

// Configuration ---------------------------------------------------------------

TrainConfig default_config(Method method, std::uint64_t seed) {
  TrainConfig c;
  c.method = method;
  c.seed = seed;
  c.segmenter.role = models::Role::kSegmenter;
  c.segmenter.seed = seed;
  c.critic.seed = seed;
  if (method == Method::kGambling) {
    c.critic.role = models::Role::kGambler;
    c.critic.blocks = std::max(1, c.segmenter.blocks - 1);
  } else {
    c.critic.role = models::Role::kDiscriminator;
    c.critic.blocks = c.segmenter.blocks;
  }
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"schema_version", kConfigSchemaVersion},
          {"method", to_string(c.method)},
          {"segmenter_optimizer", adam_json(c.segmenter_optimizer)},
          {"critic_optimizer", adam_json(c.critic_optimizer)},
          {"adversarial_weight", c.adversarial_weight},
          {"bet_smoothing", c.bet_smoothing},
          {"focal_gamma", c.focal_gamma},
          {"bet_scale", bet_scale_name(c.bet_scale)},
          {"segmenter_iterations", c.segmenter_iterations},
          {"critic_iterations", c.critic_iterations},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"eval_samples", c.eval_samples},
          {"linear_decay", c.linear_decay},
          {"train_on_noisy", c.train_on_noisy},
          {"segmenter", models::to_json(c.segmenter)},
          {"critic", models::to_json(c.critic)},
          {"augment_flip", c.augment_flip},
          {"augment_crop_height", c.augment.crop_height},
          {"augment_crop_width", c.augment.crop_width},
          {"augment_jitter", c.augment.jitter},
          {"sever_flow_b", c.sever_flow_b},
          {"confidence_window", c.confidence_window}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::kConfig, "training config must be a JSON object");
  static const std::set<std::string> known = {
      "schema_version", "method", "segmenter_optimizer", "critic_optimizer", "adversarial_weight",
      "bet_smoothing", "focal_gamma", "bet_scale", "segmenter_iterations", "critic_iterations", "epochs",
      "batch_size", "seed", "eval_every", "eval_samples", "linear_decay", "train_on_noisy", "segmenter",
      "critic", "augment_flip", "augment_crop_height", "augment_crop_width", "augment_jitter",
      "sever_flow_b", "confidence_window"};
  for (const auto& [key, value] : j.items()) {
    require(known.count(key) > 0, ErrorCode::kConfig, "unknown training config key '" + key + "'");
  }
  try {
    const int version = j.value("schema_version", kConfigSchemaVersion);
    require(version == kConfigSchemaVersion, ErrorCode::kConfig,
            "unsupported config schema_version " + std::to_string(version));
    TrainConfig c = default_config(method_from_string(j.value("method", std::string("gambling"))),
                                   j.value("seed", std::uint64_t{1}));
    if (j.contains("segmenter_optimizer")) c.segmenter_optimizer = adam_from(j["segmenter_optimizer"], c.segmenter_optimizer);
    if (j.contains("critic_optimizer")) c.critic_optimizer = adam_from(j["critic_optimizer"], c.critic_optimizer);
    c.adversarial_weight = j.value("adversarial_weight", c.adversarial_weight);
    c.bet_smoothing = j.value("bet_smoothing", c.bet_smoothing);
    c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
    if (j.contains("bet_scale")) c.bet_scale = bet_scale_from(j["bet_scale"].get<std::string>());
    c.segmenter_iterations = j.value("segmenter_iterations", c.segmenter_iterations);
    c.critic_iterations = j.value("critic_iterations", c.critic_iterations);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.linear_decay = j.value("linear_decay", c.linear_decay);
    c.train_on_noisy = j.value("train_on_noisy", c.train_on_noisy);
    if (j.contains("segmenter")) c.segmenter = models::spec_from_json(j["segmenter"]);
    if (j.contains("critic")) c.critic = models::spec_from_json(j["critic"]);
    c.augment_flip = j.value("augment_flip", c.augment_flip);
    c.augment.crop_height = j.value("augment_crop_height", c.augment.crop_height);
    c.augment.crop_width = j.value("augment_crop_width", c.augment.crop_width);
    c.augment.jitter = j.value("augment_jitter", c.augment.jitter);
    c.sever_flow_b = j.value("sever_flow_b", c.sever_flow_b);
    c.confidence_window = j.value("confidence_window", c.confidence_window);
    validate(c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, std::string("malformed training config: ") + e.what());
  }
}

void validate(const TrainConfig& c) {
  require(c.adversarial_weight >= 0.0, ErrorCode::kConfig, "adversarial_weight must be >= 0");
  require(c.bet_smoothing >= 0.0, ErrorCode::kConfig, "bet_smoothing must be >= 0");
  require(c.focal_gamma >= 0.0, ErrorCode::kConfig, "focal_gamma must be >= 0");
  require(c.segmenter_iterations >= 1 && c.critic_iterations >= 1, ErrorCode::kConfig,
          "segmenter_iterations and critic_iterations must be >= 1");
  require(c.epochs >= 1 && c.batch_size >= 1 && c.eval_every >= 1 && c.eval_samples >= 0,
          ErrorCode::kConfig, "epochs, batch_size and eval_every must be >= 1");
  require(c.confidence_window >= 1, ErrorCode::kConfig, "confidence_window must be >= 1");
  for (const AdamConfig* a : {&c.segmenter_optimizer, &c.critic_optimizer}) {
    require(a->learning_rate >= 0.0 && a->beta1 >= 0.0 && a->beta1 < 1.0 && a->beta2 >= 0.0 &&
                a->beta2 < 1.0 && a->epsilon > 0.0 && a->weight_decay >= 0.0,
            ErrorCode::kConfig, "invalid optimizer settings");
  }
  require(c.segmenter.blocks >= 1 && c.segmenter.base_width >= 1 && c.critic.blocks >= 1 &&
              c.critic.base_width >= 1,
          ErrorCode::kConfig, "architecture blocks and widths must be >= 1");
  require(c.augment.jitter >= 0.0 && c.augment.crop_height >= 0 && c.augment.crop_width >= 0,
          ErrorCode::kConfig, "invalid augmentation settings");
}

std::uint64_t config_hash(const TrainConfig& config) {
  const std::string s = to_json(config).dump();
  return fnv1a(s.data(), s.size());
}

// Log -------------------------------------------------------------------------

bool EvalRecord::same_values(const EvalRecord& o) const {
  return epoch == o.epoch && step == o.step && learning_rate == o.learning_rate &&
         segmenter_loss == o.segmenter_loss && critic_loss == o.critic_loss &&
         cross_entropy == o.cross_entropy && adversarial_term == o.adversarial_term &&
         mean_iou == o.mean_iou && mean_bf == o.mean_bf && mean_hausdorff == o.mean_hausdorff &&
         confidence_mean == o.confidence_mean && confidence_std == o.confidence_std;
}

bool TrainLog::same_values(const TrainLog& other) const {
  if (records.size() != other.records.size()) return false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].same_values(other.records[i])) return false;
  }
  return true;
}

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out << "epoch,step,learning_rate,segmenter_loss,critic_loss,cross_entropy,adversarial_term,"
         "mean_iou,mean_bf,mean_hausdorff,confidence_mean,confidence_std,wall_seconds\n";
  for (const auto& r : records) {
    out << r.epoch << ',' << r.step;
    for (double v : {r.learning_rate, r.segmenter_loss, r.critic_loss, r.cross_entropy, r.adversarial_term,
                     r.mean_iou, r.mean_bf, r.mean_hausdorff, r.confidence_mean, r.confidence_std,
                     r.wall_seconds}) {
      out << ',' << fmt_double(v);
    }
    out << '\n';
  }
  return out.str();
}

nlohmann::json TrainLog::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) arr.push_back(record_json(r));
  return arr;
}

TrainLog TrainLog::from_json(const nlohmann::json& j) {
  TrainLog log;
  for (const auto& e : j) {
    EvalRecord r;
    r.epoch = e.at("epoch").get<int>();
    r.step = e.at("step").get<std::int64_t>();
    r.learning_rate = e.at("learning_rate").get<double>();
    r.segmenter_loss = e.at("segmenter_loss").get<double>();
    r.critic_loss = e.at("critic_loss").get<double>();
    r.cross_entropy = e.at("cross_entropy").get<double>();
    r.adversarial_term = e.at("adversarial_term").get<double>();
    r.mean_iou = e.at("mean_iou").get<double>();
    r.mean_bf = e.at("mean_bf").get<double>();
    r.mean_hausdorff = e.at("mean_hausdorff").get<double>();
    r.confidence_mean = e.at("confidence_mean").get<double>();
    r.confidence_std = e.at("confidence_std").get<double>();
    r.wall_seconds = e.value("wall_seconds", 0.0);
    log.records.push_back(r);
  }
  return log;
}

ConfidenceSeries track_confidence(const TrainLog& log, int window) {
  require(!log.records.empty(), ErrorCode::kInvalidArgument, "confidence tracking needs a non-empty log");
  require(window >= 1, ErrorCode::kInvalidArgument, "confidence window must be >= 1");
  ConfidenceSeries series;
  for (const auto& r : log.records) series.points.push_back({r.step, r.confidence_mean, r.confidence_std});
  const std::size_t k = std::min(series.points.size(), static_cast<std::size_t>(window));
  double total = 0.0;
  for (std::size_t i = series.points.size() - k; i < series.points.size(); ++i) total += series.points[i].mean;
  series.final_window_mean = total / static_cast<double>(k);
  return series;
}

// Trainer ---------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, int num_classes)
    : config_(std::move(config)),
      num_classes_(num_classes),
      segmenter_(models::build_segmenter(config_.segmenter, num_classes)),
      seg_opt_(config_.segmenter_optimizer),
      critic_opt_(config_.critic_optimizer) {
  validate(config_);
  if (config_.method == Method::kGambling) {
    critic_.emplace(models::build_gambler(config_.critic, num_classes));
  } else if (has_critic(config_.method)) {
    critic_.emplace(models::build_patch_discriminator(config_.critic, num_classes));
  }
}

void Trainer::check_finite(const StepResult& r, const char* what) const {
  require(std::isfinite(r.loss) && std::isfinite(r.cross_entropy) && std::isfinite(r.adversarial_term),
          ErrorCode::kNumerical, std::string("non-finite ") + what + " loss");
}

Tensor Trainer::betting_map(const Tensor& image, const Tensor& prediction) {
  require(config_.method == Method::kGambling && critic_, ErrorCode::kConfig, "no gambler in this trainer");
  const Tensor raw = critic_->predict(concat_channels(image, prediction));
  return losses::normalize_betting_map(raw, config_.bet_smoothing).weights;
}

StepResult Trainer::accumulate_segmenter(const Batch& batch) {
  require(batch.size() > 0, ErrorCode::kInvalidArgument, "empty batch");
  FreezeGuard freeze(critic_ ? &*critic_ : nullptr);
  segmenter_.zero_grad();
  StepResult total;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor& image = batch.images[b];
    const LabelMap& label = batch.labels[b];
    nn::Graph g;
    const nn::Var x = g.input(image, false);
    const nn::Var pred = segmenter_.forward(g, x).output;
    const nn::Var ce = config_.method == Method::kFocal ? nn::focal(g, pred, label, config_.focal_gamma)
                                                        : nn::cross_entropy(g, pred, label);
    nn::Var adv;
    switch (config_.method) {
      case Method::kCe:
      case Method::kFocal:
        break;
      case Method::kAdversarial: {
        const nn::Var scores = critic_->forward(g, nn::concat(g, x, pred)).output;
        adv = nn::scale(g, nn::bce_mean(g, scores, 1.0), config_.adversarial_weight);
        break;
      }
      case Method::kElgan: {
        const int layer = config_.critic.embedding_layer;
        auto pick = [&](const models::Forward& f) {
          const int n = static_cast<int>(f.features.size());
          const int k = layer < 0 ? n - 1 : std::min(layer, n - 1);
          return f.features[static_cast<std::size_t>(k)];
        };
        const nn::Var fake = pick(critic_->forward(g, nn::concat(g, x, pred)));
        const nn::Var real =
            pick(critic_->forward(g, g.constant(concat_channels(image, one_hot(label, num_classes_)))));
        adv = nn::scale(g, nn::embedding_distance(g, fake, real), config_.adversarial_weight);
        break;
      }
      case Method::kGambling: {
        const nn::Var shown = config_.sever_flow_b ? nn::detach(g, pred) : pred;
        const nn::Var raw = critic_->forward(g, nn::concat(g, x, shown)).output;
        const nn::Var bets = nn::normalize_bets(g, raw, config_.bet_smoothing, label.ignore);
        check_budget(g.value(bets));
        // The segmenter pays back what the gambler wins.
        adv = nn::scale(g, nn::gambling(g, pred, label, bets, config_.bet_scale), -1.0);
        break;
      }
    }
    const nn::Var loss = adv.valid() ? nn::add(g, ce, adv) : ce;
    g.backward(nn::scale(g, loss, inv));
    total.loss += g.value(loss)[0] * inv;
    total.cross_entropy += g.value(ce)[0] * inv;
    if (adv.valid()) total.adversarial_term += g.value(adv)[0] * inv;
  }
  check_finite(total, "segmenter");
  return total;
}

StepResult Trainer::accumulate_critic(const Batch& batch) {
  require(critic_.has_value(), ErrorCode::kConfig, std::string("method ") + to_string(config_.method) +
                                                       " has no critic");
  require(batch.size() > 0, ErrorCode::kInvalidArgument, "empty batch");
  FreezeGuard freeze(&segmenter_);
  critic_->zero_grad();
  StepResult total;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor& image = batch.images[b];
    const LabelMap& label = batch.labels[b];
    const Tensor prediction = segmenter_.predict(image);
    nn::Graph g;
    nn::Var loss;
    if (config_.method == Method::kGambling) {
      const nn::Var pred = g.constant(prediction);
      const nn::Var raw = critic_->forward(g, g.constant(concat_channels(image, prediction))).output;
      const nn::Var bets = nn::normalize_bets(g, raw, config_.bet_smoothing, label.ignore);
      check_budget(g.value(bets));
      loss = nn::gambling(g, pred, label, bets, config_.bet_scale);
    } else {
      const nn::Var fake = critic_->forward(g, g.constant(concat_channels(image, prediction))).output;
      const nn::Var real =
          critic_->forward(g, g.constant(concat_channels(image, one_hot(label, num_classes_)))).output;
      loss = nn::add(g, nn::bce_mean(g, fake, 0.0), nn::bce_mean(g, real, 1.0));
    }
    g.backward(nn::scale(g, loss, inv));
    total.loss += g.value(loss)[0] * inv;
  }
  total.adversarial_term = total.loss;
  check_finite(total, "critic");
  return total;
}

StepResult Trainer::segmenter_gradient(const Batch& batch) { return accumulate_segmenter(batch); }

StepResult Trainer::critic_gradient(const Batch& batch) { return accumulate_critic(batch); }

StepResult Trainer::segmenter_step(const Batch& batch, double learning_rate) {
  const StepResult r = accumulate_segmenter(batch);
  seg_opt_.step(segmenter_.parameters(), learning_rate);
  return r;
}

StepResult Trainer::critic_step(const Batch& batch, double learning_rate) {
  const StepResult r = accumulate_critic(batch);
  critic_opt_.step(critic_->parameters(), learning_rate);
  return r;
}

// Data ------------------------------------------------------------------------

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch, int stream) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng({seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(stream), kOrderSalt});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Batch make_batch(const TrainConfig& config, std::span<const synth::Sample> samples,
                 std::span<const std::size_t> indices, int epoch) {
  Batch batch;
  for (std::size_t idx : indices) {
    require(idx < samples.size(), ErrorCode::kInvalidArgument, "batch index out of range");
    const synth::Sample& s = samples[idx];
    synth::AugmentOptions opts = config.augment;
    const std::uint64_t seed = Rng::mix({config.seed, static_cast<std::uint64_t>(epoch), idx, kFlipSalt});
    opts.flip = config.augment_flip && (seed & 1U) != 0;
    const bool identity = !opts.flip && opts.crop_height == 0 && opts.crop_width == 0 && opts.jitter == 0.0;
    if (identity) {
      batch.images.push_back(s.rgb);
      batch.labels.push_back(config.train_on_noisy ? s.noisy : s.clean);
    } else {
      synth::Sample a = synth::augment(s, opts, seed);
      batch.images.push_back(std::move(a.rgb));
      batch.labels.push_back(config.train_on_noisy ? std::move(a.noisy) : std::move(a.clean));
    }
  }
  return batch;
}

double scheduled_rate(double base, std::int64_t step, std::int64_t total, bool linear_decay) {
  if (!linear_decay || total <= 0) return base;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total);
  return base * std::clamp(frac, 0.0, 1.0);
}

// Evaluation ------------------------------------------------------------------

metrics::MetricReport evaluate(models::Model& segmenter, std::span<const synth::Sample> samples,
                               int num_classes, int limit) {
  require(!samples.empty(), ErrorCode::kInvalidArgument, "evaluation needs at least one sample");
  const std::size_t n = limit > 0 ? std::min(samples.size(), static_cast<std::size_t>(limit)) : samples.size();
  metrics::Evaluator ev(num_classes);
  for (std::size_t i = 0; i < n; ++i) ev.add(segmenter.predict(samples[i].rgb), samples[i].clean);
  return ev.report();
}

BetProfit bet_profit(const Tensor& bets, const Tensor& prediction, const LabelMap& label, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::kInvalidArgument, "fraction must lie in (0, 1]");
  const Tensor ce = losses::pixel_cross_entropy(prediction, label);
  require(bets.channels() == 1 && bets.height() == ce.height() && bets.width() == ce.width(),
          ErrorCode::kShapeMismatch, "betting map does not match the prediction");
  const std::size_t n = ce.size();
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return bets[a] != bets[b] ? bets[a] > bets[b] : a < b; });
  BetProfit out;
  for (std::size_t i = 0; i < k; ++i) out.top_mean_ce += ce[idx[i]];
  out.top_mean_ce /= static_cast<double>(k);
  out.mean_ce = sum_of(ce) / static_cast<double>(n);
  out.ratio = out.mean_ce > 0.0 ? out.top_mean_ce / out.mean_ce : 0.0;
  const double mean_bet = sum_of(bets) / static_cast<double>(n);
  double var = 0.0;
  for (double v : bets.values()) var += (v - mean_bet) * (v - mean_bet);
  out.bet_cv = mean_bet > 0.0 ? std::sqrt(var / static_cast<double>(n)) / mean_bet : 0.0;
  return out;
}

// Runs ------------------------------------------------------------------------

namespace {

const char* critic_file(Method method) {
  return method == Method::kGambling ? "gambler.ckpt" : "discriminator.ckpt";
}

void save_state(const std::filesystem::path& dir, Trainer& tr, int epochs_completed, const TrainLog& log) {
  std::vector<models::NamedTensor> tensors;
  for (const auto& p : tr.segmenter().parameters()) tensors.push_back({"segmenter/" + p.name, p.value});
  for (auto& t : tr.segmenter_optimizer().state("segmenter_opt/")) tensors.push_back(std::move(t));
  if (tr.critic() != nullptr) {
    for (const auto& p : tr.critic()->parameters()) tensors.push_back({"critic/" + p.name, p.value});
    for (auto& t : tr.critic_optimizer().state("critic_opt/")) tensors.push_back(std::move(t));
  }
  const auto bin = dir / "state.bin";
  models::write_archive(bin.string() + ".tmp", tensors);
  std::error_code ec;
  std::filesystem::rename(bin.string() + ".tmp", bin, ec);
  require(!ec, ErrorCode::kIo, "cannot finalise training state: " + ec.message());
  const nlohmann::json meta = {{"epochs_completed", epochs_completed},
                               {"config_hash", hex(config_hash(tr.config()))},
                               {"log", log.to_json()}};
  write_text(dir / "state.json", meta.dump(2) + "\n");
}

int load_state(const std::filesystem::path& dir, Trainer& tr, TrainLog& log) {
  std::ifstream in(dir / "state.json");
  if (!in) return 0;
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, std::string("corrupt training state: ") + e.what());
  }
  require(meta.value("config_hash", "") == hex(config_hash(tr.config())), ErrorCode::kConfig,
          "cannot resume: run directory was created with a different config");
  const auto tensors = models::read_archive(dir / "state.bin");
  auto restore = [&](models::Model& m, const std::string& prefix) {
    for (auto& p : m.parameters()) {
      const auto it = std::find_if(tensors.begin(), tensors.end(),
                                   [&](const models::NamedTensor& t) { return t.name == prefix + p.name; });
      require(it != tensors.end() && it->value.same_shape(p.value), ErrorCode::kIo,
              "training state lacks " + prefix + p.name);
      p.value = it->value;
    }
  };
  restore(tr.segmenter(), "segmenter/");
  tr.segmenter_optimizer().load_state(tensors, "segmenter_opt/");
  if (tr.critic() != nullptr) {
    restore(*tr.critic(), "critic/");
    tr.critic_optimizer().load_state(tensors, "critic_opt/");
  }
  log = TrainLog::from_json(meta.at("log"));
  return meta.at("epochs_completed").get<int>();
}

void write_outputs(const std::filesystem::path& dir, Trainer& tr, const TrainLog& log, int epochs_completed,
                   std::int64_t steps) {
  const TrainConfig& cfg = tr.config();
  const nlohmann::json meta = {{"training_step", steps},
                               {"epochs_completed", epochs_completed},
                               {"seed", cfg.seed},
                               {"method", to_string(cfg.method)},
                               {"config_hash", hex(config_hash(cfg))}};
  models::save_checkpoint(tr.segmenter(), dir / "segmenter.ckpt", meta);
  if (tr.critic() != nullptr) models::save_checkpoint(*tr.critic(), dir / critic_file(cfg.method), meta);
  write_text(dir / "log.csv", log.to_csv());
  nlohmann::json summary = {{"method", to_string(cfg.method)},
                            {"seed", cfg.seed},
                            {"config_hash", hex(config_hash(cfg))},
                            {"epochs_completed", epochs_completed},
                            {"steps", steps},
                            {"segmenter_hash", hex(tr.segmenter().parameter_hash())},
                            {"log", log.to_json()}};
  if (tr.critic() != nullptr) summary["critic_hash"] = hex(tr.critic()->parameter_hash());
  if (!log.records.empty()) {
    const auto series = track_confidence(log, cfg.confidence_window);
    const auto& last = log.records.back();
    summary["final"] = {{"mean_iou", last.mean_iou},
                        {"mean_bf", last.mean_bf},
                        {"mean_hausdorff", last.mean_hausdorff},
                        {"confidence_mean", last.confidence_mean},
                        {"confidence_std", last.confidence_std},
                        {"confidence_window_mean", series.final_window_mean}};
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace

RunResult run_training(const TrainConfig& config, const synth::Dataset& dataset, const RunOptions& options) {
  validate(config);
  tune_allocator();
  const int c = dataset.spec.num_classes();
  const auto train = dataset.train();
  const auto val = dataset.validation();
  require(!train.empty(), ErrorCode::kConfig, "dataset has no training samples");
  require(!val.empty(), ErrorCode::kConfig, "dataset has no validation samples");

  Trainer tr(config, c);
  const bool persist = !options.out_dir.empty();
  if (persist) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    require(!ec, ErrorCode::kIo, "cannot create run directory '" + options.out_dir.string() + "'");
  }

  RunResult result;
  int start_epoch = 0;
  if (persist && options.resume) start_epoch = load_state(options.out_dir, tr, result.log);
  if (persist) write_text(options.out_dir / "resolved_config.json", to_json(config).dump(2) + "\n");

  const std::size_t n = train.size();
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((n + batch - 1) / batch);
  const std::int64_t total_steps = steps_per_epoch * config.epochs;
  const bool two_player = has_critic(config.method);
  const auto clock_start = std::chrono::steady_clock::now();

  auto slice = [&](const std::vector<std::size_t>& order, std::size_t start, std::size_t count) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(order[(start + i) % order.size()]);
    return out;
  };

  int epoch = start_epoch;
  try {
    for (; epoch < config.epochs; ++epoch) {
      const auto order = epoch_order(n, config.seed, epoch, 0);
      const auto critic_order = epoch_order(n, config.seed, epoch, 1);
      std::size_t critic_pos = 0;
      double seg_sum = 0.0, ce_sum = 0.0, adv_sum = 0.0, critic_sum = 0.0;
      int critic_steps = 0;
      double lr = 0.0;
      for (std::int64_t k = 0; k < steps_per_epoch; ++k) {
        const std::int64_t step = epoch * steps_per_epoch + k;
        lr = scheduled_rate(config.segmenter_optimizer.learning_rate, step, total_steps, config.linear_decay);
        if (two_player && k % config.segmenter_iterations == 0) {
          const double critic_lr =
              scheduled_rate(config.critic_optimizer.learning_rate, step, total_steps, config.linear_decay);
          for (int j = 0; j < config.critic_iterations; ++j) {
            const auto idx = slice(critic_order, critic_pos, batch);
            critic_pos += batch;
            critic_sum += tr.critic_step(make_batch(config, train, idx, epoch), critic_lr).loss;
            ++critic_steps;
          }
        }
        const std::size_t start = static_cast<std::size_t>(k) * batch;
        const auto idx = slice(order, start, std::min(batch, n - start));
        const StepResult r = tr.segmenter_step(make_batch(config, train, idx, epoch), lr);
        seg_sum += r.loss;
        ce_sum += r.cross_entropy;
        adv_sum += r.adversarial_term;
      }

      const bool last = epoch + 1 == config.epochs;
      if ((epoch + 1) % config.eval_every == 0 || last) {
        const metrics::MetricReport report = evaluate(tr.segmenter(), val, c, config.eval_samples);
        EvalRecord rec;
        rec.epoch = epoch + 1;
        rec.step = (epoch + 1) * steps_per_epoch;
        rec.learning_rate = lr;
        rec.segmenter_loss = seg_sum / static_cast<double>(steps_per_epoch);
        rec.critic_loss = critic_steps > 0 ? critic_sum / critic_steps : 0.0;
        rec.cross_entropy = ce_sum / static_cast<double>(steps_per_epoch);
        rec.adversarial_term = adv_sum / static_cast<double>(steps_per_epoch);
        rec.mean_iou = report.mean_iou;
        rec.mean_bf = report.mean_bf;
        rec.mean_hausdorff = report.mean_hausdorff;
        rec.confidence_mean = report.confidence.mean;
        rec.confidence_std = report.confidence.std;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
        result.log.records.push_back(rec);
        if (options.verbose) {
          std::cerr << to_string(config.method) << " seed " << config.seed << " epoch " << rec.epoch
                    << " loss " << rec.segmenter_loss << " critic " << rec.critic_loss << " iou "
                    << rec.mean_iou << " bf " << rec.mean_bf << " hd " << rec.mean_hausdorff << " conf "
                    << rec.confidence_mean << " t " << rec.wall_seconds << "s\n";
        }
      }
      if (persist) save_state(options.out_dir, tr, epoch + 1, result.log);
      if (options.stop_after_epoch > 0 && epoch + 1 >= options.stop_after_epoch) {
        ++epoch;
        break;
      }
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNumerical && persist) {
      const nlohmann::json meta = {{"aborted_in_epoch", epoch + 1}, {"reason", e.what()}};
      models::save_checkpoint(tr.segmenter(), options.out_dir / "diagnostic_segmenter.ckpt", meta);
      if (tr.critic() != nullptr) {
        models::save_checkpoint(*tr.critic(), options.out_dir / (std::string("diagnostic_") + critic_file(config.method)),
                                meta);
      }
    }
    throw;
  }

  result.epochs_completed = epoch;
  result.segmenter_hash = tr.segmenter().parameter_hash();
  if (tr.critic() != nullptr) result.critic_hash = tr.critic()->parameter_hash();
  if (persist) write_outputs(options.out_dir, tr, result.log, epoch, epoch * steps_per_epoch);
  return result;
}

}  // namespace gamblenet::training
