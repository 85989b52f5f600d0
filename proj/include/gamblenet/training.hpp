#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gamblenet/losses.hpp"
#include "gamblenet/metrics.hpp"
#include "gamblenet/models.hpp"
#include "gamblenet/synthdata.hpp"
#include "json.hpp"

namespace gamblenet::training {

enum class Method { kCe, kFocal, kAdversarial, kElgan, kGambling };

const char* to_string(Method method);
Method method_from_string(const std::string& name);
/// True for methods that train a second network against the segmenter.
bool has_critic(Method method);

// Optimizer -----------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  /// L2 penalty added to the gradient before the moment updates.
  double weight_decay = 5e-4;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

/// Adam over a model's trainable parameters. Moments are keyed by parameter
/// position, so one optimizer belongs to exactly one model.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(std::vector<nn::Parameter>& params, double learning_rate);

  const AdamConfig& config() const noexcept { return config_; }
  std::int64_t steps() const noexcept { return steps_; }

  std::vector<models::NamedTensor> state(const std::string& prefix) const;
  void load_state(const std::vector<models::NamedTensor>& tensors, const std::string& prefix);

 private:
  AdamConfig config_;
  std::int64_t steps_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// Configuration ---------------------------------------------------------------

inline constexpr int kConfigSchemaVersion = 1;

struct TrainConfig {
  Method method = Method::kGambling;
  AdamConfig segmenter_optimizer;
  AdamConfig critic_optimizer;
  double adversarial_weight = losses::kDefaultAdversarialWeight;
  double bet_smoothing = losses::kDefaultBetSmoothing;
  double focal_gamma = losses::kDefaultFocalGamma;
  losses::BetScale bet_scale = losses::BetScale::kBudget;

  /// Alternation: critic_iterations critic updates, then segmenter_iterations
  /// segmenter updates, repeated.
  int segmenter_iterations = 1;
  int critic_iterations = 2;

  int epochs = 12;
  int batch_size = 1;
  std::uint64_t seed = 1;
  /// Evaluate on the validation split every this many epochs.
  int eval_every = 1;
  /// Cap on validation samples per evaluation; 0 = all.
  int eval_samples = 0;
  bool linear_decay = true;
  bool train_on_noisy = true;

  models::ArchitectureSpec segmenter;
  models::ArchitectureSpec critic;

  bool augment_flip = true;
  synth::AugmentOptions augment;

  /// Diagnostic: feed the gambler a detached prediction in segmenter steps.
  bool sever_flow_b = false;
  /// Evaluation points averaged for the final-window confidence.
  int confidence_window = 10;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Defaults for a method: the gambler has one block fewer than the
/// segmenter, the discriminator the same number.
TrainConfig default_config(Method method, std::uint64_t seed);

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
void validate(const TrainConfig& config);
std::uint64_t config_hash(const TrainConfig& config);

// Log -------------------------------------------------------------------------

struct EvalRecord {
  int epoch = 0;
  std::int64_t step = 0;  // segmenter updates so far
  double learning_rate = 0.0;
  double segmenter_loss = 0.0;  // epoch means of the step losses
  double critic_loss = 0.0;
  double cross_entropy = 0.0;
  double adversarial_term = 0.0;
  double mean_iou = 0.0;
  double mean_bf = 0.0;
  double mean_hausdorff = 0.0;
  double confidence_mean = 0.0;
  double confidence_std = 0.0;
  double wall_seconds = 0.0;

  /// Equality over everything except wall time.
  bool same_values(const EvalRecord& other) const;
};

struct TrainLog {
  std::vector<EvalRecord> records;

  bool same_values(const TrainLog& other) const;
  std::string to_csv() const;
  nlohmann::json to_json() const;
  static TrainLog from_json(const nlohmann::json& j);
};

struct ConfidencePoint {
  std::int64_t step = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct ConfidenceSeries {
  std::vector<ConfidencePoint> points;
  /// Mean of the last `window` point means.
  double final_window_mean = 0.0;
};

ConfidenceSeries track_confidence(const TrainLog& log, int window);

// Steps -----------------------------------------------------------------------

struct Batch {
  std::vector<Tensor> images;
  std::vector<LabelMap> labels;
  std::size_t size() const noexcept { return images.size(); }
};

/// Loss components of one update, averaged over the batch.
struct StepResult {
  double loss = 0.0;
  double cross_entropy = 0.0;
  double adversarial_term = 0.0;
};

/// Holds the segmenter, the optional critic (gambler or discriminator) and
/// their optimizers, and performs the individual updates.
class Trainer {
 public:
  Trainer(TrainConfig config, int num_classes);

  const TrainConfig& config() const noexcept { return config_; }
  int num_classes() const noexcept { return num_classes_; }
  models::Model& segmenter() noexcept { return segmenter_; }
  models::Model* critic() noexcept { return critic_ ? &*critic_ : nullptr; }
  Adam& segmenter_optimizer() noexcept { return seg_opt_; }
  Adam& critic_optimizer() noexcept { return critic_opt_; }

  /// Gambling: minimizes the gambler objective with the segmenter frozen.
  /// Adversarial / EL-GAN: one discriminator update.
  StepResult critic_step(const Batch& batch, double learning_rate);
  /// Updates the segmenter with the method's loss; the critic is frozen.
  StepResult segmenter_step(const Batch& batch, double learning_rate);

  /// Segmenter loss and gradient without updating; fills the parameters' grad.
  StepResult segmenter_gradient(const Batch& batch);
  /// Gambler loss and gradient without updating.
  StepResult critic_gradient(const Batch& batch);

  /// Normalized betting map of the current gambler for one image.
  Tensor betting_map(const Tensor& image, const Tensor& prediction);

 private:
  StepResult accumulate_segmenter(const Batch& batch);
  StepResult accumulate_critic(const Batch& batch);
  void check_finite(const StepResult& r, const char* what) const;

  TrainConfig config_;
  int num_classes_;
  models::Model segmenter_;
  std::optional<models::Model> critic_;
  Adam seg_opt_;
  Adam critic_opt_;
};

/// Applies training-time augmentation to a sample and picks its target.
Batch make_batch(const TrainConfig& config, std::span<const synth::Sample> samples,
                 std::span<const std::size_t> indices, int epoch);

/// Deterministic permutation of [0, n) for (seed, epoch, stream).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch, int stream);

/// Learning rate after `step` of `total` segmenter updates.
double scheduled_rate(double base, std::int64_t step, std::int64_t total, bool linear_decay);

// Evaluation ------------------------------------------------------------------

/// Metrics of the segmenter on clean labels.
metrics::MetricReport evaluate(models::Model& segmenter, std::span<const synth::Sample> samples,
                               int num_classes, int limit = 0);

struct BetProfit {
  double top_mean_ce = 0.0;
  double mean_ce = 0.0;
  double ratio = 0.0;
  double bet_cv = 0.0;  // std / mean of the betting map
};

/// Mean CE of the top `fraction` of bet pixels against the image mean CE.
BetProfit bet_profit(const Tensor& bets, const Tensor& prediction, const LabelMap& label, double fraction);

// Runs ------------------------------------------------------------------------

struct RunOptions {
  /// Run directory; empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Continue from out_dir/state if present.
  bool resume = false;
  /// Stop after this many completed epochs (for interrupted-run tests); 0 = no limit.
  int stop_after_epoch = 0;
  bool verbose = false;
};

struct RunResult {
  TrainLog log;
  std::uint64_t segmenter_hash = 0;
  std::uint64_t critic_hash = 0;
  int epochs_completed = 0;
};

/// Full alternating training on the dataset's train split with validation on
/// clean labels. Writes resolved_config.json, log.csv, summary.json,
/// checkpoints and resumable state when out_dir is set. A non-finite loss
/// writes a diagnostic checkpoint and throws ErrorCode::kNumerical.
RunResult run_training(const TrainConfig& config, const synth::Dataset& dataset,
                       const RunOptions& options = {});

}  // namespace gamblenet::training
