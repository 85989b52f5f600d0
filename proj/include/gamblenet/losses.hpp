#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gamblenet/tensor.hpp"

namespace gamblenet::losses {

/// Probabilities are clamped to at least this value before any logarithm.
inline constexpr double kProbEpsilon = 1e-7;
inline constexpr double kDefaultBetSmoothing = 0.02;
inline constexpr double kDefaultAdversarialWeight = 1.0;
inline constexpr double kDefaultFocalGamma = 2.0;
/// Tolerance on the betting-map budget accepted by the gambling losses.
inline constexpr double kBudgetTolerance = 1e-4;

/// Per-pixel investment weights, shape (1, H, W), summing to one.
struct BettingMap {
  Tensor weights;
};

/// How the weighted cross-entropy of the gambling game is scaled.
///
/// kPerPixel keeps the 1/(w*h) prefactor on top of the unit-sum budget.
/// kBudget drops it, making the term the expected cross-entropy under the
/// betting distribution.
enum class BetScale { kPerPixel, kBudget };

// ---------------------------------------------------------------------------
// Value API. These validate their inputs and throw gamblenet::Error.

/// (1, H, W) surface of -log p_true; ignored pixels hold 0.
Tensor pixel_cross_entropy(const Tensor& pred, const LabelMap& label);
double mean_cross_entropy(const Tensor& pred, const LabelMap& label);
double focal_loss(const Tensor& pred, const LabelMap& label, double gamma);

/// Turns per-pixel sigmoid outputs in [0,1] into a smoothed distribution:
/// w = (raw + beta) / sum(raw + beta). Ignored pixels enter with raw 0 but
/// stay in the denominator.
BettingMap normalize_betting_map(const Tensor& raw, double beta,
                                 std::span<const std::uint8_t> ignore = {});

/// Gambler objective: -(scale) * sum(bets * CE). Never positive.
double gambling_loss(const Tensor& pred, const LabelMap& label, const BettingMap& bets,
                     BetScale scale = BetScale::kPerPixel);

/// Segmenter objective: mean CE minus the gambler objective.
double segmenter_gambling_loss(const Tensor& pred, const LabelMap& label, const BettingMap& bets,
                               BetScale scale = BetScale::kPerPixel);

/// Binary cross-entropy with clamping.
double binary_cross_entropy(double score, double target);

/// BCE(fake, 0) + BCE(real, 1), each averaged over the patch grid.
double discriminator_loss(const Tensor& fake_scores, const Tensor& real_scores);
double discriminator_loss(double fake_score, double real_score);

/// Non-saturating adversarial term lambda * BCE(fake, 1), averaged over patches.
double generator_adversarial_loss(const Tensor& fake_scores, double lambda);
double generator_adversarial_loss(double fake_score, double lambda);

/// Euclidean distance between paired discriminator embeddings.
double embedding_loss(std::span<const double> fake_embedding,
                      std::span<const double> real_embedding);

// ---------------------------------------------------------------------------
// Gradient kernels. Shapes are checked but per-pixel normalization is not, so
// these can be probed with finite differences off the probability simplex.

struct LossGrad {
  double value = 0.0;
  Tensor d_pred;
};

struct GambleGrad {
  double value = 0.0;
  Tensor d_pred;
  Tensor d_bets;
};

struct ScoreGrad {
  double value = 0.0;
  Tensor d_scores;
};

struct EmbeddingGrad {
  double value = 0.0;
  std::vector<double> d_fake;
  std::vector<double> d_real;
};

LossGrad mean_cross_entropy_grad(const Tensor& pred, const LabelMap& label);
LossGrad focal_loss_grad(const Tensor& pred, const LabelMap& label, double gamma);
GambleGrad gambling_loss_grad(const Tensor& pred, const LabelMap& label, const Tensor& bets,
                              BetScale scale = BetScale::kPerPixel);
GambleGrad segmenter_gambling_loss_grad(const Tensor& pred, const LabelMap& label,
                                        const Tensor& bets,
                                        BetScale scale = BetScale::kPerPixel);

/// Unvalidated normalization used inside the autograd graph.
Tensor normalize_bets_unchecked(const Tensor& raw, double beta,
                                std::span<const std::uint8_t> ignore = {});
/// Vector-Jacobian product of normalize_bets_unchecked.
Tensor normalize_bets_backward(const Tensor& raw, double beta, std::span<const std::uint8_t> ignore,
                               const Tensor& d_weights);

/// Mean over entries of BCE(score, target).
ScoreGrad bce_mean_grad(const Tensor& scores, double target);

EmbeddingGrad embedding_loss_grad(std::span<const double> fake_embedding,
                                  std::span<const double> real_embedding);

}  // namespace gamblenet::losses
