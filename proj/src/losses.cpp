#include "gamblenet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gamblenet::losses {
namespace {

void check_pair(const Tensor& pred, const LabelMap& label) {
  require(pred.height() == label.height && pred.width() == label.width,
          ErrorCode::kShapeMismatch,
          "prediction " + pred.shape_string() + " does not match label map " +
              std::to_string(label.height) + "x" + std::to_string(label.width));
  validate_labels(label, pred.channels());
}

void check_bets(const Tensor& pred, const Tensor& bets) {
  require(bets.channels() == 1 && bets.height() == pred.height() && bets.width() == pred.width(),
          ErrorCode::kShapeMismatch,
          "betting map " + bets.shape_string() + " does not match prediction " +
              pred.shape_string());
}

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0); }

double clamp_score(double s) { return std::clamp(s, kProbEpsilon, 1.0 - kProbEpsilon); }

double bet_prefactor(const Tensor& pred, BetScale scale) {
  return scale == BetScale::kPerPixel ? 1.0 / static_cast<double>(pred.plane()) : 1.0;
}

std::size_t counted_pixels(const LabelMap& label) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < label.pixels(); ++i) n += label.ignored(i) ? 0 : 1;
  require(n > 0, ErrorCode::kDegenerate, "every pixel is ignored");
  return n;
}

// Shared by cross-entropy and focal loss so that gamma = 0 reproduces
// cross-entropy bit for bit.
LossGrad focal_core(const Tensor& pred, const LabelMap& label, double gamma, bool focal) {
  const std::size_t count = counted_pixels(label);
  const int plane = pred.plane();
  LossGrad out{0.0, Tensor(pred.channels(), pred.height(), pred.width())};
  const double inv = 1.0 / static_cast<double>(count);
  double sum = 0.0;
  for (int p = 0; p < plane; ++p) {
    if (label.ignored(static_cast<std::size_t>(p))) continue;
    const std::size_t idx = static_cast<std::size_t>(label.classes[p]) * plane + p;
    const double raw = pred[idx];
    const double pt = clamp_prob(raw);
    const double nll = -std::log(pt);
    const bool live = raw >= kProbEpsilon && raw <= 1.0;
    if (!focal) {
      sum += nll;
      if (live) out.d_pred[idx] = -inv / pt;
      continue;
    }
    const double q = std::max(1.0 - pt, 0.0);
    const double weight = std::pow(q, gamma);
    sum += weight * nll;
    if (live) {
      // d/dp [-(1-p)^g log p] = g (1-p)^(g-1) log p - (1-p)^g / p
      double d = -weight / pt;
      if (gamma != 0.0 && q > 0.0) d += gamma * std::pow(q, gamma - 1.0) * std::log(pt);
      out.d_pred[idx] = inv * d;
    }
  }
  out.value = sum * inv;
  return out;
}

}  // namespace

Tensor pixel_cross_entropy(const Tensor& pred, const LabelMap& label) {
  check_pair(pred, label);
  validate_prediction(pred);
  const int plane = pred.plane();
  Tensor out(1, pred.height(), pred.width());
  for (int p = 0; p < plane; ++p) {
    if (label.ignored(static_cast<std::size_t>(p))) continue;
    out[p] = -std::log(clamp_prob(pred[static_cast<std::size_t>(label.classes[p]) * plane + p]));
  }
  return out;
}

double mean_cross_entropy(const Tensor& pred, const LabelMap& label) {
  check_pair(pred, label);
  validate_prediction(pred);
  return focal_core(pred, label, 0.0, false).value;
}

double focal_loss(const Tensor& pred, const LabelMap& label, double gamma) {
  require(gamma >= 0.0, ErrorCode::kInvalidArgument, "focal gamma must be non-negative");
  check_pair(pred, label);
  validate_prediction(pred);
  return focal_core(pred, label, gamma, true).value;
}

LossGrad mean_cross_entropy_grad(const Tensor& pred, const LabelMap& label) {
  check_pair(pred, label);
  return focal_core(pred, label, 0.0, false);
}

LossGrad focal_loss_grad(const Tensor& pred, const LabelMap& label, double gamma) {
  require(gamma >= 0.0, ErrorCode::kInvalidArgument, "focal gamma must be non-negative");
  check_pair(pred, label);
  return focal_core(pred, label, gamma, true);
}

Tensor normalize_bets_unchecked(const Tensor& raw, double beta,
                                std::span<const std::uint8_t> ignore) {
  const std::size_t n = raw.size();
  Tensor out(raw.channels(), raw.height(), raw.width());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (!ignore.empty() && ignore[i]) ? 0.0 : raw[i];
    out[i] = r + beta;
    total += out[i];
  }
  require(std::isfinite(total), ErrorCode::kNumerical, "betting map is not finite");
  require(total > 0.0, ErrorCode::kDegenerate,
          "betting map has zero total mass; smoothing must be positive");
  for (std::size_t i = 0; i < n; ++i) out[i] /= total;
  return out;
}

Tensor normalize_bets_backward(const Tensor& raw, double beta, std::span<const std::uint8_t> ignore,
                               const Tensor& d_weights) {
  const Tensor weights = normalize_bets_unchecked(raw, beta, ignore);
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    total += ((!ignore.empty() && ignore[i]) ? 0.0 : raw[i]) + beta;
  }
  // dw_i/dr_j = (delta_ij - w_i) / S
  double dot = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) dot += d_weights[i] * weights[i];
  Tensor d_raw(raw.channels(), raw.height(), raw.width());
  for (std::size_t j = 0; j < raw.size(); ++j) {
    if (!ignore.empty() && ignore[j]) continue;
    d_raw[j] = (d_weights[j] - dot) / total;
  }
  return d_raw;
}

BettingMap normalize_betting_map(const Tensor& raw, double beta,
                                 std::span<const std::uint8_t> ignore) {
  require(raw.channels() == 1, ErrorCode::kShapeMismatch, "raw betting map must have one channel");
  require(beta >= 0.0 && std::isfinite(beta), ErrorCode::kInvalidArgument,
          "smoothing factor must be non-negative");
  require(ignore.empty() || ignore.size() == raw.size(), ErrorCode::kShapeMismatch,
          "ignore mask size does not match betting map");
  for (double r : raw.values()) {
    require(r >= 0.0 && r <= 1.0, ErrorCode::kInvalidArgument, "raw bets must lie in [0,1]");
  }
  return BettingMap{normalize_bets_unchecked(raw, beta, ignore)};
}

GambleGrad gambling_loss_grad(const Tensor& pred, const LabelMap& label, const Tensor& bets,
                              BetScale scale) {
  check_pair(pred, label);
  check_bets(pred, bets);
  const int plane = pred.plane();
  const double factor = bet_prefactor(pred, scale);
  GambleGrad out{0.0, Tensor(pred.channels(), pred.height(), pred.width()),
                 Tensor(1, pred.height(), pred.width())};
  double sum = 0.0;
  for (int p = 0; p < plane; ++p) {
    if (label.ignored(static_cast<std::size_t>(p))) continue;
    const std::size_t idx = static_cast<std::size_t>(label.classes[p]) * plane + p;
    const double raw = pred[idx];
    const double pt = clamp_prob(raw);
    const double ce = -std::log(pt);
    sum += bets[p] * ce;
    out.d_bets[p] = -factor * ce;
    if (raw >= kProbEpsilon && raw <= 1.0) out.d_pred[idx] = factor * bets[p] / pt;
  }
  out.value = -factor * sum;
  return out;
}

GambleGrad segmenter_gambling_loss_grad(const Tensor& pred, const LabelMap& label,
                                        const Tensor& bets, BetScale scale) {
  GambleGrad gamble = gambling_loss_grad(pred, label, bets, scale);
  const LossGrad ce = mean_cross_entropy_grad(pred, label);
  GambleGrad out{ce.value - gamble.value, ce.d_pred, gamble.d_bets};
  for (std::size_t i = 0; i < out.d_pred.size(); ++i) out.d_pred[i] -= gamble.d_pred[i];
  for (double& v : out.d_bets.values()) v = -v;
  return out;
}

double gambling_loss(const Tensor& pred, const LabelMap& label, const BettingMap& bets,
                     BetScale scale) {
  check_pair(pred, label);
  validate_prediction(pred);
  check_bets(pred, bets.weights);
  double total = 0.0;
  for (double b : bets.weights.values()) {
    require(b >= 0.0, ErrorCode::kNotNormalized, "bets must be non-negative");
    total += b;
  }
  require(std::abs(total - 1.0) <= kBudgetTolerance, ErrorCode::kNotNormalized,
          "betting map does not sum to one (sum = " + std::to_string(total) + ")");
  return gambling_loss_grad(pred, label, bets.weights, scale).value;
}

double segmenter_gambling_loss(const Tensor& pred, const LabelMap& label, const BettingMap& bets,
                               BetScale scale) {
  const double gamble = gambling_loss(pred, label, bets, scale);
  return mean_cross_entropy(pred, label) - gamble;
}

double binary_cross_entropy(double score, double target) {
  const double s = clamp_score(score);
  return -(target * std::log(s) + (1.0 - target) * std::log(1.0 - s));
}

ScoreGrad bce_mean_grad(const Tensor& scores, double target) {
  require(!scores.empty(), ErrorCode::kShapeMismatch, "empty score grid");
  ScoreGrad out{0.0, Tensor(scores.channels(), scores.height(), scores.width())};
  const double inv = 1.0 / static_cast<double>(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double raw = scores[i];
    const double s = clamp_score(raw);
    sum += -(target * std::log(s) + (1.0 - target) * std::log(1.0 - s));
    if (raw >= kProbEpsilon && raw <= 1.0 - kProbEpsilon) {
      out.d_scores[i] = inv * (-target / s + (1.0 - target) / (1.0 - s));
    }
  }
  out.value = sum * inv;
  return out;
}

double discriminator_loss(const Tensor& fake_scores, const Tensor& real_scores) {
  return bce_mean_grad(fake_scores, 0.0).value + bce_mean_grad(real_scores, 1.0).value;
}

double discriminator_loss(double fake_score, double real_score) {
  return binary_cross_entropy(fake_score, 0.0) + binary_cross_entropy(real_score, 1.0);
}

double generator_adversarial_loss(const Tensor& fake_scores, double lambda) {
  require(lambda >= 0.0, ErrorCode::kInvalidArgument, "adversarial weight must be non-negative");
  return lambda * bce_mean_grad(fake_scores, 1.0).value;
}

double generator_adversarial_loss(double fake_score, double lambda) {
  require(lambda >= 0.0, ErrorCode::kInvalidArgument, "adversarial weight must be non-negative");
  return lambda * binary_cross_entropy(fake_score, 1.0);
}

EmbeddingGrad embedding_loss_grad(std::span<const double> fake_embedding,
                                  std::span<const double> real_embedding) {
  require(fake_embedding.size() == real_embedding.size(), ErrorCode::kShapeMismatch,
          "embedding dimensions differ");
  EmbeddingGrad out;
  out.d_fake.resize(fake_embedding.size());
  out.d_real.resize(real_embedding.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < fake_embedding.size(); ++i) {
    const double d = fake_embedding[i] - real_embedding[i];
    sq += d * d;
  }
  out.value = std::sqrt(sq);
  if (out.value > 0.0) {
    for (std::size_t i = 0; i < fake_embedding.size(); ++i) {
      const double g = (fake_embedding[i] - real_embedding[i]) / out.value;
      out.d_fake[i] = g;
      out.d_real[i] = -g;
    }
  }
  return out;
}

double embedding_loss(std::span<const double> fake_embedding,
                      std::span<const double> real_embedding) {
  return embedding_loss_grad(fake_embedding, real_embedding).value;
}

}  // namespace gamblenet::losses
