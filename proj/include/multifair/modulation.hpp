#pragma once

// Modulation factors and auxiliary losses: modality balancing, gradient
// direction alignment, fairness-aware scaling, the fairness-gap loss and the
// trigger that gates the fairness path.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "multifair/diffcore.hpp"
#include "multifair/error.hpp"
#include "multifair/metrics.hpp"

namespace multifair::modulation {

/// Floor applied to AUC improvements before they enter the balancing ratio.
inline constexpr double kMinDelta = 1e-4;
inline constexpr double kMinFairnessFactor = 0.1;
inline constexpr double kMaxFairnessFactor = 10.0;

struct FairnessParams {
  double delta = 0.3;      // modulation strength
  double tau = 0.04;       // fairness threshold (also the trigger gap)
  double lambda_f = 0.5;   // fairness penalty weight
  double lambda_gm = 0.15; // direction-loss weight

  void validate() const {
    if (!(delta >= 0)) throw ConfigError("delta must be >= 0", "delta");
    if (!(tau > 0)) throw ConfigError("tau must be > 0", "tau");
    if (!(lambda_f >= 0)) throw ConfigError("lambda_f must be >= 0", "lambda_f");
    if (!(lambda_gm >= 0)) throw ConfigError("lambda_gm must be >= 0", "lambda_gm");
  }
};

/// max(current - previous, 1e-4).
inline double auc_delta(double previous, double current) {
  return std::max(current - previous, kMinDelta);
}

/// B_i = rho * (sum of the other modalities' deltas) / (sum of all deltas).
inline std::vector<double> balancing_factors(std::span<const double> deltas, double rho) {
  if (deltas.size() < 2) throw ContractError("balancing_factors: needs at least two modalities");
  double total = 0;
  for (double d : deltas) {
    if (!(d > 0)) throw ContractError("balancing_factors: deltas must be positive");
    total += d;
  }
  std::vector<double> b;
  b.reserve(deltas.size());
  for (double d : deltas) b.push_back(rho * (total - d) / total);
  return b;
}

/// Per-modality AUC history feeding the balancing factors.
class ModalityLearningState {
 public:
  ModalityLearningState() = default;
  ModalityLearningState(std::size_t modalities, double rho) : rho_(rho), previous_(modalities), deltas_(modalities) {}

  double rho() const noexcept { return rho_; }
  std::size_t modalities() const noexcept { return previous_.size(); }

  /// Records one AUC measurement per modality. Undefined measurements keep
  /// the prior value. Deltas become available from the second measurement on.
  void observe(std::span<const std::optional<double>> current) {
    if (current.size() != previous_.size()) throw ContractError("observe: modality count mismatch");
    for (std::size_t i = 0; i < current.size(); ++i) {
      if (!current[i]) continue;
      if (previous_[i]) deltas_[i] = auc_delta(*previous_[i], *current[i]);
      previous_[i] = current[i];
    }
  }

  bool has_deltas() const {
    return std::all_of(deltas_.begin(), deltas_.end(), [](const auto& d) { return d.has_value(); });
  }

  std::vector<double> deltas() const {
    std::vector<double> out;
    for (const auto& d : deltas_) out.push_back(d.value_or(kMinDelta));
    return out;
  }

  /// Balancing factors, or all ones until every modality has a delta.
  std::vector<double> factors() const {
    if (!has_deltas()) return std::vector<double>(previous_.size(), 1.0);
    return balancing_factors(deltas(), rho_);
  }

  std::optional<double> last_auc(std::size_t i) const { return previous_.at(i); }

  bool operator==(const ModalityLearningState&) const = default;

 private:
  double rho_ = 1.2;
  std::vector<std::optional<double>> previous_;
  std::vector<std::optional<double>> deltas_;
};

/// L_gm = (1/M) sum_i (|B_i| - B_i * sim_i). B is constant; sims carry gradient.
inline diff::Value direction_loss(std::span<const double> factors, std::span<const diff::Value> sims) {
  if (factors.size() != sims.size() || sims.empty()) {
    throw ContractError("direction_loss: factor and similarity counts differ");
  }
  diff::Value total;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    if (!sims[i].is_scalar()) throw ShapeError("direction_loss: similarities must be scalars");
    diff::Value term = diff::shift(diff::scale(sims[i], -factors[i]), std::abs(factors[i]));
    total = total.valid() ? diff::add(total, term) : term;
  }
  return diff::scale(total, 1.0 / static_cast<double>(sims.size()));
}

inline double direction_loss(std::span<const double> factors, std::span<const double> sims) {
  if (factors.size() != sims.size() || sims.empty()) {
    throw ContractError("direction_loss: factor and similarity counts differ");
  }
  double total = 0;
  for (std::size_t i = 0; i < sims.size(); ++i) total += std::abs(factors[i]) - factors[i] * sims[i];
  return total / static_cast<double>(sims.size());
}

/// F = 1 + delta * (mean - group) / tau, clamped to [0.1, 10].
inline double fairness_factor(double mean_ema, double group_ema, double delta, double tau) {
  if (!(tau > 0)) throw ConfigError("tau must be > 0", "tau");
  const double f = 1.0 + delta * (mean_ema - group_ema) / tau;
  return std::clamp(f, kMinFairnessFactor, kMaxFairnessFactor);
}

/// sum_g p_g F_g over the groups present in a batch; the proportions are
/// renormalized over those groups. `counts[g]` is the batch count of group g.
inline double batch_fairness_factor(std::span<const double> counts, std::span<const double> factors) {
  if (counts.size() != factors.size()) throw ContractError("batch_fairness_factor: size mismatch");
  double total = 0;
  for (double c : counts) {
    if (c < 0) throw ContractError("batch_fairness_factor: negative group count");
    total += c;
  }
  if (total <= 0) throw ContractError("batch_fairness_factor: empty batch");
  double f = 0;
  for (std::size_t g = 0; g < counts.size(); ++g) f += (counts[g] / total) * factors[g];
  return f;
}

/// EMA cells for the fairness-gap loss: table[i][g] is the (possibly
/// differentiable) EMA of modality i, group g; std::nullopt when uninitialized.
using EmaCellTable = std::vector<std::vector<std::optional<diff::Value>>>;

/// F_G = (1/M) sum_i (1/G) sum_g |EMA_{g,i} - mean_i|.
inline diff::Value fairness_gap_loss(const EmaCellTable& table) {
  if (table.empty() || table.front().empty()) throw ContractError("fairness_gap_loss: empty table");
  diff::Value total;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& row = table[i];
    diff::Value mean;
    for (std::size_t g = 0; g < row.size(); ++g) {
      if (!row[g]) {
        throw StateError("fairness_gap_loss: EMA cell (" + std::to_string(i) + ", " + std::to_string(g) +
                         ") is uninitialized");
      }
      mean = mean.valid() ? diff::add(mean, *row[g]) : *row[g];
    }
    const double inv_g = 1.0 / static_cast<double>(row.size());
    mean = diff::scale(mean, inv_g);
    diff::Value dev;
    for (const auto& cell : row) {
      diff::Value term = diff::abs(diff::sub(*cell, mean));
      dev = dev.valid() ? diff::add(dev, term) : term;
    }
    dev = diff::scale(dev, inv_g);
    total = total.valid() ? diff::add(total, dev) : dev;
  }
  return diff::scale(total, 1.0 / static_cast<double>(table.size()));
}

/// Plain-number form over an EMA tracker; StateError on uninitialized cells.
inline double fairness_gap_loss(const metrics::EmaAucState& state) {
  double total = 0;
  for (std::size_t i = 0; i < state.rows(); ++i) {
    const double mean = metrics::mean_group_ema(state, i);
    double dev = 0;
    for (std::size_t g = 0; g < state.groups(); ++g) dev += std::abs(*state.value(i, g) - mean);
    total += dev / static_cast<double>(state.groups());
  }
  return total / static_cast<double>(state.rows());
}

/// True iff the best-minus-worst initialized group EMA reaches tau. False
/// with fewer than two initialized groups.
inline bool trigger(std::span<const std::optional<double>> group_emas, double tau) {
  std::vector<double> v;
  for (const auto& e : group_emas) {
    if (e) v.push_back(*e);
  }
  if (v.size() < 2) return false;
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return *hi - *lo >= tau;
}

}  // namespace multifair::modulation
