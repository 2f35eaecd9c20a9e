#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "multifair/diffcore.hpp"
#include "multifair/error.hpp"

namespace multifair::metrics {

/// Mann-Whitney AUC: the share of positive/negative pairs ordered correctly,
/// ties counted as one half. std::nullopt when either class is absent.
inline std::optional<double> hard_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("hard_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Twice the U statistic, kept integral so the result is exact.
  std::uint64_t twice_u = 0, negatives_below = 0, positives = 0, negatives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      const int y = labels[order[j]];
      if (y != 0 && y != 1) throw InputError("hard_auc: labels must be 0 or 1");
      (y == 1 ? pos : neg) += 1;
      ++j;
    }
    twice_u += 2 * pos * negatives_below + pos * neg;
    negatives_below += neg;
    positives += pos;
    negatives += neg;
    i = j;
  }
  if (positives == 0 || negatives == 0) return std::nullopt;
  return (static_cast<double>(twice_u) / 2.0) / static_cast<double>(positives * negatives);
}

/// Mean over positive/negative pairs of sigmoid((s_p - s_n) / kappa), recorded
/// on the scores' tape. `scores` is an n x 1 column. std::nullopt for single-class input.
inline std::optional<diff::Value> surrogate_auc(const diff::Value& scores, std::span<const int> labels,
                                                double kappa) {
  if (!(kappa > 0)) throw ConfigError("surrogate AUC temperature must be positive", "kappa");
  if (scores.cols() != 1 || scores.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw ShapeError("surrogate_auc: expected an n x 1 score column matching the labels");
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) pos.push_back(i);
    else if (labels[i] == 0) neg.push_back(i);
    else throw InputError("surrogate_auc: labels must be 0 or 1");
  }
  if (pos.empty() || neg.empty()) return std::nullopt;
  diff::Tape& t = scores.tape();
  const auto p = static_cast<Eigen::Index>(pos.size());
  const auto q = static_cast<Eigen::Index>(neg.size());
  // P x Q matrix of s_p - s_n.
  diff::Value sp = diff::matmul(diff::gather_rows(scores, pos), t.constant(Matrix::Ones(1, q)));
  diff::Value sn = diff::matmul(t.constant(Matrix::Ones(p, 1)), diff::transpose(diff::gather_rows(scores, neg)));
  return diff::mean(diff::sigmoid(diff::scale(diff::sub(sp, sn), 1.0 / kappa)));
}

/// Plain-number form of surrogate_auc.
inline std::optional<double> surrogate_auc(std::span<const double> scores, std::span<const int> labels,
                                           double kappa) {
  diff::Tape tape;
  Matrix col(static_cast<Eigen::Index>(scores.size()), 1);
  for (std::size_t i = 0; i < scores.size(); ++i) col(static_cast<Eigen::Index>(i), 0) = scores[i];
  auto v = surrogate_auc(tape.constant(col), labels, kappa);
  if (!v) return std::nullopt;
  return v->item();
}

/// Exponentially smoothed AUC per (row, group) cell. Rows are modalities (or
/// a single row for the fused model).
class EmaAucState {
 public:
  EmaAucState() = default;
  EmaAucState(std::size_t rows, std::size_t groups, double smoothing)
      : rows_(rows), groups_(groups), smoothing_(smoothing), cells_(rows * groups) {
    if (!(smoothing >= 0.0 && smoothing < 1.0)) {
      throw ConfigError("EMA smoothing must lie in [0, 1)", "smoothing");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t groups() const noexcept { return groups_; }
  double smoothing() const noexcept { return smoothing_; }

  bool initialized(std::size_t row, std::size_t group) const { return cell(row, group).has_value(); }
  std::optional<double> value(std::size_t row, std::size_t group) const { return cell(row, group); }

  /// new = s * old + (1 - s) * batch; the first update stores batch directly.
  double update(std::size_t row, std::size_t group, double batch_auc) {
    if (!(batch_auc >= 0.0 && batch_auc <= 1.0)) throw ContractError("EMA update needs a batch AUC in [0, 1]");
    auto& c = cell(row, group);
    c = c ? smoothing_ * *c + (1.0 - smoothing_) * batch_auc : batch_auc;
    return *c;
  }

  bool operator==(const EmaAucState&) const = default;

 private:
  std::optional<double>& cell(std::size_t row, std::size_t group) {
    if (row >= rows_ || group >= groups_) throw InputError("EMA cell index out of range");
    return cells_[row * groups_ + group];
  }
  const std::optional<double>& cell(std::size_t row, std::size_t group) const {
    if (row >= rows_ || group >= groups_) throw InputError("EMA cell index out of range");
    return cells_[row * groups_ + group];
  }

  std::size_t rows_ = 0;
  std::size_t groups_ = 0;
  double smoothing_ = 0.9;
  std::vector<std::optional<double>> cells_;
};

/// Updates one cell with an explicit smoothing factor. ConfigError when s is
/// outside [0, 1) or differs from the state's configured smoothing.
inline double ema_update(EmaAucState& state, std::size_t row, std::size_t group, double batch_auc, double s) {
  if (!(s >= 0.0 && s < 1.0)) throw ConfigError("EMA smoothing must lie in [0, 1)", "smoothing");
  if (s != state.smoothing()) throw ConfigError("smoothing differs from the tracker's configuration", "smoothing");
  return state.update(row, group, batch_auc);
}

/// Mean EMA over all groups of one row. StateError if any cell is uninitialized.
inline double mean_group_ema(const EmaAucState& state, std::size_t row) {
  if (state.groups() == 0) throw StateError("EMA state has no groups");
  double total = 0;
  for (std::size_t g = 0; g < state.groups(); ++g) {
    auto v = state.value(row, g);
    if (!v) throw StateError("EMA cell (" + std::to_string(row) + ", " + std::to_string(g) + ") is uninitialized");
    total += *v;
  }
  return total / static_cast<double>(state.groups());
}

/// Equity-scaled AUC: overall / (1 + sum_g |overall - group_g|).
inline double es_auc(double overall, std::span<const double> group_aucs) {
  double disparity = 0;
  for (double g : group_aucs) disparity += std::abs(overall - g);
  return overall / (1.0 + disparity);
}

struct ScoredGroupBatch {
  std::vector<double> scores;  // positive-class probability
  std::vector<int> labels;     // 0 / 1
  std::vector<int> groups;     // group id per sample

  void validate() const {
    if (scores.size() != labels.size() || scores.size() != groups.size()) {
      throw ShapeError("scored batch: scores, labels and groups differ in length");
    }
    for (int y : labels) {
      if (y != 0 && y != 1) throw InputError("scored batch: labels must be 0 or 1");
    }
    for (double s : scores) {
      if (!(s >= 0.0 && s <= 1.0)) throw InputError("scored batch: scores must lie in [0, 1]");
    }
  }

  std::vector<int> present_groups() const {
    std::vector<int> g(groups);
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
    return g;
  }
};

/// Demographic parity difference: spread of P(score >= threshold | group).
inline double dpd(const ScoredGroupBatch& batch, double threshold = 0.5) {
  batch.validate();
  std::map<int, std::pair<double, double>> counts;  // group -> (predicted positive, total)
  for (std::size_t i = 0; i < batch.scores.size(); ++i) {
    auto& c = counts[batch.groups[i]];
    c.first += batch.scores[i] >= threshold ? 1.0 : 0.0;
    c.second += 1.0;
  }
  if (counts.size() < 2) return 0.0;
  double lo = 1.0, hi = 0.0;
  for (const auto& [g, c] : counts) {
    const double rate = c.first / c.second;
    lo = std::min(lo, rate);
    hi = std::max(hi, rate);
  }
  return hi - lo;
}

/// Equalized-odds difference: the larger of the TPR spread and the FPR spread
/// across groups. Groups lacking positives (or negatives) drop out of the
/// TPR (or FPR) comparison.
inline double deodds(const ScoredGroupBatch& batch, double threshold = 0.5) {
  batch.validate();
  struct Confusion { double tp = 0, pos = 0, fp = 0, neg = 0; };
  std::map<int, Confusion> per_group;
  for (std::size_t i = 0; i < batch.scores.size(); ++i) {
    auto& c = per_group[batch.groups[i]];
    const bool predicted = batch.scores[i] >= threshold;
    if (batch.labels[i] == 1) {
      c.pos += 1;
      c.tp += predicted ? 1 : 0;
    } else {
      c.neg += 1;
      c.fp += predicted ? 1 : 0;
    }
  }
  auto spread = [](const std::vector<double>& rates) {
    if (rates.size() < 2) return 0.0;
    auto [lo, hi] = std::minmax_element(rates.begin(), rates.end());
    return *hi - *lo;
  };
  std::vector<double> tpr, fpr;
  for (const auto& [g, c] : per_group) {
    if (c.pos > 0) tpr.push_back(c.tp / c.pos);
    if (c.neg > 0) fpr.push_back(c.fp / c.neg);
  }
  return std::max(spread(tpr), spread(fpr));
}

struct EvaluationMetrics {
  std::optional<double> auc;
  double es_auc = 0;
  std::map<int, std::optional<double>> group_auc;
  double dpd = 0;
  double deodds = 0;

  /// Best minus worst defined group AUC (0 with fewer than two).
  double group_gap() const {
    std::vector<double> v;
    for (const auto& [g, a] : group_auc) {
      if (a) v.push_back(*a);
    }
    if (v.size() < 2) return 0.0;
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo;
  }
};

/// AUC, per-group AUC, ES-AUC (over groups with a defined AUC), DPD, DEOdds.
inline EvaluationMetrics evaluate_scores(const ScoredGroupBatch& batch, double threshold = 0.5) {
  batch.validate();
  EvaluationMetrics m;
  m.auc = hard_auc(batch.scores, batch.labels);
  std::vector<double> defined;
  for (int g : batch.present_groups()) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < batch.scores.size(); ++i) {
      if (batch.groups[i] == g) {
        s.push_back(batch.scores[i]);
        y.push_back(batch.labels[i]);
      }
    }
    m.group_auc[g] = hard_auc(s, y);
    if (m.group_auc[g]) defined.push_back(*m.group_auc[g]);
  }
  m.es_auc = m.auc ? es_auc(*m.auc, defined) : 0.0;
  m.dpd = dpd(batch, threshold);
  m.deodds = deodds(batch, threshold);
  return m;
}

}  // namespace multifair::metrics
