#pragma once

// One training step assembles the task loss, the direction-alignment loss
// and (when the trigger fires) the fairness-gap loss, reverses the tape once,
// and applies gradient descent with per-encoder modulation factors.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "multifair/data.hpp"
#include "multifair/diffcore.hpp"
#include "multifair/error.hpp"
#include "multifair/metrics.hpp"
#include "multifair/models.hpp"
#include "multifair/modulation.hpp"

namespace multifair {

enum class Mode { full, modality_only, fairness_only, plain };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::full: return "full";
    case Mode::modality_only: return "modality_only";
    case Mode::fairness_only: return "fairness_only";
    case Mode::plain: return "plain";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(const std::string& s) {
  if (s == "full") return Mode::full;
  if (s == "modality_only") return Mode::modality_only;
  if (s == "fairness_only") return Mode::fairness_only;
  if (s == "plain") return Mode::plain;
  return std::nullopt;
}

/// How often modality AUC progress (and hence B) is re-measured.
enum class DeltaGranularity { per_epoch, per_k_batches };

struct TrainConfig {
  double learning_rate = 3e-5;
  int epochs = 10;
  int batch_size = 64;
  double rho = 1.2;
  double lambda_gm = 0.15;
  double lambda_f = 0.5;
  double delta = 0.3;
  double tau = 0.04;
  double smoothing = 0.9;
  double kappa = 0.1;
  double lambda_aux = 0.3;
  Mode mode = Mode::full;
  std::uint64_t seed = 1;
  DeltaGranularity granularity = DeltaGranularity::per_epoch;
  int delta_window = 10;  // batches per measurement for per_k_batches

  bool modality_modulation() const noexcept { return mode == Mode::full || mode == Mode::modality_only; }
  bool fairness_modulation() const noexcept { return mode == Mode::full || mode == Mode::fairness_only; }

  modulation::FairnessParams fairness() const { return {delta, tau, lambda_f, lambda_gm}; }

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0", "learning_rate");
    if (epochs < 1) throw ConfigError("epochs must be >= 1", "epochs");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2", "batch_size");
    if (!(rho >= 0)) throw ConfigError("rho must be >= 0", "rho");
    if (!(smoothing >= 0 && smoothing < 1)) throw ConfigError("smoothing must lie in [0, 1)", "smoothing");
    if (!(kappa > 0)) throw ConfigError("kappa must be > 0", "kappa");
    if (!(lambda_aux >= 0)) throw ConfigError("lambda_aux must be >= 0", "lambda_aux");
    if (delta_window < 1) throw ConfigError("delta_window must be >= 1", "delta_window");
    fairness().validate();
  }
};

/// EMA tables, AUC-progress history and the prediction window used to
/// measure modality progress.
struct Trackers {
  metrics::EmaAucState modality_ema;  // modalities x groups, from classifier scores
  metrics::EmaAucState fusion_ema;    // 1 x groups, from fused scores
  modulation::ModalityLearningState learning;
  std::vector<std::vector<double>> window_scores;  // per modality
  std::vector<int> window_labels;
  int window_batches = 0;

  static Trackers create(std::size_t modalities, std::size_t groups, const TrainConfig& config) {
    Trackers t;
    t.modality_ema = metrics::EmaAucState(modalities, groups, config.smoothing);
    t.fusion_ema = metrics::EmaAucState(1, groups, config.smoothing);
    t.learning = modulation::ModalityLearningState(modalities, config.rho);
    t.window_scores.resize(modalities);
    return t;
  }

  std::vector<std::optional<double>> fusion_group_emas() const {
    std::vector<std::optional<double>> v;
    for (std::size_t g = 0; g < fusion_ema.groups(); ++g) v.push_back(fusion_ema.value(0, g));
    return v;
  }

  /// Converts the accumulated window into one AUC-progress observation.
  void close_window() {
    if (window_labels.empty()) return;
    std::vector<std::optional<double>> aucs;
    for (const auto& s : window_scores) aucs.push_back(metrics::hard_auc(s, window_labels));
    learning.observe(aucs);
    for (auto& s : window_scores) s.clear();
    window_labels.clear();
    window_batches = 0;
  }
};

/// task + lambda_gm * L_gm (+ lambda_f * F_G when the fairness path is active).
inline diff::Value total_loss(const diff::Value& task, const diff::Value& direction, const diff::Value& gap,
                              double lambda_gm, double lambda_f, bool fairness_active) {
  diff::Value total = diff::add(task, diff::scale(direction, lambda_gm));
  if (fairness_active) total = diff::add(total, diff::scale(gap, lambda_f));
  return total;
}

inline double total_loss(double task, double direction, double gap, double lambda_gm, double lambda_f,
                         bool fairness_active) {
  return task + lambda_gm * direction + (fairness_active ? lambda_f * gap : 0.0);
}

/// Gradient descent step. Encoder i moves by lr * B_i * (f_i when the
/// fairness path is active) * grad; every other group by lr * grad.
inline void apply_update(ModelState& state, const diff::GradientMap& grads, double learning_rate,
                         std::span<const double> balancing, std::span<const double> fairness,
                         bool fairness_active) {
  const std::size_t modalities = state.config().modalities();
  if (balancing.size() != modalities || (fairness_active && fairness.size() != modalities)) {
    throw ContractError("apply_update: one modulation factor per modality is required");
  }
  for (const auto& group : state.groups()) {
    double factor = 1.0;
    for (std::size_t m = 0; m < modalities; ++m) {
      if (group.name == encoder_group(m)) {
        factor = balancing[m] * (fairness_active ? fairness[m] : 1.0);
      }
    }
    for (const auto& name : group.params) {
      auto it = grads.find(name);
      if (it == grads.end()) throw ContractError("apply_update: missing gradient for '" + name + "'");
      state.at(name) -= (learning_rate * factor) * it->second;
    }
  }
}

struct StepRecord {
  double task_loss = 0;
  double classifier_loss = 0;  // sum over modalities
  double direction_loss = 0;
  double fairness_gap = 0;
  double total = 0;
  std::vector<double> balancing;
  std::vector<double> fairness_factors;
  std::vector<double> similarities;
  bool fairness_active = false;
};

struct StepOptions {
  bool commit_trackers = true;  // false: EMA history and AUC windows stay untouched
  bool force_fairness = false;  // fairness path on regardless of the trigger
  std::optional<std::vector<double>> balancing;  // overrides the tracked factors
};

/// Forward, loss assembly and one reverse pass on a single batch. Returns the
/// record and the gradient map; does not modify the model.
inline std::pair<StepRecord, diff::GradientMap> compute_step(const ModelState& state,
                                                             const data::LabeledBatch& batch, Trackers& trackers,
                                                             const TrainConfig& config,
                                                             const StepOptions& options = {}) {
  const std::size_t M = state.config().modalities();
  const std::size_t G = trackers.modality_ema.groups();
  diff::Tape tape;
  BoundModel model(tape, state);
  ForwardPass pass = forward(model, batch.features, config.lambda_aux);

  StepRecord rec;
  diff::Value task = diff::cross_entropy(pass.probs, batch.labels);
  std::vector<diff::Value> cls_losses;
  diff::Value cls_total;
  for (std::size_t m = 0; m < M; ++m) {
    cls_losses.push_back(diff::cross_entropy(pass.modality_probs[m], batch.labels));
    cls_total = cls_total.valid() ? diff::add(cls_total, cls_losses.back()) : cls_losses.back();
  }
  rec.task_loss = task.item();
  rec.classifier_loss = cls_total.item();

  // Surrogate-AUC EMA cells. Only this batch's (1 - s) contribution is
  // differentiable; history enters as a constant.
  const double s = config.smoothing;
  metrics::EmaAucState modality_ema = trackers.modality_ema;
  metrics::EmaAucState fusion_ema = trackers.fusion_ema;
  modulation::EmaCellTable cells(M, std::vector<std::optional<diff::Value>>(G));
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t g = 0; g < G; ++g) {
      if (auto v = modality_ema.value(m, g)) cells[m][g] = tape.constant(Matrix::Constant(1, 1, *v));
    }
  }
  diff::Value fused_scores = diff::slice_cols(pass.probs, 1, 1);
  for (std::size_t g = 0; g < G; ++g) {
    std::vector<std::size_t> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch.groups[i] == static_cast<int>(g)) {
        rows.push_back(i);
        labels.push_back(batch.labels[i]);
      }
    }
    if (rows.empty()) continue;
    for (std::size_t m = 0; m < M; ++m) {
      diff::Value scores = diff::gather_rows(pass.modality_scores[m], rows);
      auto surrogate = metrics::surrogate_auc(scores, labels, config.kappa);
      if (!surrogate) continue;
      auto old = modality_ema.value(m, g);
      modality_ema.update(m, g, surrogate->item());
      cells[m][g] = old ? diff::shift(diff::scale(*surrogate, 1.0 - s), s * *old) : *surrogate;
    }
    std::vector<double> fs;
    for (std::size_t r : rows) fs.push_back(fused_scores.data()(static_cast<Eigen::Index>(r), 0));
    if (auto fused = metrics::surrogate_auc(fs, labels, config.kappa)) fusion_ema.update(0, g, *fused);
  }

  // Modality balancing and direction alignment.
  rec.balancing = options.balancing ? *options.balancing
                  : config.modality_modulation() ? trackers.learning.factors()
                                                 : std::vector<double>(M, 1.0);
  const double lambda_gm = config.modality_modulation() ? config.lambda_gm : 0.0;
  diff::Value direction = tape.constant(Matrix::Zero(1, 1));
  if (lambda_gm > 0) {
    std::vector<diff::Value> task_grads = tape.gradients(task, pass.features);
    std::vector<diff::Value> sims;
    for (std::size_t m = 0; m < M; ++m) {
      diff::Value cls_input = pass.classifier_inputs[m];
      diff::Value cls_grad = tape.gradients(cls_losses[m], std::span<const diff::Value>(&cls_input, 1)).front();
      sims.push_back(diff::flat_cosine(task_grads[m], cls_grad));
      rec.similarities.push_back(sims.back().item());
    }
    direction = modulation::direction_loss(rec.balancing, sims);
  }
  rec.direction_loss = direction.item();

  // Fairness path, gated by the fused-model group gap.
  rec.fairness_factors.assign(M, 1.0);
  diff::Value gap = tape.constant(Matrix::Zero(1, 1));
  if (config.fairness_modulation()) {
    std::vector<std::optional<double>> fusion_groups;
    for (std::size_t g = 0; g < G; ++g) fusion_groups.push_back(fusion_ema.value(0, g));
    bool cells_ready = true;
    for (const auto& row : cells) {
      for (const auto& c : row) cells_ready = cells_ready && c.has_value();
    }
    rec.fairness_active =
        cells_ready && (options.force_fairness || modulation::trigger(fusion_groups, config.tau));
  }
  if (rec.fairness_active) {
    gap = modulation::fairness_gap_loss(cells);
    rec.fairness_gap = gap.item();
    const auto counts = batch.group_counts(G);
    for (std::size_t m = 0; m < M; ++m) {
      const double mean = metrics::mean_group_ema(modality_ema, m);
      std::vector<double> factors;
      for (std::size_t g = 0; g < G; ++g) {
        factors.push_back(modulation::fairness_factor(mean, *modality_ema.value(m, g), config.delta, config.tau));
      }
      rec.fairness_factors[m] = modulation::batch_fairness_factor(counts, factors);
    }
  }

  diff::Value objective =
      diff::add(total_loss(task, direction, gap, lambda_gm, config.lambda_f, rec.fairness_active), cls_total);
  rec.total = objective.item();
  if (!std::isfinite(rec.total)) throw NumericError("non-finite training loss");
  diff::GradientMap grads = tape.backward(objective);

  if (options.commit_trackers) {
    trackers.modality_ema = std::move(modality_ema);
    trackers.fusion_ema = std::move(fusion_ema);
    for (std::size_t m = 0; m < M; ++m) {
      const auto& p = pass.modality_probs[m].data();
      for (Eigen::Index i = 0; i < p.rows(); ++i) trackers.window_scores[m].push_back(p(i, 1));
    }
    trackers.window_labels.insert(trackers.window_labels.end(), batch.labels.begin(), batch.labels.end());
    trackers.window_batches += 1;
  }
  return {std::move(rec), std::move(grads)};
}

/// compute_step followed by apply_update.
inline StepRecord train_step(ModelState& state, const data::LabeledBatch& batch, Trackers& trackers,
                             const TrainConfig& config, const StepOptions& options = {}) {
  auto [rec, grads] = compute_step(state, batch, trackers, config, options);
  apply_update(state, grads, config.learning_rate, rec.balancing, rec.fairness_factors, rec.fairness_active);
  if (options.commit_trackers && config.granularity == DeltaGranularity::per_k_batches &&
      trackers.window_batches >= config.delta_window) {
    trackers.close_window();
  }
  return rec;
}

/// Fused-model metrics plus each auxiliary classifier's AUC.
struct EvaluationBundle {
  metrics::EvaluationMetrics fusion;
  std::vector<std::optional<double>> modality_auc;
};

/// Scores `which` (all samples when std::nullopt) with groups from `attribute`.
inline EvaluationBundle evaluate(const ModelState& state, const data::MultimodalDataset& ds,
                                 std::optional<data::Split> which, const std::string& attribute = data::kPrimaryGroup) {
  std::vector<std::size_t> rows = ds.indices(which);
  if (rows.empty()) throw ContractError("evaluate: no samples in the requested split");
  data::LabeledBatch batch = data::gather(ds, rows, attribute);

  diff::Tape tape;
  BoundModel model(tape, state);
  ForwardPass pass = forward(model, batch.features, 0.0);

  EvaluationBundle out;
  metrics::ScoredGroupBatch scored;
  scored.labels = batch.labels;
  scored.groups = batch.groups;
  const Matrix& p = pass.probs.data();
  for (Eigen::Index i = 0; i < p.rows(); ++i) scored.scores.push_back(std::clamp(p(i, 1), 0.0, 1.0));
  out.fusion = metrics::evaluate_scores(scored);
  for (const auto& mp : pass.modality_probs) {
    std::vector<double> s;
    for (Eigen::Index i = 0; i < mp.rows(); ++i) s.push_back(mp.data()(i, 1));
    out.modality_auc.push_back(metrics::hard_auc(s, batch.labels));
  }
  return out;
}

struct EpochRecord {
  int epoch = 0;
  double task_loss = 0;
  double direction_loss = 0;
  double fairness_gap = 0;  // mean over batches where the fairness path ran
  std::vector<double> balancing;
  std::vector<double> fairness_factors;
  double trigger_fraction = 0;
  std::optional<double> fusion_auc;
  std::map<int, std::optional<double>> group_auc;
  double es_auc = 0;
  double dpd = 0;
  double deodds = 0;
  std::vector<std::optional<double>> modality_auc;

  bool operator==(const EpochRecord&) const = default;
};

/// One pass over the training split followed by validation metrics (test
/// split when there is no validation data).
inline EpochRecord train_epoch(ModelState& state, const data::MultimodalDataset& ds, Trackers& trackers,
                               const TrainConfig& config, int epoch) {
  const auto batches = data::batches(ds, data::Split::train, static_cast<std::size_t>(config.batch_size),
                                     config.seed, static_cast<std::uint64_t>(epoch));
  const std::size_t M = state.config().modalities();
  EpochRecord rec;
  rec.epoch = epoch;
  rec.balancing.assign(M, 0.0);
  rec.fairness_factors.assign(M, 0.0);
  std::size_t active = 0;
  for (const auto& batch : batches) {
    StepRecord step;
    try {
      step = train_step(state, batch, trackers, config);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch));
    }
    rec.task_loss += step.task_loss;
    rec.direction_loss += step.direction_loss;
    for (std::size_t m = 0; m < M; ++m) rec.balancing[m] += step.balancing[m];
    if (step.fairness_active) {
      ++active;
      rec.fairness_gap += step.fairness_gap;
      for (std::size_t m = 0; m < M; ++m) rec.fairness_factors[m] += step.fairness_factors[m];
    }
  }
  const double nb = static_cast<double>(batches.size());
  rec.task_loss /= nb;
  rec.direction_loss /= nb;
  for (double& b : rec.balancing) b /= nb;
  if (active > 0) {
    rec.fairness_gap /= static_cast<double>(active);
    for (double& f : rec.fairness_factors) f /= static_cast<double>(active);
  } else {
    rec.fairness_factors.assign(M, 1.0);
  }
  rec.trigger_fraction = static_cast<double>(active) / nb;
  if (config.granularity == DeltaGranularity::per_epoch) trackers.close_window();

  const bool has_val = !ds.indices(data::Split::val).empty();
  EvaluationBundle eval = evaluate(state, ds, has_val ? data::Split::val : data::Split::test);
  rec.fusion_auc = eval.fusion.auc;
  rec.group_auc = eval.fusion.group_auc;
  rec.es_auc = eval.fusion.es_auc;
  rec.dpd = eval.fusion.dpd;
  rec.deodds = eval.fusion.deodds;
  rec.modality_auc = eval.modality_auc;
  return rec;
}

/// Full run over config.epochs. `on_epoch` sees each record as it completes.
inline std::vector<EpochRecord> train(ModelState& state, const data::MultimodalDataset& ds, const TrainConfig& config,
                                      const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  if (ds.modality_count() != state.config().modalities()) {
    throw InputError("dataset and model disagree on the number of modalities");
  }
  Trackers trackers = Trackers::create(state.config().modalities(), ds.group_count(), config);
  std::vector<EpochRecord> records;
  for (int e = 0; e < config.epochs; ++e) {
    records.push_back(train_epoch(state, ds, trackers, config, e));
    if (on_epoch) on_epoch(records.back());
  }
  return records;
}

struct DescentReport {
  bool monotone = true;
  std::vector<double> direction_loss;  // value before each step, plus the final value
  std::vector<double> fairness_gap;
  std::vector<double> task_loss;
};

/// Repeats full-mode updates on one fixed batch with tracker history frozen
/// after a warm-up pass, so L_gm and F_G are fixed functions of the
/// parameters. Reports whether both are non-increasing within `tolerance`
/// per step. Works on a copy of `state`.
inline DescentReport descent_check(const ModelState& state, const data::LabeledBatch& batch, TrainConfig config,
                                   int steps, double tolerance = 1e-6) {
  config.mode = Mode::full;
  ModelState work = state;
  const std::size_t M = state.config().modalities();
  std::size_t G = 0;
  for (int g : batch.groups) G = std::max(G, static_cast<std::size_t>(g) + 1);
  Trackers trackers = Trackers::create(M, G, config);
  // Warm-up: seed the EMA cells from the batch at the starting parameters.
  compute_step(work, batch, trackers, config, {});
  const std::vector<double> balancing = trackers.learning.factors();

  StepOptions options;
  options.commit_trackers = false;
  options.force_fairness = true;
  options.balancing = balancing;

  DescentReport report;
  for (int t = 0; t <= steps; ++t) {
    StepRecord rec;
    diff::GradientMap grads;
    try {
      std::tie(rec, grads) = compute_step(work, batch, trackers, config, options);
    } catch (const NumericError&) {
      report.monotone = false;
      break;
    }
    if (!std::isfinite(rec.direction_loss) || !std::isfinite(rec.fairness_gap)) {
      report.monotone = false;
      break;
    }
    report.direction_loss.push_back(rec.direction_loss);
    report.fairness_gap.push_back(rec.fairness_gap);
    report.task_loss.push_back(rec.task_loss);
    if (t > 0) {
      const std::size_t k = report.direction_loss.size() - 1;
      const bool ok = report.direction_loss[k] <= report.direction_loss[k - 1] + tolerance &&
                      report.fairness_gap[k] <= report.fairness_gap[k - 1] + tolerance &&
                      std::isfinite(report.direction_loss[k]) && std::isfinite(report.fairness_gap[k]);
      report.monotone = report.monotone && ok;
    }
    if (t < steps) {
      apply_update(work, grads, config.learning_rate, rec.balancing, rec.fairness_factors, rec.fairness_active);
    }
  }
  return report;
}

}  // namespace multifair
