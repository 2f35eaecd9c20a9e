#pragma once

// Modality encoders, per-modality auxiliary classifiers, multi-head
// attention fusion and the prediction head, built on diffcore.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "multifair/diffcore.hpp"
#include "multifair/error.hpp"

namespace multifair {

struct ModelConfig {
  std::vector<int> input_dims{16, 16};  // one entry per modality
  std::vector<int> hidden_dims{32};     // encoder hidden layers, shared layout across modalities
  int feature_dim = 16;
  int heads = 2;
  int classes = 2;
  std::uint64_t seed = 7;

  std::size_t modalities() const noexcept { return input_dims.size(); }

  void validate() const {
    if (input_dims.size() < 2) throw ConfigError("at least two modalities are required", "input_dims");
    for (int d : input_dims) {
      if (d < 1) throw ConfigError("modality input dims must be >= 1", "input_dims");
    }
    for (int d : hidden_dims) {
      if (d < 1) throw ConfigError("hidden dims must be >= 1", "hidden_dims");
    }
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1", "feature_dim");
    if (heads < 1) throw ConfigError("heads must be >= 1", "heads");
    if (feature_dim % heads != 0) throw ConfigError("feature_dim must be divisible by heads", "heads");
    if (classes < 2) throw ConfigError("classes must be >= 2", "classes");
  }
};

inline std::string encoder_group(std::size_t m) { return "encoder:" + std::to_string(m); }
inline std::string classifier_group(std::size_t m) { return "classifier:" + std::to_string(m); }

struct Parameter {
  std::string name;
  std::string group;
  Matrix value;
};

/// All trainable weights plus the parameter-group registry.
class ModelState {
 public:
  /// Glorot-uniform weights, zero biases, seeded from config.seed.
  static ModelState initialize(const ModelConfig& config) {
    config.validate();
    ModelState state;
    state.config_ = config;
    std::mt19937_64 rng(config.seed);

    auto linear = [&](const std::string& group, const std::string& prefix, int fan_in, int fan_out,
                      bool bias) {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-a, a);
      Matrix w(fan_in, fan_out);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
      state.add(prefix + (bias ? "/weight" : ""), group, std::move(w));
      if (bias) state.add(prefix + "/bias", group, Matrix::Zero(1, fan_out));
    };

    const int d = config.feature_dim;
    for (std::size_t m = 0; m < config.modalities(); ++m) {
      const std::string g = encoder_group(m);
      int width = config.input_dims[m];
      std::size_t layer = 0;
      for (int hidden : config.hidden_dims) {
        linear(g, g + "/layer" + std::to_string(layer++), width, hidden, true);
        width = hidden;
      }
      linear(g, g + "/layer" + std::to_string(layer), width, d, true);
    }
    for (std::size_t m = 0; m < config.modalities(); ++m) {
      const std::string g = classifier_group(m);
      linear(g, g, d, config.classes, true);
    }
    linear("fusion", "fusion/query", d, d, false);
    linear("fusion", "fusion/key", d, d, false);
    linear("fusion", "fusion/value", d, d, false);
    linear("fusion", "fusion/output", d, d, true);
    linear("head", "head", d, config.classes, true);
    return state;
  }

  const ModelConfig& config() const noexcept { return config_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  const std::vector<diff::ParamGroup>& groups() const noexcept { return groups_; }

  const diff::ParamGroup& group(const std::string& name) const {
    for (const auto& g : groups_) {
      if (g.name == name) return g;
    }
    throw InputError("unknown parameter group '" + name + "'");
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Matrix& at(const std::string& name) { return params_[lookup(name)].value; }
  const Matrix& at(const std::string& name) const { return params_[lookup(name)].value; }

  /// Number of linear layers in each encoder.
  std::size_t encoder_layers() const noexcept { return config_.hidden_dims.size() + 1; }

  /// Text checkpoint; layout documented in docs/checkpoint.md.
  void save(std::ostream& out) const {
    out << "multifair-checkpoint 1\n";
    std::vector<std::pair<std::string, Matrix>> entries;
    auto as_row = [](const std::vector<int>& v) {
      Matrix m(1, static_cast<Eigen::Index>(v.size()));
      for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
      return m;
    };
    entries.emplace_back("config/input_dims", as_row(config_.input_dims));
    entries.emplace_back("config/hidden_dims", as_row(config_.hidden_dims));
    entries.emplace_back("config/feature_dim", as_row({config_.feature_dim}));
    entries.emplace_back("config/heads", as_row({config_.heads}));
    entries.emplace_back("config/classes", as_row({config_.classes}));
    for (const auto& p : params_) entries.emplace_back(p.name, p.value);

    out << "entries " << entries.size() << "\n";
    out << std::setprecision(17);
    for (const auto& [name, m] : entries) {
      out << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
      for (Eigen::Index i = 0; i < m.size(); ++i) out << (i ? " " : "") << m.data()[i];
      out << '\n';
    }
  }

  static ModelState load(std::istream& in) {
    std::string magic;
    int version = 0;
    if (!(in >> magic >> version) || magic != "multifair-checkpoint" || version != 1) {
      throw InputError("not a multifair checkpoint (bad header)");
    }
    std::string tag;
    std::size_t count = 0;
    if (!(in >> tag >> count) || tag != "entries") throw InputError("checkpoint: missing entry count");
    std::map<std::string, Matrix> entries;
    for (std::size_t k = 0; k < count; ++k) {
      std::string name;
      Eigen::Index rows = 0, cols = 0;
      if (!(in >> name >> rows >> cols) || rows < 0 || cols < 0) {
        throw InputError("checkpoint: malformed entry header #" + std::to_string(k));
      }
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        if (!(in >> m.data()[i])) throw InputError("checkpoint: truncated values for '" + name + "'");
      }
      entries[name] = std::move(m);
    }
    auto ints = [&](const std::string& key) {
      auto it = entries.find(key);
      if (it == entries.end()) throw InputError("checkpoint: missing '" + key + "'");
      std::vector<int> v;
      for (Eigen::Index i = 0; i < it->second.size(); ++i) v.push_back(static_cast<int>(it->second.data()[i]));
      return v;
    };
    ModelConfig config;
    config.input_dims = ints("config/input_dims");
    config.hidden_dims = ints("config/hidden_dims");
    config.feature_dim = ints("config/feature_dim").at(0);
    config.heads = ints("config/heads").at(0);
    config.classes = ints("config/classes").at(0);
    ModelState state = initialize(config);
    for (auto& p : state.params_) {
      auto it = entries.find(p.name);
      if (it == entries.end()) throw InputError("checkpoint: missing parameter '" + p.name + "'");
      if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
        throw ShapeError("checkpoint: '" + p.name + "' has shape " +
                         shape_string(it->second.rows(), it->second.cols()) + ", expected " +
                         shape_string(p.value.rows(), p.value.cols()));
      }
      p.value = it->second;
    }
    return state;
  }

 private:
  void add(std::string name, const std::string& group, Matrix value) {
    index_[name] = params_.size();
    auto it = std::find_if(groups_.begin(), groups_.end(),
                           [&](const diff::ParamGroup& g) { return g.name == group; });
    if (it == groups_.end()) {
      groups_.push_back({group, {}});
      it = std::prev(groups_.end());
    }
    it->params.push_back(name);
    params_.push_back({std::move(name), group, std::move(value)});
  }

  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<diff::ParamGroup> groups_;
  std::map<std::string, std::size_t> index_;
};

/// A ModelState whose parameters are registered as leaves of one tape.
class BoundModel {
 public:
  BoundModel(diff::Tape& tape, const ModelState& state) : tape_(&tape), state_(&state) {
    for (const auto& p : state.parameters()) leaves_.emplace(p.name, tape.parameter(p.name, p.value));
  }

  diff::Tape& tape() const noexcept { return *tape_; }
  const ModelState& state() const noexcept { return *state_; }
  const ModelConfig& config() const noexcept { return state_->config(); }

  const diff::Value& param(const std::string& name) const {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }

 private:
  diff::Tape* tape_;
  const ModelState* state_;
  std::map<std::string, diff::Value> leaves_;
};

inline diff::Value linear(const BoundModel& model, const std::string& prefix, const diff::Value& x) {
  return diff::add_row(diff::matmul(x, model.param(prefix + "/weight")), model.param(prefix + "/bias"));
}

/// h_m: relu MLP with a linear output of width feature_dim.
inline diff::Value encode(const BoundModel& model, std::size_t m, const diff::Value& inputs) {
  const auto& cfg = model.config();
  if (m >= cfg.modalities()) {
    throw InputError("encode: modality " + std::to_string(m) + " of " + std::to_string(cfg.modalities()));
  }
  if (inputs.cols() != cfg.input_dims[m]) {
    throw ShapeError("encode: modality " + std::to_string(m) + " expects width " +
                     std::to_string(cfg.input_dims[m]) + ", got " + std::to_string(inputs.cols()));
  }
  const std::string g = encoder_group(m);
  const std::size_t layers = model.state().encoder_layers();
  diff::Value x = inputs;
  for (std::size_t l = 0; l < layers; ++l) {
    x = linear(model, g + "/layer" + std::to_string(l), x);
    if (l + 1 < layers) x = diff::relu(x);
  }
  return x;
}

inline diff::Value encode(const BoundModel& model, std::size_t m, const Matrix& inputs) {
  return encode(model, m, model.tape().constant(inputs));
}

/// Auxiliary classifier c_m: softmax of a linear map of h_m.
inline diff::Value classify_modality(const BoundModel& model, std::size_t m, const diff::Value& features) {
  const auto& cfg = model.config();
  if (m >= cfg.modalities()) throw InputError("classify_modality: unknown modality " + std::to_string(m));
  if (features.cols() != cfg.feature_dim) throw ShapeError("classify_modality: feature width mismatch");
  return diff::softmax_rows(linear(model, classifier_group(m), features));
}

struct FusionTrace {
  diff::Value fused;                               // n x d
  std::vector<std::vector<diff::Value>> weights;   // [head][query token] -> n x M attention rows
};

/// Self-attention over the M modality tokens of each sample, followed by an
/// output projection and a mean over tokens.
inline FusionTrace fuse_traced(const BoundModel& model, std::span<const diff::Value> features) {
  const auto& cfg = model.config();
  const std::size_t tokens = features.size();
  if (tokens < 2) throw ContractError("fuse: needs at least two modality feature blocks");
  const Eigen::Index n = features.front().rows();
  for (const auto& h : features) {
    if (h.rows() != n) throw InputError("fuse: modalities disagree on sample count");
    if (h.cols() != cfg.feature_dim) throw ShapeError("fuse: feature width mismatch");
  }
  const Eigen::Index head_dim = cfg.feature_dim / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  std::vector<diff::Value> q, k, v;
  for (const auto& h : features) {
    q.push_back(diff::matmul(h, model.param("fusion/query")));
    k.push_back(diff::matmul(h, model.param("fusion/key")));
    v.push_back(diff::matmul(h, model.param("fusion/value")));
  }

  FusionTrace trace;
  trace.weights.resize(static_cast<std::size_t>(cfg.heads));
  std::vector<diff::Value> projected;
  for (std::size_t i = 0; i < tokens; ++i) {
    std::vector<diff::Value> head_outputs;
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const Eigen::Index begin = hd * head_dim;
      diff::Value qi = diff::slice_cols(q[i], begin, head_dim);
      std::vector<diff::Value> scores;
      for (std::size_t j = 0; j < tokens; ++j) {
        diff::Value kj = diff::slice_cols(k[j], begin, head_dim);
        scores.push_back(diff::scale(diff::row_sum(diff::mul(qi, kj)), inv_sqrt));
      }
      diff::Value attn = diff::softmax_rows(diff::concat_cols(scores));
      trace.weights[static_cast<std::size_t>(hd)].push_back(attn);
      diff::Value out;
      for (std::size_t j = 0; j < tokens; ++j) {
        diff::Value term = diff::mul_col(diff::slice_cols(v[j], begin, head_dim),
                                         diff::slice_cols(attn, static_cast<Eigen::Index>(j), 1));
        out = out.valid() ? diff::add(out, term) : term;
      }
      head_outputs.push_back(out);
    }
    projected.push_back(linear(model, "fusion/output", diff::concat_cols(head_outputs)));
  }
  diff::Value pooled = projected.front();
  for (std::size_t i = 1; i < tokens; ++i) pooled = diff::add(pooled, projected[i]);
  trace.fused = diff::scale(pooled, 1.0 / static_cast<double>(tokens));
  return trace;
}

inline diff::Value fuse(const BoundModel& model, std::span<const diff::Value> features) {
  return fuse_traced(model, features).fused;
}

/// Prediction head: softmax(z W + b).
inline diff::Value predict(const BoundModel& model, const diff::Value& fused) {
  if (fused.cols() != model.config().feature_dim) throw ShapeError("predict: feature width mismatch");
  return diff::softmax_rows(linear(model, "head", fused));
}

/// Every intermediate of one forward pass.
struct ForwardPass {
  std::vector<diff::Value> features;            // h_m
  std::vector<diff::Value> classifier_inputs;   // h_m as seen by c_m (gradient scaled by lambda_aux)
  std::vector<diff::Value> modality_probs;      // c_m over classifier_inputs
  std::vector<diff::Value> modality_scores;     // c_m(h_m) positive-class column, full gradient into h_m
  diff::Value fused;
  diff::Value probs;
};

/// Runs encoders, auxiliary classifiers, fusion and head. The classifier
/// branch sees h_m through grad_scale(lambda_aux), so lambda_aux = 0 keeps
/// the classifiers' cross-entropy from training their encoders. The scores
/// in modality_scores see h_m unscaled; they feed the per-group AUC tracking.
inline ForwardPass forward(const BoundModel& model, std::span<const Matrix> inputs, double lambda_aux) {
  const auto& cfg = model.config();
  if (inputs.size() != cfg.modalities()) {
    throw InputError("forward: " + std::to_string(inputs.size()) + " modality blocks for a " +
                     std::to_string(cfg.modalities()) + "-modality model");
  }
  ForwardPass pass;
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    pass.features.push_back(encode(model, m, inputs[m]));
    pass.classifier_inputs.push_back(diff::grad_scale(pass.features.back(), lambda_aux));
    pass.modality_probs.push_back(classify_modality(model, m, pass.classifier_inputs.back()));
    pass.modality_scores.push_back(diff::slice_cols(classify_modality(model, m, pass.features.back()), 1, 1));
  }
  pass.fused = fuse(model, pass.features);
  pass.probs = predict(model, pass.fused);
  return pass;
}

}  // namespace multifair
