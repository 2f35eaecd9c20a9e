#pragma once

// Config-driven experiment runner behind the multifair command-line tool:
// INI config parsing, single/ablation/sweep runs and JSON/CSV reports.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "multifair/data.hpp"
#include "multifair/error.hpp"
#include "multifair/models.hpp"
#include "multifair/trainer.hpp"

namespace multifair::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericError = 4 };

enum class Format { csv, json };

inline const char* to_string(Format f) { return f == Format::csv ? "csv" : "json"; }

enum class Source { synthetic, table };

struct DatasetSection {
  Source source = Source::synthetic;
  data::SyntheticSpec synthetic;
  std::string path;
  std::vector<data::ColumnRange> modalities;  // empty: infer from the header
  std::string label_column = "label";
  std::vector<std::string> group_columns;    // empty: infer from the header
  std::vector<std::string> group_labels;
  data::SplitFractions split;
  std::uint64_t split_seed = 1;
};

struct RunConfig {
  DatasetSection dataset;
  ModelConfig model;  // input_dims come from the dataset
  TrainConfig train;
  std::string output_dir = "out";
  Format format = Format::json;
};

// ---------------------------------------------------------------------------
// Value formatting and parsing

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& values, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    if constexpr (std::is_same_v<T, double>) {
      out += format_double(values[i]);
    } else if constexpr (std::is_same_v<T, std::string>) {
      out += values[i];
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

namespace detail {

inline double parse_number(const std::string& text, const std::string& key) {
  const std::string t = trim(text);
  double v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("'" + key + "': expected a number, got '" + text + "'", key);
  }
  return v;
}

inline long long parse_integer(const std::string& text, const std::string& key) {
  const std::string t = trim(text);
  long long v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    throw ConfigError("'" + key + "': expected an integer, got '" + text + "'", key);
  }
  return v;
}

inline std::uint64_t parse_seed(const std::string& text, const std::string& key) {
  const long long v = parse_integer(text, key);
  if (v < 0) throw ConfigError("'" + key + "': seeds must be non-negative", key);
  return static_cast<std::uint64_t>(v);
}

inline std::vector<double> parse_numbers(const std::string& text, const std::string& key) {
  std::vector<double> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number(item, key));
  if (out.empty()) throw ConfigError("'" + key + "': expected a comma-separated list", key);
  return out;
}

inline std::vector<int> parse_integers(const std::string& text, const std::string& key) {
  std::vector<int> out;
  if (trim(text).empty()) return out;
  for (const auto& item : split_list(text)) out.push_back(static_cast<int>(parse_integer(item, key)));
  return out;
}

inline std::vector<std::string> parse_names(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& item : split_list(text)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config file

/// Resolved configuration as ordered (section, key, value) triples with every
/// default materialized. Parsing the echo back yields the same RunConfig.
inline std::vector<std::tuple<std::string, std::string, std::string>> config_echo(const RunConfig& c) {
  std::vector<std::tuple<std::string, std::string, std::string>> e;
  const auto& d = c.dataset;
  if (d.source == Source::synthetic) {
    const auto& s = d.synthetic;
    e.emplace_back("dataset", "source", "synthetic");
    e.emplace_back("dataset", "samples", std::to_string(s.samples));
    e.emplace_back("dataset", "dims", join(s.dims));
    e.emplace_back("dataset", "group_proportions", join(s.group_proportions));
    e.emplace_back("dataset", "signal", join(s.signal));
    std::vector<std::string> rows;
    for (const auto& r : s.noise) rows.push_back(join(r));
    e.emplace_back("dataset", "noise", join(rows, " | "));
    e.emplace_back("dataset", "flip_rates", join(s.flip_rates));
    e.emplace_back("dataset", "seed", std::to_string(s.seed));
  } else {
    e.emplace_back("dataset", "source", "table");
    e.emplace_back("dataset", "path", d.path);
    std::vector<std::string> ranges;
    for (const auto& r : d.modalities) ranges.push_back(r.first + ":" + r.last);
    e.emplace_back("dataset", "modalities", join(ranges));
    e.emplace_back("dataset", "label_column", d.label_column);
    e.emplace_back("dataset", "group_columns", join(d.group_columns));
    e.emplace_back("dataset", "group_labels", join(d.group_labels));
  }
  e.emplace_back("dataset", "split", join(std::vector<double>{d.split.train, d.split.val, d.split.test}));
  e.emplace_back("dataset", "split_seed", std::to_string(d.split_seed));

  const auto& m = c.model;
  e.emplace_back("model", "hidden_dims", join(m.hidden_dims));
  e.emplace_back("model", "feature_dim", std::to_string(m.feature_dim));
  e.emplace_back("model", "heads", std::to_string(m.heads));
  e.emplace_back("model", "seed", std::to_string(m.seed));

  const auto& t = c.train;
  e.emplace_back("train", "mode", multifair::to_string(t.mode));
  e.emplace_back("train", "learning_rate", format_double(t.learning_rate));
  e.emplace_back("train", "epochs", std::to_string(t.epochs));
  e.emplace_back("train", "batch_size", std::to_string(t.batch_size));
  e.emplace_back("train", "rho", format_double(t.rho));
  e.emplace_back("train", "lambda_gm", format_double(t.lambda_gm));
  e.emplace_back("train", "lambda_f", format_double(t.lambda_f));
  e.emplace_back("train", "delta", format_double(t.delta));
  e.emplace_back("train", "tau", format_double(t.tau));
  e.emplace_back("train", "smoothing", format_double(t.smoothing));
  e.emplace_back("train", "kappa", format_double(t.kappa));
  e.emplace_back("train", "lambda_aux", format_double(t.lambda_aux));
  e.emplace_back("train", "granularity",
                 t.granularity == DeltaGranularity::per_epoch ? "per_epoch" : "per_k_batches");
  e.emplace_back("train", "delta_window", std::to_string(t.delta_window));
  e.emplace_back("train", "seed", std::to_string(t.seed));

  e.emplace_back("output", "dir", c.output_dir);
  e.emplace_back("output", "format", to_string(c.format));
  return e;
}

inline void write_ini(std::ostream& out, const RunConfig& c) {
  std::string section;
  for (const auto& [s, k, v] : config_echo(c)) {
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    out << k << " = " << v << '\n';
  }
}

/// Parses INI text. ConfigError names "section.key" for unknown keys and
/// invalid values; relative table paths resolve against `base_dir`.
inline RunConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message(), "line " + std::to_string(e.line()));
  }

  RunConfig c;
  std::set<std::string> seen;
  bool synthetic_keys = false, table_keys = false;
  std::optional<std::string> source;

  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("key '" + section + "' outside any section", section);
    for (const auto& [key, node] : body) {
      const std::string name = section + "." + key;
      const std::string v = node.get_value<std::string>();
      seen.insert(name);
      using namespace detail;
      if (section == "dataset") {
        auto& d = c.dataset;
        auto& s = d.synthetic;
        if (key == "source") {
          source = trim(v);
        } else if (key == "samples") {
          const long long n = parse_integer(v, name);
          if (n < 1) throw ConfigError("'" + name + "' must be positive", name);
          s.samples = static_cast<std::size_t>(n);
          synthetic_keys = true;
        } else if (key == "dims") {
          s.dims = parse_integers(v, name);
          synthetic_keys = true;
        } else if (key == "group_proportions") {
          s.group_proportions = parse_numbers(v, name);
          synthetic_keys = true;
        } else if (key == "signal") {
          s.signal = parse_numbers(v, name);
          synthetic_keys = true;
        } else if (key == "noise") {
          s.noise.clear();
          for (const auto& row : split_list(v, '|')) s.noise.push_back(parse_numbers(row, name));
          synthetic_keys = true;
        } else if (key == "flip_rates") {
          s.flip_rates = parse_numbers(v, name);
          synthetic_keys = true;
        } else if (key == "seed") {
          s.seed = parse_seed(v, name);
          synthetic_keys = true;
        } else if (key == "path") {
          d.path = trim(v);
          table_keys = true;
        } else if (key == "modalities") {
          d.modalities.clear();
          for (const auto& r : parse_names(v)) {
            const auto colon = r.find(':');
            if (colon == std::string::npos) throw ConfigError("'" + name + "': expected first:last ranges", name);
            d.modalities.push_back({trim(r.substr(0, colon)), trim(r.substr(colon + 1))});
          }
          table_keys = true;
        } else if (key == "label_column") {
          d.label_column = trim(v);
          table_keys = true;
        } else if (key == "group_columns") {
          d.group_columns = parse_names(v);
          table_keys = true;
        } else if (key == "group_labels") {
          d.group_labels = parse_names(v);
          table_keys = true;
        } else if (key == "split") {
          auto f = parse_numbers(v, name);
          if (f.size() != 3) throw ConfigError("'" + name + "': expected train,val,test fractions", name);
          d.split = {f[0], f[1], f[2]};
          if (f[0] < 0 || f[1] < 0 || f[2] < 0 || std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) {
            throw ConfigError("'" + name + "': fractions must be non-negative and sum to 1", name);
          }
        } else if (key == "split_seed") {
          d.split_seed = parse_seed(v, name);
        } else {
          throw ConfigError("unknown key '" + name + "'", name);
        }
      } else if (section == "model") {
        auto& m = c.model;
        if (key == "hidden_dims") {
          m.hidden_dims = parse_integers(v, name);
        } else if (key == "feature_dim") {
          m.feature_dim = static_cast<int>(parse_integer(v, name));
        } else if (key == "heads") {
          m.heads = static_cast<int>(parse_integer(v, name));
        } else if (key == "seed") {
          m.seed = parse_seed(v, name);
        } else {
          throw ConfigError("unknown key '" + name + "'", name);
        }
      } else if (section == "train") {
        auto& t = c.train;
        if (key == "mode") {
          auto mode = parse_mode(trim(v));
          if (!mode) throw ConfigError("'" + name + "': unknown mode '" + v + "'", name);
          t.mode = *mode;
        } else if (key == "learning_rate") {
          t.learning_rate = parse_number(v, name);
        } else if (key == "epochs") {
          t.epochs = static_cast<int>(parse_integer(v, name));
        } else if (key == "batch_size") {
          t.batch_size = static_cast<int>(parse_integer(v, name));
        } else if (key == "rho") {
          t.rho = parse_number(v, name);
        } else if (key == "lambda_gm") {
          t.lambda_gm = parse_number(v, name);
        } else if (key == "lambda_f") {
          t.lambda_f = parse_number(v, name);
        } else if (key == "delta") {
          t.delta = parse_number(v, name);
        } else if (key == "tau") {
          t.tau = parse_number(v, name);
        } else if (key == "smoothing") {
          t.smoothing = parse_number(v, name);
        } else if (key == "kappa") {
          t.kappa = parse_number(v, name);
        } else if (key == "lambda_aux") {
          t.lambda_aux = parse_number(v, name);
        } else if (key == "granularity") {
          const std::string g = trim(v);
          if (g == "per_epoch") t.granularity = DeltaGranularity::per_epoch;
          else if (g == "per_k_batches") t.granularity = DeltaGranularity::per_k_batches;
          else throw ConfigError("'" + name + "': expected per_epoch or per_k_batches", name);
        } else if (key == "delta_window") {
          t.delta_window = static_cast<int>(parse_integer(v, name));
        } else if (key == "seed") {
          t.seed = parse_seed(v, name);
        } else {
          throw ConfigError("unknown key '" + name + "'", name);
        }
      } else if (section == "output") {
        if (key == "dir") {
          c.output_dir = trim(v);
        } else if (key == "format") {
          const std::string f = trim(v);
          if (f == "csv") c.format = Format::csv;
          else if (f == "json") c.format = Format::json;
          else throw ConfigError("'" + name + "': expected csv or json", name);
        } else {
          throw ConfigError("unknown key '" + name + "'", name);
        }
      } else {
        throw ConfigError("unknown section '[" + section + "]'", section);
      }
    }
  }

  auto& d = c.dataset;
  if (!source) throw ConfigError("'dataset.source' is required (synthetic or table)", "dataset.source");
  if (*source == "synthetic") {
    d.source = Source::synthetic;
    if (table_keys) throw ConfigError("table keys given for a synthetic dataset", "dataset.source");
  } else if (*source == "table") {
    d.source = Source::table;
    if (synthetic_keys) throw ConfigError("synthetic keys given for a table dataset", "dataset.source");
    if (d.path.empty()) throw ConfigError("'dataset.path' is required for a table dataset", "dataset.path");
    std::filesystem::path p(d.path);
    if (p.is_relative()) d.path = std::filesystem::absolute(base_dir / p).lexically_normal().string();
    if (!std::filesystem::exists(d.path)) {
      throw ConfigError("'dataset.path': file '" + d.path + "' does not exist", "dataset.path");
    }
  } else {
    throw ConfigError("'dataset.source': expected synthetic or table, got '" + *source + "'", "dataset.source");
  }

  auto prefixed = [](const ConfigError& e, const std::string& section) {
    return ConfigError(e.what(), e.key().empty() ? section : section + "." + e.key());
  };
  try {
    if (d.source == Source::synthetic) d.synthetic.validate();
  } catch (const ConfigError& e) {
    throw prefixed(e, "dataset");
  }
  try {
    ModelConfig probe = c.model;
    probe.input_dims = {1, 1};
    probe.validate();
  } catch (const ConfigError& e) {
    throw prefixed(e, "model");
  }
  try {
    c.train.validate();
  } catch (const ConfigError& e) {
    throw prefixed(e, "train");
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'", "--config");
  return parse_config(in, std::filesystem::path(path).parent_path());
}

// ---------------------------------------------------------------------------
// Data

/// Thrown for dataset problems that are not schema/ingestion errors.
struct PreparedData {
  data::MultimodalDataset dataset;
  std::vector<std::string> warnings;
};

inline PreparedData prepare_dataset(const DatasetSection& d) {
  data::MultimodalDataset raw;
  if (d.source == Source::synthetic) {
    raw = data::generate(d.synthetic);
  } else {
    std::optional<data::TableSchema> schema;
    if (!d.modalities.empty() || !d.group_columns.empty() || !d.group_labels.empty() || d.label_column != "label") {
      std::ifstream in(d.path);
      std::string header;
      std::getline(in, header);
      data::TableSchema s;
      if (d.modalities.empty() || d.group_columns.empty()) s = data::infer_schema(data::detail::split_csv_line(header));
      if (!d.modalities.empty()) s.modalities = d.modalities;
      if (!d.group_columns.empty()) s.group_columns = d.group_columns;
      s.label_column = d.label_column;
      s.group_labels = d.group_labels;
      schema = s;
    }
    raw = data::load_table(d.path, schema);
  }
  if (raw.modality_count() < 2) throw InputError("dataset has fewer than two modalities");
  auto split = data::split(std::move(raw), d.split, d.split_seed);
  return {std::move(split.dataset), std::move(split.warnings)};
}

inline ModelConfig model_for(const RunConfig& c, const data::MultimodalDataset& ds) {
  ModelConfig m = c.model;
  m.input_dims = ds.dims();
  return m;
}

// ---------------------------------------------------------------------------
// Runs and reports

struct AttributeMetrics {
  std::string attribute;
  EvaluationBundle metrics;
};

struct RunReport {
  RunConfig config;
  std::vector<EpochRecord> epochs;
  std::vector<AttributeMetrics> test;
  std::vector<std::string> warnings;
  double wall_clock_seconds = 0;
};

inline std::vector<AttributeMetrics> evaluate_attributes(const ModelState& state, const data::MultimodalDataset& ds) {
  std::vector<AttributeMetrics> out;
  for (const auto& [name, g] : ds.group_attributes) out.push_back({name, evaluate(state, ds, data::Split::test, name)});
  // Primary attribute first.
  std::stable_partition(out.begin(), out.end(), [](const AttributeMetrics& a) { return a.attribute == data::kPrimaryGroup; });
  return out;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains a fresh model per the config. NumericError messages carry the epoch.
inline std::pair<RunReport, ModelState> run_experiment(const RunConfig& config, const PreparedData& prepared,
                                                      const EpochCallback& on_epoch = {}) {
  const auto start = std::chrono::steady_clock::now();
  RunReport report;
  report.config = config;
  report.warnings = prepared.warnings;
  ModelState state = ModelState::initialize(model_for(config, prepared.dataset));
  report.epochs = train(state, prepared.dataset, config.train, on_epoch);
  report.test = evaluate_attributes(state, prepared.dataset);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(report), std::move(state)};
}

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json metrics_json(const EvaluationBundle& b) {
  nlohmann::ordered_json j;
  j["auc"] = optional_json(b.fusion.auc);
  j["es_auc"] = b.fusion.es_auc;
  j["dpd"] = b.fusion.dpd;
  j["deodds"] = b.fusion.deodds;
  j["group_gap"] = b.fusion.group_gap();
  nlohmann::ordered_json groups = nlohmann::ordered_json::object();
  for (const auto& [g, a] : b.fusion.group_auc) groups[std::to_string(g)] = optional_json(a);
  j["group_auc"] = groups;
  nlohmann::ordered_json mods = nlohmann::ordered_json::array();
  for (const auto& a : b.modality_auc) mods.push_back(optional_json(a));
  j["modality_auc"] = mods;
  return j;
}

inline nlohmann::ordered_json config_json(const RunConfig& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [s, k, v] : config_echo(c)) j[s][k] = v;
  return j;
}

inline nlohmann::ordered_json epoch_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["task_loss"] = r.task_loss;
  j["direction_loss"] = r.direction_loss;
  j["fairness_gap"] = r.fairness_gap;
  j["trigger_fraction"] = r.trigger_fraction;
  j["balancing"] = r.balancing;
  j["fairness_factors"] = r.fairness_factors;
  j["auc"] = optional_json(r.fusion_auc);
  j["es_auc"] = r.es_auc;
  j["dpd"] = r.dpd;
  j["deodds"] = r.deodds;
  nlohmann::ordered_json groups = nlohmann::ordered_json::object();
  for (const auto& [g, a] : r.group_auc) groups[std::to_string(g)] = optional_json(a);
  j["group_auc"] = groups;
  nlohmann::ordered_json mods = nlohmann::ordered_json::array();
  for (const auto& a : r.modality_auc) mods.push_back(optional_json(a));
  j["modality_auc"] = mods;
  return j;
}

inline nlohmann::ordered_json report_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["config"] = config_json(r.config);
  j["mode"] = multifair::to_string(r.config.train.mode);
  j["seed"] = r.config.train.seed;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) j["epochs"].push_back(epoch_json(e));
  j["test"] = nlohmann::ordered_json::object();
  for (const auto& a : r.test) j["test"][a.attribute] = metrics_json(a.metrics);
  j["warnings"] = r.warnings;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

/// RFC 4180 writer: CRLF line ends, fields quoted when they hold a comma,
/// quote or line break.
class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& out) : out_(out) {}

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << escape(fields[i]);
    }
    out_ << "\r\n";
  }

  static std::string escape(const std::string& f) {
    if (f.find_first_of(",\"\r\n") == std::string::npos) return f;
    std::string q = "\"";
    for (char ch : f) {
      if (ch == '"') q += '"';
      q += ch;
    }
    return q + '"';
  }

 private:
  std::ostream& out_;
};

inline std::string optional_text(const std::optional<double>& v) { return v ? format_double(*v) : "NA"; }

inline const std::vector<std::string>& report_csv_header() {
  static const std::vector<std::string> h{"record", "epoch", "attribute", "group", "name", "value"};
  return h;
}

/// Tidy long-format report: one observation per row.
inline void write_report_csv(std::ostream& out, const RunReport& r) {
  CsvWriter w(out);
  w.row(report_csv_header());
  for (const auto& [s, k, v] : config_echo(r.config)) w.row({"config", "", "", "", s + "." + k, v});
  for (const auto& e : r.epochs) {
    const std::string ep = std::to_string(e.epoch);
    auto put = [&](const std::string& name, const std::string& group, const std::string& value) {
      w.row({"epoch", ep, data::kPrimaryGroup, group, name, value});
    };
    put("task_loss", "", format_double(e.task_loss));
    put("direction_loss", "", format_double(e.direction_loss));
    put("fairness_gap", "", format_double(e.fairness_gap));
    put("trigger_fraction", "", format_double(e.trigger_fraction));
    for (std::size_t m = 0; m < e.balancing.size(); ++m) put("balancing_" + std::to_string(m), "", format_double(e.balancing[m]));
    for (std::size_t m = 0; m < e.fairness_factors.size(); ++m) {
      put("fairness_factor_" + std::to_string(m), "", format_double(e.fairness_factors[m]));
    }
    put("auc", "", optional_text(e.fusion_auc));
    put("es_auc", "", format_double(e.es_auc));
    put("dpd", "", format_double(e.dpd));
    put("deodds", "", format_double(e.deodds));
    for (const auto& [g, a] : e.group_auc) put("group_auc", std::to_string(g), optional_text(a));
    for (std::size_t m = 0; m < e.modality_auc.size(); ++m) {
      put("modality_auc_" + std::to_string(m), "", optional_text(e.modality_auc[m]));
    }
  }
  for (const auto& a : r.test) {
    auto put = [&](const std::string& name, const std::string& group, const std::string& value) {
      w.row({"test", "", a.attribute, group, name, value});
    };
    const auto& f = a.metrics.fusion;
    put("auc", "", optional_text(f.auc));
    put("es_auc", "", format_double(f.es_auc));
    put("dpd", "", format_double(f.dpd));
    put("deodds", "", format_double(f.deodds));
    put("group_gap", "", format_double(f.group_gap()));
    for (const auto& [g, v] : f.group_auc) put("group_auc", std::to_string(g), optional_text(v));
    for (std::size_t m = 0; m < a.metrics.modality_auc.size(); ++m) {
      put("modality_auc_" + std::to_string(m), "", optional_text(a.metrics.modality_auc[m]));
    }
  }
  for (const auto& warning : r.warnings) w.row({"meta", "", "", "", "warning", warning});
  w.row({"meta", "", "", "", "seed", std::to_string(r.config.train.seed)});
  w.row({"meta", "", "", "", "wall_clock_seconds", format_double(r.wall_clock_seconds)});
}

// ---------------------------------------------------------------------------
// Comparison tables (ablate, sweep)

struct SummaryRow {
  std::string key;  // mode name or parameter value
  double sort_value = 0;
  const RunReport* report = nullptr;
};

/// Group ids of the primary attribute across rows, ascending.
inline std::vector<int> summary_groups(const std::vector<SummaryRow>& rows) {
  std::set<int> ids;
  for (const auto& r : rows) {
    for (const auto& [g, a] : r.report->test.front().metrics.fusion.group_auc) ids.insert(g);
  }
  return {ids.begin(), ids.end()};
}

inline void write_summary_csv(std::ostream& out, const std::string& key_column, const std::vector<SummaryRow>& rows) {
  CsvWriter w(out);
  const auto groups = summary_groups(rows);
  std::vector<std::string> header{key_column, "auc", "es_auc", "dpd", "deodds", "group_gap"};
  for (int g : groups) header.push_back("auc_group_" + std::to_string(g));
  w.row(header);
  for (const auto& r : rows) {
    const auto& f = r.report->test.front().metrics.fusion;
    std::vector<std::string> fields{r.key, optional_text(f.auc), format_double(f.es_auc), format_double(f.dpd),
                                    format_double(f.deodds), format_double(f.group_gap())};
    for (int g : groups) {
      auto it = f.group_auc.find(g);
      fields.push_back(it == f.group_auc.end() ? "NA" : optional_text(it->second));
    }
    w.row(fields);
  }
}

inline nlohmann::ordered_json summary_json(const std::string& key_column, const std::vector<SummaryRow>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j[key_column] = r.key;
    const auto m = metrics_json(r.report->test.front().metrics);
    for (const auto& [k, v] : m.items()) j[k] = v;
    arr.push_back(j);
  }
  nlohmann::ordered_json out;
  out["rows"] = arr;
  return out;
}

// ---------------------------------------------------------------------------
// Parallel execution

/// Runs `count` independent jobs on up to `jobs` threads. The first
/// exception (in job order) is rethrown after all threads finish.
inline void parallel_for(std::size_t count, unsigned jobs, const std::function<void(std::size_t)>& body) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(count)));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Sweep parameters

inline const std::vector<std::string>& sweep_parameters() {
  static const std::vector<std::string> p{"tau", "lambda_f", "delta", "lambda_gm", "rho"};
  return p;
}

inline void set_sweep_parameter(TrainConfig& t, const std::string& name, double v) {
  if (name == "tau") t.tau = v;
  else if (name == "lambda_f") t.lambda_f = v;
  else if (name == "delta") t.delta = v;
  else if (name == "lambda_gm") t.lambda_gm = v;
  else if (name == "rho") t.rho = v;
  else throw ConfigError("unknown sweep parameter '" + name + "' (expected tau, lambda_f, delta, lambda_gm or rho)", "--param");
}

}  // namespace multifair::cli
