#pragma once

// Synthetic multimodal data with controllable modality strength and group
// disparity, CSV ingestion/export, stratified splits and minibatching.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "multifair/diffcore.hpp"
#include "multifair/error.hpp"

namespace multifair::data {

inline constexpr const char* kPrimaryGroup = "group";

struct SyntheticSpec {
  std::size_t samples = 4000;
  std::vector<int> dims{16, 16};
  std::vector<double> group_proportions{0.6, 0.4};
  std::vector<double> signal{2.0, 0.6};                      // class-mean separation per modality
  std::vector<std::vector<double>> noise{{1.0, 1.6}, {1.0, 1.6}};  // [modality][group]
  std::vector<double> flip_rates{0.0, 0.05};                 // per group
  std::uint64_t seed = 1;

  std::size_t modalities() const noexcept { return dims.size(); }
  std::size_t groups() const noexcept { return group_proportions.size(); }

  void validate() const {
    if (dims.empty()) throw ConfigError("at least one modality is required", "dims");
    for (int d : dims) {
      if (d < 1) throw ConfigError("modality dims must be >= 1", "dims");
    }
    if (group_proportions.empty()) throw ConfigError("at least one group is required", "group_proportions");
    double total = 0;
    for (double p : group_proportions) {
      if (!(p > 0)) throw ConfigError("group proportions must be positive", "group_proportions");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("group proportions must sum to 1", "group_proportions");
    if (samples < 4 * groups()) throw ConfigError("samples must be at least 4 x groups", "samples");
    if (signal.size() != modalities()) throw ConfigError("one signal strength per modality", "signal");
    if (noise.size() != modalities()) throw ConfigError("one noise row per modality", "noise");
    for (const auto& row : noise) {
      if (row.size() != groups()) throw ConfigError("one noise scale per group in every row", "noise");
      for (double n : row) {
        if (!(n > 0)) throw ConfigError("noise scales must be positive", "noise");
      }
    }
    if (flip_rates.size() != groups()) throw ConfigError("one flip rate per group", "flip_rates");
    for (double f : flip_rates) {
      if (!(f >= 0 && f <= 1)) throw ConfigError("flip rates must lie in [0, 1]", "flip_rates");
    }
  }
};

enum class Split : std::uint8_t { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct MultimodalDataset {
  std::vector<Matrix> modalities;  // one n x dim_m block per modality, rows aligned
  std::vector<int> labels;
  std::map<std::string, std::vector<int>> group_attributes;  // always holds "group"
  std::vector<Split> split;                                  // empty until split() runs

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t modality_count() const noexcept { return modalities.size(); }

  std::vector<int> dims() const {
    std::vector<int> d;
    for (const auto& m : modalities) d.push_back(static_cast<int>(m.cols()));
    return d;
  }

  const std::vector<int>& groups(const std::string& attribute = kPrimaryGroup) const {
    auto it = group_attributes.find(attribute);
    if (it == group_attributes.end()) throw InputError("dataset has no group attribute '" + attribute + "'");
    return it->second;
  }

  /// Number of group ids (max id + 1) for an attribute.
  std::size_t group_count(const std::string& attribute = kPrimaryGroup) const {
    const auto& g = groups(attribute);
    return g.empty() ? 0 : static_cast<std::size_t>(*std::max_element(g.begin(), g.end())) + 1;
  }

  std::vector<std::size_t> indices(std::optional<Split> which) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!which || (i < split.size() && split[i] == *which)) out.push_back(i);
    }
    return out;
  }

  void check_consistent() const {
    for (const auto& m : modalities) {
      if (static_cast<std::size_t>(m.rows()) != size()) throw ShapeError("modalities disagree on sample count");
    }
    for (const auto& [name, g] : group_attributes) {
      if (g.size() != size()) throw ShapeError("group attribute '" + name + "' has the wrong length");
    }
    if (!group_attributes.count(kPrimaryGroup)) throw InputError("dataset lacks the 'group' attribute");
  }
};

/// Per class c and modality m, features ~ N(c * signal_m * u_m, noise(m, g)^2 I)
/// with u_m a seeded unit direction. Labels are then flipped with the
/// group's flip rate.
inline MultimodalDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  std::vector<Eigen::RowVectorXd> directions;
  for (int d : spec.dims) {
    Eigen::RowVectorXd u(d);
    for (int k = 0; k < d; ++k) u[k] = normal(rng);
    directions.push_back(u / u.norm());
  }

  const std::size_t n = spec.samples;
  MultimodalDataset ds;
  for (int d : spec.dims) ds.modalities.emplace_back(static_cast<Eigen::Index>(n), d);
  ds.labels.resize(n);
  auto& groups = ds.group_attributes[kPrimaryGroup];
  groups.resize(n);

  std::discrete_distribution<int> group_dist(spec.group_proportions.begin(), spec.group_proportions.end());
  for (std::size_t i = 0; i < n; ++i) {
    const int g = group_dist(rng);
    const int c = uniform(rng) < 0.5 ? 0 : 1;
    for (std::size_t m = 0; m < spec.modalities(); ++m) {
      const double eta = spec.noise[m][static_cast<std::size_t>(g)];
      auto row = ds.modalities[m].row(static_cast<Eigen::Index>(i));
      for (Eigen::Index k = 0; k < row.size(); ++k) {
        row[k] = c * spec.signal[m] * directions[m][k] + eta * normal(rng);
      }
    }
    const bool flip = uniform(rng) < spec.flip_rates[static_cast<std::size_t>(g)];
    groups[i] = g;
    ds.labels[i] = flip ? 1 - c : c;
  }
  return ds;
}

struct ColumnRange {
  std::string first;  // inclusive, by header name
  std::string last;
};

struct TableSchema {
  std::vector<ColumnRange> modalities;
  std::string label_column = "label";
  std::vector<std::string> group_columns{kPrimaryGroup};
  /// Allowed group labels (mapped to ids by position). Empty: cells must be
  /// non-negative integer ids.
  std::vector<std::string> group_labels;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cell += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

inline std::optional<double> parse_double(const std::string& text) {
  std::string t = text;
  t.erase(0, t.find_first_not_of(" \t"));
  t.erase(t.find_last_not_of(" \t") + 1);
  if (t.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Schema for the exported layout: m<k>_f<j> feature columns, then `label`,
/// then one or more group columns.
inline TableSchema infer_schema(const std::vector<std::string>& header) {
  TableSchema schema;
  std::map<int, std::pair<std::string, std::string>> ranges;
  schema.group_columns.clear();
  bool after_label = false;
  for (const auto& name : header) {
    if (name == "label") {
      after_label = true;
      continue;
    }
    if (after_label) {
      schema.group_columns.push_back(name);
      continue;
    }
    int m = -1;
    if (name.size() > 1 && name[0] == 'm' && std::sscanf(name.c_str(), "m%d_", &m) == 1 && m >= 0) {
      auto& r = ranges[m];
      if (r.first.empty()) r.first = name;
      r.second = name;
    } else {
      throw IngestionError("column '" + name + "' does not follow the m<k>_f<j> naming", 0);
    }
  }
  if (!after_label) throw IngestionError("missing column 'label'", 0);
  if (schema.group_columns.empty()) throw IngestionError("missing column 'group'", 0);
  for (const auto& [m, r] : ranges) schema.modalities.push_back({r.first, r.second});
  return schema;
}

/// Reads a comma-separated table with a header row. Errors name the 1-based
/// data row (0 for header-level problems).
inline MultimodalDataset parse_table(std::istream& in, std::optional<TableSchema> schema_opt = std::nullopt) {
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos) {
    throw IngestionError("empty table: no header row", 0);
  }
  const std::vector<std::string> header = detail::split_csv_line(line);
  const TableSchema schema = schema_opt ? *schema_opt : infer_schema(header);

  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw IngestionError("missing column '" + name + "'", 0);
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  for (const auto& r : schema.modalities) {
    const std::size_t a = column(r.first), b = column(r.last);
    if (b < a) throw IngestionError("modality range " + r.first + ".." + r.last + " is reversed", 0);
    blocks.emplace_back(a, b - a + 1);
  }
  if (blocks.empty()) throw IngestionError("schema defines no modality columns", 0);
  const std::size_t label_col = column(schema.label_column);
  std::vector<std::size_t> group_cols;
  for (const auto& g : schema.group_columns) group_cols.push_back(column(g));
  if (std::find(schema.group_columns.begin(), schema.group_columns.end(), kPrimaryGroup) ==
      schema.group_columns.end()) {
    throw IngestionError("missing column 'group'", 0);
  }

  std::vector<std::vector<std::vector<double>>> rows_per_block(blocks.size());
  MultimodalDataset ds;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw IngestionError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                               " cells, found " + std::to_string(cells.size()),
                           row);
    }
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      std::vector<double> values;
      for (std::size_t k = 0; k < blocks[b].second; ++k) {
        const std::size_t c = blocks[b].first + k;
        auto v = detail::parse_double(cells[c]);
        if (!v) {
          throw IngestionError("row " + std::to_string(row) + ": non-numeric value '" + cells[c] +
                                   "' in column '" + header[c] + "'",
                               row);
        }
        values.push_back(*v);
      }
      rows_per_block[b].push_back(std::move(values));
    }
    auto label = detail::parse_double(cells[label_col]);
    if (!label || (*label != 0.0 && *label != 1.0)) {
      throw IngestionError("row " + std::to_string(row) + ": label must be 0 or 1", row);
    }
    ds.labels.push_back(static_cast<int>(*label));
    for (std::size_t k = 0; k < group_cols.size(); ++k) {
      const std::string& text = cells[group_cols[k]];
      int id = -1;
      if (!schema.group_labels.empty()) {
        auto it = std::find(schema.group_labels.begin(), schema.group_labels.end(), text);
        if (it != schema.group_labels.end()) id = static_cast<int>(it - schema.group_labels.begin());
      } else if (auto v = detail::parse_double(text); v && *v >= 0 && *v == std::floor(*v)) {
        id = static_cast<int>(*v);
      }
      if (id < 0) {
        throw IngestionError("row " + std::to_string(row) + ": unknown group label '" + text + "' in column '" +
                                 schema.group_columns[k] + "'",
                             row);
      }
      ds.group_attributes[schema.group_columns[k]].push_back(id);
    }
  }
  if (row == 0) throw IngestionError("table has a header but no data rows", 0);

  for (std::size_t b = 0; b < blocks.size(); ++b) {
    Matrix m(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(blocks[b].second));
    for (std::size_t i = 0; i < row; ++i) {
      for (std::size_t k = 0; k < blocks[b].second; ++k) {
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows_per_block[b][i][k];
      }
    }
    ds.modalities.push_back(std::move(m));
  }
  return ds;
}

inline MultimodalDataset load_table(const std::string& path, std::optional<TableSchema> schema = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open table '" + path + "'", 0);
  return parse_table(in, std::move(schema));
}

/// Writes the dataset in the layout parse_table() infers: m<k>_f<j>..., label, group[, other attributes].
inline void write_table(std::ostream& out, const MultimodalDataset& ds) {
  ds.check_consistent();
  std::vector<std::string> attrs{kPrimaryGroup};
  for (const auto& [name, g] : ds.group_attributes) {
    if (name != kPrimaryGroup) attrs.push_back(name);
  }
  bool first = true;
  auto sep = [&]() {
    if (!first) out << ',';
    first = false;
  };
  for (std::size_t m = 0; m < ds.modality_count(); ++m) {
    for (Eigen::Index k = 0; k < ds.modalities[m].cols(); ++k) {
      sep();
      out << 'm' << m << "_f" << k;
    }
  }
  sep();
  out << "label";
  for (const auto& a : attrs) {
    sep();
    out << a;
  }
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    first = true;
    for (const auto& block : ds.modalities) {
      for (Eigen::Index k = 0; k < block.cols(); ++k) {
        sep();
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, block(static_cast<Eigen::Index>(i), k));
        out.write(buf, ptr - buf);
      }
    }
    sep();
    out << ds.labels[i];
    for (const auto& a : attrs) {
      sep();
      out << ds.group_attributes.at(a)[i];
    }
    out << '\n';
  }
}

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SplitResult {
  MultimodalDataset dataset;
  std::vector<std::string> warnings;
};

/// Stratifies jointly by (label, primary group). Strata with fewer than three
/// samples go entirely to train, with a warning.
inline SplitResult split(MultimodalDataset dataset, const SplitFractions& f, std::uint64_t seed) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1", "split");
  }
  dataset.check_consistent();
  const auto& groups = dataset.groups();
  std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < dataset.size(); ++i) strata[{dataset.labels[i], groups[i]}].push_back(i);

  SplitResult result;
  dataset.split.assign(dataset.size(), Split::train);
  std::mt19937_64 rng(seed);
  for (auto& [key, members] : strata) {
    if (members.size() < 3) {
      result.warnings.push_back("stratum (label " + std::to_string(key.first) + ", group " +
                                std::to_string(key.second) + ") has " + std::to_string(members.size()) +
                                " samples; assigned to train only");
      continue;
    }
    std::shuffle(members.begin(), members.end(), rng);
    const double n = static_cast<double>(members.size());
    const auto n_train = static_cast<std::size_t>(std::llround(f.train * n));
    const auto n_val = std::min(members.size() - n_train, static_cast<std::size_t>(std::llround(f.val * n)));
    for (std::size_t k = 0; k < members.size(); ++k) {
      dataset.split[members[k]] = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
    }
  }
  result.dataset = std::move(dataset);
  return result;
}

struct LabeledBatch {
  std::vector<Matrix> features;  // per modality, K x dim_m
  std::vector<int> labels;
  std::vector<int> groups;
  std::vector<std::size_t> indices;  // rows of the source dataset

  std::size_t size() const noexcept { return labels.size(); }

  /// Count of each group id in [0, group_count).
  std::vector<double> group_counts(std::size_t group_count) const {
    std::vector<double> c(group_count, 0.0);
    for (int g : groups) c.at(static_cast<std::size_t>(g)) += 1.0;
    return c;
  }

  /// p_g: group shares of this batch.
  std::vector<double> group_proportions(std::size_t group_count) const {
    auto c = group_counts(group_count);
    for (double& v : c) v /= static_cast<double>(size());
    return c;
  }
};

inline LabeledBatch gather(const MultimodalDataset& ds, std::span<const std::size_t> rows,
                           const std::string& attribute = kPrimaryGroup) {
  LabeledBatch b;
  const auto& groups = ds.groups(attribute);
  for (const auto& block : ds.modalities) {
    Matrix m(static_cast<Eigen::Index>(rows.size()), block.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      m.row(static_cast<Eigen::Index>(k)) = block.row(static_cast<Eigen::Index>(rows[k]));
    }
    b.features.push_back(std::move(m));
  }
  for (std::size_t r : rows) {
    b.labels.push_back(ds.labels[r]);
    b.groups.push_back(groups[r]);
  }
  b.indices.assign(rows.begin(), rows.end());
  return b;
}

/// Shuffles the split with a (seed, epoch)-derived generator and cuts it into
/// batches of `batch_size`; the final short batch is kept.
inline std::vector<LabeledBatch> batches(const MultimodalDataset& ds, Split which, std::size_t batch_size,
                                         std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2) throw ContractError("batch size must be >= 2");
  std::vector<std::size_t> rows = ds.indices(which);
  if (rows.empty()) throw ContractError(std::string("split '") + to_string(which) + "' is empty");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(rows.begin(), rows.end(), rng);
  std::vector<LabeledBatch> out;
  for (std::size_t begin = 0; begin < rows.size(); begin += batch_size) {
    const std::size_t end = std::min(rows.size(), begin + batch_size);
    out.push_back(gather(ds, std::span<const std::size_t>(rows).subspan(begin, end - begin)));
  }
  return out;
}

}  // namespace multifair::data
