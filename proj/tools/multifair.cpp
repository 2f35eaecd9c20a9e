#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "runner.hpp"

namespace fs = std::filesystem;
namespace cli = multifair::cli;
using multifair::cli::RunConfig;
using multifair::cli::RunReport;

namespace {

const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected failure\n"
    "  2  invalid command line or configuration (the message names the key)\n"
    "  3  data error (unreadable or malformed table, checkpoint mismatch)\n"
    "  4  non-finite values during training (the message names the epoch)\n";

struct CommonOptions {
  std::string config;
  std::string out;
  std::string format;
  unsigned jobs = 1;
};

std::mutex g_log_mutex;

void log(const std::string& line) {
  std::lock_guard lock(g_log_mutex);
  std::cerr << line << '\n';
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig c = cli::load_config(o.config);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.format == "csv") c.format = cli::Format::csv;
  else if (o.format == "json") c.format = cli::Format::json;
  return c;
}

cli::EpochCallback progress(const std::string& label, int epochs) {
  return [label, epochs](const multifair::EpochRecord& r) {
    std::ostringstream s;
    s << '[' << label << "] epoch " << r.epoch + 1 << '/' << epochs << " loss=" << r.task_loss
      << " auc=" << cli::optional_text(r.fusion_auc) << " trigger=" << r.trigger_fraction;
    log(s.str());
  };
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw multifair::Error("cannot write '" + path.string() + "'");
  body(out);
  if (!out) throw multifair::Error("failed writing '" + path.string() + "'");
}

fs::path write_run(const fs::path& dir, const RunReport& report, const multifair::ModelState& state) {
  const bool csv = report.config.format == cli::Format::csv;
  const fs::path path = dir / (csv ? "report.csv" : "report.json");
  write_file(path, [&](std::ostream& out) {
    if (csv) cli::write_report_csv(out, report);
    else out << cli::report_json(report).dump(2) << '\n';
  });
  write_file(dir / "model.ckpt", [&](std::ostream& out) { state.save(out); });
  write_file(dir / "resolved.ini", [&](std::ostream& out) { cli::write_ini(out, report.config); });
  return path;
}

fs::path write_summary(const fs::path& dir, const std::string& name, const std::string& key_column,
                       const std::vector<cli::SummaryRow>& rows, cli::Format format) {
  const bool csv = format == cli::Format::csv;
  const fs::path path = dir / (name + (csv ? ".csv" : ".json"));
  write_file(path, [&](std::ostream& out) {
    if (csv) cli::write_summary_csv(out, key_column, rows);
    else out << cli::summary_json(key_column, rows).dump(2) << '\n';
  });
  return path;
}

void print_table(const std::string& key_column, const std::vector<cli::SummaryRow>& rows) {
  std::ostringstream s;
  cli::write_summary_csv(s, key_column, rows);
  std::string text = s.str();
  std::erase(text, '\r');
  std::cout << text;
}

struct Member {
  std::string label;
  RunConfig config;
  std::optional<std::pair<RunReport, multifair::ModelState>> result;
};

void run_members(std::vector<Member>& members, const cli::PreparedData& data, unsigned jobs) {
  cli::parallel_for(members.size(), jobs, [&](std::size_t i) {
    auto& m = members[i];
    m.result = cli::run_experiment(m.config, data, progress(m.label, m.config.train.epochs));
  });
}

int cmd_run(const CommonOptions& o) {
  RunConfig c = resolve(o);
  const auto data = cli::prepare_dataset(c.dataset);
  for (const auto& w : data.warnings) log("warning: " + w);
  auto [report, state] = cli::run_experiment(c, data, progress(multifair::to_string(c.train.mode), c.train.epochs));
  std::cout << write_run(c.output_dir, report, state).string() << '\n';
  return cli::kOk;
}

int cmd_ablate(const CommonOptions& o) {
  RunConfig base = resolve(o);
  const auto data = cli::prepare_dataset(base.dataset);
  for (const auto& w : data.warnings) log("warning: " + w);
  std::vector<Member> members;
  for (auto mode : {multifair::Mode::full, multifair::Mode::modality_only, multifair::Mode::fairness_only}) {
    RunConfig c = base;
    c.train.mode = mode;
    c.output_dir = (fs::path(base.output_dir) / multifair::to_string(mode)).string();
    members.push_back({multifair::to_string(mode), c, std::nullopt});
  }
  run_members(members, data, o.jobs);
  std::vector<cli::SummaryRow> rows;
  for (auto& m : members) {
    write_run(m.config.output_dir, m.result->first, m.result->second);
    rows.push_back({m.label, 0, &m.result->first});
  }
  print_table("mode", rows);
  std::cout << write_summary(base.output_dir, "comparison", "mode", rows, base.format).string() << '\n';
  return cli::kOk;
}

int cmd_sweep(const CommonOptions& o, const std::string& param, const std::vector<double>& values) {
  const auto& known = cli::sweep_parameters();
  if (std::find(known.begin(), known.end(), param) == known.end()) {
    throw multifair::ConfigError("unknown sweep parameter '" + param + "' (expected tau, lambda_f, delta, lambda_gm or rho)",
                                 "--param");
  }
  if (values.size() < 2) throw multifair::ConfigError("--values needs at least two values", "--values");
  RunConfig base = resolve(o);
  std::vector<double> sorted = values;
  std::stable_sort(sorted.begin(), sorted.end());
  std::vector<Member> members;
  for (double v : sorted) {
    RunConfig c = base;
    cli::set_sweep_parameter(c.train, param, v);
    try {
      c.train.validate();
    } catch (const multifair::ConfigError& e) {
      throw multifair::ConfigError(std::string(e.what()) + " (" + param + "=" + cli::format_double(v) + ")",
                                   "train." + e.key());
    }
    const std::string label = param + "=" + cli::format_double(v);
    c.output_dir = (fs::path(base.output_dir) / label).string();
    members.push_back({label, c, std::nullopt});
  }
  const auto data = cli::prepare_dataset(base.dataset);
  for (const auto& w : data.warnings) log("warning: " + w);
  run_members(members, data, o.jobs);
  std::vector<cli::SummaryRow> rows;
  for (auto& m : members) {
    write_run(m.config.output_dir, m.result->first, m.result->second);
    rows.push_back({m.label.substr(param.size() + 1), 0, &m.result->first});
  }
  print_table(param, rows);
  std::cout << write_summary(base.output_dir, "summary", param, rows, base.format).string() << '\n';
  return cli::kOk;
}

int cmd_gen_data(const CommonOptions& o) {
  RunConfig c = resolve(o);
  if (c.dataset.source != cli::Source::synthetic) {
    throw multifair::ConfigError("gen-data needs 'dataset.source = synthetic'", "dataset.source");
  }
  const auto ds = multifair::data::generate(c.dataset.synthetic);
  const fs::path path = fs::path(c.output_dir) / "dataset.csv";
  write_file(path, [&](std::ostream& out) { multifair::data::write_table(out, ds); });
  std::cout << path.string() << '\n';
  return cli::kOk;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint) {
  RunConfig c = resolve(o);
  std::ifstream in(checkpoint);
  if (!in) throw multifair::ConfigError("cannot open checkpoint '" + checkpoint + "'", "--checkpoint");
  const auto state = multifair::ModelState::load(in);
  const auto data = cli::prepare_dataset(c.dataset);
  if (data.dataset.dims() != state.config().input_dims) {
    throw multifair::InputError("checkpoint expects modality widths " + cli::join(state.config().input_dims) +
                                " but the dataset has " + cli::join(data.dataset.dims()));
  }
  RunReport report;
  report.config = c;
  report.config.model.hidden_dims = state.config().hidden_dims;
  report.config.model.feature_dim = state.config().feature_dim;
  report.config.model.heads = state.config().heads;
  report.config.train.epochs = 0;
  report.warnings = data.warnings;
  const auto start = std::chrono::steady_clock::now();
  report.test = cli::evaluate_attributes(state, data.dataset);
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool csv = c.format == cli::Format::csv;
  const fs::path path = fs::path(c.output_dir) / (csv ? "eval.csv" : "eval.json");
  write_file(path, [&](std::ostream& out) {
    if (csv) {
      cli::write_report_csv(out, report);
    } else {
      auto j = cli::report_json(report);
      j.erase("epochs");
      j["checkpoint"] = checkpoint;
      out << j.dump(2) << '\n';
    }
  });
  std::cout << path.string() << '\n';
  return cli::kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fairness-aware multimodal training with modality and group modulation"};
  app.footer(kExitCodes);
  app.require_subcommand(1);

  CommonOptions opts;
  auto add_common = [&](CLI::App* sub, bool with_jobs) {
    sub->add_option("config,--config", opts.config, "INI experiment config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opts.out, "output directory (overrides [output] dir)");
    sub->add_option("--format", opts.format, "report format (overrides [output] format)")
        ->check(CLI::IsMember({"csv", "json"}));
    if (with_jobs) sub->add_option("--jobs", opts.jobs, "parallel member runs")->check(CLI::Range(1u, 256u));
  };

  auto* run = app.add_subcommand("run", "train one model and report test metrics");
  add_common(run, false);
  auto* ablate = app.add_subcommand("ablate", "train full, modality_only and fairness_only and compare");
  add_common(ablate, true);
  auto* sweep = app.add_subcommand("sweep", "train once per value of one hyperparameter");
  add_common(sweep, true);
  std::string param;
  std::vector<double> values;
  sweep->add_option("--param", param, "tau, lambda_f, delta, lambda_gm or rho")->required();
  sweep->add_option("--values", values, "comma-separated values")->required()->delimiter(',');
  auto* gen = app.add_subcommand("gen-data", "write the configured synthetic dataset as a table");
  add_common(gen, false);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured test split");
  add_common(eval, false);
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint written by run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kConfigError;
  }

  try {
    if (*run) return cmd_run(opts);
    if (*ablate) return cmd_ablate(opts);
    if (*sweep) return cmd_sweep(opts, param, values);
    if (*gen) return cmd_gen_data(opts);
    if (*eval) return cmd_eval(opts, checkpoint);
  } catch (const multifair::ConfigError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << '\n';
    return cli::kConfigError;
  } catch (const multifair::IngestionError& e) {
    std::cerr << "data error (row " << e.row() << "): " << e.what() << '\n';
    return cli::kDataError;
  } catch (const multifair::InputError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return cli::kDataError;
  } catch (const multifair::ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return cli::kDataError;
  } catch (const multifair::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return cli::kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kFailure;
  }
  return cli::kFailure;
}
