#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dln/experiment.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// --data beats the config's path, which beats the environment variable.
void resolve_data_path(dln::ExperimentConfig& config, const std::string& data_flag) {
  if (config.problem.kind != dln::ProblemKind::uci_ethanol) return;
  if (!data_flag.empty()) {
    config.problem.path = data_flag;
    return;
  }
  if (config.problem.path.empty()) {
    const char* env = std::getenv("DLN_DATA_DIR");
    if (env != nullptr && *env != '\0') config.problem.path = env;
  }
  if (config.problem.path.empty())
    throw std::invalid_argument(
        "dataset path required: set problem.path, pass --data, or export DLN_DATA_DIR");
}

std::vector<double> parse_rate_list(const std::string& csv) {
  std::vector<double> rates;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double rate = std::stod(item, &used);
    if (used != item.size() || !(rate > 0.0))
      throw std::invalid_argument("bad rate '" + item + "' in --rates");
    rates.push_back(rate);
  }
  if (rates.empty()) throw std::invalid_argument("--rates parsed to an empty list");
  return rates;
}

int run_command(const std::string& config_path, const std::string& data_flag,
                std::string out_prefix) {
  dln::ExperimentConfig config = dln::parse_experiment_config(read_file(config_path));
  resolve_data_path(config, data_flag);
  dln::TraceResult res = dln::run_trace(config);
  if (out_prefix.empty()) out_prefix = config.label;
  dln::write_trace_csv(res, out_prefix + ".csv");
  dln::write_metadata_json(res, out_prefix + ".json");
  for (const std::string& w : res.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << dln::metadata_json(res).dump(2) << "\n";
  return res.diverged ? 1 : 0;
}

int grid_command(const std::string& config_path, const std::string& data_flag,
                 const std::string& rates_csv) {
  dln::ExperimentConfig config = dln::parse_experiment_config(read_file(config_path));
  resolve_data_path(config, data_flag);
  std::vector<double> rates =
      rates_csv.empty() ? dln::default_grid_rates() : parse_rate_list(rates_csv);
  dln::GridResult grid = dln::grid_search(config, rates);
  std::cout << dln::grid_json(grid).dump(2) << "\n";
  if (!grid.has_best) {
    std::cerr << "no learning rate converged; see the entries table\n";
    return 1;
  }
  return 0;
}

int verify_command() {
  dln::VerifyReport rep = dln::verify_suite();
  std::cout << dln::verify_report_json(rep).dump(2) << "\n";
  for (const dln::CheckResult& c : rep.checks)
    std::fprintf(stderr, "%-40s %s (measured %.3g, tolerance %.3g)\n", c.name.c_str(),
                 c.pass ? "pass" : "FAIL", c.measured, c.tolerance);
  return rep.all_pass ? 0 : 1;
}

int curve_command(int depth, int dim, double inner, double outer, int segments) {
  if (inner <= 0.0) inner = dln::default_inner_radius(depth, outer);
  dln::ConservativityReport rep = dln::conservativity_report(
      dln::default_probe_gradient(dim), dim, depth, inner, outer, segments);
  std::cout << dln::conservativity_json(rep).dump(2) << "\n";
  return 0;
}

int plot_command(const std::string& out, const std::vector<std::string>& trace_paths) {
  std::vector<dln::NamedTrace> traces;
  traces.reserve(trace_paths.size());
  for (const std::string& path : trace_paths) traces.push_back(dln::read_trace_csv(path));
  dln::emit_plot(traces, out);
  std::cout << "wrote " << out << " (" << traces.size() << " traces)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep linear network training rules: experiments and checks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dln::kToolVersion);

  std::string config_path, data_flag, out_prefix, rates_csv, plot_out;
  std::vector<std::string> trace_paths;
  int curve_depth = 3, curve_dim = 3, curve_segments = 8192;
  double curve_inner = 0.0, curve_outer = 0.1;

  CLI::App* run = app.add_subcommand("run", "Run one experiment config, write CSV + metadata");
  run->add_option("--config", config_path, "JSON experiment config")->required();
  run->add_option("--data", data_flag, "dataset file or directory (ethanol problems)");
  run->add_option("--out", out_prefix, "output path prefix (default: config label)");

  CLI::App* grid = app.add_subcommand("grid", "Learning-rate grid search over one config");
  grid->add_option("--config", config_path, "JSON experiment config")->required();
  grid->add_option("--data", data_flag, "dataset file or directory (ethanol problems)");
  grid->add_option("--rates", rates_csv, "comma-separated rates (default: built-in grid)");

  CLI::App* verify = app.add_subcommand("verify", "Run the numeric invariant suite");

  CLI::App* curve = app.add_subcommand(
      "curve", "Loop-integral report for the depth-n update field on a probe loss");
  curve->add_option("--n", curve_depth, "emulated depth")->required();
  curve->add_option("--dim", curve_dim, "ambient dimension (default 3)");
  curve->add_option("--r", curve_inner, "inner radius (default: even closed-form split)");
  curve->add_option("--R", curve_outer, "outer radius (default 0.1)");
  curve->add_option("--segments", curve_segments, "quadrature segments per piece");

  CLI::App* plot = app.add_subcommand("plot", "Render trace CSVs to one SVG");
  plot->add_option("--out", plot_out, "output SVG path")->required();
  plot->add_option("traces", trace_paths, "trace CSV files")->required()->expected(-1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) return run_command(config_path, data_flag, out_prefix);
    if (grid->parsed()) return grid_command(config_path, data_flag, rates_csv);
    if (verify->parsed()) return verify_command();
    if (curve->parsed())
      return curve_command(curve_depth, curve_dim, curve_inner, curve_outer, curve_segments);
    if (plot->parsed()) return plot_command(plot_out, trace_paths);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const dln::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
