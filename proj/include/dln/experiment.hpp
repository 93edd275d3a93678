#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dln/matrix.hpp"
#include "dln/network.hpp"
#include "dln/objective.hpp"
#include "dln/optim.hpp"
#include "dln/rng.hpp"
#include "dln/verify.hpp"

namespace dln {

inline constexpr const char* kToolVersion = "dln 0.1.0";

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class ProblemKind { uci_ethanol, synth_gaussian, synth_illcond };

struct ProblemSpec {
  ProblemKind kind = ProblemKind::synth_gaussian;
  std::string path;  // uci_ethanol: file or directory of batch files
  int d = 32;        // synth_gaussian
  int m = 256;
  std::uint64_t data_seed = 1;
  double y1 = 10.0;  // synth_illcond targets
  double y2 = 1.0;
};

enum class InitKind { gaussian, identity, balanced };

struct ModelSpec {
  int depth = 1;
  std::vector<int> hidden_widths;  // empty: every hidden layer gets width d
  InitKind init = InitKind::gaussian;
  double init_std = 1e-3;
  double init_offset = 1.0;  // identity init only
};

enum class OptimizerKind { gd, e2e, adagrad, adadelta, adam };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::gd;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
};

struct ExperimentConfig {
  std::string label = "experiment";
  ProblemSpec problem;
  int p = 2;
  ModelSpec model;
  OptimizerSpec optimizer;
  int iters = 1000;
  std::uint64_t seed = 0;
  double delta_rel = 1e-3;  // convergence slack relative to initial suboptimality
};

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

namespace detail {

inline std::string problem_kind_name(ProblemKind k) {
  switch (k) {
    case ProblemKind::uci_ethanol: return "uci_ethanol";
    case ProblemKind::synth_gaussian: return "synth_gaussian";
    case ProblemKind::synth_illcond: return "synth_illcond";
  }
  return "";
}

inline std::string init_kind_name(InitKind k) {
  switch (k) {
    case InitKind::gaussian: return "gaussian";
    case InitKind::identity: return "identity";
    case InitKind::balanced: return "balanced";
  }
  return "";
}

inline std::string optimizer_kind_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::gd: return "gd";
    case OptimizerKind::e2e: return "e2e";
    case OptimizerKind::adagrad: return "adagrad";
    case OptimizerKind::adadelta: return "adadelta";
    case OptimizerKind::adam: return "adam";
  }
  return "";
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["label"] = c.label;
  nlohmann::json prob;
  prob["kind"] = detail::problem_kind_name(c.problem.kind);
  switch (c.problem.kind) {
    case ProblemKind::uci_ethanol:
      prob["path"] = c.problem.path;
      break;
    case ProblemKind::synth_gaussian:
      prob["d"] = c.problem.d;
      prob["m"] = c.problem.m;
      prob["seed"] = c.problem.data_seed;
      break;
    case ProblemKind::synth_illcond:
      prob["y1"] = c.problem.y1;
      prob["y2"] = c.problem.y2;
      break;
  }
  j["problem"] = prob;
  j["p"] = c.p;
  nlohmann::json model;
  model["depth"] = c.model.depth;
  model["hidden_widths"] = c.model.hidden_widths;
  model["init"] = {{"kind", detail::init_kind_name(c.model.init)}, {"std", c.model.init_std}};
  if (c.model.init == InitKind::identity) model["init"]["offset"] = c.model.init_offset;
  j["model"] = model;
  j["optimizer"] = {{"kind", detail::optimizer_kind_name(c.optimizer.kind)},
                    {"learning_rate", c.optimizer.learning_rate},
                    {"weight_decay", c.optimizer.weight_decay}};
  j["iters"] = c.iters;
  j["seed"] = c.seed;
  j["delta_rel"] = c.delta_rel;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.label = j.value("label", c.label);
  if (!j.contains("problem")) throw std::invalid_argument("config: missing 'problem'");
  const nlohmann::json& prob = j.at("problem");
  std::string pk = prob.at("kind").get<std::string>();
  if (pk == "uci_ethanol") {
    c.problem.kind = ProblemKind::uci_ethanol;
    c.problem.path = prob.value("path", std::string());
  } else if (pk == "synth_gaussian") {
    c.problem.kind = ProblemKind::synth_gaussian;
    c.problem.d = prob.value("d", c.problem.d);
    c.problem.m = prob.value("m", c.problem.m);
    c.problem.data_seed = prob.value("seed", c.problem.data_seed);
  } else if (pk == "synth_illcond") {
    c.problem.kind = ProblemKind::synth_illcond;
    c.problem.y1 = prob.value("y1", c.problem.y1);
    c.problem.y2 = prob.value("y2", c.problem.y2);
  } else {
    throw std::invalid_argument("config: unknown problem kind '" + pk + "'");
  }
  c.p = j.value("p", c.p);
  if (j.contains("model")) {
    const nlohmann::json& model = j.at("model");
    c.model.depth = model.value("depth", c.model.depth);
    if (model.contains("hidden_widths"))
      c.model.hidden_widths = model.at("hidden_widths").get<std::vector<int>>();
    if (model.contains("init")) {
      const nlohmann::json& init = model.at("init");
      std::string ik = init.value("kind", std::string("gaussian"));
      if (ik == "gaussian") c.model.init = InitKind::gaussian;
      else if (ik == "identity") c.model.init = InitKind::identity;
      else if (ik == "balanced") c.model.init = InitKind::balanced;
      else throw std::invalid_argument("config: unknown init kind '" + ik + "'");
      c.model.init_std = init.value("std", c.model.init_std);
      c.model.init_offset = init.value("offset", c.model.init_offset);
    }
  }
  if (j.contains("optimizer")) {
    const nlohmann::json& opt = j.at("optimizer");
    std::string ok = opt.value("kind", std::string("gd"));
    if (ok == "gd") c.optimizer.kind = OptimizerKind::gd;
    else if (ok == "e2e") c.optimizer.kind = OptimizerKind::e2e;
    else if (ok == "adagrad") c.optimizer.kind = OptimizerKind::adagrad;
    else if (ok == "adadelta") c.optimizer.kind = OptimizerKind::adadelta;
    else if (ok == "adam") c.optimizer.kind = OptimizerKind::adam;
    else throw std::invalid_argument("config: unknown optimizer kind '" + ok + "'");
    c.optimizer.learning_rate = opt.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.weight_decay = opt.value("weight_decay", c.optimizer.weight_decay);
  }
  c.iters = j.value("iters", c.iters);
  c.seed = j.value("seed", c.seed);
  c.delta_rel = j.value("delta_rel", c.delta_rel);
  if (c.iters < 0) throw std::invalid_argument("config: iters must be >= 0");
  if (c.model.depth < 1) throw std::invalid_argument("config: depth must be >= 1");
  if (c.p < 2 || c.p % 2 != 0) throw std::invalid_argument("config: p must be even and >= 2");
  if (!(c.delta_rel > 0.0)) throw std::invalid_argument("config: delta_rel must be > 0");
  return c;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct LoadedDataset {
  Dataset data;
  std::vector<std::string> warnings;
};

namespace detail {

struct RawRow {
  int gas_id;
  double target;
  std::vector<double> features;
};

inline RawRow parse_sensor_line(const std::string& line, const std::string& where, long lineno) {
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError(where + ":" + std::to_string(lineno) + ": " + what);
  };
  std::istringstream in(line);
  std::string head;
  if (!(in >> head)) throw fail("blank line");
  std::size_t semi = head.find(';');
  if (semi == std::string::npos || semi == 0 || semi + 1 >= head.size())
    throw fail("label must be '<gas-id>;<concentration>'");
  RawRow row;
  try {
    std::size_t used = 0;
    row.gas_id = std::stoi(head.substr(0, semi), &used);
    if (used != semi) throw std::invalid_argument("trailing");
    std::string conc = head.substr(semi + 1);
    row.target = std::stod(conc, &used);
    if (used != conc.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw fail("label must be '<gas-id>;<concentration>'");
  }
  std::string tok;
  int expect = 1;
  while (in >> tok) {
    std::size_t colon = tok.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 >= tok.size())
      throw fail("feature token '" + tok + "' is not 'index:value'");
    int idx = 0;
    double val = 0.0;
    try {
      std::size_t used = 0;
      idx = std::stoi(tok.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument("trailing");
      std::string vs = tok.substr(colon + 1);
      val = std::stod(vs, &used);
      if (used != vs.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw fail("feature token '" + tok + "' is not 'index:value'");
    }
    if (idx != expect)
      throw fail("feature index " + std::to_string(idx) + " out of order (expected " +
                 std::to_string(expect) + ")");
    row.features.push_back(val);
    ++expect;
  }
  if (static_cast<int>(row.features.size()) != 128)
    throw fail("expected 128 features, got " + std::to_string(row.features.size()));
  return row;
}

inline void parse_sensor_file(const std::filesystem::path& file, std::vector<RawRow>& rows) {
  std::ifstream in(file);
  if (!in) throw ParseError("cannot open " + file.string());
  std::string line;
  long lineno = 0;
  long parsed = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    rows.push_back(parse_sensor_line(line, file.string(), lineno));
    ++parsed;
  }
  if (parsed == 0) throw ParseError(file.string() + ": no data lines");
}

}  // namespace detail

// Standardizes features in place: per column, subtract the mean and divide
// by the population standard deviation (columns with near-zero spread are
// only centered). Targets are untouched.
inline void standardize_features(Dataset& data) {
  int m = data.x.rows();
  int d = data.x.cols();
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < m; ++i) mean += data.x(i, j);
    mean /= m;
    double var = 0.0;
    for (int i = 0; i < m; ++i) {
      double c = data.x(i, j) - mean;
      var += c * c;
    }
    var /= m;
    double scale = std::sqrt(var);
    if (scale < 1e-12) scale = 1.0;
    for (int i = 0; i < m; ++i) data.x(i, j) = (data.x(i, j) - mean) / scale;
  }
}

// Reads gas-sensor batch files (a single file, or every *.dat in a
// directory, lexicographic order). Line format: `G;C 1:v1 2:v2 ... 128:v128`
// where G is the gas id and C the concentration. Keeps gas id 1, with the
// concentration as regression target.
inline LoadedDataset load_ethanol(const std::string& path, bool standardize = true) {
  namespace fs = std::filesystem;
  LoadedDataset out;
  std::vector<detail::RawRow> rows;
  fs::path root(path);
  if (fs::is_directory(root)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root))
      if (entry.is_regular_file() && entry.path().extension() == ".dat")
        files.push_back(entry.path());
    if (files.empty()) throw ParseError(path + ": no .dat files in directory");
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) detail::parse_sensor_file(f, rows);
  } else if (fs::is_regular_file(root)) {
    detail::parse_sensor_file(root, rows);
  } else {
    throw ParseError(path + ": not a file or directory");
  }

  std::vector<const detail::RawRow*> kept;
  for (const detail::RawRow& r : rows)
    if (r.gas_id == 1) kept.push_back(&r);
  if (kept.empty()) throw ParseError(path + ": no rows with gas id 1");
  int m = static_cast<int>(kept.size());
  out.data.x = Matrix(m, 128);
  out.data.y = Matrix(m, 1);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < 128; ++j) out.data.x(i, j) = kept[i]->features[j];
    out.data.y(i, 0) = kept[i]->target;
  }
  if (m != 2565)
    out.warnings.push_back("expected 2565 rows after filtering, got " + std::to_string(m) +
                           " (dataset version drift?)");
  if (standardize) standardize_features(out.data);
  return out;
}

// Writes a scalar-target dataset in the same `G;C idx:value ...` format
// that load_ethanol reads. Round-trips through load_ethanol(path, false).
inline void write_sensor_format(const Dataset& data, const std::string& path, int gas_id = 1) {
  if (data.y.cols() != 1) throw std::invalid_argument("write_sensor_format: scalar targets only");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_sensor_format: cannot open " + path);
  char buf[64];
  for (int i = 0; i < data.x.rows(); ++i) {
    out << gas_id << ';';
    std::snprintf(buf, sizeof buf, "%.17g", data.y(i, 0));
    out << buf;
    for (int j = 0; j < data.x.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", data.x(i, j));
      out << ' ' << (j + 1) << ':' << buf;
    }
    out << '\n';
  }
}

// Random regression problem: standard Gaussian features, a planted weight
// vector of unit expected norm, and 10% observation noise.
inline Dataset synth_gaussian(int d, int m, std::uint64_t seed) {
  if (d < 1 || m < 1) throw std::invalid_argument("synth_gaussian: d and m must be >= 1");
  Rng rng(seed);
  Dataset data;
  data.x = gaussian_matrix(m, d, 1.0, rng);
  Matrix w_star = gaussian_matrix(1, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  Matrix noise = gaussian_matrix(m, 1, 1.0, rng);
  data.y = Matrix(m, 1);
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += data.x(i, j) * w_star(0, j);
    data.y(i, 0) = acc + 0.1 * noise(i, 0);
  }
  return data;
}

// The two-point problem whose coordinates decouple: x_1 = (1,0) with target
// y1, x_2 = (0,1) with target y2.
inline Dataset synth_illcond(double y1, double y2) {
  Dataset data;
  data.x = Matrix::identity(2);
  data.y = Matrix(2, 1);
  data.y(0, 0) = y1;
  data.y(1, 0) = y2;
  return data;
}

inline LoadedDataset make_problem(const ProblemSpec& spec) {
  switch (spec.kind) {
    case ProblemKind::uci_ethanol:
      if (spec.path.empty())
        throw std::invalid_argument("uci_ethanol problem needs a dataset path");
      return load_ethanol(spec.path, true);
    case ProblemKind::synth_gaussian:
      return {synth_gaussian(spec.d, spec.m, spec.data_seed), {}};
    case ProblemKind::synth_illcond:
      return {synth_illcond(spec.y1, spec.y2), {}};
  }
  throw std::invalid_argument("make_problem: bad kind");
}

// ---------------------------------------------------------------------------
// Trace runner
// ---------------------------------------------------------------------------

struct TraceRow {
  int iter = 0;
  double loss = 0.0;
  double loss_minus_opt = 0.0;
  double grad_norm = 0.0;
  double we_fro_norm = 0.0;
  double elapsed_ms = 0.0;  // informational; kept out of the CSV
};

struct TraceResult {
  ExperimentConfig config;
  std::vector<TraceRow> rows;
  std::vector<std::string> warnings;
  double loss_star = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double threshold = 0.0;      // loss_star + delta_rel * (initial_loss - loss_star)
  int converged_iter = -1;     // first iteration at or below threshold, -1 if never
  bool diverged = false;
  bool standardized = false;   // features were standardized (documented deviation)
  double total_elapsed_ms = 0.0;
};

namespace detail {

inline std::vector<int> full_widths(const ModelSpec& model, int d, int k) {
  std::vector<int> widths;
  widths.push_back(d);
  for (int j = 0; j < model.depth - 1; ++j) {
    int w = j < static_cast<int>(model.hidden_widths.size()) ? model.hidden_widths[j] : d;
    widths.push_back(w);
  }
  widths.push_back(k);
  return widths;
}

inline LinearNetwork build_model(const ModelSpec& model, int d, int k, std::uint64_t seed) {
  std::vector<int> widths = full_widths(model, d, k);
  switch (model.init) {
    case InitKind::gaussian: return init_gaussian(widths, model.init_std, seed);
    case InitKind::identity:
      return init_identity(widths, model.init_std, seed, model.init_offset);
    case InitKind::balanced: return init_balanced(widths, model.init_std, seed);
  }
  throw std::invalid_argument("build_model: bad init kind");
}

}  // namespace detail

// Runs one configuration and collects per-iteration rows. Row t holds the
// state after t steps, for t = 0..iters-1; the state after the final step
// lands in final_loss. Divergence appends a terminal marker row with NaN
// measurements and stops the run.
inline TraceResult run_trace(const ExperimentConfig& config) {
  LoadedDataset loaded = make_problem(config.problem);
  LpObjective obj(std::move(loaded.data), config.p);
  int d = obj.data.input_dim();
  int k = obj.data.output_dim();

  TraceResult res;
  res.config = config;
  res.warnings = std::move(loaded.warnings);
  res.standardized = config.problem.kind == ProblemKind::uci_ethanol;
  res.loss_star = reference_optimum(obj).loss;

  LinearNetwork net = detail::build_model(config.model, d, k, config.seed);
  OptimizerKind kind = config.optimizer.kind;
  GdConfig gd_config{config.optimizer.learning_rate, config.optimizer.weight_decay};
  gd_config.validate();

  // gd trains the layers; every other optimizer drives the collapsed matrix
  // (e2e with the depth-n rule, the adaptive ones as direct parameterization).
  Matrix w_e = end_to_end(net);
  EndToEndState e2e_state{w_e, config.model.depth, gd_config};
  bool single_output = k == 1;
  AdaptiveState adaptive;
  if (kind == OptimizerKind::adagrad)
    adaptive = make_adaptive_state(AdaptiveVariant::adagrad, k, d);
  else if (kind == OptimizerKind::adadelta)
    adaptive = make_adaptive_state(AdaptiveVariant::adadelta, k, d);
  else if (kind == OptimizerKind::adam)
    adaptive = make_adaptive_state(AdaptiveVariant::adam, k, d);

  res.initial_loss = loss1(w_e, obj);
  double slack = std::max(res.initial_loss - res.loss_star, 0.0);
  res.threshold = res.loss_star + config.delta_rel * (slack > 0.0 ? slack : 1.0);
  res.final_loss = res.initial_loss;
  double divergence_ceiling = 1e6 * std::max(1.0, res.initial_loss);

  auto started = std::chrono::steady_clock::now();
  auto elapsed_ms = [&]() {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
        .count();
  };
  auto mark_diverged = [&](int iter) {
    double nan = std::numeric_limits<double>::quiet_NaN();
    res.rows.push_back({iter, nan, nan, nan, nan, elapsed_ms()});
    res.diverged = true;
  };

  res.rows.reserve(config.iters);
  for (int t = 0; t <= config.iters; ++t) {
    double loss = loss1(w_e, obj);
    res.final_loss = loss;
    if (!std::isfinite(loss) || loss > divergence_ceiling) {
      mark_diverged(t);
      break;
    }
    if (res.converged_iter < 0 && loss <= res.threshold) res.converged_iter = t;
    if (t == config.iters) break;
    Matrix grad = grad1(w_e, obj);
    res.rows.push_back(
        {t, loss, loss - res.loss_star, grad.frobenius_norm(), w_e.frobenius_norm(),
         elapsed_ms()});
    try {
      switch (kind) {
        case OptimizerKind::gd:
          net = gd_step_deep(net, obj, gd_config);
          w_e = end_to_end(net);
          break;
        case OptimizerKind::e2e:
          e2e_state =
              single_output ? e2e_step_single(e2e_state, grad) : e2e_step_general(e2e_state, grad);
          w_e = e2e_state.weights;
          break;
        default: {
          auto [next_w, next_state] =
              adaptive_step(adaptive, w_e, grad, config.optimizer.learning_rate);
          w_e = next_w;
          adaptive = next_state;
          break;
        }
      }
    } catch (const DivergenceError&) {
      mark_diverged(t + 1);
      break;
    }
  }
  res.total_elapsed_ms = elapsed_ms();
  return res;
}

// ---------------------------------------------------------------------------
// Trace serialization
// ---------------------------------------------------------------------------

inline constexpr const char* kTraceHeader = "iter,loss,loss_minus_opt,grad_norm,we_fro_norm";

inline std::string trace_csv_string(const TraceResult& res) {
  std::string out(kTraceHeader);
  out += '\n';
  char buf[512];
  for (const TraceRow& row : res.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", row.iter, row.loss,
                  row.loss_minus_opt, row.grad_norm, row.we_fro_norm);
    out += buf;
  }
  return out;
}

inline void write_trace_csv(const TraceResult& res, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
  out << trace_csv_string(res);
  if (!out) throw std::runtime_error("write_trace_csv: write failed for " + path);
}

inline nlohmann::json metadata_json(const TraceResult& res) {
  nlohmann::json j;
  j["label"] = res.config.label;
  j["tool_version"] = kToolVersion;
  j["config"] = config_to_json(res.config);
  j["seed"] = res.config.seed;
  j["loss_star"] = res.loss_star;
  j["delta_rel"] = res.config.delta_rel;
  j["threshold"] = res.threshold;
  j["initial_loss"] = res.initial_loss;
  j["final_loss"] = res.final_loss;
  j["converged_iter"] = res.converged_iter;
  j["diverged"] = res.diverged;
  j["rows"] = res.rows.size();
  j["features_standardized"] = res.standardized;
  if (res.standardized)
    j["preprocessing_note"] =
        "features standardized to zero mean and unit variance (deliberate deviation: raw "
        "sensor scales span several orders of magnitude)";
  j["elapsed_ms_informational"] = res.total_elapsed_ms;
  if (!res.warnings.empty()) j["warnings"] = res.warnings;
  return j;
}

inline void write_metadata_json(const TraceResult& res, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_metadata_json: cannot open " + path);
  out << metadata_json(res).dump(2) << '\n';
}

struct NamedTrace {
  std::string label;
  std::vector<TraceRow> rows;
};

inline NamedTrace read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_trace_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty trace file");
  if (line != kTraceHeader) throw ParseError(path + ": unexpected header '" + line + "'");
  NamedTrace trace;
  trace.label = std::filesystem::path(path).stem().string();
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TraceRow row;
    int got = std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &row.iter, &row.loss,
                          &row.loss_minus_opt, &row.grad_norm, &row.we_fro_norm);
    if (got != 5)
      throw ParseError(path + ":" + std::to_string(lineno) + ": malformed trace row");
    trace.rows.push_back(row);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

inline std::vector<double> default_grid_rates() {
  return {1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1};
}

struct GridEntry {
  double rate = 0.0;
  bool diverged = false;
  int converged_iter = -1;
  double final_loss = 0.0;
};

struct GridResult {
  std::vector<GridEntry> entries;  // sorted by rate
  bool has_best = false;
  double best_rate = 0.0;
  int best_iters = -1;
};

// Runs the configuration once per rate; the winner is the non-divergent run
// reaching the convergence threshold in the fewest iterations, ties going
// to the smaller rate. With no convergent run, has_best is false and the
// entries table documents every failure.
inline GridResult grid_search(const ExperimentConfig& config, const std::vector<double>& rates) {
  if (rates.empty()) throw std::invalid_argument("grid_search: empty rate list");
  GridResult out;
  for (double rate : rates) {
    ExperimentConfig c = config;
    c.optimizer.learning_rate = rate;
    TraceResult res = run_trace(c);
    out.entries.push_back({rate, res.diverged, res.converged_iter, res.final_loss});
  }
  std::sort(out.entries.begin(), out.entries.end(),
            [](const GridEntry& a, const GridEntry& b) { return a.rate < b.rate; });
  for (const GridEntry& e : out.entries) {
    if (e.diverged || e.converged_iter < 0) continue;
    if (!out.has_best || e.converged_iter < out.best_iters) {
      out.has_best = true;
      out.best_rate = e.rate;
      out.best_iters = e.converged_iter;
    }
  }
  return out;
}

inline nlohmann::json grid_json(const GridResult& grid) {
  nlohmann::json j;
  j["has_best"] = grid.has_best;
  if (grid.has_best) {
    j["best_rate"] = grid.best_rate;
    j["best_iters"] = grid.best_iters;
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const GridEntry& e : grid.entries) {
    rows.push_back({{"rate", e.rate},
                    {"diverged", e.diverged},
                    {"converged_iter", e.converged_iter},
                    {"final_loss", e.final_loss}});
  }
  j["entries"] = rows;
  return j;
}

// ---------------------------------------------------------------------------
// SVG plotting
// ---------------------------------------------------------------------------

// Renders convergence traces: x linear in iteration, y log10 of
// loss_minus_opt clipped below at 1e-16. One polyline per trace plus a
// legend. Returns a self-contained SVG document.
inline std::string emit_plot_svg(const std::vector<NamedTrace>& traces) {
  if (traces.empty()) throw std::invalid_argument("emit_plot_svg: no traces");
  for (const NamedTrace& t : traces)
    if (t.rows.empty()) throw std::invalid_argument("emit_plot_svg: trace '" + t.label + "' empty");

  const double floor_value = 1e-16;
  double x_max = 1.0, y_min = 0.0, y_max = -400.0;
  for (const NamedTrace& t : traces) {
    for (const TraceRow& r : t.rows) {
      x_max = std::max(x_max, static_cast<double>(r.iter));
      double v = r.loss_minus_opt;
      double lg = std::log10(std::isfinite(v) ? std::max(v, floor_value) : floor_value);
      y_min = std::min(y_min, lg);
      y_max = std::max(y_max, lg);
    }
  }
  if (y_max <= y_min) y_max = y_min + 1.0;

  const double width = 860.0, height = 540.0;
  const double left = 70.0, right = 200.0, top = 30.0, bottom = 50.0;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  auto sx = [&](double iter) { return left + plot_w * (iter / x_max); };
  auto sy = [&](double lg) { return top + plot_h * (1.0 - (lg - y_min) / (y_max - y_min)); };
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                           "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  char buf[256];

  std::string svg;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" "
                "viewBox=\"0 0 %g %g\">\n",
                width, height, width, height);
  svg += buf;
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" "
                "stroke=\"#333333\"/>\n",
                left, top, plot_w, plot_h);
  svg += buf;

  int y_ticks = 5;
  for (int i = 0; i <= y_ticks; ++i) {
    double lg = y_min + (y_max - y_min) * i / y_ticks;
    double y = sy(lg);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"#cccccc\"/>\n", left, y,
                  left + plot_w, y);
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"end\">1e%.1f</text>\n",
                  left - 6.0, y + 4.0, lg);
    svg += buf;
  }
  int x_ticks = 5;
  for (int i = 0; i <= x_ticks; ++i) {
    double iter = x_max * i / x_ticks;
    double x = sx(iter);
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">%g</text>\n", x,
                  top + plot_h + 18.0, iter);
    svg += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\" font-size=\"13\" text-anchor=\"middle\">iteration"
                "</text>\n",
                left + plot_w / 2.0, height - 12.0);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"18\" y=\"%g\" font-size=\"13\" text-anchor=\"middle\" "
                "transform=\"rotate(-90 18 %g)\">loss minus optimum</text>\n",
                top + plot_h / 2.0, top + plot_h / 2.0);
  svg += buf;

  for (std::size_t i = 0; i < traces.size(); ++i) {
    const char* color = palette[i % (sizeof palette / sizeof palette[0])];
    std::string points;
    for (const TraceRow& r : traces[i].rows) {
      double v = r.loss_minus_opt;
      double lg = std::log10(std::isfinite(v) ? std::max(v, floor_value) : floor_value);
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", sx(r.iter), sy(lg));
      points += buf;
    }
    if (!points.empty()) points.pop_back();
    svg += "<polyline fill=\"none\" stroke=\"";
    svg += color;
    svg += "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";

    double ly = top + 16.0 + 20.0 * i;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" "
                  "stroke-width=\"3\"/>\n",
                  left + plot_w + 12.0, ly, left + plot_w + 36.0, ly, color);
    svg += buf;
    std::string label = traces[i].label;
    std::string escaped;
    for (char ch : label) {
      if (ch == '&') escaped += "&amp;";
      else if (ch == '<') escaped += "&lt;";
      else if (ch == '>') escaped += "&gt;";
      else escaped += ch;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"12\">",
                  left + plot_w + 42.0, ly + 4.0);
    svg += buf;
    svg += escaped + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

inline void emit_plot(const std::vector<NamedTrace>& traces, const std::string& path) {
  std::string svg = emit_plot_svg(traces);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("emit_plot: cannot open " + path);
  out << svg;
}

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  double tolerance = 0.0;
  double measured = 0.0;
  bool pass = false;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_pass = true;
};

using PrecondFn = std::function<Matrix(const Matrix&, int)>;

// Largest per-entry disagreement between the sandwich-sum update, the
// vectorized update through precond_fn, and (single-output cases) the
// norm-scaled rule, over deterministic random cases. Parameterized on the
// preconditioner so corrupted implementations are detectable.
inline double route_equivalence_gap(const PrecondFn& precond_fn, int cases, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  const int depths[] = {1, 2, 3, 5};
  const double decays[] = {0.0, 0.1};
  for (int i = 0; i < cases; ++i) {
    int k = 1 + static_cast<int>(rng.uniform() * 4) % 4;
    int d = 1 + static_cast<int>(rng.uniform() * 6) % 6;
    int depth = depths[i % 4];
    double decay = decays[(i / 4) % 2];
    Matrix w = gaussian_matrix(k, d, 1.0, rng);
    Matrix g = gaussian_matrix(k, d, 1.0, rng);
    GdConfig config{0.01, decay};
    EndToEndState state{w, depth, config};
    Matrix general = e2e_step_general(state, g).weights;

    Matrix p = precond_fn(w, depth);
    Matrix dir_vec = p * unvec(vec(g), k * d, 1);
    Matrix dir = unvec(dir_vec.data(), k, d);
    double keep = 1.0 - config.learning_rate * config.weight_decay * depth;
    Matrix via_vec = keep * w - config.learning_rate * dir;
    worst = std::max(worst, (general - via_vec).max_abs());

    if (k == 1) {
      Matrix single = e2e_step_single(state, g).weights;
      worst = std::max(worst, (general - single).max_abs());
    }
  }
  return worst;
}

namespace detail {

inline void push_check(VerifyReport& rep, const std::string& name, double tolerance,
                       double measured, bool pass) {
  rep.checks.push_back({name, tolerance, measured, pass});
  rep.all_pass = rep.all_pass && pass;
}

inline void push_upper(VerifyReport& rep, const std::string& name, double tolerance,
                       double measured) {
  push_check(rep, name, tolerance, measured, measured <= tolerance);
}

}  // namespace detail

// Runs the library's cross-cutting numeric invariants at fixed seeds and
// reports every measurement. Uses precond_matrix by default; tests inject
// corrupted preconditioners to prove the equivalence check has teeth.
inline VerifyReport verify_suite(const PrecondFn& precond_fn = [](const Matrix& w, int n) {
  return precond_matrix(w, n);
}) {
  VerifyReport rep;

  detail::push_upper(rep, "update-route-equivalence", 1e-10,
                     route_equivalence_gap(precond_fn, 64, 2024));

  {  // Worked example: W_e = [3,4], depth 2, grad = [1,0].
    Matrix w(1, 2);
    w(0, 0) = 3.0;
    w(0, 1) = 4.0;
    Matrix g(1, 2);
    g(0, 0) = 1.0;
    Matrix dir = e2e_direction(w, g, 2);
    double dev = std::max(std::abs(dir(0, 0) - 6.8), std::abs(dir(0, 1) - 2.4));
    Matrix p = precond_fn(w, 2);
    double tr = p(0, 0) + p(1, 1);
    double det = p(0, 0) * p(1, 1) - p(0, 1) * p(1, 0);
    double disc = std::sqrt(std::max(tr * tr / 4.0 - det, 0.0));
    dev = std::max(dev, std::abs((tr / 2.0 + disc) - 10.0));
    dev = std::max(dev, std::abs((tr / 2.0 - disc) - 5.0));
    detail::push_upper(rep, "worked-direction-and-eigenvalues", 1e-10, dev);
  }

  {  // Layer grams stay balanced along the flow.
    LinearNetwork net = init_balanced({3, 2, 2, 2}, 0.5, 5);
    Dataset data = synth_gaussian(3, 24, 11);
    Matrix y2(24, 2);
    Rng rng(13);
    for (int i = 0; i < 24; ++i)
      for (int j = 0; j < 2; ++j) y2(i, j) = rng.normal();
    data.y = y2;
    LpObjective obj(data, 2);
    auto traj = flow_rk4_deep(net, obj, GdConfig{1.0, 0.0}, 1e-3, 2000);
    double worst = 0.0;
    for (const LinearNetwork& state : traj)
      worst = std::max(worst, balancedness_residual(state));
    detail::push_upper(rep, "flow-balancedness-conservation", 1e-8, worst);
  }

  {  // Discrete GD balancedness drift shrinks linearly with the rate.
    Dataset data = synth_gaussian(4, 32, 17);
    LpObjective obj(data, 2);
    auto drift = [&](double eta, int steps) {
      LinearNetwork net = init_balanced({4, 3, 3, 1}, 0.3, 23);
      for (int t = 0; t < steps; ++t) net = gd_step_deep(net, obj, GdConfig{eta, 0.0});
      return balancedness_residual(net);
    };
    double ratio = drift(5e-3, 800) / drift(1e-2, 400);
    detail::push_check(rep, "discrete-balancedness-linear-in-rate", 1.0, ratio,
                       ratio >= 0.25 && ratio <= 1.0);
  }

  {  // Collapsed rule emulates layer-wise GD.
    LpObjective obj(synth_gaussian(8, 64, 29), 4);
    EmulationReport emu = emulation_report({8, 8, 1}, obj, 1e-3, 4000, 7, 1e-3);
    bool ok = !emu.deep_diverged && !emu.e2e_diverged && emu.max_rel_loss_gap <= 0.05;
    detail::push_check(rep, "emulation-gap", 0.05, emu.max_rel_loss_gap, ok);
  }

  {  // Deep induced field is path dependent; the raw gradient is not.
    ConservativityReport deep =
        conservativity_report(default_probe_gradient(3), 3, 3, 0.05, 0.1, 8192);
    bool ok = deep.verdict == Verdict::non_conservative &&
              std::abs(deep.loop_integral) >= 0.5 * deep.constant_part &&
              deep.loop_integral > std::max(0.0, deep.lower_bound);
    detail::push_check(rep, "loop-nonzero-depth3", 1e-8, std::abs(deep.loop_integral), ok);
    ConservativityReport shallow =
        conservativity_report(default_probe_gradient(3), 3, 1, 0.05, 0.1, 8192);
    bool ok1 = shallow.verdict == Verdict::conservative_consistent;
    detail::push_check(rep, "loop-vanishes-depth1", 1e-8, std::abs(shallow.loop_integral),
                       ok1 && std::abs(shallow.loop_integral) <= 1e-8);
  }

  {  // Quadrature agrees with the closed-form loop value. The depth-2
     // coefficient is exactly zero, so that case is compared absolutely.
    double worst = 0.0;
    for (int depth : {2, 3, 5}) {
      Matrix e(1, 2);
      e(0, 0) = 1.0;
      Curve c = build_curve({e, 0.5, 1.0, 8});
      GradFn grad = [&](const Matrix&) { return e; };
      double loop = line_integral(
          [&](const Matrix& w) { return induced_field(w, grad, depth); }, c, 1 << 16);
      double exact = constant_field_loop_value(depth, 0.5, 1.0);
      double err = std::abs(loop - exact);
      if (exact != 0.0) err /= std::abs(exact);
      worst = std::max(worst, err);
    }
    detail::push_upper(rep, "loop-closed-form-agreement", 1e-5, worst);
  }

  {  // Loop magnitude bound across random affine gradients.
    Rng rng(321);
    double worst_ratio = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      Matrix b = gaussian_matrix(1, 3, 1.0, rng);
      Matrix a = gaussian_matrix(3, 3, 1.0, rng);
      GradFn grad = [&](const Matrix& w) { return b + w * a; };
      Matrix e = gaussian_matrix(1, 3, 1.0, rng);
      e *= 1.0 / e.frobenius_norm();
      Curve c = build_curve({e, 0.2, 0.9, 8});
      double loop = line_integral(
          [&](const Matrix& w) { return induced_field(w, grad, 3); }, c, 512);
      double bound = loop_bound(grad, c, 3, 512);
      worst_ratio = std::max(worst_ratio, std::abs(loop) / bound);
    }
    detail::push_upper(rep, "loop-magnitude-bound", 1.0 + 1e-9, worst_ratio);
  }

  {  // Product-pair update matches the shifted plain step to second order.
    Dataset data;
    data.x = Matrix(3, 1);
    data.y = Matrix(3, 1);
    data.x(0, 0) = 1.0;
    data.x(1, 0) = -2.0;
    data.x(2, 0) = 0.5;
    data.y(0, 0) = 2.0;
    data.y(1, 0) = 1.0;
    data.y(2, 0) = -1.0;
    LpObjective obj(data, 2);
    auto residual = [&](double eta) {
      Matrix w1(1, 1);
      w1(0, 0) = 0.7;
      double w2 = 1.3;
      Matrix wm = w2 * w1;
      PairCoeffs coeffs = overparam_pair_coeffs(w1, w2, obj, eta);
      auto [w1_next, w2_next] = overparam_pair_step(w1, w2, obj, eta);
      double product = w2_next * w1_next(0, 0);
      double plain =
          (1.0 - coeffs.shrink) * wm(0, 0) - coeffs.rate * grad1(wm, obj)(0, 0);
      return std::abs(product - plain);
    };
    double ratio = residual(0.05) / residual(0.1);
    detail::push_upper(rep, "pair-residual-quadratic-scaling", 1.0 / 3.0, ratio);
  }

  {  // Per-coordinate recursion hand value.
    detail::push_upper(rep, "illcond-recursion-step", 1e-12,
                       std::abs(delta_recursion_step(-2.0, 0.1, 4) - (-1.2)));
  }

  {  // SVD reconstructs its input.
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      Matrix a = gaussian_matrix(2 + trial % 3, 2 + (trial / 3) % 4, 1.0, rng);
      SvdFactors f = svd(a);
      Matrix s(static_cast<int>(f.s.size()), static_cast<int>(f.s.size()));
      for (std::size_t i = 0; i < f.s.size(); ++i)
        s(static_cast<int>(i), static_cast<int>(i)) = f.s[i];
      worst = std::max(worst, (f.u * s * f.v.transposed() - a).max_abs());
    }
    detail::push_upper(rep, "svd-reconstruction", 1e-10, worst);
  }

  {  // Adaptive optimizers hold still at zero gradient.
    double worst = 0.0;
    for (AdaptiveVariant v :
         {AdaptiveVariant::adagrad, AdaptiveVariant::adadelta, AdaptiveVariant::adam}) {
      AdaptiveState state = make_adaptive_state(v, 2, 3);
      Rng rng(9);
      Matrix w = gaussian_matrix(2, 3, 1.0, rng);
      auto [next, ignored] = adaptive_step(state, w, Matrix(2, 3), 0.1);
      (void)ignored;
      worst = std::max(worst, (next - w).max_abs());
    }
    detail::push_upper(rep, "adaptive-zero-gradient-fixed-point", 1e-15, worst);
  }

  return rep;
}

inline nlohmann::json conservativity_json(const ConservativityReport& rep) {
  nlohmann::json j;
  j["depth"] = rep.depth;
  j["dim"] = rep.dim;
  j["inner_radius"] = rep.inner_radius;
  j["outer_radius"] = rep.outer_radius;
  j["segments_per_piece"] = rep.segments_per_piece;
  j["grad_norm_at_origin"] = rep.grad_norm_at_origin;
  j["loop_integral"] = rep.loop_integral;
  j["raw_gradient_loop_integral"] = rep.raw_gradient_loop_integral;
  j["constant_part"] = rep.constant_part;
  j["residual_bound"] = rep.residual_bound;
  j["lower_bound"] = rep.lower_bound;
  j["verdict"] =
      rep.verdict == Verdict::non_conservative ? "non_conservative" : "conservative_consistent";
  return j;
}

inline nlohmann::json verify_report_json(const VerifyReport& rep) {
  nlohmann::json j;
  nlohmann::json checks = nlohmann::json::array();
  for (const CheckResult& c : rep.checks)
    checks.push_back({{"name", c.name},
                      {"tolerance", c.tolerance},
                      {"measured", c.measured},
                      {"pass", c.pass}});
  j["checks"] = checks;
  j["all_pass"] = rep.all_pass;
  return j;
}

}  // namespace dln
