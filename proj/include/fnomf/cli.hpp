#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "experiments.hpp"
#include "meanfield.hpp"

namespace fnomf {

inline constexpr const char* kArtifactName = "fnomf";
inline constexpr const char* kArtifactVersion = "0.1.0";
inline constexpr const char* kOutputDirEnv = "FNOMF_OUTPUT_DIR";
inline constexpr const char* kDefaultOutputDir = "fnomf-out";

inline const std::vector<std::string>& cli_commands() {
  static const std::vector<std::string> names{"chi",           "fixed-point", "edge",       "jacobian",
                                              "gradnorm",      "cov-evolve",  "theory-vs-sim",
                                              "phase-scan",    "toy-train",   "init-export"};
  return names;
}

// Bad flags, out-of-range values, unwritable output: reported with exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string command;
  int N = 64;
  int D = 32;
  int K = 12;
  int L = 64;
  std::string activation = "relu";
  std::string variant = "simplified";
  std::string scheme = "default";  // resolved from the variant
  double sigma2 = 2.0;
  double sigma_b2 = 0.0;
  std::uint64_t seed = 0;
  int replicas = 0;  // 0: command default
  std::vector<double> sigma2_grid;
  std::vector<double> sigma_b2_grid;
  std::vector<int> layers;
  std::vector<int> depths;
  int depth_checked = 0;
  std::string input = "normal";
  std::uint64_t input_seed = 0;
  int steps = 100;
  double learning_rate = 1e-3;
  int batch = 64;
  double bracket_lo = 0.5;
  double bracket_hi = 8.0;
  int quadrature_order = 64;
  int skip_front = 4;
  int skip_back = 2;
  std::string output_dir;

  bool operator==(const RunConfig&) const = default;

  FnoConfig fno() const {
    FnoConfig c;
    c.N = N;
    c.D = D;
    c.K = K;
    c.L = L;
    c.activation = parse_activation(activation);
    c.variant = parse_variant(variant);
    return c;
  }

  InitConfig init() const { return {sigma2, sigma_b2, parse_scheme(scheme), seed, 0}; }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"command", c.command},
          {"N", c.N},
          {"D", c.D},
          {"K", c.K},
          {"L", c.L},
          {"activation", c.activation},
          {"variant", c.variant},
          {"scheme", c.scheme},
          {"sigma2", c.sigma2},
          {"sigma_b2", c.sigma_b2},
          {"seed", c.seed},
          {"replicas", c.replicas},
          {"sigma2_grid", c.sigma2_grid},
          {"sigma_b2_grid", c.sigma_b2_grid},
          {"layers", c.layers},
          {"depths", c.depths},
          {"depth_checked", c.depth_checked},
          {"input", c.input},
          {"input_seed", c.input_seed},
          {"steps", c.steps},
          {"learning_rate", c.learning_rate},
          {"batch", c.batch},
          {"bracket_lo", c.bracket_lo},
          {"bracket_hi", c.bracket_hi},
          {"quadrature_order", c.quadrature_order},
          {"skip_front", c.skip_front},
          {"skip_back", c.skip_back},
          {"output_dir", c.output_dir}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    j.at("command").get_to(c.command);
    j.at("N").get_to(c.N);
    j.at("D").get_to(c.D);
    j.at("K").get_to(c.K);
    j.at("L").get_to(c.L);
    j.at("activation").get_to(c.activation);
    j.at("variant").get_to(c.variant);
    j.at("scheme").get_to(c.scheme);
    j.at("sigma2").get_to(c.sigma2);
    j.at("sigma_b2").get_to(c.sigma_b2);
    j.at("seed").get_to(c.seed);
    j.at("replicas").get_to(c.replicas);
    j.at("sigma2_grid").get_to(c.sigma2_grid);
    j.at("sigma_b2_grid").get_to(c.sigma_b2_grid);
    j.at("layers").get_to(c.layers);
    j.at("depths").get_to(c.depths);
    j.at("depth_checked").get_to(c.depth_checked);
    j.at("input").get_to(c.input);
    j.at("input_seed").get_to(c.input_seed);
    j.at("steps").get_to(c.steps);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("batch").get_to(c.batch);
    j.at("bracket_lo").get_to(c.bracket_lo);
    j.at("bracket_hi").get_to(c.bracket_hi);
    j.at("quadrature_order").get_to(c.quadrature_order);
    j.at("skip_front").get_to(c.skip_front);
    j.at("skip_back").get_to(c.skip_back);
    j.at("output_dir").get_to(c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run configuration: ") + e.what());
  }
  return c;
}

// Fill command-dependent defaults so that the sidecar records what actually ran.
inline RunConfig resolve_defaults(RunConfig c) {
  const auto& names = cli_commands();
  if (std::find(names.begin(), names.end(), c.command) == names.end()) {
    throw ConfigError("unknown command '" + c.command + "'");
  }
  if (c.scheme == "default") c.scheme = std::string(to_string(default_scheme(parse_variant(c.variant))));
  if (c.replicas == 0) c.replicas = c.command == "gradnorm" ? 16 : 1;
  if (c.sigma2_grid.empty()) {
    if (c.command == "gradnorm") c.sigma2_grid = {1.0, 2.0, 4.0};
    if (c.command == "phase-scan") c.sigma2_grid = {0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0};
    if (c.command == "toy-train") c.sigma2_grid = {0.5, 1.0, 2.0, 4.0};
  }
  if (c.sigma_b2_grid.empty() && c.command == "phase-scan") c.sigma_b2_grid = {0.0, 0.05, 0.1, 0.2, 0.3};
  if (c.layers.empty() && c.command == "cov-evolve") c.layers = {1, c.L};
  if (c.depths.empty() && c.command == "toy-train") c.depths = {4, 32};
  if (c.depth_checked == 0) c.depth_checked = std::min(c.L, 8);
  if (c.output_dir.empty()) {
    const char* env = std::getenv(kOutputDirEnv);
    c.output_dir = env && *env ? env : kDefaultOutputDir;
  }
  return c;
}

inline void validate(const RunConfig& c) {
  c.fno().validate();
  validate_init(c.fno(), c.init());
  parse_input_kind(c.input);
  if (!(c.sigma2 > 0.0) || !std::isfinite(c.sigma2)) throw std::invalid_argument("sigma2 must be positive");
  if (!(c.sigma_b2 >= 0.0) || !std::isfinite(c.sigma_b2)) {
    throw std::invalid_argument("sigma_b2 must be non-negative");
  }
  if (c.replicas < 1) throw std::invalid_argument("replicas must be >= 1");
  if (c.quadrature_order < 2 || c.quadrature_order > 256) {
    throw std::invalid_argument("quadrature order must be in [2, 256]");
  }
  for (double s : c.sigma2_grid)
    if (!(s > 0.0)) throw std::invalid_argument("sigma2 grid values must be positive");
  for (double s : c.sigma_b2_grid)
    if (!(s >= 0.0)) throw std::invalid_argument("sigma_b2 grid values must be non-negative");
  if (c.command == "toy-train" && c.depths.empty()) throw std::invalid_argument("toy-train needs --depths");
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(const Table& table, const std::filesystem::path& path) {
  for (const auto& row : table.rows) {
    if (row.size() != table.columns.size()) {
      throw std::invalid_argument("write_csv: row width does not match header for '" + path.string() + "'");
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_csv: cannot open '" + path.string() + "' for writing");
  for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << table.columns[i];
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << format_double(row[i]);
    out << '\n';
  }
  out.flush();
  if (!out) throw std::runtime_error("write_csv: write failed for '" + path.string() + "'");
}

inline void write_json(const nlohmann::json& doc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << doc.dump(2) << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline nlohmann::json meta_document(const RunConfig& c, const std::string& file) {
  return {{"artifact", kArtifactName},
          {"version", kArtifactVersion},
          {"file", file},
          {"seed", c.seed},
          {"config", to_json(c)}};
}

inline std::filesystem::path meta_path(const std::filesystem::path& data_path) {
  std::filesystem::path p = data_path;
  p.replace_extension(".meta.json");
  return p;
}

inline RunConfig read_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read sidecar '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("sidecar '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!doc.contains("config")) throw ConfigError("sidecar '" + path.string() + "' has no config");
  return run_config_from_json(doc.at("config"));
}

namespace detail {

class OutputSink {
 public:
  explicit OutputSink(const RunConfig& cfg) : cfg_(cfg), dir_(cfg.output_dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec || !std::filesystem::is_directory(dir_)) {
      throw ConfigError("cannot create output directory '" + dir_.string() + "'");
    }
    const auto probe = dir_ / ".fnomf-write-probe";
    std::ofstream test(probe);
    if (!test) throw ConfigError("output directory '" + dir_.string() + "' is not writable");
    test.close();
    std::filesystem::remove(probe, ec);
  }

  void table(const std::string& name, const Table& t) {
    const auto path = dir_ / (name + ".csv");
    write_json(meta_document(cfg_, path.filename().string()), meta_path(path));
    write_csv(t, path);
    written_.push_back(path.string());
  }

  void json(const std::string& name, const nlohmann::json& doc) {
    const auto path = dir_ / (name + ".json");
    write_json(meta_document(cfg_, path.filename().string()), meta_path(path));
    write_json(doc, path);
    written_.push_back(path.string());
  }

  const std::vector<std::string>& written() const { return written_; }

 private:
  const RunConfig& cfg_;
  std::filesystem::path dir_;
  std::vector<std::string> written_;
};

// chi constants are q-independent for ReLU, so a missing stable q* is not an error there.
inline std::optional<MeanFieldPoint> try_fixed_point(const RunConfig& c, const QuadratureRule& rule) {
  try {
    return solve_q_star(c.sigma2, c.sigma_b2, parse_activation(c.activation), rule);
  } catch (const std::runtime_error&) {
    if (parse_activation(c.activation) == Activation::relu) return std::nullopt;
    throw;
  }
}

inline nlohmann::json chi_document(const RunConfig& c, const ChiSet& chis, const std::optional<MeanFieldPoint>& p) {
  nlohmann::json doc{{"activation", c.activation},
                     {"sigma2", c.sigma2},
                     {"sigma_b2", c.sigma_b2},
                     {"N", c.N},
                     {"K", c.K},
                     {"q_star", p ? nlohmann::json(p->q) : nlohmann::json(nullptr)},
                     {"chi_q", chis.chi_q},
                     {"chi_c", chis.chi_c},
                     {"chi_kappa", chis.chi_kappa},
                     {"chi_total", chis.chi_total}};
  return doc;
}

inline nlohmann::json run_theory(const RunConfig& c, OutputSink& sink) {
  const QuadratureRule rule = gauss_hermite_rule(c.quadrature_order);
  const Activation act = parse_activation(c.activation);
  const ModeSpec mode = ModeSpec::make(c.N, c.K);
  nlohmann::json doc;
  if (c.command == "chi") {
    const auto p = try_fixed_point(c, rule);
    doc = chi_document(c, chi_set(p.value_or(MeanFieldPoint{1.0, 1.0}), c.sigma2, act, mode, rule), p);
  } else if (c.command == "fixed-point") {
    const MeanFieldPoint p = solve_q_star(c.sigma2, c.sigma_b2, act, rule);
    const Matrix star = Matrix::Constant(c.N, c.N, p.q);
    const double residual = (fno_c_map(star, c.sigma2, c.sigma_b2, act, mode, rule) - star).cwiseAbs().maxCoeff();
    doc = {{"activation", c.activation}, {"sigma2", c.sigma2}, {"sigma_b2", c.sigma_b2}, {"N", c.N},
           {"K", c.K},                   {"q_star", p.q},      {"c_star", p.c},         {"map_residual_inf", residual}};
  } else if (c.command == "edge") {
    const double s2 = find_edge_sigma2(c.sigma_b2, act, c.bracket_lo, c.bracket_hi, rule);
    doc = {{"activation", c.activation}, {"sigma_b2", c.sigma_b2}, {"sigma2_critical", s2}};
  } else if (c.command == "jacobian") {
    if (c.N > 32) throw std::invalid_argument("jacobian: N must be <= 32");
    const auto p = try_fixed_point(c, rule);
    const ChiSet chis = chi_set(p.value_or(MeanFieldPoint{1.0, 1.0}), c.sigma2, act, mode, rule);
    const Matrix jac = build_jacobian(chis, mode);
    const Vector sv = Eigen::JacobiSVD<Matrix>(jac).singularValues();
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv[i] > 1e-10 * std::max(sv[0], 1e-300)) ++rank;
    doc = chi_document(c, chis, p);
    doc["numerical_rank"] = rank;
    std::vector<double> top(sv.data(), sv.data() + std::min<Eigen::Index>(sv.size(), c.K + 1));
    doc["leading_singular_values"] = top;
    Table t{{"row", "col", "value"}, {}};
    for (Eigen::Index i = 0; i < jac.rows(); ++i)
      for (Eigen::Index j = 0; j < jac.cols(); ++j)
        t.add({static_cast<double>(i), static_cast<double>(j), jac(i, j)});
    sink.table("jacobian", t);
  } else if (c.command == "init-export") {
    const LayerVariances v = init_variances(c.fno(), c.init());
    doc = {{"variant", c.variant},      {"scheme", c.scheme},     {"D", c.D},
           {"sigma2", c.sigma2},        {"sigma_b2", c.sigma_b2}, {"theta_variance", v.theta},
           {"xi_variance", v.xi},       {"dense_variance", v.dense}, {"bias_variance", v.bias}};
  }
  sink.json(c.command, doc);
  return doc;
}

inline void run_experiment(const RunConfig& c, OutputSink& sink) {
  const FnoConfig cfg = c.fno();
  ExperimentResult res;
  if (c.command == "gradnorm") {
    GradNormOptions opt{c.replicas, c.skip_front, c.skip_back, c.seed, c.quadrature_order};
    res = run_gradnorm(cfg, c.sigma2_grid, c.sigma_b2, opt);
  } else if (c.command == "cov-evolve") {
    res = run_cov_evolution(cfg, c.init(), c.layers, {parse_input_kind(c.input), c.input_seed});
  } else if (c.command == "theory-vs-sim") {
    TheoryVsSimOptions opt{c.replicas, parse_input_kind(c.input), c.input_seed, c.quadrature_order};
    res = run_theory_vs_sim(cfg, c.init(), c.depth_checked, opt);
  } else if (c.command == "phase-scan") {
    PhaseScanOptions opt{c.bracket_lo, c.bracket_hi, c.sigma2_grid, c.quadrature_order};
    res = run_phase_scan(cfg.activation, c.sigma_b2_grid, opt);
  } else if (c.command == "toy-train") {
    std::vector<ToyCell> grid;
    for (int depth : c.depths)
      for (double s2 : c.sigma2_grid) grid.push_back({s2, depth});
    ToyTrainOptions opt{c.steps, c.learning_rate, c.batch, c.sigma_b2, c.seed};
    res = run_toy_train(cfg, grid, opt);
  }
  for (const auto& [name, table] : res.tables) sink.table(name, table);
}

}  // namespace detail

// Runs an already-parsed configuration; returns the JSON printed on stdout.
inline nlohmann::json execute(const RunConfig& raw) {
  const RunConfig c = resolve_defaults(raw);
  validate(c);
  detail::OutputSink sink(c);
  nlohmann::json doc;
  const std::string& cmd = c.command;
  if (cmd == "chi" || cmd == "fixed-point" || cmd == "edge" || cmd == "jacobian" || cmd == "init-export") {
    doc = detail::run_theory(c, sink);
  } else {
    detail::run_experiment(c, sink);
  }
  doc["files"] = sink.written();
  return doc;
}

namespace detail {

inline void add_model_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("-N,--grid-size", c.N, "spatial size (power of two)")->capture_default_str();
  sub->add_option("-D,--width", c.D, "channel width")->capture_default_str();
  sub->add_option("-K,--modes", c.K, "retained Fourier modes")->capture_default_str();
  sub->add_option("-L,--depth", c.L, "number of layers")->capture_default_str();
  sub->add_option("--activation", c.activation, "relu or tanh")->capture_default_str();
  sub->add_option("--variant", c.variant, "simplified or original")->capture_default_str();
}

inline void add_init_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("--sigma2", c.sigma2, "weight variance scale")->capture_default_str();
  sub->add_option("--sigma-b2", c.sigma_b2, "bias variance")->capture_default_str();
  sub->add_option("--scheme", c.scheme, "gaussian_generic, he_simplified or original_split")->capture_default_str();
  sub->add_option("--seed", c.seed, "root seed")->capture_default_str();
}

inline void add_common_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("-o,--output-dir", c.output_dir,
                  std::string("output directory (default: $") + kOutputDirEnv + " or " + kDefaultOutputDir + ")");
  sub->add_option("--quadrature-order", c.quadrature_order, "Gauss-Hermite order")->capture_default_str();
}

}  // namespace detail

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mean-field analysis and simulation of Fourier neural operators at initialization", "fnomf"};
  app.set_version_flag("--version", kArtifactVersion);
  RunConfig cfg;
  std::string from_meta;
  app.add_option("--from-meta", from_meta, "re-run the configuration stored in a .meta.json sidecar");
  std::string meta_output_dir;
  app.add_option("--meta-output-dir", meta_output_dir, "output directory override for --from-meta");
  app.require_subcommand(0, 1);

  using namespace detail;
  auto* chi = app.add_subcommand("chi", "chi constants at the fixed point");
  auto* fixed = app.add_subcommand("fixed-point", "solve for q* and check the covariance map residual");
  auto* edge = app.add_subcommand("edge", "critical sigma^2 where chi_c = 1");
  auto* jac = app.add_subcommand("jacobian", "closed-form Jacobian of the covariance map at the fixed point");
  auto* grad = app.add_subcommand("gradnorm", "gradient norm versus depth over a sigma^2 grid");
  auto* cov = app.add_subcommand("cov-evolve", "empirical covariance and correlation per layer");
  auto* tvs = app.add_subcommand("theory-vs-sim", "empirical covariance against the iterated map");
  auto* phase = app.add_subcommand("phase-scan", "edge of chaos over a sigma_b^2 grid");
  auto* toy = app.add_subcommand("toy-train", "teacher-student trainability grid");
  auto* init = app.add_subcommand("init-export", "per-tensor initialization variances");

  for (auto* sub : {chi, fixed, edge, jac, grad, cov, tvs, phase, toy, init}) {
    add_model_options(sub, cfg);
    add_common_options(sub, cfg);
  }
  for (auto* sub : {chi, fixed, edge, jac, grad, cov, tvs, toy, init}) add_init_options(sub, cfg);
  for (auto* sub : {edge, phase}) {
    sub->add_option("--bracket-lo", cfg.bracket_lo, "lower sigma^2 bracket")->capture_default_str();
    sub->add_option("--bracket-hi", cfg.bracket_hi, "upper sigma^2 bracket")->capture_default_str();
  }
  for (auto* sub : {grad, tvs}) sub->add_option("--replicas", cfg.replicas, "weight replicas")->check(CLI::PositiveNumber);
  for (auto* sub : {grad, phase, toy}) sub->add_option("--sigma2-grid", cfg.sigma2_grid, "comma-separated")->delimiter(',');
  phase->add_option("--sigma-b2-grid", cfg.sigma_b2_grid, "comma-separated")->delimiter(',');
  grad->add_option("--skip-front", cfg.skip_front, "layers excluded from the fit at the input end")->capture_default_str();
  grad->add_option("--skip-back", cfg.skip_back, "layers excluded from the fit at the output end")->capture_default_str();
  cov->add_option("--layers", cfg.layers, "layers to record (default: 1 and L)")->delimiter(',');
  tvs->add_option("--depth-checked", cfg.depth_checked, "layers compared (default: min(L, 8))")
      ->check(CLI::PositiveNumber);
  for (auto* sub : {cov, tvs}) {
    sub->add_option("--input", cfg.input, "normal, constant or zero")->capture_default_str();
    sub->add_option("--input-seed", cfg.input_seed, "input seed")->capture_default_str();
  }
  toy->add_option("--depths", cfg.depths, "student depths (default: 4,32)")->delimiter(',');
  toy->add_option("--steps", cfg.steps, "gradient steps")->capture_default_str();
  toy->add_option("--learning-rate", cfg.learning_rate, "gradient descent step size")->capture_default_str();
  toy->add_option("--batch", cfg.batch, "number of training inputs")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (!from_meta.empty()) {
      if (!app.get_subcommands().empty()) throw ConfigError("--from-meta cannot be combined with a command");
      cfg = read_meta(from_meta);
      if (!meta_output_dir.empty()) cfg.output_dir = meta_output_dir;
    } else {
      if (app.get_subcommands().empty()) throw ConfigError("no command given (see --help)");
      cfg.command = app.get_subcommands().front()->get_name();
    }
    out << execute(cfg).dump(2) << '\n';
    return 0;
  } catch (const ConfigError& e) {
    err << "fnomf: " << e.what() << '\n';
    return 2;
  } catch (const std::logic_error& e) {
    err << "fnomf: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "fnomf: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace fnomf
