// Experiment configuration: defaults follow the paper's hyperparameter table
// (protocol-dependent where the table differs), parsed from plain-text
// `key = value` files with the keys named below. CLI flags override file
// values.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deco {

struct ExperimentConfig {
  std::string protocol = "dg";  // dg | esdg
  std::uint64_t seed = 1;

  std::size_t epochs = 100;
  double learning_rate = 5e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;

  // negative values resolve per protocol: warm start 30 (dg) / 35 (esdg),
  // alpha_c 0.5 / 0.55, alpha_d 0.5 / 0.4
  double warm_start_epochs = -1;
  double alpha_c = -1;
  double alpha_d = -1;

  double gamma_c = 0.2;
  double gamma_d = 0.2;
  double tau = 0.1;
  double alpha_max = 1.0;
  std::string alpha_schedule = "linear-ramp";  // | constant
  std::size_t ramp_epochs = 10;
  std::size_t insertion_layer = 1;

  bool adr = true;
  bool prototype = true;
  bool pixel_loss = true;

  std::string convention = "swap-both";  // | eq3-literal
  bool clamp = true;
  std::string weight_norm = "mean-one";  // | raw
  std::string bank_mode = "ema";         // | exact
  double bank_momentum = 0.9;
  double eps = 1e-5;
  double jitter = 0.1;       // style jitter for the pixel-only ablation
  std::string precision = "f32";  // | f64

  std::size_t resolved_warm_start() const {
    if (warm_start_epochs >= 0) return std::size_t(warm_start_epochs);
    return protocol == "esdg" ? 35 : 30;
  }
  double resolved_alpha_c() const {
    if (alpha_c >= 0) return alpha_c;
    return protocol == "esdg" ? 0.55 : 0.5;
  }
  double resolved_alpha_d() const {
    if (alpha_d >= 0) return alpha_d;
    return protocol == "esdg" ? 0.4 : 0.5;
  }

  void validate() const {
    auto one_of = [](const std::string& v,
                     std::initializer_list<const char*> allowed,
                     const char* key) {
      for (const char* a : allowed)
        if (v == a) return;
      throw std::invalid_argument(std::string("config: bad value '") + v +
                                  "' for " + key);
    };
    one_of(protocol, {"dg", "esdg"}, "protocol");
    one_of(alpha_schedule, {"linear-ramp", "constant"}, "alpha-schedule");
    one_of(convention, {"swap-both", "eq3-literal"}, "convention");
    one_of(weight_norm, {"mean-one", "raw"}, "weight-norm");
    one_of(bank_mode, {"ema", "exact"}, "bank-mode");
    one_of(precision, {"f32", "f64"}, "precision");
    if (epochs == 0) throw std::invalid_argument("config: epochs must be > 0");
    if (resolved_warm_start() >= epochs)
      throw std::invalid_argument(
          "config: warm-start-epochs must be below epochs");
    if (!(learning_rate > 0) || !(weight_decay >= 0))
      throw std::invalid_argument("config: rates must be positive");
    if (batch_size < 2)
      throw std::invalid_argument("config: batch-size must be >= 2");
    if (!(tau > 0)) throw std::invalid_argument("config: tau must be > 0");
    if (!(alpha_max >= 0))
      throw std::invalid_argument("config: alpha-max must be >= 0");
    if (!(resolved_alpha_c() > 0) || !(resolved_alpha_d() > 0))
      throw std::invalid_argument("config: alpha_c/alpha_d must be > 0");
    if (!(gamma_c >= 0) || !(gamma_d >= 0))
      throw std::invalid_argument("config: gamma exponents must be >= 0");
    if (!(bank_momentum > 0) || !(bank_momentum < 1))
      throw std::invalid_argument("config: bank-momentum must be in (0,1)");
    if (!(eps > 0)) throw std::invalid_argument("config: eps must be > 0");
    if (prototype && !adr)
      throw std::invalid_argument(
          "config: prototype requires adr (the ablation grid never enables "
          "Prototype without ADR)");
  }
};

namespace configdetail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean '" + v + "' for " + key);
}

}  // namespace configdetail

// Assign one key; throws on unknown keys or malformed values.
inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key,
                               const std::string& value) {
  using configdetail::parse_bool;
  try {
    if (key == "protocol") cfg.protocol = value;
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "epochs") cfg.epochs = std::stoul(value);
    else if (key == "learning-rate") cfg.learning_rate = std::stod(value);
    else if (key == "weight-decay") cfg.weight_decay = std::stod(value);
    else if (key == "batch-size") cfg.batch_size = std::stoul(value);
    else if (key == "warm-start-epochs") cfg.warm_start_epochs = std::stod(value);
    else if (key == "alpha_c") cfg.alpha_c = std::stod(value);
    else if (key == "alpha_d") cfg.alpha_d = std::stod(value);
    else if (key == "gamma_c") cfg.gamma_c = std::stod(value);
    else if (key == "gamma_d") cfg.gamma_d = std::stod(value);
    else if (key == "tau") cfg.tau = std::stod(value);
    else if (key == "alpha-max") cfg.alpha_max = std::stod(value);
    else if (key == "alpha-schedule") cfg.alpha_schedule = value;
    else if (key == "ramp-epochs") cfg.ramp_epochs = std::stoul(value);
    else if (key == "insertion-layer") cfg.insertion_layer = std::stoul(value);
    else if (key == "adr") cfg.adr = parse_bool(value, key);
    else if (key == "prototype") cfg.prototype = parse_bool(value, key);
    else if (key == "pixel-loss") cfg.pixel_loss = parse_bool(value, key);
    else if (key == "convention") cfg.convention = value;
    else if (key == "clamp") cfg.clamp = parse_bool(value, key);
    else if (key == "weight-norm") cfg.weight_norm = value;
    else if (key == "bank-mode") cfg.bank_mode = value;
    else if (key == "bank-momentum") cfg.bank_momentum = std::stod(value);
    else if (key == "eps") cfg.eps = std::stod(value);
    else if (key == "jitter") cfg.jitter = std::stod(value);
    else if (key == "precision") cfg.precision = value;
    else
      throw std::invalid_argument("config: unknown key '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad value '" + value + "' for " +
                                key);
  }
}

inline void load_config_file(ExperimentConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = configdetail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(lineno) +
                               " is not key = value");
    apply_config_entry(cfg, configdetail::trim(line.substr(0, eq)),
                       configdetail::trim(line.substr(eq + 1)));
  }
}

// Stable key order; used for the config echo in reports and the run id.
inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "protocol=" << c.protocol << ";seed=" << c.seed
     << ";epochs=" << c.epochs << ";learning-rate=" << c.learning_rate
     << ";weight-decay=" << c.weight_decay << ";batch-size=" << c.batch_size
     << ";warm-start-epochs=" << c.resolved_warm_start()
     << ";alpha_c=" << c.resolved_alpha_c()
     << ";alpha_d=" << c.resolved_alpha_d() << ";gamma_c=" << c.gamma_c
     << ";gamma_d=" << c.gamma_d << ";tau=" << c.tau
     << ";alpha-max=" << c.alpha_max << ";alpha-schedule=" << c.alpha_schedule
     << ";ramp-epochs=" << c.ramp_epochs
     << ";insertion-layer=" << c.insertion_layer << ";adr=" << c.adr
     << ";prototype=" << c.prototype << ";pixel-loss=" << c.pixel_loss
     << ";convention=" << c.convention << ";clamp=" << c.clamp
     << ";weight-norm=" << c.weight_norm << ";bank-mode=" << c.bank_mode
     << ";bank-momentum=" << c.bank_momentum << ";eps=" << c.eps
     << ";jitter=" << c.jitter << ";precision=" << c.precision;
  return os.str();
}

// Ablation label derived from the flag triple, matching the ablation grid.
inline std::string ablation_label(const ExperimentConfig& c) {
  if (!c.adr && !c.prototype && !c.pixel_loss) return "erm";
  std::string label;
  if (c.adr) label += "adr";
  if (c.prototype) label += label.empty() ? "prototype" : "+prototype";
  if (c.pixel_loss) label += label.empty() ? "pixel" : "+pixel";
  return label == "adr+prototype+pixel" ? "full" : label;
}

}  // namespace deco
