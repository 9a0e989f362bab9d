#pragma once

#include <array>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string>

#include "logcan/tensor.hpp"

namespace logcan {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Whole-model configuration. grids[i] is the patch grid of stage i+1 (stage 1
// at stride 4 ... stage 4 at stride 32). The shipped default working width d
// comes from the profiler's width calibration.
struct ModelConfig {
  int classes = 6;
  double width_factor = 0.125;
  int d = 39;
  std::array<Grid, 4> grids{Grid{4, 4}, Grid{4, 4}, Grid{4, 4}, Grid{4, 4}};
  double aux_weight = 0.4;
  unsigned long seed = 42;
  index_t input_h = 64;  // synthetic-data extents, runtime inputs may differ
  index_t input_w = 64;
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.classes < 1) throw ConfigError("classes must be >= 1");
  if (cfg.d < cfg.classes)
    throw ConfigError("working width d = " + std::to_string(cfg.d) +
                      " must be >= classes = " + std::to_string(cfg.classes));
  if (!(cfg.width_factor > 0)) throw ConfigError("width_factor must be positive");
  if (cfg.aux_weight < 0) throw ConfigError("aux_weight must be >= 0");
  for (const Grid& g : cfg.grids)
    if (g.nh < 1 || g.nw < 1) throw ConfigError("patch grids must be positive");
}

// "NhxNw", e.g. "4x4".
inline Grid parse_grid(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ConfigError("bad grid '" + s + "', expected NhxNw");
  try {
    Grid g{std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
    if (g.nh < 1 || g.nw < 1) throw ConfigError("grid extents must be positive: " + s);
    return g;
  } catch (const std::invalid_argument&) {
    throw ConfigError("bad grid '" + s + "', expected NhxNw");
  }
}

inline std::string format_grid(Grid g) {
  return std::to_string(g.nh) + "x" + std::to_string(g.nw);
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

// Flat `key = value` file; '#' starts a comment, blank lines ignored, unknown
// keys rejected.
inline ModelConfig parse_config_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      if (key == "classes")
        cfg.classes = std::stoi(value);
      else if (key == "width_factor")
        cfg.width_factor = std::stod(value);
      else if (key == "d")
        cfg.d = std::stoi(value);
      else if (key == "grid_stage1")
        cfg.grids[0] = parse_grid(value);
      else if (key == "grid_stage2")
        cfg.grids[1] = parse_grid(value);
      else if (key == "grid_stage3")
        cfg.grids[2] = parse_grid(value);
      else if (key == "grid_stage4")
        cfg.grids[3] = parse_grid(value);
      else if (key == "aux_weight")
        cfg.aux_weight = std::stod(value);
      else if (key == "seed")
        cfg.seed = std::stoul(value);
      else
        throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("line " + std::to_string(lineno) + ": bad value '" + value + "' for " +
                        key);
    }
  }
  validate(cfg);
  return cfg;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace logcan
