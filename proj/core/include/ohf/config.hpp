#pragma once

// Training configuration: the `key = value` file schema, command-line
// override application, and the canonical rendering echoed into each run
// directory (feeding that file back reproduces the run).

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/lrp.hpp"
#include "ohf/model.hpp"

namespace ohf {

struct TrainConfig {
  // Architecture
  std::string stack = "[None]";
  int layers = 3;
  int width = 64;
  int heads = 4;
  int parts = 4;
  int input_h = 60, input_w = 30;
  std::string mode = "full";
  std::string prior_axis = "key";
  bool tie_vk = false;
  std::string branches = "dfc+dwc";
  int deform_groups = 1;
  // Optimization
  int p = 4;  // identities per batch
  int k = 4;  // images per identity
  double margin = 0.3;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t steps = 500;
  std::uint64_t seed = 1;
  bool flip = true;
  bool erase = true;
  std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only

  // The architecture half, with the identity count supplied by the dataset.
  ModelConfig model_config(int num_ids) const {
    ModelConfig mc;
    mc.stack = parse_stack(stack, layers);
    mc.stack.width = width;
    mc.stack.heads = heads;
    mc.stack.parts = parts;
    if (mode != "full" && mode != "shared") fail_config("mode must be full or shared, got '" + mode + "'");
    mc.stack.mode = mode == "full" ? ShareMode::Full : ShareMode::Shared;
    mc.input_h = input_h;
    mc.input_w = input_w;
    mc.num_ids = num_ids;
    if (prior_axis != "key" && prior_axis != "query")
      fail_config("prior_axis must be key or query, got '" + prior_axis + "'");
    mc.prior_axis = prior_axis == "key" ? PriorAxis::Key : PriorAxis::Query;
    mc.tie_vk = tie_vk;
    mc.lrp_branches = branches;
    mc.deform_groups = deform_groups;
    return mc;
  }

  void validate() const {
    if (p < 2) fail_config("p (identities per batch) must be at least 2 so every anchor has a negative");
    if (k < 2) fail_config("k (images per identity) must be at least 2 so every anchor has a positive");
    if (margin < 0.0) fail_config("margin must be nonnegative");
    if (steps < 1) fail_config("steps must be positive");
    if (checkpoint_every < 0) fail_config("checkpoint_every must be nonnegative");
    parse_lrp_branches(branches);
    model_config(/*num_ids=*/2);  // full structural validation
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  fail_config("config key '" + key + "' expects a boolean (0/1/true/false), got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) fail_config("config key '" + key + "' has a malformed value '" + v + "'");
  return out;
}

}  // namespace detail

// Applies one key=value setting; shared by the file parser and `--key value`
// command-line overrides. Unknown keys are errors.
inline void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "stack") cfg.stack = value;
  else if (key == "layers") cfg.layers = detail::parse_number<int>(key, value);
  else if (key == "width") cfg.width = detail::parse_number<int>(key, value);
  else if (key == "heads") cfg.heads = detail::parse_number<int>(key, value);
  else if (key == "parts") cfg.parts = detail::parse_number<int>(key, value);
  else if (key == "input_h") cfg.input_h = detail::parse_number<int>(key, value);
  else if (key == "input_w") cfg.input_w = detail::parse_number<int>(key, value);
  else if (key == "mode") cfg.mode = value;
  else if (key == "prior_axis") cfg.prior_axis = value;
  else if (key == "tie_vk") cfg.tie_vk = detail::parse_bool(key, value);
  else if (key == "branches") cfg.branches = value;
  else if (key == "deform_groups") cfg.deform_groups = detail::parse_number<int>(key, value);
  else if (key == "p") cfg.p = detail::parse_number<int>(key, value);
  else if (key == "k") cfg.k = detail::parse_number<int>(key, value);
  else if (key == "margin") cfg.margin = detail::parse_number<double>(key, value);
  else if (key == "lr") cfg.lr = detail::parse_number<double>(key, value);
  else if (key == "momentum") cfg.momentum = detail::parse_number<double>(key, value);
  else if (key == "weight_decay") cfg.weight_decay = detail::parse_number<double>(key, value);
  else if (key == "steps") cfg.steps = detail::parse_number<std::int64_t>(key, value);
  else if (key == "seed") cfg.seed = detail::parse_number<std::uint64_t>(key, value);
  else if (key == "flip") cfg.flip = detail::parse_bool(key, value);
  else if (key == "erase") cfg.erase = detail::parse_bool(key, value);
  else if (key == "checkpoint_every") cfg.checkpoint_every = detail::parse_number<std::int64_t>(key, value);
  else fail_config("unknown config key '" + key + "'");
}

// Parses the line-oriented `key = value` format; '#' starts a comment, blank
// lines are skipped, duplicate keys are rejected.
inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  std::map<std::string, int> seen;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) {
      if (pos > text.size()) break;
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail_parse("config line " + std::to_string(line_no) + " is not 'key = value': '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) fail_parse("config line " + std::to_string(line_no) + " has an empty key");
    auto [it, inserted] = seen.emplace(key, line_no);
    if (!inserted)
      fail_config("config key '" + key + "' on line " + std::to_string(line_no) + " repeats line " +
                  std::to_string(it->second));
    set_config_key(cfg, key, value);
    if (pos > text.size()) break;
  }
  return cfg;
}

// Canonical rendering: every key, current values. parse(render(c)) == c.
inline std::string render_train_config(const TrainConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "stack = " << cfg.stack << "\n"
      << "layers = " << cfg.layers << "\n"
      << "width = " << cfg.width << "\n"
      << "heads = " << cfg.heads << "\n"
      << "parts = " << cfg.parts << "\n"
      << "input_h = " << cfg.input_h << "\n"
      << "input_w = " << cfg.input_w << "\n"
      << "mode = " << cfg.mode << "\n"
      << "prior_axis = " << cfg.prior_axis << "\n"
      << "tie_vk = " << (cfg.tie_vk ? 1 : 0) << "\n"
      << "branches = " << cfg.branches << "\n"
      << "deform_groups = " << cfg.deform_groups << "\n"
      << "p = " << cfg.p << "\n"
      << "k = " << cfg.k << "\n"
      << "margin = " << cfg.margin << "\n"
      << "lr = " << cfg.lr << "\n"
      << "momentum = " << cfg.momentum << "\n"
      << "weight_decay = " << cfg.weight_decay << "\n"
      << "steps = " << cfg.steps << "\n"
      << "seed = " << cfg.seed << "\n"
      << "flip = " << (cfg.flip ? 1 : 0) << "\n"
      << "erase = " << (cfg.erase ? 1 : 0) << "\n"
      << "checkpoint_every = " << cfg.checkpoint_every << "\n";
  return out.str();
}

}  // namespace ohf
