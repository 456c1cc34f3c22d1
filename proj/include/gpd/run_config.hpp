#pragma once

// Flat "key = value" run configuration. Lines starting with '#' are comments.
// Every key has a default, unknown keys are rejected, and print_config emits
// a document that parses back to the same settings.

#include <cstdlib>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gpd/checkpoint.hpp"
#include "gpd/errors.hpp"
#include "gpd/trainer.hpp"

namespace gpd {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& key) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::istringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(parse_uint(trim(part), key));
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

struct ConfigField {
  const char* key;
  const char* help;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

inline std::uint64_t config_uint(const std::string& v, const std::string& key) {
  try {
    return parse_uint(v, key);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

inline double config_double(const std::string& v, const std::string& key) {
  try {
    return parse_double(v, key);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

inline const std::vector<ConfigField>& config_fields() {
  using C = TrainConfig;
  using S = const std::string&;
  auto size_field = [](const char* key, const char* help, auto member) {
    return ConfigField{key, help, [member](C c) { return std::to_string(member(c)); },
                       [member, key](C& c, S v) { member(c) = config_uint(v, key); }};
  };
  auto real_field = [](const char* key, const char* help, auto member) {
    return ConfigField{key, help, [member](C c) { return format_double(member(c)); },
                       [member, key](C& c, S v) { member(c) = config_double(v, key); }};
  };
  auto bool_field = [](const char* key, const char* help, auto member) {
    return ConfigField{key, help, [member](C c) { return std::string(member(c) ? "true" : "false"); },
                       [member, key](C& c, S v) { member(c) = parse_bool(v, key); }};
  };
  auto text_field = [](const char* key, const char* help, auto member) {
    return ConfigField{key, help, [member](C c) { return member(c); },
                       [member](C& c, S v) { member(c) = v; }};
  };
  static const std::vector<ConfigField> fields = {
      {"protocol", "distill | scratch | finetune | baseline", [](const C& c) { return std::string(to_string(c.protocol)); },
       [](C& c, S v) { c.protocol = parse_protocol(v); }},
      size_field("epochs", "training epochs", [](C& c) -> std::size_t& { return c.epochs; }),
      size_field("batch_size", "samples per step", [](C& c) -> std::size_t& { return c.batch_size; }),
      real_field("lr", "initial learning rate (finetune applies x0.1)", [](C& c) -> double& { return c.lr; }),
      {"lr_steps", "comma-separated epochs after which lr is multiplied by lr_decay",
       [](const C& c) { return join(c.lr_steps); }, [](C& c, S v) {
         try {
           c.lr_steps = parse_size_list(v, "lr_steps");
         } catch (const FormatError& e) {
           throw ConfigError(e.what());
         }
       }},
      real_field("lr_decay", "step-decay factor", [](C& c) -> double& { return c.lr_decay; }),
      real_field("momentum", "SGD momentum", [](C& c) -> double& { return c.momentum; }),
      real_field("weight_decay", "L2 weight decay", [](C& c) -> double& { return c.weight_decay; }),
      {"seed", "initialization, expansion, and shuffling seed (GPD_SEED and --seed override)",
       [](const C& c) { return std::to_string(c.seed); }, [](C& c, S v) { c.seed = config_uint(v, "seed"); }},
      text_field("arch", "convnet-small | convnet-small-nobn | convnet-wide", [](C& c) -> std::string& { return c.arch.name; }),
      {"widths", "three stage widths; empty uses the architecture default", [](const C& c) { return join(c.arch.widths); },
       [](C& c, S v) {
         try {
           c.arch.widths = parse_size_list(v, "widths");
         } catch (const FormatError& e) {
           throw ConfigError(e.what());
         }
       }},
      size_field("ratio", "channel expansion ratio r", [](C& c) -> std::size_t& { return c.plan.ratio; }),
      size_field("branches", "branch count M", [](C& c) -> std::size_t& { return c.plan.branches; }),
      real_field("epsilon", "replica noise, relative to the weight std", [](C& c) -> double& { return c.plan.epsilon; }),
      {"ir_mode", "paper (BN-free models only) | bn_safe", [](const C& c) { return std::string(to_string(c.plan.ir_mode)); },
       [](C& c, S v) { c.plan.ir_mode = parse_ir_mode(v); }},
      real_field("lambda", "weight of the static-teacher KD term on the student", [](C& c) -> double& { return c.loss.lambda; }),
      real_field("temperature", "KD softening temperature", [](C& c) -> double& { return c.loss.temperature; }),
      bool_field("ce_teacher", "train the dynamic teacher on labels", [](C& c) -> bool& { return c.loss.ce_teacher; }),
      bool_field("kd_dynamic", "distill the dynamic teacher into the student", [](C& c) -> bool& { return c.loss.kd_dynamic; }),
      text_field("data.format", "synthetic | idx | csv", [](C& c) -> std::string& { return c.data.format; }),
      text_field("data.train_images", "idx/csv training file", [](C& c) -> std::string& { return c.data.train_images; }),
      text_field("data.train_labels", "idx training labels", [](C& c) -> std::string& { return c.data.train_labels; }),
      text_field("data.eval_images", "idx/csv evaluation file", [](C& c) -> std::string& { return c.data.eval_images; }),
      text_field("data.eval_labels", "idx evaluation labels", [](C& c) -> std::string& { return c.data.eval_labels; }),
      size_field("data.classes", "number of classes K", [](C& c) -> std::size_t& { return c.data.classes; }),
      size_field("data.train_per_class", "synthetic training samples per class",
                 [](C& c) -> std::size_t& { return c.data.train_per_class; }),
      size_field("data.eval_per_class", "synthetic evaluation samples per class",
                 [](C& c) -> std::size_t& { return c.data.eval_per_class; }),
      {"data.input_shape", "C,H,W", [](const C& c) { return join(c.data.input_shape); },
       [](C& c, S v) {
         try {
           c.data.input_shape = parse_size_list(v, "data.input_shape");
         } catch (const FormatError& e) {
           throw ConfigError(e.what());
         }
         if (c.data.input_shape.size() != 3) throw ConfigError("data.input_shape must have three extents C,H,W");
       }},
      size_field("data.modes", "synthetic prototypes per class", [](C& c) -> std::size_t& { return c.data.modes; }),
      real_field("data.noise", "synthetic per-pixel noise std", [](C& c) -> double& { return c.data.noise; }),
      {"data.seed", "synthetic generator seed", [](const C& c) { return std::to_string(c.data.seed); },
       [](C& c, S v) { c.data.seed = config_uint(v, "data.seed"); }},
      real_field("data.mean", "normalization: x <- (x - mean) / std", [](C& c) -> double& { return c.data.mean; }),
      real_field("data.std", "normalization std", [](C& c) -> double& { return c.data.stddev; }),
      text_field("static_ckpt", "frozen teacher checkpoint (distill)", [](C& c) -> std::string& { return c.static_ckpt; }),
      text_field("init_ckpt", "pre-trained student checkpoint (finetune)", [](C& c) -> std::string& { return c.init_ckpt; }),
      text_field("out_dir", "directory for records.csv and checkpoints", [](C& c) -> std::string& { return c.out_dir; }),
      size_field("checkpoint_every", "epochs between teacher checkpoints; 0 writes only the final one",
                 [](C& c) -> std::size_t& { return c.checkpoint_every; }),
      bool_field("log_timing", "fill the ms column (makes records run-dependent)", [](C& c) -> bool& { return c.log_timing; }),
  };
  return fields;
}

}  // namespace detail

// The settings the run exercises by default, with the acceptance-scale
// synthetic dataset.
inline TrainConfig default_train_config() {
  TrainConfig c;
  c.plan.epsilon = 0.0;
  c.data.modes = 8;
  c.data.noise = 1.0;
  c.out_dir = "run";
  return c;
}

inline void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline TrainConfig parse_config(std::istream& in, const std::string& name = "config",
                                TrainConfig base = default_train_config()) {
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    const std::string where = name + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = detail::trim(t.substr(0, eq));
    const auto value = detail::trim(t.substr(eq + 1));
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(where + ": key '" + key + "' already set on line " + std::to_string(it->second));
    }
    seen[key] = lineno;
    try {
      apply_setting(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return base;
}

inline TrainConfig parse_config_text(const std::string& text, const std::string& name = "config") {
  std::istringstream in(text);
  return parse_config(in, name);
}

inline std::string print_config(const TrainConfig& cfg, bool with_help = true) {
  std::ostringstream out;
  for (const auto& f : detail::config_fields()) {
    if (with_help) out << "# " << f.help << "\n";
    out << f.key << " = " << f.get(cfg) << "\n";
  }
  return out.str();
}

// GPD_SEED, when set, overrides the seed from the config file.
inline void apply_seed_env(TrainConfig& cfg) {
  if (const char* s = std::getenv("GPD_SEED"); s && *s) cfg.seed = detail::config_uint(s, "GPD_SEED");
}

}  // namespace gpd
