#pragma once

// Run configuration as flat `section.key=value` pairs. Sources are applied in
// order (defaults, config file, command-line overrides); the last write wins.

#include <array>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "camkit/cam.hpp"
#include "camkit/error.hpp"
#include "camkit/model.hpp"
#include "camkit/train.hpp"

namespace camkit {

struct RunConfig {
  TrainConfig train;  // train.augmentation holds the augment.* section
  std::string model_preset = "vgg-nano";
  double model_dropout = 0.5;
  std::size_t model_head_units = 128;
  std::size_t data_channels = 1;
  std::size_t data_height = 128;
  std::size_t data_width = 128;
  std::array<double, 3> split_ratios{0.8, 0.1, 0.1};  // train, val, test
  CamConfig cam;
  std::string cam_method = "both";  // gradcam | gradcam_pp | both

  /// Keys given explicitly through set(), in any source.
  std::set<std::string> explicit_keys;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Applies `key=value` lines; blank lines and lines starting with '#' are skipped.
  void apply_text(const std::string& text, const std::string& source = "config");
  void apply_file(const std::string& path);

  /// Every key with its resolved value, one `key=value` per line, in keys() order.
  std::string to_text() const;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw Error(Errc::invalid_argument, key + ": '" + v + "' is not a number");
  }
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw Error(Errc::invalid_argument, key + ": '" + v + "' is not a non-negative integer");
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw Error(Errc::invalid_argument, key + ": '" + v + "' is not a boolean");
}

inline std::string list_text(const std::vector<double>& xs) {
  std::string s;
  for (double x : xs) s += (s.empty() ? "" : ",") + fmt_double(x);
  return s;
}

inline std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty()) throw Error(Errc::invalid_argument, key + ": empty list");
  return out;
}

struct ConfigField {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  using R = RunConfig;
  using S = const std::string&;
  static const std::vector<ConfigField> fields{
      {"train.epochs", [](const R& c) { return std::to_string(c.train.epochs); },
       [](R& c, S v) { c.train.epochs = to_u64("train.epochs", v); }},
      {"train.learning_rate", [](const R& c) { return fmt_double(c.train.learning_rate); },
       [](R& c, S v) { c.train.learning_rate = to_double("train.learning_rate", v); }},
      {"train.batch_size", [](const R& c) { return std::to_string(c.train.batch_size); },
       [](R& c, S v) { c.train.batch_size = to_u64("train.batch_size", v); }},
      {"train.optimizer", [](const R& c) { return std::string(optimizer_name(c.train.optimizer.kind)); },
       [](R& c, S v) { c.train.optimizer.kind = parse_optimizer(v); }},
      {"train.beta1", [](const R& c) { return fmt_double(c.train.optimizer.beta1); },
       [](R& c, S v) { c.train.optimizer.beta1 = to_double("train.beta1", v); }},
      {"train.beta2", [](const R& c) { return fmt_double(c.train.optimizer.beta2); },
       [](R& c, S v) { c.train.optimizer.beta2 = to_double("train.beta2", v); }},
      {"train.adam_epsilon", [](const R& c) { return fmt_double(c.train.optimizer.adam_epsilon); },
       [](R& c, S v) { c.train.optimizer.adam_epsilon = to_double("train.adam_epsilon", v); }},
      {"train.adagrad_epsilon", [](const R& c) { return fmt_double(c.train.optimizer.adagrad_epsilon); },
       [](R& c, S v) { c.train.optimizer.adagrad_epsilon = to_double("train.adagrad_epsilon", v); }},
      {"train.seed", [](const R& c) { return std::to_string(c.train.seed); },
       [](R& c, S v) { c.train.seed = to_u64("train.seed", v); }},
      {"train.shuffle", [](const R& c) { return std::string(c.train.shuffle ? "true" : "false"); },
       [](R& c, S v) { c.train.shuffle = to_bool("train.shuffle", v); }},
      {"train.augment", [](const R& c) { return std::string(c.train.augment ? "true" : "false"); },
       [](R& c, S v) { c.train.augment = to_bool("train.augment", v); }},
      {"augment.noise_std", [](const R& c) { return fmt_double(c.train.augmentation.noise_std); },
       [](R& c, S v) { c.train.augmentation.noise_std = to_double("augment.noise_std", v); }},
      {"augment.contrast_scale", [](const R& c) { return fmt_double(c.train.augmentation.contrast_scale); },
       [](R& c, S v) { c.train.augmentation.contrast_scale = to_double("augment.contrast_scale", v); }},
      {"augment.brightness_delta", [](const R& c) { return fmt_double(c.train.augmentation.brightness_delta); },
       [](R& c, S v) { c.train.augmentation.brightness_delta = to_double("augment.brightness_delta", v); }},
      {"augment.rotation_set", [](const R& c) { return list_text(c.train.augmentation.rotation_set); },
       [](R& c, S v) { c.train.augmentation.rotation_set = to_list("augment.rotation_set", v); }},
      {"augment.flip_probability", [](const R& c) { return fmt_double(c.train.augmentation.flip_probability); },
       [](R& c, S v) { c.train.augmentation.flip_probability = to_double("augment.flip_probability", v); }},
      {"augment.seed", [](const R& c) { return std::to_string(c.train.augmentation.seed); },
       [](R& c, S v) { c.train.augmentation.seed = to_u64("augment.seed", v); }},
      {"model.preset", [](const R& c) { return c.model_preset; }, [](R& c, S v) { c.model_preset = v; }},
      {"model.dropout", [](const R& c) { return fmt_double(c.model_dropout); },
       [](R& c, S v) { c.model_dropout = to_double("model.dropout", v); }},
      {"model.head_units", [](const R& c) { return std::to_string(c.model_head_units); },
       [](R& c, S v) { c.model_head_units = to_u64("model.head_units", v); }},
      {"data.channels", [](const R& c) { return std::to_string(c.data_channels); },
       [](R& c, S v) { c.data_channels = to_u64("data.channels", v); }},
      {"data.height", [](const R& c) { return std::to_string(c.data_height); },
       [](R& c, S v) { c.data_height = to_u64("data.height", v); }},
      {"data.width", [](const R& c) { return std::to_string(c.data_width); },
       [](R& c, S v) { c.data_width = to_u64("data.width", v); }},
      {"split.ratios",
       [](const R& c) { return list_text({c.split_ratios[0], c.split_ratios[1], c.split_ratios[2]}); },
       [](R& c, S v) {
         const auto xs = to_list("split.ratios", v);
         if (xs.size() != 3) throw Error(Errc::invalid_argument, "split.ratios needs train,val,test");
         c.split_ratios = {xs[0], xs[1], xs[2]};
       }},
      {"cam.method", [](const R& c) { return c.cam_method; },
       [](R& c, S v) {
         if (v != "gradcam" && v != "gradcam_pp" && v != "both") {
           throw Error(Errc::invalid_argument, "cam.method must be gradcam, gradcam_pp or both");
         }
         c.cam_method = v;
       }},
      {"cam.target_layer",
       [](const R& c) { return c.cam.target_layer ? std::to_string(*c.cam.target_layer) : std::string("auto"); },
       [](R& c, S v) {
         if (v == "auto") c.cam.target_layer.reset();
         else c.cam.target_layer = to_u64("cam.target_layer", v);
       }},
      {"cam.score_kind", [](const R& c) { return std::string(score_kind_name(c.cam.score_kind)); },
       [](R& c, S v) { c.cam.score_kind = parse_score_kind(v); }},
      {"cam.fd_step", [](const R& c) { return fmt_double(c.cam.fd_step); },
       [](R& c, S v) { c.cam.fd_step = to_double("cam.fd_step", v); }},
      {"cam.hessian",
       [](const R& c) {
         return std::string(c.cam.hessian == HessianEstimator::finite_difference ? "fd" : "fast");
       },
       [](R& c, S v) {
         if (v == "fd") c.cam.hessian = HessianEstimator::finite_difference;
         else if (v == "fast") c.cam.hessian = HessianEstimator::exp_fast_path;
         else throw Error(Errc::invalid_argument, "cam.hessian must be fd or fast");
       }},
  };
  return fields;
}

inline const ConfigField& find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (key == f.key) return f;
  throw Error(Errc::invalid_argument, "unknown config key '" + key + "'");
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  detail::find_field(key).set(*this, detail::trim(value));
  explicit_keys.insert(key);
}

inline std::string RunConfig::get(const std::string& key) const { return detail::find_field(key).get(*this); }

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& f : detail::config_fields()) out.emplace_back(f.key);
    return out;
  }();
  return names;
}

inline void RunConfig::apply_text(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::parse_error, source + ":" + std::to_string(number) + ": expected key=value");
    }
    try {
      set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const Error& e) {
      throw Error(e.code(), source + ":" + std::to_string(number) + ": " + e.detail());
    }
  }
}

inline void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path);
}

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : detail::config_fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

}  // namespace camkit
