#pragma once

// key = value run configuration files. Blank lines and text after '#' are
// ignored; later assignments win.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cld/errors.hpp"
#include "cld/flow.hpp"

namespace cld {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& source = "<config>") {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = trim(trimmed.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  // Reads `key` into `out` when present; unknown keys are reported by
  // check_consumed().
  template <typename V>
  void read(const std::string& key, V& out) {
    const auto it = values_.find(key);
    if (it == values_.end()) return;
    consumed_[key] = true;
    out = convert<V>(key, it->second);
  }

  void check_consumed() const {
    for (const auto& [key, value] : values_) {
      if (!consumed_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
  }

  std::string dump() const {
    std::string out;
    for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  template <typename V>
  static V convert(const std::string& key, const std::string& text) {
    const auto bad = [&] { return ConfigError("config key '" + key + "' has invalid value '" + text + "'"); };
    if constexpr (std::is_same_v<V, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw bad();
    } else {
      V v{};
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc() || ptr != text.data() + text.size()) throw bad();
      return v;
    }
  }

  std::map<std::string, std::string> values_;
  std::map<std::string, bool> consumed_;
};

// Everything `train` needs.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string precision = "f32";
  bool log_wall_ms = true;

  // Applies every recognized key; throws on unknown keys.
  void apply(KeyValueConfig kv) {
    kv.read("model.d_model", model.d_model);
    kv.read("model.n_heads", model.n_heads);
    kv.read("model.n_blocks", model.n_blocks);
    kv.read("model.mlp_ratio", model.mlp_ratio);
    kv.read("model.patch_size", model.patch_size);
    kv.read("model.frame_size", model.frame_size);
    kv.read("model.max_layers", model.max_layers);
    kv.read("model.max_text_tokens", model.max_text_tokens);
    kv.read("model.time_freq_dim", model.time_freq_dim);
    kv.read("model.mlca_every_block", model.mlca_every_block);
    kv.read("model.prediction", model.prediction);
    kv.read("model.t_floor", model.t_floor);
    kv.read("train.steps", train.steps);
    kv.read("train.batch_size", train.batch_size);
    kv.read("train.lr", train.lr);
    kv.read("train.lr_schedule", train.lr_schedule);
    kv.read("train.warmup_steps", train.warmup_steps);
    kv.read("train.schedule_steps", train.schedule_steps);
    kv.read("train.min_lr_ratio", train.min_lr_ratio);
    kv.read("train.grad_clip", train.grad_clip);
    kv.read("train.text_drop", train.text_drop);
    kv.read("train.seed", train.seed);
    kv.read("train.loss_weight_layers", train.loss_weights.layers);
    kv.read("train.loss_weight_composite", train.loss_weights.composite);
    kv.read("precision", precision);
    kv.read("log_wall_ms", log_wall_ms);
    kv.check_consumed();
    if (precision != "f32" && precision != "f64") {
      throw ConfigError("precision must be f32 or f64");
    }
    model.validate();
    train.validate();
  }

  std::string echo() const {
    std::ostringstream out;
    const auto emit = [&](const std::string& prefix, const nlohmann::json& j) {
      for (const auto& [k, v] : j.items()) out << prefix << k << " = " << v.dump() << "\n";
    };
    emit("model.", model.to_json());
    emit("train.", train.to_json());
    out << "precision = " << precision << "\n";
    out << "log_wall_ms = " << (log_wall_ms ? "true" : "false") << "\n";
    return out.str();
  }
};

}  // namespace cld
