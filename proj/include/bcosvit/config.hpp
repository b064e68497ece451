// Model configuration, presets, and the line-based `key = value` format used
// by config files, checkpoints and resolved-config snapshots.
#pragma once

#include "bcosvit/tensor.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <set>

namespace bcosvit {

/// Ordered `key = value` store. Lines starting with '#' are comments.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  /// Parses a single `key=value` override.
  static std::pair<std::string, std::string> parse_override(const std::string& s) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + s + "' is not key=value");
    return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw ConfigError("empty config key");
    values_[key] = value;
  }
  void merge(const KeyValues& other) {
    for (auto& [k, v] : other.values_) values_[k] = v;
  }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string str(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double num(const std::string& key, double fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + it->second + "' is not a number");
    }
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    double v = num(key, double(fallback));
    if (v < 0 || v != std::floor(v)) throw ConfigError("config key '" + key + "' must be a non-negative integer");
    return std::size_t(v);
  }
  bool flag(const std::string& key, bool fallback) const {
    std::string v = str(key, fallback ? "true" : "false");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
  }

  /// Keys never read through an accessor; non-empty means a typo or an
  /// unsupported option.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }
  void require_all_used() const {
    auto u = unused();
    if (!u.empty()) {
      std::string msg = "unknown config key(s):";
      for (auto& k : u) msg += " " + k;
      throw ConfigError(msg);
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    for (auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

enum class Positional { none, embedding, additive, multiplicative };

inline std::string to_string(Positional p) {
  switch (p) {
    case Positional::none: return "none";
    case Positional::embedding: return "embedding";
    case Positional::additive: return "additive";
    case Positional::multiplicative: return "multiplicative";
  }
  return "none";
}

inline Positional parse_positional(const std::string& s) {
  if (s == "none") return Positional::none;
  if (s == "embedding") return Positional::embedding;
  if (s == "additive") return Positional::additive;
  if (s == "multiplicative") return Positional::multiplicative;
  throw ConfigError("unknown positional variant '" + s + "'");
}

struct ConvSpec {
  std::size_t channels = 0, kernel = 1, stride = 1;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct BcosViTConfig {
  std::string preset = "micro";
  std::size_t image_size = 32;
  std::vector<ConvSpec> cnn{{16, 2, 2}, {32, 2, 2}, {64, 2, 2}};
  std::size_t token_kernel = 1, token_stride = 1;
  std::size_t dim = 64, heads = 4, blocks = 4, classes = 4, mlp_ratio = 2;
  bool maxout_enabled = true;  // MaxOut in the transformer layers
  bool cnn_maxout = true;      // MaxOut in the tokeniser CNN and tokenising conv
  double b_exponent = 2;       // CNN, MLP and classifier
  double b_attention = 2;      // value and projection layers
  double gamma_f = 15;
  double multiplicative_gamma_boost = 10;
  Positional positional = Positional::none;
  bool standard_attention = false;
  double output_scale = 1e3;
  double feature_scale = 1e3;
  double logit_bias = std::log(0.01 / 0.99);
  double ln_eps = 1e-5;
  /// Fault injection for self-checks: the attention skip connection is
  /// dropped from the forward pass while linear maps still include it.
  bool fault_drop_skip = false;

  static constexpr std::size_t in_channels = 6;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden() const { return dim * mlp_ratio; }
  std::size_t transformer_maxout() const { return maxout_enabled ? 2 : 1; }
  std::size_t conv_maxout() const { return cnn_maxout ? 2 : 1; }
  bool exact() const { return !standard_attention; }

  /// Spatial extent of the CNN output feature map.
  std::size_t feature_size() const {
    std::size_t s = image_size;
    for (auto& c : cnn) s = (s - c.kernel) / c.stride + 1;
    return s;
  }
  std::size_t feature_channels() const { return cnn.empty() ? in_channels : cnn.back().channels; }
  std::size_t token_grid() const { return (feature_size() - token_kernel) / token_stride + 1; }
  std::size_t tokens() const { return token_grid() * token_grid(); }
  /// Input pixels covered by one token along each axis (stride footprint).
  std::size_t token_footprint() const {
    std::size_t f = token_stride;
    for (auto& c : cnn) f *= c.stride;
    return f;
  }
  std::size_t input_size() const { return in_channels * image_size * image_size; }

  /// gamma = f / sqrt(fan_in); `value_layer` marks the attention value
  /// layer, which takes the extra factor in multiplicative-prior models.
  double gamma(std::size_t fan_in, bool value_layer = false) const {
    double f = gamma_f;
    if (value_layer && positional == Positional::multiplicative) f *= multiplicative_gamma_boost;
    return f / std::sqrt(double(fan_in));
  }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("dim must be a positive multiple of heads");
    if (classes == 0 || blocks == 0 || mlp_ratio == 0) throw ConfigError("classes, blocks and mlp_ratio must be positive");
    if (b_exponent < 1 || b_attention < 1) throw ConfigError("B-cos exponents must be >= 1");
    if (!(gamma_f > 0) || !(output_scale > 0) || !(feature_scale > 0) || !(ln_eps > 0))
      throw ConfigError("scales must be positive");
    std::size_t s = image_size;
    for (auto& c : cnn) {
      if (c.channels == 0 || c.kernel == 0 || c.stride == 0 || c.kernel > s)
        throw ConfigError("invalid CNN layer geometry");
      s = (s - c.kernel) / c.stride + 1;
    }
    if (token_kernel == 0 || token_stride == 0 || token_kernel > s) throw ConfigError("invalid tokeniser geometry");
    if (token_footprint() * token_grid() != image_size)
      throw ConfigError("token grid does not tile the image exactly");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("model.preset", preset);
    kv.set("model.image_size", std::to_string(image_size));
    std::string c;
    for (std::size_t i = 0; i < cnn.size(); ++i)
      c += (i ? "," : "") + std::to_string(cnn[i].channels) + ":" + std::to_string(cnn[i].kernel) + ":" +
           std::to_string(cnn[i].stride);
    kv.set("model.cnn", c.empty() ? "none" : c);
    kv.set("model.token_kernel", std::to_string(token_kernel));
    kv.set("model.token_stride", std::to_string(token_stride));
    kv.set("model.dim", std::to_string(dim));
    kv.set("model.heads", std::to_string(heads));
    kv.set("model.blocks", std::to_string(blocks));
    kv.set("model.classes", std::to_string(classes));
    kv.set("model.mlp_ratio", std::to_string(mlp_ratio));
    kv.set("model.maxout", maxout_enabled ? "true" : "false");
    kv.set("model.cnn_maxout", cnn_maxout ? "true" : "false");
    kv.set("model.b_exponent", fmt_num(b_exponent));
    kv.set("model.b_attention", fmt_num(b_attention));
    kv.set("model.gamma_f", fmt_num(gamma_f));
    kv.set("model.multiplicative_gamma_boost", fmt_num(multiplicative_gamma_boost));
    kv.set("model.positional", to_string(positional));
    kv.set("model.standard_attention", standard_attention ? "true" : "false");
    kv.set("model.output_scale", fmt_num(output_scale));
    kv.set("model.feature_scale", fmt_num(feature_scale));
    kv.set("model.logit_bias", fmt_num(logit_bias));
    kv.set("model.ln_eps", fmt_num(ln_eps));
    if (fault_drop_skip) kv.set("model.fault_drop_skip", "true");
    return kv;
  }

  /// Reads model.* keys over the preset named by model.preset.
  static BcosViTConfig from_kv(const KeyValues& kv);
};

inline std::vector<ConvSpec> parse_cnn(const std::string& s) {
  std::vector<ConvSpec> out;
  if (s == "none" || s.empty()) return out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    ConvSpec c;
    char sep1 = 0, sep2 = 0;
    std::istringstream it(KeyValues::trim(item));
    if (!(it >> c.channels >> sep1 >> c.kernel >> sep2 >> c.stride) || sep1 != ':' || sep2 != ':')
      throw ConfigError("bad CNN layer '" + item + "', expected channels:kernel:stride");
    out.push_back(c);
  }
  return out;
}

/// Named presets. micro is the desk-scale model; ti/s/b follow the
/// full-size channel counts and gamma factors and are not trained here.
inline BcosViTConfig preset_config(const std::string& name) {
  BcosViTConfig c;
  c.preset = name;
  if (name == "micro") return c;
  c.image_size = 224;
  c.cnn = {{64, 2, 2}, {128, 2, 2}, {256, 2, 2}, {512, 2, 2}};
  c.blocks = 12;
  c.classes = 1000;
  c.mlp_ratio = 4;
  if (name == "ti") {
    c.dim = 192, c.heads = 3, c.gamma_f = 15;
  } else if (name == "s") {
    c.dim = 384, c.heads = 6, c.gamma_f = 20;
  } else if (name == "b") {
    c.dim = 768, c.heads = 12, c.gamma_f = 25;
  } else {
    throw ConfigError("unknown model preset '" + name + "'");
  }
  return c;
}

inline BcosViTConfig BcosViTConfig::from_kv(const KeyValues& kv) {
  BcosViTConfig c = preset_config(kv.str("model.preset", "micro"));
  c.image_size = kv.count("model.image_size", c.image_size);
  if (kv.has("model.cnn")) c.cnn = parse_cnn(kv.str("model.cnn", ""));
  c.token_kernel = kv.count("model.token_kernel", c.token_kernel);
  c.token_stride = kv.count("model.token_stride", c.token_stride);
  c.dim = kv.count("model.dim", c.dim);
  c.heads = kv.count("model.heads", c.heads);
  c.blocks = kv.count("model.blocks", c.blocks);
  c.classes = kv.count("model.classes", c.classes);
  c.mlp_ratio = kv.count("model.mlp_ratio", c.mlp_ratio);
  c.maxout_enabled = kv.flag("model.maxout", c.maxout_enabled);
  c.cnn_maxout = kv.flag("model.cnn_maxout", c.cnn_maxout);
  c.b_exponent = kv.num("model.b_exponent", c.b_exponent);
  c.b_attention = kv.num("model.b_attention", c.b_attention);
  c.gamma_f = kv.num("model.gamma_f", c.gamma_f);
  c.multiplicative_gamma_boost = kv.num("model.multiplicative_gamma_boost", c.multiplicative_gamma_boost);
  c.positional = parse_positional(kv.str("model.positional", to_string(c.positional)));
  c.standard_attention = kv.flag("model.standard_attention", c.standard_attention);
  c.output_scale = kv.num("model.output_scale", c.output_scale);
  c.feature_scale = kv.num("model.feature_scale", c.feature_scale);
  c.logit_bias = kv.num("model.logit_bias", c.logit_bias);
  c.ln_eps = kv.num("model.ln_eps", c.ln_eps);
  c.fault_drop_skip = kv.flag("model.fault_drop_skip", c.fault_drop_skip);
  c.validate();
  return c;
}

}  // namespace bcosvit
