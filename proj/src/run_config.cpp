#include "elf/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace elf {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

/// Parsed key/value lines; '#' starts a comment, blank lines are skipped.
std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: line " + std::to_string(lineno) + ": empty key");
    if (out.contains(key)) throw ConfigError("config: duplicate key '" + key + "'");
    out[key] = value;
  }
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config: key '" + key + "': bad integer '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "': bad number '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "': bad boolean '" + v + "' (use true/false)");
}

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Declarative key table shared by parse and serialize.
struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<std::pair<std::string, Field>>& run_fields() {
  auto int_field = [](auto member, long long lo, long long hi) {
    return Field{
        [member, lo, hi](RunConfig& c, const std::string& k, const std::string& v) {
          const long long x = parse_int(k, v);
          if (x < lo || x > hi)
            throw ConfigError("config: key '" + k + "': value out of range");
          c.*member = static_cast<std::remove_reference_t<decltype(c.*member)>>(x);
        },
        [member](const RunConfig& c) { return std::to_string(c.*member); }};
  };
  auto model_int = [](auto member, long long lo, long long hi) {
    return Field{
        [member, lo, hi](RunConfig& c, const std::string& k, const std::string& v) {
          const long long x = parse_int(k, v);
          if (x < lo || x > hi)
            throw ConfigError("config: key '" + k + "': value out of range");
          c.model.*member = static_cast<Index>(x);
        },
        [member](const RunConfig& c) { return std::to_string(c.model.*member); }};
  };
  auto model_bool = [](auto member) {
    return Field{[member](RunConfig& c, const std::string& k, const std::string& v) {
                   c.model.*member = parse_bool(k, v);
                 },
                 [member](const RunConfig& c) { return c.model.*member ? "true" : "false"; }};
  };
  auto model_double = [](auto member) {
    return Field{[member](RunConfig& c, const std::string& k, const std::string& v) {
                   c.model.*member = parse_double(k, v);
                 },
                 [member](const RunConfig& c) { return fmt_double(c.model.*member); }};
  };
  auto dbl_field = [](auto member) {
    return Field{[member](RunConfig& c, const std::string& k, const std::string& v) {
                   c.*member = parse_double(k, v);
                 },
                 [member](const RunConfig& c) { return fmt_double(c.*member); }};
  };
  auto str_field = [](auto member) {
    return Field{[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
                 [member](const RunConfig& c) { return c.*member; }};
  };

  static const std::vector<std::pair<std::string, Field>> fields = {
      {"base_channels", model_int(&ElfConfig::base_channels, 1, 4096)},
      {"rtb_depth", model_int(&ElfConfig::rtb_depth, 1, 256)},
      {"rcab_per_stage", model_int(&ElfConfig::rcab_per_stage, 1, 64)},
      {"heads", model_int(&ElfConfig::heads, 1, 256)},
      {"ffn_expansion", model_int(&ElfConfig::ffn_expansion, 1, 64)},
      {"ca_reduction", model_int(&ElfConfig::ca_reduction, 1, 256)},
      {"subsample", model_int(&ElfConfig::subsample, 1, 4)},
      {"use_sa", model_bool(&ElfConfig::use_sa)},
      {"use_dsc", model_bool(&ElfConfig::use_dsc)},
      {"use_hfb", model_bool(&ElfConfig::use_hfb)},
      {"use_mam", model_bool(&ElfConfig::use_mam)},
      {"use_ssim_loss", model_bool(&ElfConfig::use_ssim_loss)},
      {"use_sr", model_bool(&ElfConfig::use_sr)},
      {"loss_alpha", model_double(&ElfConfig::loss_alpha)},
      {"loss_lambda", model_double(&ElfConfig::loss_lambda)},
      {"loss_eps", model_double(&ElfConfig::loss_eps)},
      {"epochs", int_field(&RunConfig::epochs, 1, 1000000)},
      {"batch_size", int_field(&RunConfig::batch_size, 1, 4096)},
      {"patch_size", int_field(&RunConfig::patch_size, 1, 65536)},
      {"seed",
       Field{[](RunConfig& c, const std::string& k, const std::string& v) {
               c.seed = static_cast<std::uint64_t>(parse_int(k, v));
             },
             [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"lr", dbl_field(&RunConfig::lr)},
      {"lr_decay", dbl_field(&RunConfig::lr_decay)},
      {"lr_decay_interval", int_field(&RunConfig::lr_decay_interval, 1, 1000000)},
      {"checkpoint_interval", int_field(&RunConfig::checkpoint_interval, 1, 1000000)},
      {"max_steps", int_field(&RunConfig::max_steps, 0, 1000000000)},
      {"data_dir", str_field(&RunConfig::data_dir)},
      {"eval_dir", str_field(&RunConfig::eval_dir)},
      {"checkpoint_dir", str_field(&RunConfig::checkpoint_dir)},
      {"log_file", str_field(&RunConfig::log_file)},
  };
  return fields;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  const auto kv = parse_kv(text);
  const auto& fields = run_fields();
  for (const auto& [key, value] : kv) {
    const auto it = std::find_if(fields.begin(), fields.end(),
                                 [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [key, field] : run_fields()) {
    out += key;
    out += '=';
    out += field.get(*this);
    out += '\n';
  }
  return out;
}

void RunConfig::validate() const {
  try {
    model.validate();
    train_config().validate(model);
  } catch (const TensorError& e) {
    throw ConfigError(e.what());
  }
  if (lr <= 0 || lr_decay <= 0) throw ConfigError("config: lr and lr_decay must be positive");
  if (model.loss_eps <= 0) throw ConfigError("config: loss_eps must be positive");
}

DegradationSpec parse_degradation_spec(const std::string& text) {
  DegradationSpec spec;
  const auto kv = parse_kv(text);
  for (const auto& [key, value] : kv) {
    if (key == "kind") {
      if (value == "rain") spec.kind = DegradationKind::rain;
      else if (value == "lowlight") spec.kind = DegradationKind::lowlight;
      else throw ConfigError("spec: unknown kind '" + value + "'");
    } else if (key == "streak_count_min") spec.streak_count_min = static_cast<int>(parse_int(key, value));
    else if (key == "streak_count_max") spec.streak_count_max = static_cast<int>(parse_int(key, value));
    else if (key == "angle_min_deg") spec.angle_min_deg = parse_double(key, value);
    else if (key == "angle_max_deg") spec.angle_max_deg = parse_double(key, value);
    else if (key == "length_min") spec.length_min = parse_double(key, value);
    else if (key == "length_max") spec.length_max = parse_double(key, value);
    else if (key == "width_min") spec.width_min = parse_double(key, value);
    else if (key == "width_max") spec.width_max = parse_double(key, value);
    else if (key == "intensity_min") spec.intensity_min = parse_double(key, value);
    else if (key == "intensity_max") spec.intensity_max = parse_double(key, value);
    else if (key == "blur_sigma_min") spec.blur_sigma_min = parse_double(key, value);
    else if (key == "blur_sigma_max") spec.blur_sigma_max = parse_double(key, value);
    else if (key == "gamma_min") spec.gamma_min = parse_double(key, value);
    else if (key == "gamma_max") spec.gamma_max = parse_double(key, value);
    else if (key == "gain_min") spec.gain_min = parse_double(key, value);
    else if (key == "gain_max") spec.gain_max = parse_double(key, value);
    else if (key == "noise_sigma") spec.noise_sigma = parse_double(key, value);
    else if (key == "seed") spec.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else throw ConfigError("spec: unknown key '" + key + "'");
  }
  try {
    spec.validate();
  } catch (const TensorError& e) {
    throw ConfigError(e.what());
  }
  return spec;
}

DegradationSpec parse_degradation_spec_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("spec: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_degradation_spec(ss.str());
}

}  // namespace elf
