#include "metadec/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace metadec {

std::string to_string(DecoderVariant v) {
  switch (v) {
    case DecoderVariant::basic: return "basic";
    case DecoderVariant::multiscale: return "multiscale";
    case DecoderVariant::spatial_attention: return "spatial_attention";
  }
  return "?";
}

std::string to_string(GeneratorKind g) {
  return g == GeneratorKind::transformer ? "transformer" : "static";
}

DecoderVariant parse_variant(const std::string& s) {
  if (s == "basic") return DecoderVariant::basic;
  if (s == "multiscale") return DecoderVariant::multiscale;
  if (s == "spatial_attention") return DecoderVariant::spatial_attention;
  throw ConfigError("decoder_variant must be one of basic, multiscale, spatial_attention; got '" +
                    s + "'");
}

GeneratorKind parse_generator(const std::string& s) {
  if (s == "transformer") return GeneratorKind::transformer;
  if (s == "static") return GeneratorKind::static_matrix;
  throw ConfigError("generator must be transformer or static; got '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a real number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.profile = name;
  if (name == "paper") return c;
  if (name == "desk") {
    c.input_height = c.input_width = 64;
    c.encoder_channels = {8, 16, 32, 64, 128};
    c.decoder_width = 32;
    c.token_dim = 96;
    c.num_heads = 6;
    c.head_dim = 16;
    c.num_layers = 3;
    c.epochs = 150;
    c.batch_size = 8;
    return c;
  }
  if (name == "tiny") {
    c.input_height = c.input_width = 16;
    c.encoder_channels = {4, 8, 12, 16, 20};
    c.decoder_width = 8;
    c.token_dim = 8;
    c.num_heads = 2;
    c.head_dim = 4;
    c.num_layers = 1;
    c.epochs = 1;
    c.batch_size = 2;
    return c;
  }
  throw ConfigError("profile must be one of paper, desk, tiny; got '" + name + "'");
}

void apply(ModelConfig& c, const std::string& key, const std::string& v) {
  if (key == "input_size") {
    const auto x = v.find('x');
    if (x == std::string::npos) {
      c.input_height = c.input_width = parse_int<int>(key, v);
    } else {
      c.input_height = parse_int<int>(key, trim(v.substr(0, x)));
      c.input_width = parse_int<int>(key, trim(v.substr(x + 1)));
    }
  } else if (key == "encoder_channels") {
    std::vector<int> chans;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) chans.push_back(parse_int<int>(key, trim(item)));
    if (chans.size() != 5) {
      throw ConfigError("encoder_channels has exactly 5 entries (got " +
                        std::to_string(chans.size()) + ")");
    }
    for (int i = 0; i < 5; ++i) c.encoder_channels[i] = chans[i];
  } else if (key == "sigma_hp") {
    c.sigma_hp = parse_real(key, v);
  } else if (key == "token_dim") {
    c.token_dim = parse_int<int>(key, v);
  } else if (key == "num_heads") {
    c.num_heads = parse_int<int>(key, v);
  } else if (key == "head_dim") {
    c.head_dim = parse_int<int>(key, v);
  } else if (key == "num_layers") {
    c.num_layers = parse_int<int>(key, v);
  } else if (key == "decoder_width") {
    c.decoder_width = parse_int<int>(key, v);
  } else if (key == "decoder_variant") {
    c.decoder_variant = parse_variant(v);
  } else if (key == "num_decoder_stages") {
    c.num_decoder_stages = parse_int<int>(key, v);
  } else if (key == "generator") {
    c.generator = parse_generator(v);
  } else if (key == "lambda_dice") {
    c.lambda_dice = parse_real(key, v);
  } else if (key == "lr_init") {
    c.lr_init = parse_real(key, v);
  } else if (key == "epochs") {
    c.epochs = parse_int<int>(key, v);
  } else if (key == "batch_size") {
    c.batch_size = parse_int<int>(key, v);
  } else if (key == "seed") {
    c.seed = parse_int<std::uint64_t>(key, v);
  } else if (key == "augment") {
    c.augment = parse_bool(key, v);
  } else if (key == "eval_interval") {
    c.eval_interval = parse_int<int>(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "profile",       "input_size",   "encoder_channels", "sigma_hp",
      "token_dim",     "num_heads",    "head_dim",         "num_layers",
      "decoder_width", "decoder_variant", "num_decoder_stages", "generator",
      "lambda_dice",   "lr_init",      "epochs",           "batch_size",
      "seed",          "augment",      "eval_interval"};
  return keys;
}

void check_invariants(const ModelConfig& c) {
  for (int i = 1; i < 5; ++i) {
    if (c.encoder_channels[i] <= c.encoder_channels[i - 1]) {
      throw ConfigError("encoder_channels strictly increasing");
    }
  }
  for (int ch : c.encoder_channels) {
    if (ch <= 0 || ch % 4 != 0) {
      throw ConfigError("encoder_channels divisible by 4 (one group per MKAB kernel)");
    }
  }
  if (c.num_heads < 1 || c.head_dim < 1 || c.token_dim != c.num_heads * c.head_dim) {
    throw ConfigError("C_T = num_heads × head_dim (token_dim " + std::to_string(c.token_dim) +
                      ", num_heads " + std::to_string(c.num_heads) + ", head_dim " +
                      std::to_string(c.head_dim) + ")");
  }
  if (c.token_dim % 4 != 0) {
    throw ConfigError("token_dim divisible by 4 (2D sine-cosine embedding)");
  }
  if (c.decoder_width < 3) throw ConfigError("C_dec ≥ 3");
  if (c.decoder_variant != DecoderVariant::basic && c.decoder_width % 2 != 0) {
    throw ConfigError("decoder_width even for multiscale/spatial_attention variants");
  }
  if (c.input_height < 16 || c.input_width < 16 || c.input_height % 16 != 0 ||
      c.input_width % 16 != 0) {
    throw ConfigError("input_size divisible by 16");
  }
  if (!(c.sigma_hp > 0)) throw ConfigError("sigma_hp > 0");
  if (c.num_layers < 0) throw ConfigError("num_layers ≥ 0");
  if (c.num_decoder_stages < 1 || c.num_decoder_stages > 4) {
    throw ConfigError("num_decoder_stages in [1, 4]");
  }
  if (!(c.lambda_dice >= 0)) throw ConfigError("lambda_dice ≥ 0");
  if (!(c.lr_init >= 0)) throw ConfigError("lr_init ≥ 0");
  if (c.epochs < 1) throw ConfigError("epochs ≥ 1");
  if (c.batch_size < 1) throw ConfigError("batch_size ≥ 1");
  if (c.eval_interval < 1) throw ConfigError("eval_interval ≥ 1");
}

ModelConfig validate_config(const RawConfig& raw) {
  const auto it = raw.find("profile");
  ModelConfig c = preset(it == raw.end() ? "paper" : trim(it->second));
  for (const auto& [key, value] : raw) {
    if (key == "profile") continue;
    apply(c, key, trim(value));
  }
  check_invariants(c);
  return c;
}

RawConfig to_raw(const ModelConfig& c) {
  RawConfig r;
  r["profile"] = c.profile;
  r["input_size"] = std::to_string(c.input_height) + "x" + std::to_string(c.input_width);
  std::string chans;
  for (int i = 0; i < 5; ++i) chans += (i ? "," : "") + std::to_string(c.encoder_channels[i]);
  r["encoder_channels"] = chans;
  r["sigma_hp"] = format_real(c.sigma_hp);
  r["token_dim"] = std::to_string(c.token_dim);
  r["num_heads"] = std::to_string(c.num_heads);
  r["head_dim"] = std::to_string(c.head_dim);
  r["num_layers"] = std::to_string(c.num_layers);
  r["decoder_width"] = std::to_string(c.decoder_width);
  r["decoder_variant"] = to_string(c.decoder_variant);
  r["num_decoder_stages"] = std::to_string(c.num_decoder_stages);
  r["generator"] = to_string(c.generator);
  r["lambda_dice"] = format_real(c.lambda_dice);
  r["lr_init"] = format_real(c.lr_init);
  r["epochs"] = std::to_string(c.epochs);
  r["batch_size"] = std::to_string(c.batch_size);
  r["seed"] = std::to_string(c.seed);
  r["augment"] = c.augment ? "true" : "false";
  r["eval_interval"] = std::to_string(c.eval_interval);
  return r;
}

std::string serialize_config(const ModelConfig& c) {
  const RawConfig r = to_raw(c);
  std::string out;
  for (const auto& key : config_keys()) out += key + " = " + r.at(key) + "\n";
  return out;
}

RawConfig parse_config_text(const std::string& text) {
  RawConfig raw;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!raw.emplace(key, value).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return raw;
}

RawConfig read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::uint64_t config_hash(const ModelConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : serialize_config(cfg)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace metadec
