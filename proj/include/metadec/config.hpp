#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadec {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DecoderVariant { basic, multiscale, spatial_attention };
enum class GeneratorKind { transformer, static_matrix };

std::string to_string(DecoderVariant v);
std::string to_string(GeneratorKind g);
DecoderVariant parse_variant(const std::string& s);
GeneratorKind parse_generator(const std::string& s);

/// Every architectural and training hyperparameter. Build it through
/// validate_config(); a validated instance is never mutated afterwards.
struct ModelConfig {
  std::string profile = "paper";
  int input_height = 256;
  int input_width = 256;
  std::array<int, 5> encoder_channels{32, 64, 128, 256, 512};
  double sigma_hp = 5.0;
  int token_dim = 384;
  int num_heads = 6;
  int head_dim = 64;
  int num_layers = 6;
  int decoder_width = 32;
  DecoderVariant decoder_variant = DecoderVariant::spatial_attention;
  int num_decoder_stages = 4;
  GeneratorKind generator = GeneratorKind::transformer;
  double lambda_dice = 0.5;
  double lr_init = 8e-4;
  int epochs = 800;
  int batch_size = 8;
  std::uint64_t seed = 0;
  bool augment = true;
  int eval_interval = 1;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using RawConfig = std::map<std::string, std::string>;

/// Names of every accepted key, in serialization order.
const std::vector<std::string>& config_keys();

/// Applies the named preset (`profile`, default "paper") and then every other
/// key; unknown keys and violated invariants raise ConfigError naming them.
ModelConfig validate_config(const RawConfig& raw);

/// Checks the invariants of an already-populated config.
void check_invariants(const ModelConfig& cfg);

RawConfig to_raw(const ModelConfig& cfg);
std::string serialize_config(const ModelConfig& cfg);

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
RawConfig parse_config_text(const std::string& text);
RawConfig read_config_file(const std::string& path);

/// 64-bit FNV-1a of the serialized config, used to tag checkpoints.
std::uint64_t config_hash(const ModelConfig& cfg);

}  // namespace metadec
