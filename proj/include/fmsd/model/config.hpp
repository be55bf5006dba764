#pragma once

#include <cstdint>
#include <string>

#include "fmsd/util/io.hpp"
#include "fmsd/util/strict_json.hpp"

namespace fmsd::model {

enum class RefLossMode { kSquared, kLiteral };

inline std::string ref_loss_mode_name(RefLossMode m) { return m == RefLossMode::kSquared ? "cos2" : "literal"; }

inline RefLossMode parse_ref_loss_mode(const std::string& s) {
  if (s == "cos2") return RefLossMode::kSquared;
  if (s == "literal") return RefLossMode::kLiteral;
  throw ConfigError("ref_loss_mode must be 'cos2' or 'literal', got '" + s + "'");
}

struct ModelConfig {
  std::size_t vocab_size = 216;
  std::size_t channels = 80;
  std::size_t d_model = 128;
  std::size_t speaker_dim = 192;
  std::size_t dialect_dim = 128;
  std::size_t dsdr_ffn_dim = 192;
  std::size_t heads = 2;
  std::size_t n_dsdr_blocks = 2;
  std::size_t n_dialects = 3;
  /// Reference crop length: 3 s at 16 kHz with hop 256.
  std::size_t t_crop = 187;
  std::size_t ref_hidden = 128;
  std::size_t dur_hidden = 64;
  std::size_t dec_hidden = 128;
  std::size_t dec_layers = 2;
  std::size_t time_embed_dim = 16;
  std::size_t cfm_steps = 32;
  double sigma_min = 1e-4;
  RefLossMode ref_loss_mode = RefLossMode::kSquared;
  /// Project h_spk to dialect_dim inside the reference loss. Required when the dims differ.
  bool ref_projection = true;
  bool dsdr_in_decoder = false;
  bool detach_duration_input = true;
  /// Decoder works on z = (log(x + floor) - mean) / std.
  double feature_floor = 0.05;
  double feature_mean = 0.0;
  double feature_std = 1.0;
  /// Reference encoder input is log1p(x / ref_scale), which keeps zero at zero.
  double ref_scale = 0.05;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (vocab_size == 0 || channels == 0 || d_model == 0) fail("vocab_size, channels and d_model must be positive");
    if (speaker_dim == 0 || dialect_dim == 0) fail("speaker_dim and dialect_dim must be positive");
    if (dsdr_ffn_dim == 0 || ref_hidden == 0 || dur_hidden == 0 || dec_hidden == 0) fail("hidden widths must be positive");
    if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
    if (n_dialects == 0) fail("n_dialects must be positive");
    if (t_crop == 0) fail("t_crop must be positive");
    if (cfm_steps == 0) fail("cfm_steps must be at least 1");
    if (time_embed_dim == 0 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even and positive");
    if (!(sigma_min >= 0.0 && sigma_min < 1.0)) fail("sigma_min must lie in [0, 1)");
    if (!ref_projection && speaker_dim != dialect_dim) fail("ref_projection=false needs speaker_dim == dialect_dim");
    if (!(feature_floor > 0.0) || !(feature_std > 0.0) || !(ref_scale > 0.0)) fail("feature scales must be positive");
  }
};

inline Json to_json(const ModelConfig& c) {
  Json j;
  j["vocab_size"] = c.vocab_size;
  j["channels"] = c.channels;
  j["d_model"] = c.d_model;
  j["speaker_dim"] = c.speaker_dim;
  j["dialect_dim"] = c.dialect_dim;
  j["dsdr_ffn_dim"] = c.dsdr_ffn_dim;
  j["heads"] = c.heads;
  j["n_dsdr_blocks"] = c.n_dsdr_blocks;
  j["n_dialects"] = c.n_dialects;
  j["t_crop"] = c.t_crop;
  j["ref_hidden"] = c.ref_hidden;
  j["dur_hidden"] = c.dur_hidden;
  j["dec_hidden"] = c.dec_hidden;
  j["dec_layers"] = c.dec_layers;
  j["time_embed_dim"] = c.time_embed_dim;
  j["cfm_steps"] = c.cfm_steps;
  j["sigma_min"] = c.sigma_min;
  j["ref_loss_mode"] = ref_loss_mode_name(c.ref_loss_mode);
  j["ref_projection"] = c.ref_projection;
  j["dsdr_in_decoder"] = c.dsdr_in_decoder;
  j["detach_duration_input"] = c.detach_duration_input;
  j["feature_floor"] = c.feature_floor;
  j["feature_mean"] = c.feature_mean;
  j["feature_std"] = c.feature_std;
  j["ref_scale"] = c.ref_scale;
  return j;
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& path = "model") {
  ModelConfig c;
  std::string mode = ref_loss_mode_name(c.ref_loss_mode);
  StrictObject o(j, path);
  o.field("vocab_size", c.vocab_size)
      .field("channels", c.channels)
      .field("d_model", c.d_model)
      .field("speaker_dim", c.speaker_dim)
      .field("dialect_dim", c.dialect_dim)
      .field("dsdr_ffn_dim", c.dsdr_ffn_dim)
      .field("heads", c.heads)
      .field("n_dsdr_blocks", c.n_dsdr_blocks)
      .field("n_dialects", c.n_dialects)
      .field("t_crop", c.t_crop)
      .field("ref_hidden", c.ref_hidden)
      .field("dur_hidden", c.dur_hidden)
      .field("dec_hidden", c.dec_hidden)
      .field("dec_layers", c.dec_layers)
      .field("time_embed_dim", c.time_embed_dim)
      .field("cfm_steps", c.cfm_steps)
      .field("sigma_min", c.sigma_min)
      .field("ref_loss_mode", mode)
      .field("ref_projection", c.ref_projection)
      .field("dsdr_in_decoder", c.dsdr_in_decoder)
      .field("detach_duration_input", c.detach_duration_input)
      .field("feature_floor", c.feature_floor)
      .field("feature_mean", c.feature_mean)
      .field("feature_std", c.feature_std)
      .field("ref_scale", c.ref_scale);
  o.finish();
  c.ref_loss_mode = parse_ref_loss_mode(mode);
  c.validate();
  return c;
}

/// Architecture switches used by the ablation study.
struct ModelVariant {
  /// Drop the private FFNs; only the public FFN remains in each block.
  bool no_dsdr = false;
  /// Replace the dialect embedding with a zero vector.
  bool no_dialect_id = false;

  std::string name() const {
    if (no_dsdr && no_dialect_id) return "neither";
    if (no_dsdr) return "no_dsdr";
    if (no_dialect_id) return "no_dialect_id";
    return "full";
  }
};

}  // namespace fmsd::model
