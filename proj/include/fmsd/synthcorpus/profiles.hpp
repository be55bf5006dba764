#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fmsd/numerics/rng.hpp"

namespace fmsd::corpus {

inline constexpr std::size_t kDialectCount = 3;
inline constexpr std::array<std::string_view, kDialectCount> kDialectLabels = {"wz", "ad", "kb"};

/// Thrown for malformed corpus configurations or unknown labels/tokens.
class CorpusError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// wz -> 0, ad -> 1, kb -> 2.
inline int dialect_id(std::string_view label) {
  for (std::size_t i = 0; i < kDialectCount; ++i)
    if (kDialectLabels[i] == label) return static_cast<int>(i);
  throw CorpusError("unknown dialect label '" + std::string(label) + "' (expected one of wz, ad, kb)");
}

inline std::string dialect_label(int id) {
  if (id < 0 || id >= static_cast<int>(kDialectCount)) {
    throw CorpusError("dialect id " + std::to_string(id) + " out of range");
  }
  return std::string(kDialectLabels[static_cast<std::size_t>(id)]);
}

/// Parametric stand-in for a dialect's rhythm and intonation.
struct DialectProfile {
  int dialect_id = 0;
  std::string label;
  double duration_multiplier = 1.0;
  /// Log-gain slope across the normalised channel axis [-0.5, 0.5].
  double spectral_tilt = 0.0;
  /// Narrow formant-like boost: centre as a fraction of the channel count, gain, width in channels.
  double band_center = 0.5;
  double band_gain = 1.0;
  double band_width = 1.5;
  /// Cycles per frame of the loudness contour, and its depth.
  double contour_rate = 0.05;
  double contour_depth = 0.15;

  std::size_t band_channel(std::size_t channels) const {
    return static_cast<std::size_t>(std::lround(band_center * double(channels - 1)));
  }
};

/// Default profiles. Amdo-analog (ad) is slowest, Kham-analog (kb) fastest.
inline std::array<DialectProfile, kDialectCount> default_dialect_profiles() {
  return {{
      {0, "wz", 1.00, 0.0, 0.20, 1.0, 1.5, 0.05, 0.15},
      {1, "ad", 1.35, 0.8, 0.50, 1.0, 1.5, 0.11, 0.15},
      {2, "kb", 0.95, -0.8, 0.80, 1.0, 1.5, 0.17, 0.15},
  }};
}

/// Spectral factor a dialect multiplies into every frame (tilt times band boost).
inline std::vector<double> dialect_spectral_factor(const DialectProfile& d, std::size_t channels) {
  std::vector<double> f(channels);
  const double center = d.band_center * double(channels - 1);
  for (std::size_t c = 0; c < channels; ++c) {
    const double x = channels > 1 ? double(c) / double(channels - 1) : 0.5;
    const double dc = double(c) - center;
    f[c] = std::exp(d.spectral_tilt * (x - 0.5)) *
           (1.0 + d.band_gain * std::exp(-dc * dc / (2.0 * d.band_width * d.band_width)));
  }
  return f;
}

struct SpeakerProfile {
  int speaker_id = 0;
  std::vector<double> base_envelope;
  double energy_scale = 1.0;
  std::uint64_t seed = 0;
};

/// Smooth random envelope in [0.1, 1.0], a pure function of (seed, speaker_id).
inline SpeakerProfile make_speaker(std::uint64_t seed, int speaker_id, std::size_t channels) {
  Rng rng(seed, 0x5350'0000ULL + static_cast<std::uint64_t>(speaker_id));
  SpeakerProfile s;
  s.speaker_id = speaker_id;
  s.seed = seed;
  s.energy_scale = rng.uniform(0.8, 1.2);
  std::array<double, 3> amp{}, phase{};
  for (std::size_t h = 0; h < 3; ++h) {
    amp[h] = rng.uniform(-1.0, 1.0) / double(h + 1);
    phase[h] = rng.uniform(0.0, 2.0 * M_PI);
  }
  std::vector<double> raw(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const double x = channels > 1 ? double(c) / double(channels - 1) : 0.0;
    double v = 0;
    for (std::size_t h = 0; h < 3; ++h) v += amp[h] * std::cos(double(h + 1) * M_PI * x + phase[h]);
    raw[c] = v;
  }
  double lo = raw[0], hi = raw[0];
  for (double v : raw) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  s.base_envelope.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    s.base_envelope[c] = hi > lo ? 0.1 + 0.9 * (raw[c] - lo) / (hi - lo) : 0.55;
  }
  return s;
}

/// Per-token base duration (frames) and spectral template.
struct TokenInventory {
  std::vector<int> base_durations;
  std::vector<std::vector<double>> templates;

  std::size_t vocab_size() const { return base_durations.size(); }

  void require_token(int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= vocab_size()) {
      throw CorpusError("unknown token id " + std::to_string(token));
    }
  }
};

inline TokenInventory make_inventory(std::uint64_t seed, std::size_t vocab_size, std::size_t channels,
                                     int min_duration, int max_duration) {
  TokenInventory inv;
  inv.base_durations.resize(vocab_size);
  inv.templates.resize(vocab_size);
  for (std::size_t v = 0; v < vocab_size; ++v) {
    Rng rng(seed, 0x544f'0000ULL + v);
    inv.base_durations[v] = static_cast<int>(rng.range(min_duration, max_duration));
    auto& t = inv.templates[v];
    t.assign(channels, 0.25);
    for (int j = 0; j < 2; ++j) {
      const double mu = rng.uniform(0.0, double(channels));
      const double w = rng.uniform(0.08, 0.15) * double(channels);
      const double a = rng.uniform(0.1, 0.25);
      for (std::size_t c = 0; c < channels; ++c) {
        const double d = double(c) - mu;
        t[c] += a * std::exp(-d * d / (2 * w * w));
      }
    }
  }
  return inv;
}

}  // namespace fmsd::corpus
