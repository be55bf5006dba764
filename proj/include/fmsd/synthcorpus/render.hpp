#pragma once

#include <cmath>
#include <filesystem>
#include <vector>

#include "fmsd/numerics/tensor.hpp"
#include "fmsd/synthcorpus/profiles.hpp"
#include "fmsd/util/io.hpp"

namespace fmsd::corpus {

struct UtteranceRecord {
  std::vector<int> token_ids;
  int speaker_id = 0;
  int dialect_id = 0;
  std::vector<int> durations;
  FrameMatrix frames;
};

struct RenderOptions {
  double snr_db = 20.0;
};

inline int scaled_duration(int base, double multiplier) {
  return std::max(1, static_cast<int>(std::lround(double(base) * multiplier)));
}

/// Renders one utterance. Frame n of token v is
///   energy · envelope ⊙ template_v ⊙ tilt ⊙ band · (1 + depth·sin(2π·rate·n)) + noise,
/// clamped at zero. Noise std is the utterance RMS scaled to the requested SNR.
inline UtteranceRecord render_utterance(const std::vector<int>& tokens, const SpeakerProfile& speaker,
                                        const DialectProfile& dialect, const TokenInventory& inventory,
                                        std::uint64_t seed, RenderOptions opt = {}) {
  if (tokens.empty()) throw CorpusError("render_utterance: empty token sequence");
  const std::size_t channels = speaker.base_envelope.size();
  UtteranceRecord rec;
  rec.token_ids = tokens;
  rec.speaker_id = speaker.speaker_id;
  rec.dialect_id = dialect.dialect_id;
  std::size_t total = 0;
  for (int tok : tokens) {
    inventory.require_token(tok);
    if (inventory.templates[static_cast<std::size_t>(tok)].size() != channels) {
      throw CorpusError("render_utterance: template width does not match speaker envelope");
    }
    rec.durations.push_back(scaled_duration(inventory.base_durations[static_cast<std::size_t>(tok)],
                                            dialect.duration_multiplier));
    total += static_cast<std::size_t>(rec.durations.back());
  }

  const auto spectral = dialect_spectral_factor(dialect, channels);
  std::vector<double> clean(total * channels);
  std::size_t n = 0;
  double energy = 0;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto& tmpl = inventory.templates[static_cast<std::size_t>(tokens[k])];
    for (int f = 0; f < rec.durations[k]; ++f, ++n) {
      const double contour = 1.0 + dialect.contour_depth * std::sin(2.0 * M_PI * dialect.contour_rate * double(n));
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = speaker.energy_scale * speaker.base_envelope[c] * tmpl[c] * spectral[c] * contour;
        clean[n * channels + c] = v;
        energy += v * v;
      }
    }
  }
  const double rms = std::sqrt(energy / double(clean.size()));
  const double noise_std = rms * std::pow(10.0, -opt.snr_db / 20.0);
  Rng rng(seed, 0x4e4f'4953ULL);
  rec.frames = FrameMatrix::matrix(total, channels);
  auto out = rec.frames.data();
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out[i] = static_cast<float>(std::max(0.0, clean[i] + noise_std * rng.normal()));
  }
  return rec;
}

inline constexpr char kFrameMagic[4] = {'F', 'R', 'M', '1'};

/// "FRM1" | u32 T | u32 D | T×D little-endian f32, row-major.
inline std::string encode_frames(const FrameMatrix& frames) {
  ByteWriter w;
  w.bytes(std::string_view(kFrameMagic, 4));
  w.u32(static_cast<std::uint32_t>(frames.rows()));
  w.u32(static_cast<std::uint32_t>(frames.cols()));
  for (float v : frames.data()) w.f32(v);
  return w.str();
}

inline FrameMatrix decode_frames(std::string bytes, const std::string& what = "frame file") {
  ByteReader r(std::move(bytes), what);
  if (r.bytes(4) != std::string_view(kFrameMagic, 4)) throw IoError(what + ": bad magic");
  const std::size_t t = r.u32(), d = r.u32();
  if (t == 0 || d == 0) throw IoError(what + ": empty frame matrix");
  std::vector<float> data(t * d);
  for (auto& v : data) v = r.f32();
  if (!r.at_end()) throw IoError(what + ": trailing bytes");
  return FrameMatrix({t, d}, std::move(data));
}

inline void write_frames(const std::filesystem::path& path, const FrameMatrix& frames) {
  atomic_write(path, encode_frames(frames));
}

inline FrameMatrix read_frames(const std::filesystem::path& path) { return decode_frames(read_file(path), path.string()); }

}  // namespace fmsd::corpus
