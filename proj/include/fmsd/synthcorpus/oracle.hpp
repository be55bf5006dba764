#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "fmsd/numerics/tensor.hpp"
#include "fmsd/synthcorpus/profiles.hpp"

namespace fmsd::corpus {

/// Log of the time-averaged spectrum.
inline std::vector<double> log_mean_spectrum(const FrameMatrix& frames) {
  const std::size_t t = frames.rows(), d = frames.cols();
  std::vector<double> m(d, 0.0);
  for (std::size_t n = 0; n < t; ++n)
    for (std::size_t c = 0; c < d; ++c) m[c] += frames(n, c);
  for (auto& v : m) v = std::log(v / double(t) + 1e-6);
  return m;
}

/// Least-squares slope of the log mean spectrum against the channel axis scaled to [0, 1].
inline double spectral_tilt_statistic(const FrameMatrix& frames) {
  const auto l = log_mean_spectrum(frames);
  const std::size_t d = l.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t c = 0; c < d; ++c) {
    const double x = double(c) / double(d - 1);
    sx += x;
    sy += l[c];
    sxx += x * x;
    sxy += x * l[c];
  }
  const double n = double(d);
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

/// Per-dialect band score: detrended log spectrum averaged around each profile's band centre.
inline std::array<double, kDialectCount> band_scores(const FrameMatrix& frames,
                                                     const std::array<DialectProfile, kDialectCount>& profiles) {
  const auto l = log_mean_spectrum(frames);
  const long d = static_cast<long>(l.size());
  constexpr long kHalf = 4;
  std::vector<double> resid(l.size());
  for (long c = 0; c < d; ++c) {
    double s = 0;
    long k = 0;
    for (long j = std::max(0L, c - kHalf); j <= std::min(d - 1, c + kHalf); ++j, ++k) s += l[std::size_t(j)];
    resid[std::size_t(c)] = l[std::size_t(c)] - s / double(k);
  }
  std::array<double, kDialectCount> scores{};
  for (std::size_t i = 0; i < kDialectCount; ++i) {
    const long center = static_cast<long>(profiles[i].band_channel(l.size()));
    double s = 0;
    long k = 0;
    for (long j = std::max(0L, center - 1); j <= std::min(d - 1, center + 1); ++j, ++k) s += resid[std::size_t(j)];
    scores[i] = s / double(k);
  }
  return scores;
}

/// Recovers the generating dialect of rendered frames from their band statistics.
inline int dialect_oracle(const FrameMatrix& frames,
                          const std::array<DialectProfile, kDialectCount>& profiles = default_dialect_profiles()) {
  const auto s = band_scores(frames, profiles);
  int best = 0;
  for (int i = 1; i < int(kDialectCount); ++i)
    if (s[std::size_t(i)] > s[std::size_t(best)]) best = i;
  return best;
}

}  // namespace fmsd::corpus
