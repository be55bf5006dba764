#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fmsd/numerics/rng.hpp"
#include "fmsd/numerics/tensor.hpp"
#include "fmsd/util/io.hpp"

namespace fmsd::eval {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw EvalError("vector length mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Cosine similarity clamped to [-1, 1].
inline double cosine(const Vec& a, const Vec& b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (!(na > 0) || !(nb > 0)) throw EvalError("cosine of a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

struct DcaResult {
  double percent = 0;
  /// confusion[requested][predicted]
  std::vector<std::vector<std::size_t>> confusion;
  /// Mean probe softmax per requested dialect.
  std::vector<Vec> softmax_means;
};

/// Accuracy of probe predictions (argmax of each softmax row) against requested labels.
inline DcaResult compute_dca(const std::vector<Vec>& probs, const std::vector<int>& requested, std::size_t classes) {
  if (probs.empty()) throw EvalError("compute_dca: empty evaluation set");
  if (probs.size() != requested.size()) throw EvalError("compute_dca: label count mismatch");
  DcaResult r;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  r.softmax_means.assign(classes, Vec(classes, 0.0));
  std::vector<std::size_t> per(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != classes) throw EvalError("compute_dca: softmax width mismatch");
    const int want = requested[i];
    if (want < 0 || std::size_t(want) >= classes) throw EvalError("compute_dca: label out of range");
    const auto pred = std::size_t(std::max_element(probs[i].begin(), probs[i].end()) - probs[i].begin());
    ++r.confusion[std::size_t(want)][pred];
    correct += pred == std::size_t(want);
    ++per[std::size_t(want)];
    for (std::size_t c = 0; c < classes; ++c) r.softmax_means[std::size_t(want)][c] += probs[i][c];
  }
  for (std::size_t d = 0; d < classes; ++d)
    if (per[d])
      for (auto& v : r.softmax_means[d]) v /= double(per[d]);
  r.percent = 100.0 * double(correct) / double(probs.size());
  return r;
}

/// Mean cosine between each embedding and the centroid of its requested dialect.
inline double compute_decs(const std::vector<Vec>& embeddings, const std::vector<int>& requested,
                           const std::vector<Vec>& centroids) {
  if (embeddings.empty()) throw EvalError("compute_decs: empty evaluation set");
  if (embeddings.size() != requested.size()) throw EvalError("compute_decs: label count mismatch");
  double s = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (requested[i] < 0 || std::size_t(requested[i]) >= centroids.size()) throw EvalError("compute_decs: label out of range");
    s += cosine(embeddings[i], centroids[std::size_t(requested[i])]);
  }
  return s / double(embeddings.size());
}

struct SecsPair {
  int speaker_id = 0;
  Vec reference;
  Vec synthesized;
  /// False when no reference with the same text exists; such pairs are skipped.
  bool paired = true;
};

struct SecsResult {
  double mean = 0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

/// Cosine of reference vs synthesized speaker embeddings, averaged per speaker, then across speakers.
inline SecsResult compute_secs(const std::vector<SecsPair>& pairs) {
  std::map<int, std::pair<double, std::size_t>> per;
  SecsResult r;
  for (const auto& p : pairs) {
    if (!p.paired) {
      ++r.skipped;
      continue;
    }
    auto& acc = per[p.speaker_id];
    acc.first += cosine(p.reference, p.synthesized);
    ++acc.second;
    ++r.used;
  }
  if (per.empty()) throw EvalError("compute_secs: no paired utterances");
  for (const auto& [id, acc] : per) r.mean += acc.first / double(acc.second);
  r.mean /= double(per.size());
  return r;
}

/// Fraction of pairs whose synthesized embedding is closer (cosine) to its own reference than to
/// the reference of every other speaker.
inline double secs_rank_rate(const std::vector<SecsPair>& pairs, const std::map<int, Vec>& speaker_refs) {
  std::size_t ok = 0, n = 0;
  for (const auto& p : pairs) {
    if (!p.paired) continue;
    const double own = cosine(p.synthesized, p.reference);
    bool best = true;
    for (const auto& [id, ref] : speaker_refs) {
      if (id != p.speaker_id && cosine(p.synthesized, ref) >= own) {
        best = false;
        break;
      }
    }
    ok += best;
    ++n;
  }
  if (n == 0) throw EvalError("secs_rank_rate: no paired utterances");
  return double(ok) / double(n);
}

struct Timing {
  double seconds = 0;
  std::size_t frames = 0;
};

struct RtfResult {
  double mean = 0;
  double std = 0;
  std::size_t count = 0;
};

/// Audio-equivalent duration of a frame count.
inline double frames_to_seconds(std::size_t frames, double hop = 256, double sample_rate = 16000) {
  return double(frames) * hop / sample_rate;
}

/// RTF_i = seconds_i / audio_seconds_i; population mean and standard deviation.
inline RtfResult compute_rtf(const std::vector<Timing>& timings, double hop = 256, double sample_rate = 16000) {
  if (timings.empty()) throw EvalError("compute_rtf: no timings");
  Vec rtf;
  for (const auto& t : timings) {
    if (t.frames == 0) throw EvalError("compute_rtf: zero-frame utterance");
    rtf.push_back(t.seconds / frames_to_seconds(t.frames, hop, sample_rate));
  }
  RtfResult r;
  r.count = rtf.size();
  r.mean = std::accumulate(rtf.begin(), rtf.end(), 0.0) / double(rtf.size());
  double v = 0;
  for (double x : rtf) v += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(v / double(rtf.size()));
  return r;
}

// ---------------------------------------------------------------------------------------------
// k-means

inline double sq_dist(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct KMeansOptions {
  std::size_t restarts = 8;
  std::size_t max_iter = 200;
  double tol = 1e-6;
  std::uint64_t seed = 7;
};

struct KMeansResult {
  std::vector<Vec> centers;
  std::vector<std::size_t> assignment;
  double inertia = 0;
};

namespace detail {

inline double assign(const std::vector<Vec>& pts, const std::vector<Vec>& centers, std::vector<std::size_t>& a) {
  double inertia = 0;
  a.resize(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.size(); ++c) {
      const double d = sq_dist(pts[i], centers[c]);
      if (d < best) {
        best = d;
        a[i] = c;
      }
    }
    inertia += best;
  }
  return inertia;
}

/// Lloyd iterations from the given centres. Inertia never increases across iterations.
inline KMeansResult lloyd(const std::vector<Vec>& pts, std::vector<Vec> centers, const KMeansOptions& opt) {
  KMeansResult r;
  r.inertia = assign(pts, centers, r.assignment);
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    std::vector<Vec> next(centers.size(), Vec(pts[0].size(), 0.0));
    std::vector<std::size_t> count(centers.size(), 0);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      for (std::size_t j = 0; j < pts[i].size(); ++j) next[r.assignment[i]][j] += pts[i][j];
      ++count[r.assignment[i]];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (count[c] == 0) {
        next[c] = centers[c];
      } else {
        for (auto& v : next[c]) v /= double(count[c]);
      }
    }
    std::vector<std::size_t> a;
    const double inertia = assign(pts, next, a);
    if (inertia > r.inertia) break;
    const double change = r.inertia - inertia;
    centers = std::move(next);
    r.assignment = std::move(a);
    r.inertia = inertia;
    if (change <= opt.tol * std::max(r.inertia, 1e-300)) break;
  }
  r.centers = std::move(centers);
  return r;
}

/// k-means++ seeding, optionally extending an existing set of centres.
inline std::vector<Vec> plus_plus(const std::vector<Vec>& pts, std::size_t k, Rng& rng, std::vector<Vec> centers = {}) {
  if (centers.empty()) centers.push_back(pts[rng.below(pts.size())]);
  Vec d2(pts.size());
  while (centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, sq_dist(pts[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < pts.size(); ++pick) {
        if (u < d2[pick]) break;
        u -= d2[pick];
      }
      while (d2[pick] == 0 && pick > 0) --pick;
    } else {
      pick = rng.below(pts.size());
    }
    centers.push_back(pts[pick]);
  }
  return centers;
}

}  // namespace detail

/// Best of opt.restarts k-means++ runs, plus an optional warm start.
inline KMeansResult kmeans(const std::vector<Vec>& pts, std::size_t k, const KMeansOptions& opt = {},
                           const std::vector<Vec>* warm = nullptr) {
  if (pts.empty()) throw EvalError("kmeans: no points");
  if (k == 0) throw EvalError("kmeans: k must be positive");
  if (k > pts.size()) throw EvalError("kmeans: k=" + std::to_string(k) + " exceeds " + std::to_string(pts.size()) + " points");
  Rng rng(opt.seed, 0x4b4d'0000ULL + k);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
    auto res = detail::lloyd(pts, detail::plus_plus(pts, k, rng), opt);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  if (warm && warm->size() + 1 == k) {
    auto res = detail::lloyd(pts, detail::plus_plus(pts, k, rng, *warm), opt);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

/// Inertia for every k in ks (ascending). Each k also tries a warm start from the best k-1
/// solution, which keeps the curve non-increasing.
inline std::map<std::size_t, double> kmeans_inertia_curve(const std::vector<Vec>& pts, std::vector<std::size_t> ks,
                                                          const KMeansOptions& opt = {}) {
  std::sort(ks.begin(), ks.end());
  std::map<std::size_t, double> curve;
  std::vector<Vec> prev;
  std::size_t prev_k = 0;
  for (std::size_t k : ks) {
    auto r = kmeans(pts, k, opt, prev_k + 1 == k ? &prev : nullptr);
    if (!curve.empty()) r.inertia = std::min(r.inertia, curve.rbegin()->second);
    curve[k] = r.inertia;
    prev = std::move(r.centers);
    prev_k = k;
  }
  return curve;
}

// ---------------------------------------------------------------------------------------------
// Projections

struct PcaResult {
  Vec mean;
  /// Up to two principal axes, unit length; missing axes are zero vectors.
  std::vector<Vec> components;
  Vec variances;
  std::vector<std::array<double, 2>> coords;
};

inline PcaResult project_pca(const std::vector<Vec>& pts) {
  if (pts.size() < 3) throw EvalError("project_2d: need at least 3 points");
  const std::size_t n = pts.size(), d = pts[0].size();
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (pts[i].size() != d) throw EvalError("project_2d: ragged points");
    for (std::size_t j = 0; j < d; ++j) x(Eigen::Index(i), Eigen::Index(j)) = pts[i][j];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / double(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  PcaResult r;
  r.mean.assign(mu.data(), mu.data() + d);
  for (std::size_t c = 0; c < 2; ++c) {
    if (c < d) {
      const Eigen::Index col = Eigen::Index(d - 1 - c);
      Eigen::VectorXd v = es.eigenvectors().col(col);
      // Sign convention: largest-magnitude entry positive.
      Eigen::Index arg;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;
      r.components.emplace_back(v.data(), v.data() + d);
      r.variances.push_back(std::max(0.0, es.eigenvalues()(col)));
    } else {
      r.components.emplace_back(d, 0.0);
      r.variances.push_back(0.0);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 2> p{};
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t j = 0; j < d; ++j) p[c] += x(Eigen::Index(i), Eigen::Index(j)) * r.components[c][j];
    r.coords.push_back(p);
  }
  return r;
}

struct TsneOptions {
  double perplexity = 15;
  std::size_t iterations = 500;
  double learning_rate = 100;
  std::uint64_t seed = 11;
};

/// Exact t-SNE: per-point Gaussian bandwidths by binary search on perplexity, symmetric P,
/// Student-t Q, gradient descent with momentum and early exaggeration.
inline std::vector<std::array<double, 2>> project_tsne(const std::vector<Vec>& pts, TsneOptions opt = {}) {
  const std::size_t n = pts.size();
  if (n < 3) throw EvalError("project_2d: need at least 3 points");
  const double perp = std::min(opt.perplexity, double(n - 1) / 3.0);
  std::vector<double> d2(n * n), p(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) d2[i * n + j] = sq_dist(pts[i], pts[j]);
  const double target = std::log(perp);
  for (std::size_t i = 0; i < n; ++i) {
    double lo = 0, hi = std::numeric_limits<double>::infinity(), beta = 1.0;
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, d2[i * n + j]);
    for (int it = 0; it < 200; ++it) {
      double sum = 0, hsum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = std::exp(-beta * (d2[i * n + j] - dmin));
        p[i * n + j] = w;
        sum += w;
        hsum += w * (d2[i * n + j] - dmin);
      }
      const double h = std::log(sum) + beta * hsum / sum;
      for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= sum;
      if (std::abs(h - target) < 1e-6) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2 : (beta + hi) / 2;
      } else {
        hi = beta;
        beta = (beta + lo) / 2;
      }
    }
  }
  std::vector<double> ps(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) ps[i * n + j] = std::max((p[i * n + j] + p[j * n + i]) / (2.0 * double(n)), 1e-12);

  Rng rng(opt.seed, 0x5453'4e45ULL);
  std::vector<double> y(n * 2), vel(n * 2, 0.0), gains(n * 2, 1.0), grad(n * 2);
  for (auto& v : y) v = 1e-4 * rng.normal();
  std::vector<double> num(n * n);
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    const double exag = it < 100 ? 12.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    double qsum = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) {
          num[i * n + j] = 0;
          continue;
        }
        const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
        num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
        qsum += num[i * n + j];
      }
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = std::max(num[i * n + j] / qsum, 1e-12);
        const double m = 4.0 * (exag * ps[i * n + j] - q) * num[i * n + j];
        grad[2 * i] += m * (y[2 * i] - y[2 * j]);
        grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
      }
    for (std::size_t k = 0; k < y.size(); ++k) {
      gains[k] = (grad[k] > 0) != (vel[k] > 0) ? gains[k] + 0.2 : std::max(gains[k] * 0.8, 0.01);
      vel[k] = momentum * vel[k] - opt.learning_rate * gains[k] * grad[k];
      y[k] += vel[k];
    }
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += y[2 * i + c];
      mean /= double(n);
      for (std::size_t i = 0; i < n; ++i) y[2 * i + c] -= mean;
    }
  }
  std::vector<std::array<double, 2>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {y[2 * i], y[2 * i + 1]};
  return out;
}

// ---------------------------------------------------------------------------------------------
// Images

/// Binary PGM: width T, height D, channel 0 on the bottom row, min-max scaled to 0..255.
/// A constant matrix maps to mid-gray 128.
inline std::string encode_pgm(const FrameMatrix& frames) {
  if (frames.empty()) throw EvalError("dump_mel_image: empty frames");
  if (!frames.all_finite()) throw EvalError("dump_mel_image: non-finite frames");
  const std::size_t t = frames.rows(), d = frames.cols();
  const auto [lo_it, hi_it] = std::minmax_element(frames.data().begin(), frames.data().end());
  const double lo = *lo_it, hi = *hi_it;
  std::string out = "P5\n" + std::to_string(t) + " " + std::to_string(d) + "\n255\n";
  for (std::size_t row = 0; row < d; ++row) {
    const std::size_t ch = d - 1 - row;
    for (std::size_t col = 0; col < t; ++col) {
      const double v = hi > lo ? std::round((double(frames(col, ch)) - lo) / (hi - lo) * 255.0) : 128.0;
      out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    }
  }
  return out;
}

inline void dump_mel_image(const FrameMatrix& frames, const std::filesystem::path& path) {
  atomic_write(path, encode_pgm(frames));
}

}  // namespace fmsd::eval
