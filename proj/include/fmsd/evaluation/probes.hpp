#pragma once

#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fmsd/evaluation/metrics.hpp"
#include "fmsd/numerics/checkpoint.hpp"
#include "fmsd/numerics/layers.hpp"
#include "fmsd/numerics/optim.hpp"
#include "fmsd/synthcorpus/corpus.hpp"
#include "fmsd/synthcorpus/oracle.hpp"
#include "fmsd/util/strict_json.hpp"

namespace fmsd::eval {

using nn::Tape;
using nn::Var;

enum class SdeObjective { kSupCon, kL1 };

struct ProbeConfig {
  std::size_t hidden = 32;
  std::size_t embed_dim = 32;
  double lr = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double lr_decay = 0.9999996;
  double weight_decay = 0.0;
  std::size_t batch_size = 64;
  std::size_t sdr_steps = 400;
  std::size_t sde_steps = 400;
  double temperature = 0.1;
  SdeObjective sde_objective = SdeObjective::kSupCon;
  /// Held-out accuracy below this marks the SDR probe as not converged.
  double min_accuracy = 0.95;
  double feature_scale = 0.05;
  std::uint64_t seed = 3;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("probe config: " + m); };
    if (hidden == 0 || embed_dim == 0 || batch_size == 0) fail("hidden, embed_dim and batch_size must be positive");
    if (!(lr > 0)) fail("lr must be positive");
    if (!(temperature > 0)) fail("temperature must be positive");
    if (!(feature_scale > 0)) fail("feature_scale must be positive");
  }
};

inline Json to_json(const ProbeConfig& c) {
  Json j;
  j["hidden"] = c.hidden;
  j["embed_dim"] = c.embed_dim;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["lr_decay"] = c.lr_decay;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["sdr_steps"] = c.sdr_steps;
  j["sde_steps"] = c.sde_steps;
  j["temperature"] = c.temperature;
  j["sde_objective"] = c.sde_objective == SdeObjective::kSupCon ? "supcon" : "l1";
  j["min_accuracy"] = c.min_accuracy;
  j["feature_scale"] = c.feature_scale;
  j["seed"] = c.seed;
  return j;
}

inline ProbeConfig probe_config_from_json(const Json& j, const std::string& path = "probe") {
  ProbeConfig c;
  std::string obj = "supcon";
  StrictObject o(j, path);
  o.field("hidden", c.hidden)
      .field("embed_dim", c.embed_dim)
      .field("lr", c.lr)
      .field("beta1", c.beta1)
      .field("beta2", c.beta2)
      .field("lr_decay", c.lr_decay)
      .field("weight_decay", c.weight_decay)
      .field("batch_size", c.batch_size)
      .field("sdr_steps", c.sdr_steps)
      .field("sde_steps", c.sde_steps)
      .field("temperature", c.temperature)
      .field("sde_objective", obj)
      .field("min_accuracy", c.min_accuracy)
      .field("feature_scale", c.feature_scale)
      .field("seed", c.seed);
  o.finish();
  if (obj == "supcon") c.sde_objective = SdeObjective::kSupCon;
  else if (obj == "l1") c.sde_objective = SdeObjective::kL1;
  else throw ConfigError("probe.sde_objective must be 'supcon' or 'l1'");
  c.validate();
  return c;
}

/// Conv trunk shared by both probes: two time convolutions, then mean and max pooling.
struct ProbeTrunk {
  nn::Conv1d<float> conv1, conv2;
  double scale = 0.05;

  ProbeTrunk() = default;
  ProbeTrunk(nn::ParameterStore<float>& s, const std::string& name, std::size_t channels, std::size_t hidden,
             double feature_scale, Rng& rng)
      : conv1(s, name + ".conv1", channels, hidden, 3, rng), conv2(s, name + ".conv2", hidden, hidden, 3, rng),
        scale(feature_scale) {}

  Var<float> operator()(Tape<float>& tape, const FrameMatrix& frames) const {
    Tensor<float> f(frames.shape());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(std::log1p(double(frames[i]) / scale));
    auto h = nn::relu(conv1(tape, tape.constant(std::move(f), "probe_input")));
    h = nn::relu(conv2(tape, h));
    return nn::concat_cols<float>({nn::mean_rows(h), nn::max_rows(h)});
  }
};

/// Dialect classifier over frame matrices.
class SdrProbe {
 public:
  SdrProbe(std::size_t channels, std::size_t classes, const ProbeConfig& cfg) : classes_(classes) {
    Rng rng(cfg.seed, 0x5344'52ULL);
    trunk_ = ProbeTrunk(store_, "sdr", channels, cfg.hidden, cfg.feature_scale, rng);
    head_ = nn::Linear<float>(store_, "sdr.head", 2 * cfg.hidden, classes, rng);
  }

  std::size_t classes() const { return classes_; }
  nn::ParameterStore<float>& params() { return store_; }
  const nn::ParameterStore<float>& params() const { return store_; }

  Var<float> logits(Tape<float>& tape, const FrameMatrix& frames) const { return head_(tape, trunk_(tape, frames)); }

  /// Softmax over dialects; sums to one.
  Vec predict_proba(const FrameMatrix& frames) const {
    Tape<float> tape(false);
    const auto& l = logits(tape, frames).value();
    std::vector<double> z(l.data().begin(), l.data().end());
    return softmax(z);
  }

  int predict(const FrameMatrix& frames) const {
    const auto p = predict_proba(frames);
    return int(std::max_element(p.begin(), p.end()) - p.begin());
  }

 private:
  std::size_t classes_;
  nn::ParameterStore<float> store_;
  ProbeTrunk trunk_;
  nn::Linear<float> head_;
};

/// Dialect embedding network with real-speech centroids.
class SdeProbe {
 public:
  SdeProbe(std::size_t channels, std::size_t classes, const ProbeConfig& cfg) : classes_(classes) {
    Rng rng(cfg.seed, 0x5344'45ULL);
    trunk_ = ProbeTrunk(store_, "sde", channels, cfg.hidden, cfg.feature_scale, rng);
    head_ = nn::Linear<float>(store_, "sde.head", 2 * cfg.hidden, cfg.embed_dim, rng);
    // Fixed unit prototypes for the L1 objective.
    Rng prng(cfg.seed, 0x5052'4fULL);
    prototypes_ = Tensor<float>::matrix(classes, cfg.embed_dim);
    for (std::size_t c = 0; c < classes; ++c) {
      double n = 0;
      for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        prototypes_(c, j) = static_cast<float>(prng.normal());
        n += double(prototypes_(c, j)) * prototypes_(c, j);
      }
      for (std::size_t j = 0; j < cfg.embed_dim; ++j) prototypes_(c, j) = static_cast<float>(prototypes_(c, j) / std::sqrt(n));
    }
  }

  std::size_t classes() const { return classes_; }
  nn::ParameterStore<float>& params() { return store_; }
  const nn::ParameterStore<float>& params() const { return store_; }
  const Tensor<float>& prototypes() const { return prototypes_; }

  Var<float> embed(Tape<float>& tape, const FrameMatrix& frames) const {
    return nn::l2_normalize_rows(head_(tape, trunk_(tape, frames)));
  }

  Vec embedding(const FrameMatrix& frames) const {
    Tape<float> tape(false);
    const auto& e = embed(tape, frames).value();
    return Vec(e.data().begin(), e.data().end());
  }

  std::vector<Vec> centroids;

 private:
  std::size_t classes_;
  nn::ParameterStore<float> store_;
  ProbeTrunk trunk_;
  nn::Linear<float> head_;
  Tensor<float> prototypes_;
};

struct ClassificationMetrics {
  double accuracy = 0;
  double macro_f1 = 0;
  double weighted_f1 = 0;
  std::vector<std::vector<std::size_t>> confusion;
};

inline ClassificationMetrics classification_metrics(const std::vector<int>& truth, const std::vector<int>& pred,
                                                    std::size_t classes) {
  if (truth.size() != pred.size() || truth.empty()) throw EvalError("classification_metrics: bad input sizes");
  ClassificationMetrics m;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++m.confusion[std::size_t(truth[i])][std::size_t(pred[i])];
    correct += truth[i] == pred[i];
  }
  m.accuracy = double(correct) / double(truth.size());
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = m.confusion[c][c], support = 0, predicted = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      support += m.confusion[c][k];
      predicted += m.confusion[k][c];
    }
    const double prec = predicted ? double(tp) / double(predicted) : 0.0;
    const double rec = support ? double(tp) / double(support) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    m.macro_f1 += f1 / double(classes);
    m.weighted_f1 += f1 * double(support) / double(truth.size());
  }
  return m;
}

struct SdrReport {
  ClassificationMetrics held_out;
  /// Fraction of held-out utterances where the probe agrees with the generator-side oracle.
  double oracle_agreement = 0;
  bool converged = false;
};

namespace detail {

/// Balanced batch of train indices: slot j has dialect j mod K.
inline std::vector<std::size_t> balanced_batch(const std::vector<std::vector<std::size_t>>& by_dialect, std::size_t n,
                                               Rng& rng) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& pool = by_dialect[j % by_dialect.size()];
    out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> train_by_dialect(const corpus::Dataset& ds, std::size_t classes) {
  std::vector<std::vector<std::size_t>> by(classes);
  for (auto i : ds.indices(corpus::Split::kTrain)) by[std::size_t(ds.record(i).dialect_id)].push_back(i);
  for (const auto& p : by)
    if (p.empty()) throw EvalError("probe training: a dialect has no training utterances");
  return by;
}

}  // namespace detail

inline SdrReport evaluate_sdr(const SdrProbe& probe, const corpus::Dataset& ds, corpus::Split split) {
  std::vector<int> truth, pred;
  std::size_t agree = 0;
  const auto profiles = corpus::default_dialect_profiles();
  for (auto i : ds.indices(split)) {
    truth.push_back(ds.record(i).dialect_id);
    pred.push_back(probe.predict(ds.frames[i]));
    agree += pred.back() == corpus::dialect_oracle(ds.frames[i], profiles);
  }
  SdrReport r;
  r.held_out = classification_metrics(truth, pred, probe.classes());
  r.oracle_agreement = truth.empty() ? 0.0 : double(agree) / double(truth.size());
  return r;
}

/// Cross-entropy training on the train split; metrics on the held-out test split.
inline std::unique_ptr<SdrProbe> train_sdr_probe(const corpus::Dataset& ds, const ProbeConfig& cfg, SdrReport* report = nullptr) {
  cfg.validate();
  const std::size_t k = corpus::kDialectCount;
  auto probe = std::make_unique<SdrProbe>(ds.manifest.channels, k, cfg);
  nn::AdamW<float> opt({cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.lr_decay});
  const auto by = detail::train_by_dialect(ds, k);
  Rng rng(cfg.seed, 0x5344'5254ULL);
  for (std::size_t step = 0; step < cfg.sdr_steps; ++step) {
    const auto idx = detail::balanced_batch(by, cfg.batch_size, rng);
    probe->params().zero_grad();
    Tape<float> tape;
    std::vector<Var<float>> rows;
    std::vector<std::size_t> labels;
    for (auto i : idx) {
      rows.push_back(probe->logits(tape, ds.frames[i]));
      labels.push_back(std::size_t(ds.record(i).dialect_id));
    }
    auto stacked = nn::concat_rows(rows);
    auto loss = nn::cross_entropy_rows(stacked, labels);
    tape.backward(loss);
    opt.step(probe->params());
  }
  if (report) {
    *report = evaluate_sdr(*probe, ds, corpus::Split::kTest);
    report->converged = report->held_out.accuracy >= cfg.min_accuracy;
  }
  return probe;
}

struct SdeReport {
  double within_cosine = 0;
  double cross_cosine = 0;
  /// Largest pairwise cosine between centroids.
  double max_centroid_cosine = 0;
};

inline std::vector<Vec> compute_centroids(const SdeProbe& probe, const corpus::Dataset& ds, corpus::Split split) {
  std::vector<Vec> c(probe.classes());
  std::vector<std::size_t> n(probe.classes(), 0);
  for (auto i : ds.indices(split)) {
    const auto e = probe.embedding(ds.frames[i]);
    auto& acc = c[std::size_t(ds.record(i).dialect_id)];
    if (acc.empty()) acc.assign(e.size(), 0.0);
    for (std::size_t j = 0; j < e.size(); ++j) acc[j] += e[j];
    ++n[std::size_t(ds.record(i).dialect_id)];
  }
  for (auto& v : c) {
    if (v.empty()) throw EvalError("compute_centroids: a dialect has no utterances");
    const double norm = std::sqrt(dot(v, v));
    for (auto& x : v) x /= norm;
  }
  return c;
}

inline SdeReport evaluate_sde(const SdeProbe& probe, const corpus::Dataset& ds, corpus::Split split) {
  std::vector<Vec> e;
  std::vector<int> y;
  for (auto i : ds.indices(split)) {
    e.push_back(probe.embedding(ds.frames[i]));
    y.push_back(ds.record(i).dialect_id);
  }
  double ws = 0, cs = 0;
  std::size_t wn = 0, cn = 0;
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      const double c = dot(e[i], e[j]);
      if (y[i] == y[j]) {
        ws += c;
        ++wn;
      } else {
        cs += c;
        ++cn;
      }
    }
  SdeReport r;
  r.within_cosine = wn ? ws / double(wn) : 0.0;
  r.cross_cosine = cn ? cs / double(cn) : 0.0;
  r.max_centroid_cosine = -1.0;
  for (std::size_t a = 0; a < probe.centroids.size(); ++a)
    for (std::size_t b = a + 1; b < probe.centroids.size(); ++b)
      r.max_centroid_cosine = std::max(r.max_centroid_cosine, dot(probe.centroids[a], probe.centroids[b]));
  return r;
}

/// Supervised contrastive (or L1-to-prototype) training; centroids from real train embeddings.
inline std::unique_ptr<SdeProbe> train_sde_probe(const corpus::Dataset& ds, const ProbeConfig& cfg, SdeReport* report = nullptr) {
  cfg.validate();
  const std::size_t k = corpus::kDialectCount;
  auto probe = std::make_unique<SdeProbe>(ds.manifest.channels, k, cfg);
  nn::AdamW<float> opt({cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.lr_decay});
  const auto by = detail::train_by_dialect(ds, k);
  Rng rng(cfg.seed, 0x5344'4554ULL);
  for (std::size_t step = 0; step < cfg.sde_steps; ++step) {
    const auto idx = detail::balanced_batch(by, cfg.batch_size, rng);
    probe->params().zero_grad();
    Tape<float> tape;
    std::vector<Var<float>> cols;
    std::vector<int> labels;
    for (auto i : idx) {
      cols.push_back(probe->embed(tape, ds.frames[i]));
      labels.push_back(ds.record(i).dialect_id);
    }
    auto emb = nn::concat_rows(cols);  // B×E
    Var<float> loss;
    if (cfg.sde_objective == SdeObjective::kSupCon) {
      const std::size_t b = idx.size();
      // Similarity logits with the diagonal pushed far down so an anchor never matches itself.
      Tensor<float> mask = Tensor<float>::matrix(b, b);
      for (std::size_t i = 0; i < b; ++i) mask(i, i) = -1e4f;
      auto logits = nn::add(nn::scale(nn::matmul(emb, nn::transpose(emb)), static_cast<float>(1.0 / cfg.temperature)),
                            tape.constant(std::move(mask), "supcon_mask"));
      std::vector<std::size_t> anchors, positives;
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j)
          if (i != j && labels[i] == labels[j]) {
            anchors.push_back(i);
            positives.push_back(j);
          }
      loss = nn::cross_entropy_rows(nn::gather_rows(logits, anchors), positives);
    } else {
      std::vector<std::size_t> rows;
      for (int l : labels) rows.push_back(std::size_t(l));
      auto target = nn::gather_rows(tape.constant(probe->prototypes(), "prototypes"), rows);
      loss = nn::l1(emb, target);
    }
    tape.backward(loss);
    opt.step(probe->params());
  }
  probe->centroids = compute_centroids(*probe, ds, corpus::Split::kTrain);
  if (report) *report = evaluate_sde(*probe, ds, corpus::Split::kTest);
  return probe;
}

struct ProbeSet {
  ProbeConfig config;
  std::uint64_t corpus_hash = 0;
  std::unique_ptr<SdrProbe> sdr;
  std::unique_ptr<SdeProbe> sde;
  SdrReport sdr_report;
  SdeReport sde_report;
};

inline ProbeSet train_probes(const corpus::Dataset& ds, const ProbeConfig& cfg) {
  ProbeSet p;
  p.config = cfg;
  p.corpus_hash = ds.manifest.manifest_hash;
  p.sdr = train_sdr_probe(ds, cfg, &p.sdr_report);
  p.sde = train_sde_probe(ds, cfg, &p.sde_report);
  return p;
}

inline void save_probes(const ProbeSet& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto entries = nn::export_parameters(p.sdr->params());
  auto sde = nn::export_parameters(p.sde->params());
  entries.insert(entries.end(), sde.begin(), sde.end());
  nn::write_checkpoint(dir / "probes.fmsd", entries);
  Json j;
  j["probe"] = to_json(p.config);
  j["corpus_hash"] = hex64(p.corpus_hash);
  const auto& h = p.sdr_report.held_out;
  j["sdr_report"] = {{"accuracy", h.accuracy},
                     {"macro_f1", h.macro_f1},
                     {"weighted_f1", h.weighted_f1},
                     {"oracle_agreement", p.sdr_report.oracle_agreement},
                     {"converged", p.sdr_report.converged}};
  j["sde_report"] = {{"within_cosine", p.sde_report.within_cosine},
                     {"cross_cosine", p.sde_report.cross_cosine},
                     {"max_centroid_cosine", p.sde_report.max_centroid_cosine}};
  // Kept in double precision so a reloaded probe scores exactly like the trained one.
  j["sde_centroids"] = p.sde->centroids;
  atomic_write(dir / "probes.json", j.dump(2) + "\n");
}

inline ProbeSet load_probes(const std::filesystem::path& dir, std::size_t channels) {
  ProbeSet p;
  const auto j = Json::parse(read_file(dir / "probes.json"));
  StrictObject o(j, "");
  if (auto* c = o.child("probe")) p.config = probe_config_from_json(*c);
  std::string hash = "0";
  o.field("corpus_hash", hash);
  if (auto* r = o.child("sdr_report")) {
    StrictObject ro(*r, "sdr_report");
    auto& h = p.sdr_report.held_out;
    ro.field("accuracy", h.accuracy)
        .field("macro_f1", h.macro_f1)
        .field("weighted_f1", h.weighted_f1)
        .field("oracle_agreement", p.sdr_report.oracle_agreement)
        .field("converged", p.sdr_report.converged);
    ro.finish();
  }
  if (auto* r = o.child("sde_report")) {
    StrictObject ro(*r, "sde_report");
    ro.field("within_cosine", p.sde_report.within_cosine)
        .field("cross_cosine", p.sde_report.cross_cosine)
        .field("max_centroid_cosine", p.sde_report.max_centroid_cosine);
    ro.finish();
  }
  std::vector<Vec> centroids;
  o.field("sde_centroids", centroids);
  o.finish();
  p.corpus_hash = std::stoull(hash, nullptr, 16);
  const std::size_t k = corpus::kDialectCount;
  p.sdr = std::make_unique<SdrProbe>(channels, k, p.config);
  p.sde = std::make_unique<SdeProbe>(channels, k, p.config);
  const auto entries = nn::read_checkpoint(dir / "probes.fmsd");
  nn::import_parameters(p.sdr->params(), entries);
  nn::import_parameters(p.sde->params(), entries);
  p.sde->centroids = std::move(centroids);
  if (p.sde->centroids.size() != k) throw IoError("probe file has no centroids");
  return p;
}

}  // namespace fmsd::eval
