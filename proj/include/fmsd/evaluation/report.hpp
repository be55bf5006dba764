#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fmsd/evaluation/metrics.hpp"
#include "fmsd/evaluation/probes.hpp"
#include "fmsd/model/model.hpp"
#include "fmsd/synthcorpus/corpus.hpp"

namespace fmsd::eval {

struct EvalConfig {
  std::size_t steps = 32;
  std::uint64_t seed = 5;
  /// Parallel test items to synthesise (0 = all).
  std::size_t max_items = 0;
  std::size_t max_k = 10;
  double hop = 256;
  double sample_rate = 16000;
  double tsne_perplexity = 15;
  std::size_t tsne_iterations = 500;
  double tsne_learning_rate = 100;
  /// Parallel items rendered as images (real + one per dialect).
  std::size_t images = 1;

  void validate() const {
    if (steps == 0) throw ConfigError("eval config: steps must be at least 1");
    if (max_k == 0) throw ConfigError("eval config: max_k must be positive");
    if (!(hop > 0 && sample_rate > 0)) throw ConfigError("eval config: hop and sample_rate must be positive");
  }
};

inline Json to_json(const EvalConfig& c) {
  Json j;
  j["steps"] = c.steps;
  j["seed"] = c.seed;
  j["max_items"] = c.max_items;
  j["max_k"] = c.max_k;
  j["hop"] = c.hop;
  j["sample_rate"] = c.sample_rate;
  j["tsne_perplexity"] = c.tsne_perplexity;
  j["tsne_iterations"] = c.tsne_iterations;
  j["tsne_learning_rate"] = c.tsne_learning_rate;
  j["images"] = c.images;
  return j;
}

inline EvalConfig eval_config_from_json(const Json& j, const std::string& path = "eval") {
  EvalConfig c;
  StrictObject o(j, path);
  o.field("steps", c.steps)
      .field("seed", c.seed)
      .field("max_items", c.max_items)
      .field("max_k", c.max_k)
      .field("hop", c.hop)
      .field("sample_rate", c.sample_rate)
      .field("tsne_perplexity", c.tsne_perplexity)
      .field("tsne_iterations", c.tsne_iterations)
      .field("tsne_learning_rate", c.tsne_learning_rate)
      .field("images", c.images);
  o.finish();
  c.validate();
  return c;
}

/// One (text, speaker) pair of the parallel test split and its reference utterance.
struct ParallelItem {
  int speaker_id = 0;
  std::size_t index = 0;
  std::vector<int> tokens;
  /// Dataset index of the test record per dialect.
  std::vector<std::size_t> records;
  /// Dataset index of the reference (a validation utterance of the same speaker).
  std::size_t reference = 0;
  int reference_dialect = 0;
};

/// Groups the parallel test split. The reference for item i is a validation utterance of the same
/// speaker whose dialect cycles with i, so it carries no information about the requested dialect.
inline std::vector<ParallelItem> parallel_items(const corpus::Dataset& ds) {
  std::map<std::pair<int, std::size_t>, ParallelItem> items;
  for (auto i : ds.indices(corpus::Split::kTest)) {
    const auto& r = ds.record(i);
    auto& it = items[{r.speaker_id, r.index}];
    if (it.records.empty()) {
      it.speaker_id = r.speaker_id;
      it.index = r.index;
      it.tokens = r.token_ids;
      it.records.assign(corpus::kDialectCount, SIZE_MAX);
    } else if (it.tokens != r.token_ids) {
      throw EvalError("test split is not parallel for speaker " + std::to_string(r.speaker_id));
    }
    it.records[std::size_t(r.dialect_id)] = i;
  }
  std::map<std::pair<int, int>, std::vector<std::size_t>> val;
  for (auto i : ds.indices(corpus::Split::kVal)) val[{ds.record(i).speaker_id, ds.record(i).dialect_id}].push_back(i);
  std::vector<ParallelItem> out;
  std::size_t n = 0;
  for (auto& [key, it] : items) {
    for (auto r : it.records)
      if (r == SIZE_MAX) throw EvalError("test item without all three dialects");
    it.reference_dialect = int(n % corpus::kDialectCount);
    auto v = val.find({it.speaker_id, it.reference_dialect});
    if (v == val.end()) throw EvalError("no validation reference for speaker " + std::to_string(it.speaker_id));
    it.reference = v->second[(n / corpus::kDialectCount) % v->second.size()];
    out.push_back(std::move(it));
    ++n;
  }
  return out;
}

/// Machine-parsable "key value" report. Order of keys is fixed by insertion.
struct EvalReport {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<std::pair<std::string, double>> fields;

  void set(const std::string& k, double v) {
    for (auto& f : fields)
      if (f.first == k) {
        f.second = v;
        return;
      }
    fields.emplace_back(k, v);
  }
  double get(const std::string& k) const {
    for (const auto& f : fields)
      if (f.first == k) return f.second;
    throw EvalError("report has no field '" + k + "'");
  }
  bool has(const std::string& k) const {
    for (const auto& f : fields)
      if (f.first == k) return true;
    return false;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "# fmsd-eval-report";
    for (const auto& [k, v] : header) os << ' ' << k << '=' << v;
    os << '\n';
    os.precision(10);
    for (const auto& [k, v] : fields) os << k << ' ' << v << '\n';
    return os.str();
  }
};

inline EvalReport parse_report(const std::string& text) {
  EvalReport r;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string tok;
      while (hs >> tok) {
        const auto eq = tok.find('=');
        if (eq != std::string::npos) r.header.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
      }
      continue;
    }
    std::istringstream ls(line);
    std::string k;
    double v;
    if (!(ls >> k >> v)) throw EvalError("malformed report line '" + line + "'");
    r.fields.emplace_back(k, v);
  }
  return r;
}

/// Fields whose values depend on wall-clock time.
inline const std::set<std::string>& wall_clock_fields() {
  static const std::set<std::string> s = {"rtf_mean", "rtf_std", "synth_seconds"};
  return s;
}

/// Every report carries these keys.
inline std::vector<std::string> required_report_fields(std::size_t max_k = 1) {
  std::vector<std::string> k = {"items",         "syntheses",   "dca",          "dca_real",    "decs",
                                "decs_real",     "secs",        "secs_rank_rate", "duration_mae", "rtf_mean",
                                "rtf_std",       "synth_seconds", "sdr_accuracy", "sdr_macro_f1", "sdr_weighted_f1",
                                "sde_within",    "sde_cross"};
  for (std::size_t d = 0; d < corpus::kDialectCount; ++d) {
    const auto a = corpus::dialect_label(int(d));
    for (std::size_t e = 0; e < corpus::kDialectCount; ++e) {
      k.push_back("confusion_" + a + "_" + corpus::dialect_label(int(e)));
      k.push_back("softmax_" + a + "_" + corpus::dialect_label(int(e)));
    }
  }
  for (std::size_t i = 1; i <= max_k; ++i) k.push_back("inertia_k" + std::to_string(i));
  return k;
}

struct EvalArtifacts {
  EvalReport report;
  /// Synthesised frames per (item, dialect), item-major.
  std::vector<FrameMatrix> synth;
  std::vector<std::string> synth_ids;
  std::vector<Timing> timings;
  /// "id x y" lines of the 2-D projections of synthesised dialect embeddings.
  std::vector<std::string> pca_coordinates;
  std::vector<std::string> tsne_coordinates;
  /// (file name, frames) pairs to dump as images.
  std::vector<std::pair<std::string, FrameMatrix>> images;
  /// Speaker embeddings of the real parallel test set.
  std::vector<Vec> speaker_embeddings;
};

/// Runs the whole objective evaluation of one trained model.
template <typename T>
EvalArtifacts evaluate_model(const model::FmsdModel<T>& m, const corpus::Dataset& ds, const ProbeSet& probes,
                             const EvalConfig& cfg) {
  cfg.validate();
  auto items = parallel_items(ds);
  if (cfg.max_items && items.size() > cfg.max_items) items.resize(cfg.max_items);
  if (items.empty()) throw EvalError("evaluation: empty parallel test split");
  const std::size_t K = corpus::kDialectCount;
  EvalArtifacts a;
  std::vector<Vec> probs, sde_emb;
  std::vector<int> requested;
  std::vector<SecsPair> pairs;
  double dur_err = 0;
  std::size_t dur_n = 0;
  std::size_t rank_ok = 0;
  std::size_t item_no = 0;
  for (const auto& it : items) {
    const auto& ref = ds.frames[it.reference];
    const auto ref_emb = model::speaker_embedding(m, ref, cfg.seed);
    // Same-dialect references of every other test speaker, for the rank check.
    std::map<int, Vec> others;
    for (const auto& o : items)
      if (o.speaker_id != it.speaker_id && o.reference_dialect == it.reference_dialect && !others.count(o.speaker_id)) {
        others[o.speaker_id] = model::speaker_embedding(m, ds.frames[o.reference], cfg.seed);
      }
    const std::uint64_t seed = Rng::mix(cfg.seed ^ (std::uint64_t(it.speaker_id) << 32) ^ it.index);
    for (std::size_t d = 0; d < K; ++d) {
      auto r = model::synthesize(m, it.tokens, ref, int(d), {cfg.steps, seed});
      a.timings.push_back({r.seconds, r.frames.rows()});
      probs.push_back(probes.sdr->predict_proba(r.frames));
      sde_emb.push_back(probes.sde->embedding(r.frames));
      requested.push_back(int(d));
      const auto syn_emb = model::speaker_embedding(m, r.frames, cfg.seed);
      pairs.push_back({it.speaker_id, ref_emb, syn_emb, true});
      const double own = cosine(syn_emb, ref_emb);
      bool best = true;
      for (const auto& [sid, e] : others)
        if (cosine(syn_emb, e) >= own) best = false;
      rank_ok += best;
      const auto& gt = ds.record(it.records[d]).durations;
      for (std::size_t k = 0; k < gt.size(); ++k) {
        dur_err += std::abs(double(r.plan.counts[k]) - double(gt[k]));
        ++dur_n;
      }
      char id[64];
      std::snprintf(id, sizeof id, "s%03d-%05zu-%s", it.speaker_id, it.index, corpus::dialect_label(int(d)).c_str());
      a.synth_ids.push_back(id);
      if (item_no < cfg.images) a.images.emplace_back(std::string("synth-") + id + ".pgm", r.frames);
      a.synth.push_back(std::move(r.frames));
    }
    if (item_no < cfg.images) {
      for (std::size_t d = 0; d < K; ++d) {
        char id[64];
        std::snprintf(id, sizeof id, "real-s%03d-%05zu-%s.pgm", it.speaker_id, it.index, corpus::dialect_label(int(d)).c_str());
        a.images.emplace_back(id, ds.frames[it.records[d]]);
      }
    }
    ++item_no;
  }

  // Probe on the real counterparts of the same items.
  std::vector<Vec> real_probs, real_emb;
  std::vector<int> real_labels;
  for (const auto& it : items)
    for (std::size_t d = 0; d < K; ++d) {
      real_probs.push_back(probes.sdr->predict_proba(ds.frames[it.records[d]]));
      real_emb.push_back(probes.sde->embedding(ds.frames[it.records[d]]));
      real_labels.push_back(int(d));
      a.speaker_embeddings.push_back(model::speaker_embedding(m, ds.frames[it.records[d]], cfg.seed));
    }

  auto& rep = a.report;
  const auto dca = compute_dca(probs, requested, K);
  rep.set("items", double(items.size()));
  rep.set("syntheses", double(probs.size()));
  rep.set("dca", dca.percent);
  rep.set("dca_real", compute_dca(real_probs, real_labels, K).percent);
  rep.set("decs", compute_decs(sde_emb, requested, probes.sde->centroids));
  rep.set("decs_real", compute_decs(real_emb, real_labels, probes.sde->centroids));
  rep.set("secs", compute_secs(pairs).mean);
  rep.set("secs_rank_rate", double(rank_ok) / double(pairs.size()));
  rep.set("duration_mae", dur_n ? dur_err / double(dur_n) : 0.0);
  const auto rtf = compute_rtf(a.timings, cfg.hop, cfg.sample_rate);
  rep.set("rtf_mean", rtf.mean);
  rep.set("rtf_std", rtf.std);
  double secs = 0;
  for (const auto& t : a.timings) secs += t.seconds;
  rep.set("synth_seconds", secs);
  rep.set("sdr_accuracy", probes.sdr_report.held_out.accuracy);
  rep.set("sdr_macro_f1", probes.sdr_report.held_out.macro_f1);
  rep.set("sdr_weighted_f1", probes.sdr_report.held_out.weighted_f1);
  rep.set("sde_within", probes.sde_report.within_cosine);
  rep.set("sde_cross", probes.sde_report.cross_cosine);
  for (std::size_t d = 0; d < K; ++d) {
    const auto a_lab = corpus::dialect_label(int(d));
    for (std::size_t e = 0; e < K; ++e) {
      const auto b_lab = corpus::dialect_label(int(e));
      rep.set("confusion_" + a_lab + "_" + b_lab, double(dca.confusion[d][e]));
      rep.set("softmax_" + a_lab + "_" + b_lab, dca.softmax_means[d][e]);
    }
  }
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= std::min(cfg.max_k, a.speaker_embeddings.size()); ++k) ks.push_back(k);
  for (const auto& [k, v] : kmeans_inertia_curve(a.speaker_embeddings, ks, {8, 200, 1e-6, cfg.seed})) {
    rep.set("inertia_k" + std::to_string(k), v);
  }

  if (sde_emb.size() >= 3) {
    const auto pca = project_pca(sde_emb);
    const auto tsne = project_tsne(sde_emb, {cfg.tsne_perplexity, cfg.tsne_iterations, cfg.tsne_learning_rate, cfg.seed});
    std::ostringstream os;
    os.precision(8);
    for (std::size_t i = 0; i < sde_emb.size(); ++i) {
      os.str("");
      os << a.synth_ids[i] << ' ' << pca.coords[i][0] << ' ' << pca.coords[i][1];
      a.pca_coordinates.push_back(os.str());
    }
    for (std::size_t i = 0; i < sde_emb.size(); ++i) {
      os.str("");
      os << a.synth_ids[i] << ' ' << tsne[i][0] << ' ' << tsne[i][1];
      a.tsne_coordinates.push_back(os.str());
    }
  }
  return a;
}

/// Writes report.txt, the projection files and PGM images under dir.
inline void write_artifacts(const EvalArtifacts& a, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  atomic_write(dir / "report.txt", a.report.to_text());
  for (const auto& [name, lines] : {std::pair{"projection_pca.txt", &a.pca_coordinates},
                                    std::pair{"projection_tsne.txt", &a.tsne_coordinates}}) {
    std::string text = "# id x y\n";
    for (const auto& l : *lines) text += l + "\n";
    atomic_write(dir / name, text);
  }
  for (const auto& [name, f] : a.images) dump_mel_image(f, dir / "images" / name);
}

}  // namespace fmsd::eval
