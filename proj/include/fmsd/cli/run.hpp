#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fmsd/evaluation/report.hpp"
#include "fmsd/model/tokenizer.hpp"
#include "fmsd/training/train.hpp"

namespace fmsd::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

/// Bad command-line input (exit code 1).
class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Locations of inputs produced by earlier commands. Empty means "not given".
struct Paths {
  /// Corpus directory from gen-corpus. Empty: generate the corpus in memory from the corpus section.
  std::string corpus;
  /// Trained model directory (or an ablation root for eval).
  std::string checkpoint;
  /// Probe directory. Reused when it exists, otherwise written there after training.
  std::string probes;
};

struct RunConfig {
  corpus::CorpusConfig corpus;
  model::ModelConfig model;
  training::TrainConfig train;
  eval::ProbeConfig probe;
  eval::EvalConfig eval;
  Paths paths;

  void validate() const {
    corpus.validate();
    model.validate();
    train.validate();
    probe.validate();
    eval.validate();
    if (model.channels != corpus.channels) throw ConfigError("model.channels must equal corpus.channels");
    if (model.vocab_size != corpus.vocab_size) throw ConfigError("model.vocab_size must equal corpus.vocab_size");
  }
};

inline Json to_json(const RunConfig& c) {
  Json j;
  j["corpus"] = corpus::to_json(c.corpus);
  j["model"] = model::to_json(c.model);
  j["train"] = training::to_json(c.train);
  j["probe"] = eval::to_json(c.probe);
  j["eval"] = eval::to_json(c.eval);
  j["paths"] = {{"corpus", c.paths.corpus}, {"checkpoint", c.paths.checkpoint}, {"probes", c.paths.probes}};
  return j;
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  StrictObject o(j, "");
  if (auto* s = o.child("corpus")) c.corpus = corpus::corpus_config_from_json(*s);
  if (auto* s = o.child("model")) c.model = model::model_config_from_json(*s);
  if (auto* s = o.child("train")) c.train = training::train_config_from_json(*s);
  if (auto* s = o.child("probe")) c.probe = eval::probe_config_from_json(*s);
  if (auto* s = o.child("eval")) c.eval = eval::eval_config_from_json(*s);
  if (auto* s = o.child("paths")) {
    StrictObject p(*s, "paths");
    p.field("corpus", c.paths.corpus).field("checkpoint", c.paths.checkpoint).field("probes", c.paths.probes);
    p.finish();
  }
  o.finish();
  c.validate();
  return c;
}

/// Hash of everything that influences results; paths are excluded.
inline std::uint64_t config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("paths");
  return fnv1a(j.dump());
}

inline RunConfig load_run_config(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return run_config_from_json(j);
}

/// Reduced sizes for a quick end-to-end check: 200 training steps on a small corpus.
inline void apply_smoke(RunConfig& c) {
  c.corpus.train_speakers = std::min<std::size_t>(c.corpus.train_speakers, 8);
  c.corpus.test_speakers = std::min<std::size_t>(c.corpus.test_speakers, 4);
  c.corpus.train_per_dialect = std::min<std::size_t>(c.corpus.train_per_dialect, 120);
  c.corpus.val_per_dialect = std::min<std::size_t>(c.corpus.val_per_dialect, 12);
  c.corpus.test_per_dialect = std::min<std::size_t>(c.corpus.test_per_dialect, 12);
  c.train.max_steps = 200;
  c.train.checkpoint_every = 100;
  c.train.log_every = 10;
  c.probe.sdr_steps = std::min<std::size_t>(c.probe.sdr_steps, 150);
  c.probe.sde_steps = std::min<std::size_t>(c.probe.sde_steps, 150);
  c.eval.max_items = 12;
  c.eval.tsne_iterations = std::min<std::size_t>(c.eval.tsne_iterations, 250);
}

inline void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.corpus.seed = seed;
  c.train.seed = seed;
  c.probe.seed = seed;
  c.eval.seed = seed;
}

/// Writes config.json plus a config-hash line into an artifact directory.
inline void write_run_record(const RunConfig& c, const fs::path& dir) {
  fs::create_directories(dir);
  atomic_write(dir / "run_config.json", to_json(c).dump(2) + "\n");
  atomic_write(dir / "config_hash.txt", hex64(config_hash(c)) + "\n");
}

inline corpus::Dataset obtain_dataset(const RunConfig& c, std::ostream& log) {
  if (c.paths.corpus.empty()) {
    log << "generating corpus in memory\n";
    return corpus::generate_dataset(c.corpus);
  }
  auto ds = corpus::load_dataset(c.paths.corpus);
  if (ds.manifest.channels != c.model.channels) throw IoError("corpus channel count does not match model.channels");
  if (ds.manifest.config_hash != corpus::config_hash(c.corpus)) log << "warning: corpus was generated from a different corpus config\n";
  return ds;
}

inline std::string hash_line(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string s = "#";
  for (const auto& [k, v] : kv) s += " " + k + "=" + v;
  return s;
}

inline int cmd_defaults(const RunConfig& c, std::ostream& out) {
  out << to_json(c).dump(2) << "\n";
  return kOk;
}

inline int cmd_gen_corpus(const RunConfig& c, const fs::path& out_dir, std::ostream& out) {
  const auto m = corpus::gen_corpus(c.corpus, out_dir);
  write_run_record(c, out_dir);
  out << "records " << m.records.size() << "\n";
  out << "manifest_hash " << hex64(m.manifest_hash) << "\n";
  return kOk;
}

inline void print_train(const training::TrainResult& r, const std::string& label, std::ostream& out) {
  out << label << " step " << r.card.step << " checkpoint_hash " << hex64(r.checkpoint_hash) << "\n";
}

inline int cmd_train(const RunConfig& c, const fs::path& out_dir, bool resume, std::ostream& out, std::ostream& log) {
  const auto ds = obtain_dataset(c, log);
  write_run_record(c, out_dir);
  training::TrainOptions o;
  o.out_dir = out_dir;
  o.resume = resume;
  o.on_log = [&](const training::TrainLogRecord& r) { log << training::format_log_record(r) << "\n"; };
  const auto r = training::train_run(ds, c.model, c.train, o);
  print_train(r, r.card.variant.name(), out);
  return kOk;
}

inline int cmd_ablate(const RunConfig& c, const fs::path& out_dir, std::ostream& out, std::ostream& log) {
  const auto ds = obtain_dataset(c, log);
  write_run_record(c, out_dir);
  const auto runs = training::ablate(ds, c.model, c.train, out_dir, [&](const std::string& name, const training::TrainLogRecord& r) {
    log << name << " " << training::format_log_record(r) << "\n";
  });
  for (const auto& r : runs) print_train(r, r.card.variant.name(), out);
  return kOk;
}

struct SynthRequest {
  std::string text;
  std::string reference;
  std::string dialect;
  bool batch = false;
};

inline std::string timing_json(const RunConfig& c, std::uint64_t ckpt_hash, const eval::Timing& t) {
  Json j;
  j["config_hash"] = hex64(config_hash(c));
  j["checkpoint_hash"] = hex64(ckpt_hash);
  j["seconds"] = t.seconds;
  j["frames"] = t.frames;
  j["audio_seconds"] = eval::frames_to_seconds(t.frames, c.eval.hop, c.eval.sample_rate);
  j["rtf"] = t.seconds / j["audio_seconds"].get<double>();
  return j.dump(2) + "\n";
}

inline int cmd_synth(const RunConfig& c, const SynthRequest& req, const fs::path& out, std::ostream& o, std::ostream& log) {
  if (c.paths.checkpoint.empty()) throw UsageError("synth needs --checkpoint (or paths.checkpoint)");
  const auto lm = training::load_model(c.paths.checkpoint);
  const auto& m = *lm.model;
  if (!req.batch) {
    if (req.text.empty() || req.reference.empty() || req.dialect.empty())
      throw UsageError("synth needs --text, --reference and --dialect (or --batch)");
    int dialect = 0;
    std::vector<int> tokens;
    try {
      dialect = corpus::dialect_id(req.dialect);
      tokens = model::Tokenizer::syllables(lm.card.model.vocab_size).encode(req.text);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    const auto ref = corpus::read_frames(req.reference);
    const auto r = model::synthesize(m, tokens, ref, dialect, {c.eval.steps, c.eval.seed});
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    corpus::write_frames(out, r.frames);
    atomic_write(out.string() + ".timing.json", timing_json(c, lm.checkpoint_hash, {r.seconds, r.frames.rows()}));
    o << "frames " << r.frames.rows() << " seconds " << r.seconds << "\n";
    return kOk;
  }
  // One parallel triplet per test item of the corpus.
  const auto ds = obtain_dataset(c, log);
  auto items = eval::parallel_items(ds);
  if (c.eval.max_items && items.size() > c.eval.max_items) items.resize(c.eval.max_items);
  fs::create_directories(out);
  std::ostringstream tsv;
  tsv << hash_line({{"config_hash", hex64(config_hash(c))}, {"checkpoint_hash", hex64(lm.checkpoint_hash)}}) << "\n";
  tsv << "id\tframes\tseconds\n";
  std::vector<eval::Timing> timings;
  for (const auto& it : items) {
    const std::uint64_t seed = Rng::mix(c.eval.seed ^ (std::uint64_t(it.speaker_id) << 32) ^ it.index);
    for (std::size_t d = 0; d < corpus::kDialectCount; ++d) {
      const auto r = model::synthesize(m, it.tokens, ds.frames[it.reference], int(d), {c.eval.steps, seed});
      char id[64];
      std::snprintf(id, sizeof id, "s%03d-%05zu-%s", it.speaker_id, it.index, corpus::dialect_label(int(d)).c_str());
      corpus::write_frames(out / (std::string(id) + ".frm"), r.frames);
      tsv << id << "\t" << r.frames.rows() << "\t" << std::setprecision(9) << r.seconds << "\n";
      timings.push_back({r.seconds, r.frames.rows()});
    }
  }
  atomic_write(out / "timing.tsv", tsv.str());
  const auto rtf = eval::compute_rtf(timings, c.eval.hop, c.eval.sample_rate);
  o << "syntheses " << timings.size() << " rtf_mean " << rtf.mean << " rtf_std " << rtf.std << "\n";
  return kOk;
}

inline eval::ProbeSet obtain_probes(const RunConfig& c, const corpus::Dataset& ds, const fs::path& out_dir, std::ostream& log) {
  const fs::path dir = c.paths.probes.empty() ? out_dir / "probes" : fs::path(c.paths.probes);
  if (fs::exists(dir / "probes.json")) {
    auto p = eval::load_probes(dir, ds.manifest.channels);
    if (p.corpus_hash != ds.manifest.manifest_hash) throw IoError("probes in " + dir.string() + " were trained on another corpus");
    log << "loaded probes from " << dir.string() << "\n";
    return p;
  }
  log << "training probes\n";
  auto p = eval::train_probes(ds, c.probe);
  eval::save_probes(p, dir);
  return p;
}

inline eval::EvalArtifacts eval_one(const RunConfig& c, const fs::path& ckpt, const corpus::Dataset& ds, const eval::ProbeSet& probes,
                                    const fs::path& out_dir, std::ostream& log) {
  const auto lm = training::load_model(ckpt);
  if (lm.card.corpus_hash != ds.manifest.manifest_hash) log << "warning: model was trained on a different corpus\n";
  auto a = eval::evaluate_model(*lm.model, ds, probes, c.eval);
  a.report.header = {{"config_hash", hex64(config_hash(c))},
                     {"checkpoint_hash", hex64(lm.checkpoint_hash)},
                     {"corpus_hash", hex64(ds.manifest.manifest_hash)},
                     {"variant", lm.card.variant.name()}};
  eval::write_artifacts(a, out_dir);
  return a;
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> n{"full", "no_dialect_id", "no_dsdr", "neither"};
  return n;
}

/// Comparison of the four ablation reports in the expected order full > no_dialect_id > no_dsdr > neither.
inline eval::EvalReport ablation_summary(const std::vector<eval::EvalReport>& r) {
  eval::EvalReport s;
  s.header = {{"variants", "full,no_dialect_id,no_dsdr,neither"}};
  const auto& names = ablation_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (const char* k : {"dca", "decs", "secs", "secs_rank_rate"}) s.set(names[i] + "_" + k, r[i].get(k));
  }
  const double f = r[0].get("dca"), a = r[1].get("dca"), b = r[2].get("dca"), n = r[3].get("dca");
  s.set("dca_ordered", f > a && a > b && b > n ? 1.0 : 0.0);
  s.set("dca_gap_full_neither", f - n);
  s.set("dca_neither_minus_chance", n - 100.0 / 3.0);
  s.set("decs_gap_full_neither", r[0].get("decs") - r[3].get("decs"));
  bool elbow = true;
  for (std::size_t k = 1; r[0].has("inertia_k" + std::to_string(k)); ++k) {
    const auto key = "inertia_k" + std::to_string(k);
    if (!(r[0].get(key) < r[3].get(key))) elbow = false;
  }
  s.set("inertia_full_below_neither", elbow ? 1.0 : 0.0);
  return s;
}

inline int cmd_eval(const RunConfig& c, const fs::path& out_dir, std::ostream& out, std::ostream& log) {
  if (c.paths.checkpoint.empty()) throw UsageError("eval needs --checkpoint (or paths.checkpoint)");
  const fs::path ckpt = c.paths.checkpoint;
  const auto ds = obtain_dataset(c, log);
  write_run_record(c, out_dir);
  const auto probes = obtain_probes(c, ds, out_dir, log);
  if (fs::exists(ckpt / training::kModelFile)) {
    const auto a = eval_one(c, ckpt, ds, probes, out_dir, log);
    out << a.report.to_text();
    return kOk;
  }
  // An ablation root holds one model directory per variant.
  std::vector<eval::EvalReport> reports;
  for (const auto& name : ablation_names()) {
    if (!fs::exists(ckpt / name / training::kModelFile)) throw IoError("no model in " + ckpt.string() + " (nor an ablation set)");
    log << "evaluating " << name << "\n";
    reports.push_back(eval_one(c, ckpt / name, ds, probes, out_dir / name, log).report);
  }
  auto s = ablation_summary(reports);
  s.header.insert(s.header.begin(), {"config_hash", hex64(config_hash(c))});
  atomic_write(out_dir / "ablation.txt", s.to_text());
  out << s.to_text();
  return kOk;
}

/// Parses argv and runs one command. Output goes to out, progress and errors to log.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  CLI::App app{"Multi-dialect flow-matching speech synthesis toolkit"};
  app.require_subcommand(1);
  std::string config_path, out_path, corpus_path, ckpt_path, probes_path;
  std::optional<std::uint64_t> seed;
  bool smoke = false, resume = false;
  SynthRequest req;
  auto common = [&](CLI::App* s, bool needs_out) {
    s->add_option("--config", config_path, "Run config (JSON)")->check(CLI::ExistingFile);
    s->add_option("--seed", seed, "Override every seed in the config");
    s->add_flag("--smoke", smoke, "Small corpus and 200 training steps");
    if (needs_out) s->add_option("--out", out_path, "Output path")->required();
  };
  auto* defaults = app.add_subcommand("defaults", "Print the full default config");
  common(defaults, false);
  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus");
  common(gen, true);
  auto* train = app.add_subcommand("train", "Train one model");
  common(train, true);
  train->add_option("--corpus", corpus_path, "Corpus directory");
  train->add_flag("--resume", resume, "Continue from the checkpoint in --out");
  auto* abl = app.add_subcommand("ablate", "Train the four ablation variants");
  common(abl, true);
  abl->add_option("--corpus", corpus_path, "Corpus directory");
  auto* synth = app.add_subcommand("synth", "Synthesise frames");
  common(synth, true);
  synth->add_option("--checkpoint", ckpt_path, "Model directory");
  synth->add_option("--corpus", corpus_path, "Corpus directory (batch mode)");
  synth->add_option("--text", req.text, "Space-separated syllables");
  synth->add_option("--reference", req.reference, "Reference frame file");
  synth->add_option("--dialect", req.dialect, "Target dialect: wz, ad or kb");
  synth->add_flag("--batch", req.batch, "Parallel triplet for every test item");
  auto* ev = app.add_subcommand("eval", "Evaluate a model or an ablation set");
  common(ev, true);
  ev->add_option("--checkpoint", ckpt_path, "Model directory or ablation root");
  ev->add_option("--corpus", corpus_path, "Corpus directory");
  ev->add_option("--probes", probes_path, "Probe directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    log << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (smoke) apply_smoke(c);
    if (seed) apply_seed(c, *seed);
    if (!corpus_path.empty()) c.paths.corpus = corpus_path;
    if (!ckpt_path.empty()) c.paths.checkpoint = ckpt_path;
    if (!probes_path.empty()) c.paths.probes = probes_path;
    c.validate();
    if (*defaults) return cmd_defaults(c, out);
    if (*gen) return cmd_gen_corpus(c, out_path, out);
    if (*train) return cmd_train(c, out_path, resume, out, log);
    if (*abl) return cmd_ablate(c, out_path, out, log);
    if (*synth) return cmd_synth(c, req, out_path, out, log);
    return cmd_eval(c, out_path, out, log);
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace fmsd::cli
