#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fmsd/model/model.hpp"
#include "fmsd/numerics/checkpoint.hpp"
#include "fmsd/numerics/optim.hpp"
#include "fmsd/synthcorpus/corpus.hpp"

namespace fmsd::training {

using model::FmsdModel;
using model::ModelConfig;
using model::ModelVariant;
using nn::Tape;
using nn::Var;

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  /// Per-step multiplicative learning-rate decay (1 = constant).
  double lr_decay = 1.0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  std::size_t batch_size = 16;
  std::size_t max_steps = 20000;
  double lambda_dur = 1.0;
  double lambda_cfm = 1.0;
  double lambda_ref = 0.1;
  bool no_dsdr = false;
  bool no_dialect_id = false;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 10;

  ModelVariant variant() const { return {no_dsdr, no_dialect_id}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(lr >= 0.0)) fail("lr must be non-negative");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay must lie in (0, 1]");
    if (!(grad_clip >= 0.0)) fail("grad_clip must be non-negative");
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(lambda_dur >= 0.0 && lambda_cfm >= 0.0 && lambda_ref >= 0.0)) fail("loss weights must be non-negative");
    if (log_every == 0) fail("log_every must be positive");
  }
};

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["lr_decay"] = c.lr_decay;
  j["grad_clip"] = c.grad_clip;
  j["batch_size"] = c.batch_size;
  j["max_steps"] = c.max_steps;
  j["lambda_dur"] = c.lambda_dur;
  j["lambda_cfm"] = c.lambda_cfm;
  j["lambda_ref"] = c.lambda_ref;
  j["no_dsdr"] = c.no_dsdr;
  j["no_dialect_id"] = c.no_dialect_id;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["log_every"] = c.log_every;
  return j;
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& path = "train") {
  TrainConfig c;
  StrictObject o(j, path);
  o.field("lr", c.lr)
      .field("weight_decay", c.weight_decay)
      .field("beta1", c.beta1)
      .field("beta2", c.beta2)
      .field("lr_decay", c.lr_decay)
      .field("grad_clip", c.grad_clip)
      .field("batch_size", c.batch_size)
      .field("max_steps", c.max_steps)
      .field("lambda_dur", c.lambda_dur)
      .field("lambda_cfm", c.lambda_cfm)
      .field("lambda_ref", c.lambda_ref)
      .field("no_dsdr", c.no_dsdr)
      .field("no_dialect_id", c.no_dialect_id)
      .field("seed", c.seed)
      .field("checkpoint_every", c.checkpoint_every)
      .field("log_every", c.log_every);
  o.finish();
  c.validate();
  return c;
}

/// One training utterance with everything the loss needs.
struct TrainItem {
  std::vector<int> tokens;
  std::vector<int> durations;
  int dialect = 0;
  FrameMatrix frames;
  /// Already cropped to t_crop rows.
  FrameMatrix reference;
  /// Seeds the flow noise and the flow time of this item.
  std::uint64_t noise_seed = 0;
};

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double dur = 0;
  double cfm = 0;
  double ref = 0;
  double value = 0;
};

/// Per-item losses, exposed so callers can recompute the total independently.
template <typename T>
struct ItemLoss {
  Var<T> dur;
  Var<T> cfm;
  /// Absent (tape == nullptr) when the dialect embedding is ablated.
  Var<T> ref;
};

template <typename T>
ItemLoss<T> item_loss(Tape<T>& tape, const FmsdModel<T>& m, const TrainItem& item) {
  if (item.tokens.size() != item.durations.size()) throw std::invalid_argument("train item: tokens/durations mismatch");
  ItemLoss<T> out;
  const auto style = m.make_style(tape, item.reference, item.dialect);
  auto encoded = m.encode_text(tape, item.tokens, style, item.dialect);

  Tensor<T> log_target({item.durations.size(), 1});
  for (std::size_t i = 0; i < item.durations.size(); ++i) log_target[i] = static_cast<T>(std::log(double(item.durations[i])));
  out.dur = nn::mse(m.predict_log_durations(tape, encoded), tape.constant(std::move(log_target), "log_durations"));

  auto cond = m.frame_conditioning(tape, encoded, item.durations);
  const auto x1 = m.to_flow_domain(item.frames);
  if (x1.rows() != cond.rows()) throw std::invalid_argument("train item: frame count does not match durations");
  Rng rng(item.noise_seed, 0x4346'4dULL);
  Tensor<T> x0(x1.shape());
  for (auto& v : x0.data()) v = static_cast<T>(rng.normal());
  const double t = rng.uniform();
  auto [xt, ut] = model::cfm_training_target(x1, x0, t, m.config().sigma_min);
  auto v = m.velocity(tape, tape.constant(std::move(xt), "x_t"), t, cond, style.offset, item.dialect);
  out.cfm = nn::mse(v, tape.constant(std::move(ut), "u_t"));

  if (!m.variant().no_dialect_id) out.ref = m.reference_loss(tape, style.h_spk, style.h_did);
  return out;
}

/// Batch mean of λ_dur·L_dur + λ_cfm·L_cfm + λ_ref·L_ref, with each component averaged separately.
template <typename T>
LossBreakdown<T> total_loss(Tape<T>& tape, const FmsdModel<T>& m, const std::vector<TrainItem>& batch,
                            const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  LossBreakdown<T> r;
  const T inv = static_cast<T>(1.0 / double(batch.size()));
  std::vector<Var<T>> terms;
  for (const auto& item : batch) {
    auto l = item_loss(tape, m, item);
    r.dur += double(l.dur.item());
    r.cfm += double(l.cfm.item());
    auto term = nn::add(nn::scale(l.dur, static_cast<T>(cfg.lambda_dur)), nn::scale(l.cfm, static_cast<T>(cfg.lambda_cfm)));
    if (l.ref.tape) {
      r.ref += double(l.ref.item());
      if (cfg.lambda_ref != 0.0) term = nn::add(term, nn::scale(l.ref, static_cast<T>(cfg.lambda_ref)));
    }
    terms.push_back(term);
  }
  Var<T> acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = nn::add(acc, terms[i]);
  r.total = nn::scale(acc, inv);
  r.dur /= double(batch.size());
  r.cfm /= double(batch.size());
  r.ref /= double(batch.size());
  r.value = double(r.total.item());
  return r;
}

/// Mean and standard deviation of log(x + floor) over all training frames.
inline std::pair<double, double> feature_stats(const corpus::Dataset& ds, double floor) {
  double s = 0, ss = 0;
  std::size_t n = 0;
  for (auto i : ds.indices(corpus::Split::kTrain)) {
    for (float v : ds.frames[i].data()) {
      const double l = std::log(double(v) + floor);
      s += l;
      ss += l * l;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("feature_stats: no training frames");
  const double mean = s / double(n);
  return {mean, std::sqrt(std::max(ss / double(n) - mean * mean, 1e-12))};
}

/// Draws training batches: slot j takes dialect j mod K, a random utterance of that dialect,
/// and a reference crop from a random utterance of the same speaker in any dialect.
class BatchSampler {
 public:
  BatchSampler(const corpus::Dataset& ds, std::size_t t_crop, std::size_t n_dialects, std::uint64_t seed)
      : ds_(ds), t_crop_(t_crop), seed_(seed), by_dialect_(n_dialects) {
    for (auto i : ds.indices(corpus::Split::kTrain)) {
      const auto& r = ds.record(i);
      if (std::size_t(r.dialect_id) >= n_dialects) throw std::invalid_argument("corpus dialect exceeds model dialect count");
      by_dialect_[std::size_t(r.dialect_id)].push_back(i);
      by_speaker_[r.speaker_id].push_back(i);
    }
    for (std::size_t d = 0; d < by_dialect_.size(); ++d) {
      if (by_dialect_[d].empty()) throw std::invalid_argument("training split has no utterances for dialect " + std::to_string(d));
    }
  }

  /// Pure function of (seed, step).
  std::vector<TrainItem> batch(std::uint64_t step, std::size_t size) const {
    Rng rng(seed_, 0x4241'5443'48ULL ^ (step << 8));
    std::vector<TrainItem> out;
    for (std::size_t j = 0; j < size; ++j) {
      const auto& pool = by_dialect_[j % by_dialect_.size()];
      const std::size_t idx = pool[rng.below(pool.size())];
      const auto& rec = ds_.record(idx);
      const auto& refs = by_speaker_.at(rec.speaker_id);
      const std::size_t ref_idx = refs[rng.below(refs.size())];
      TrainItem it;
      it.tokens = rec.token_ids;
      it.durations = rec.durations;
      it.dialect = rec.dialect_id;
      it.frames = ds_.frames[idx];
      it.reference = model::crop_reference(ds_.frames[ref_idx], t_crop_, rng);
      it.noise_seed = rng.next_u64();
      out.push_back(std::move(it));
    }
    return out;
  }

 private:
  const corpus::Dataset& ds_;
  std::size_t t_crop_;
  std::uint64_t seed_;
  std::vector<std::vector<std::size_t>> by_dialect_;
  std::map<int, std::vector<std::size_t>> by_speaker_;
};

struct TrainLogRecord {
  std::uint64_t step = 0;
  double total = 0, dur = 0, cfm = 0, ref = 0;
  double grad_norm = 0;
  double lr = 0;
  double seconds = 0;
};

inline std::string format_log_record(const TrainLogRecord& r) {
  std::ostringstream os;
  os.precision(9);
  os << "step=" << r.step << " total=" << r.total << " dur=" << r.dur << " cfm=" << r.cfm << " ref=" << r.ref
     << " grad_norm=" << r.grad_norm << " lr=" << r.lr << " seconds=" << r.seconds;
  return os.str();
}

inline TrainLogRecord parse_log_record(const std::string& line) {
  TrainLogRecord r;
  std::istringstream is(line);
  std::string kv;
  while (is >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw IoError("malformed log field '" + kv + "'");
    const auto k = kv.substr(0, eq);
    const auto v = kv.substr(eq + 1);
    if (k == "step") r.step = std::stoull(v);
    else if (k == "total") r.total = std::stod(v);
    else if (k == "dur") r.dur = std::stod(v);
    else if (k == "cfm") r.cfm = std::stod(v);
    else if (k == "ref") r.ref = std::stod(v);
    else if (k == "grad_norm") r.grad_norm = std::stod(v);
    else if (k == "lr") r.lr = std::stod(v);
    else if (k == "seconds") r.seconds = std::stod(v);
  }
  return r;
}

inline std::vector<TrainLogRecord> read_train_log(const std::filesystem::path& path) {
  std::vector<TrainLogRecord> out;
  std::istringstream is(read_file(path));
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(parse_log_record(line));
  }
  return out;
}

inline const char* kCheckpointFile = "checkpoint.fmsd";
inline const char* kModelFile = "model.json";
inline const char* kLogFile = "train_log.txt";

/// Model, variant and provenance stored next to a checkpoint.
struct ModelCard {
  ModelConfig model;
  ModelVariant variant;
  TrainConfig train;
  std::uint64_t corpus_hash = 0;
  std::uint64_t step = 0;
};

inline Json to_json(const ModelCard& c) {
  Json j;
  j["model"] = model::to_json(c.model);
  j["variant"] = {{"no_dsdr", c.variant.no_dsdr}, {"no_dialect_id", c.variant.no_dialect_id}};
  j["train"] = to_json(c.train);
  j["corpus_hash"] = hex64(c.corpus_hash);
  j["step"] = c.step;
  return j;
}

inline ModelCard model_card_from_json(const Json& j) {
  ModelCard c;
  StrictObject o(j, "");
  if (auto* m = o.child("model")) c.model = model::model_config_from_json(*m);
  if (auto* v = o.child("variant")) {
    StrictObject vo(*v, "variant");
    vo.field("no_dsdr", c.variant.no_dsdr).field("no_dialect_id", c.variant.no_dialect_id);
    vo.finish();
  }
  if (auto* t = o.child("train")) c.train = train_config_from_json(*t);
  std::string hash = "0";
  o.field("corpus_hash", hash).field("step", c.step);
  o.finish();
  c.corpus_hash = std::stoull(hash, nullptr, 16);
  return c;
}

struct LoadedModel {
  ModelCard card;
  std::unique_ptr<FmsdModel<float>> model;
  std::uint64_t checkpoint_hash = 0;
};

inline LoadedModel load_model(const std::filesystem::path& dir) {
  LoadedModel lm;
  lm.card = model_card_from_json(Json::parse(read_file(dir / kModelFile)));
  lm.model = std::make_unique<FmsdModel<float>>(lm.card.model, lm.card.variant, lm.card.train.seed);
  const auto bytes = read_file(dir / kCheckpointFile);
  lm.checkpoint_hash = fnv1a(bytes);
  nn::import_parameters(lm.model->params(), nn::decode_checkpoint(bytes, (dir / kCheckpointFile).string()));
  return lm;
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool resume = false;
  /// Called for every logged record.
  std::function<void(const TrainLogRecord&)> on_log;
};

struct TrainResult {
  ModelCard card;
  std::unique_ptr<FmsdModel<float>> model;
  std::vector<TrainLogRecord> log;
  std::uint64_t checkpoint_hash = 0;
};

inline std::string checkpoint_bytes(const FmsdModel<float>& m, const nn::AdamW<float>& opt) {
  auto entries = nn::export_parameters(m.params());
  auto o = nn::export_optimizer(opt, m.params());
  entries.insert(entries.end(), o.begin(), o.end());
  return nn::encode_checkpoint(entries);
}

/// Deterministic training loop. Batches depend only on (seed, step), so a resumed run follows
/// the same trajectory as an uninterrupted one.
inline TrainResult train_run(const corpus::Dataset& ds, ModelConfig mcfg, const TrainConfig& cfg, TrainOptions opt = {}) {
  cfg.validate();
  const auto [mean, sd] = feature_stats(ds, mcfg.feature_floor);
  mcfg.feature_mean = mean;
  mcfg.feature_std = sd;
  if (ds.manifest.channels != mcfg.channels) {
    throw ConfigError("model channels (" + std::to_string(mcfg.channels) + ") differ from corpus channels (" +
                      std::to_string(ds.manifest.channels) + ")");
  }
  TrainResult res;
  res.card = {mcfg, cfg.variant(), cfg, ds.manifest.manifest_hash, 0};
  res.model = std::make_unique<FmsdModel<float>>(mcfg, cfg.variant(), cfg.seed);
  auto& m = *res.model;
  nn::AdamW<float> adam({cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.lr_decay});
  const bool to_disk = !opt.out_dir.empty();
  std::uint64_t start = 0;
  if (to_disk) {
    std::filesystem::create_directories(opt.out_dir);
    if (opt.resume && std::filesystem::exists(opt.out_dir / kCheckpointFile)) {
      const auto old = model_card_from_json(Json::parse(read_file(opt.out_dir / kModelFile)));
      if (old.corpus_hash != ds.manifest.manifest_hash) throw ConfigError("resume: checkpoint was trained on a different corpus");
      const auto entries = nn::read_checkpoint(opt.out_dir / kCheckpointFile);
      nn::import_parameters(m.params(), entries);
      nn::import_optimizer(adam, m.params(), entries);
      start = adam.state().step;
      if (std::filesystem::exists(opt.out_dir / kLogFile)) res.log = read_train_log(opt.out_dir / kLogFile);
    } else {
      std::ostringstream head;
      head << "# fmsd-train-log config_hash=" << hex64(fnv1a(to_json(cfg).dump())) << " corpus_hash="
           << hex64(ds.manifest.manifest_hash) << " variant=" << cfg.variant().name() << "\n";
      atomic_write(opt.out_dir / kLogFile, head.str());
    }
  }

  auto save = [&](std::uint64_t step) {
    res.card.step = step;
    const auto bytes = checkpoint_bytes(m, adam);
    res.checkpoint_hash = fnv1a(bytes);
    if (!to_disk) return;
    atomic_write(opt.out_dir / kCheckpointFile, bytes);
    atomic_write(opt.out_dir / kModelFile, to_json(res.card).dump(2) + "\n");
  };
  std::string pending_log;
  auto flush_log = [&] {
    if (!to_disk || pending_log.empty()) return;
    std::ofstream f(opt.out_dir / kLogFile, std::ios::app | std::ios::binary);
    f << pending_log;
    if (!f) throw IoError("cannot append to " + (opt.out_dir / kLogFile).string());
    pending_log.clear();
  };

  BatchSampler sampler(ds, mcfg.t_crop, mcfg.n_dialects, cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t step = start + 1; step <= cfg.max_steps; ++step) {
    const double lr = adam.current_lr();
    const auto batch = sampler.batch(step, cfg.batch_size);
    m.params().zero_grad();
    double gnorm = 0;
    LossBreakdown<float> lb;
    {
      Tape<float> tape;
      lb = total_loss(tape, m, batch, cfg);
      tape.backward(lb.total);
      gnorm = nn::clip_grad_norm(m.params(), cfg.grad_clip);
    }
    adam.step(m.params());
    if (step % cfg.log_every == 0 || step == 1 || step == cfg.max_steps) {
      TrainLogRecord rec{step, lb.value, lb.dur, lb.cfm, lb.ref, gnorm, lr,
                         std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      res.log.push_back(rec);
      pending_log += format_log_record(rec) + "\n";
      if (opt.on_log) opt.on_log(rec);
    }
    if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0 && step != cfg.max_steps) {
      flush_log();
      save(step);
    }
  }
  flush_log();
  save(std::max<std::uint64_t>(start, cfg.max_steps));
  return res;
}

/// The four ablation variants, all from the same seed and corpus.
inline std::vector<TrainConfig> ablation_configs(const TrainConfig& base) {
  std::vector<TrainConfig> out;
  for (auto [dsdr, did] : {std::pair{false, false}, {true, false}, {false, true}, {true, true}}) {
    auto c = base;
    c.no_dsdr = dsdr;
    c.no_dialect_id = did;
    out.push_back(c);
  }
  return out;
}

inline std::vector<TrainResult> ablate(const corpus::Dataset& ds, const ModelConfig& mcfg, const TrainConfig& base,
                                       const std::filesystem::path& out_root = {},
                                       std::function<void(const std::string&, const TrainLogRecord&)> on_log = {}) {
  std::vector<TrainResult> out;
  for (const auto& c : ablation_configs(base)) {
    TrainOptions o;
    if (!out_root.empty()) o.out_dir = out_root / c.variant().name();
    if (on_log) o.on_log = [&, name = c.variant().name()](const TrainLogRecord& r) { on_log(name, r); };
    out.push_back(train_run(ds, mcfg, c, o));
  }
  return out;
}

}  // namespace fmsd::training
