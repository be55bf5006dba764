// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any criterion fails.
// Usage: acceptance [artifact_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "fmsd/cli/run.hpp"
#include "fmsd/numerics/grad_check.hpp"

using namespace fmsd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

std::map<int, std::string> results;
int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  char head[32];
  std::snprintf(head, sizeof head, "criterion %2d: %s  ", id, ok ? "PASS" : "FAIL");
  results[id] = head + detail;
  std::cout << results[id] << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename... A>
std::string fmt(const char* f, A... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.vocab_size = 10;
  c.channels = 4;
  c.d_model = 4;
  c.speaker_dim = 6;
  c.dialect_dim = 4;
  c.dsdr_ffn_dim = 5;
  c.n_dsdr_blocks = 1;
  c.t_crop = 5;
  c.ref_hidden = 3;
  c.dur_hidden = 3;
  c.dec_hidden = 4;
  c.dec_layers = 1;
  c.time_embed_dim = 4;
  return c;
}

FrameMatrix random_frames(std::size_t rows, std::size_t cols, Rng& rng) {
  auto f = FrameMatrix::matrix(rows, cols);
  for (auto& v : f.data()) v = static_cast<float>(rng.uniform(0.05, 1.0));
  return f;
}

Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  auto t = Tensor<double>::matrix(r, c);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

double norm(const Tensor<double>& t) {
  return std::sqrt(std::inner_product(t.data().begin(), t.data().end(), t.data().begin(), 0.0));
}

training::TrainItem two_token_item(int dialect, std::uint64_t seed) {
  Rng rng(seed);
  training::TrainItem item;
  item.tokens = {3, 8};
  item.durations = {2, 4};
  item.dialect = dialect;
  item.frames = random_frames(6, 4, rng);
  item.reference = random_frames(5, 4, rng);
  item.noise_seed = seed + 1;
  return item;
}

void gradient_integrity() {
  const auto t0 = Clock::now();
  model::FmsdModel<double> m(tiny_model(), {}, 21);
  const auto item = two_token_item(0, 30);
  training::TrainConfig cfg;
  cfg.lambda_ref = 0.5;
  auto build = [&](nn::Tape<double>& t) { return training::total_loss(t, m, {item}, cfg).total; };
  const auto r = nn::grad_check(m.params(), build, {.eps = 1e-5, .abs_floor = 1e-6});
  const double secs = seconds_since(t0);
  report(1, r.max_rel_error < 1e-4 && secs < 60.0,
         fmt("max_rel_error=%.3g over %.0f coordinates in %.0f parameter groups, %.1f s", r.max_rel_error, double(r.coords),
             double(r.per_param.size()), secs) +
             " worst=" + r.worst_param);
}

void routing_isolation() {
  bool ok = true;
  std::size_t checked = 0;
  model::FmsdModel<double> m(tiny_model(), {}, 4);
  training::TrainConfig cfg;
  for (int d = 0; d < 3; ++d) {
    m.params().zero_grad();
    nn::Tape<double> tape;
    const auto loss = training::total_loss(tape, m, {two_token_item(d, 50 + d), two_token_item(d, 60 + d)}, cfg).total;
    tape.backward(loss);
    for (auto& p : m.params()) {
      const auto pos = p->name.find(".private");
      if (pos == std::string::npos) continue;
      const int k = p->name[pos + 8] - '0';
      const double n = norm(p->grad);
      if (k == d ? !(n > 0.0) : n != 0.0) ok = false;
      ++checked;
    }
  }
  // Zero private FFNs against a block that has none.
  nn::ParameterStore<double> s_routed, s_public;
  Rng r1(11), r2(11), rng(4);
  model::DsdrBlock<double> routed(s_routed, "b", 8, 12, 2, 3, true, r1, true);
  model::DsdrBlock<double> plain(s_public, "b", 8, 12, 2, 3, false, r2);
  for (auto& p : s_public) s_routed.get(p->name).value = p->value;
  bool same = true;
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = random_matrix(1 + rng.below(9), 8, rng);
    for (int d = 0; d < 3; ++d) {
      nn::Tape<double> a(false), b(false);
      same = same && model::dsdr_forward(a, a.constant(h), d, routed).value() == model::dsdr_forward(b, b.constant(h), d, plain).value();
    }
  }
  report(2, ok && same,
         fmt("%zu private tensors checked, selected nonzero and others bitwise zero: %s; zero-private == public-only bit-exact: %s",
             checked, ok ? "yes" : "no", same ? "yes" : "no"));
}

void normalization_suite() {
  model::FmsdModel<double> m(tiny_model(), {}, 7);
  Rng rng(12);
  double worst_spk = 0, worst_did = 0;
  for (int i = 0; i < 1000; ++i) {
    nn::Tape<double> tape(false);
    const auto f = random_frames(5, 4, rng);
    worst_spk = std::max(worst_spk, std::abs(norm(m.encode_speaker(tape, f).value()) - 1.0));
  }
  for (int i = 0; i < 1000; ++i) {
    model::FmsdModel<double> mi(tiny_model(), {}, 1000 + std::uint64_t(i));
    nn::Tape<double> tape(false);
    worst_did = std::max(worst_did, std::abs(norm(mi.embed_dialect(tape, int(rng.below(3))).value()) - 1.0));
  }
  bool time_invariant = true;
  for (int i = 0; i < 50; ++i) {
    nn::Tape<double> tape(false);
    const auto text = random_matrix(1 + rng.below(20), 4, rng);
    auto h_spk = m.encode_speaker(tape, random_frames(5, 4, rng));
    auto h_did = m.embed_dialect(tape, int(rng.below(3)));
    const auto fused = m.fuse_style(tape, tape.constant(text), h_spk, h_did).value();
    const auto off = m.style_offset(tape, h_spk, h_did).value();
    for (std::size_t r = 0; r < text.rows(); ++r)
      for (std::size_t c = 0; c < 4; ++c) time_invariant = time_invariant && fused(r, c) == text(r, c) + off(0, c);
  }
  bool conserved = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(16);
    std::vector<double> logd;
    for (std::size_t i = 0; i < n; ++i) logd.push_back(rng.uniform(-2.0, 3.0));
    const auto plan = model::make_plan(logd);
    nn::Tape<double> t(false);
    const auto out = model::upsample(t.constant(random_matrix(n, 3, rng)), plan.counts);
    conserved = conserved && out.rows() == std::size_t(std::accumulate(plan.counts.begin(), plan.counts.end(), 0));
  }
  report(3, worst_spk < 1e-6 && worst_did < 1e-6 && time_invariant && conserved,
         fmt("max |norm-1|: h_spk %.2g, h_did %.2g (1000 inputs each)", worst_spk, worst_did) +
             "; offset time-invariant: " + (time_invariant ? "yes" : "no") + "; upsample conserves durations on 1000 plans: " +
             (conserved ? "yes" : "no"));
}

struct Desk {
  cli::RunConfig cfg;
  corpus::Dataset ds;
  eval::ProbeSet probes;
  double probe_seconds = 0;
  std::vector<training::TrainResult> runs;
  std::vector<eval::EvalArtifacts> evals;
};

/// Moving average of the logged CFM loss over steps in [lo, hi].
double cfm_average(const std::vector<training::TrainLogRecord>& log, std::uint64_t lo, std::uint64_t hi) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : log)
    if (r.step >= lo && r.step <= hi) {
      s += r.cfm;
      ++n;
    }
  return n ? s / double(n) : std::nan("");
}

void desk_experiments(Desk& d, const fs::path& dir) {
  d.ds = corpus::generate_dataset(d.cfg.corpus);
  const auto t0 = Clock::now();
  d.probes = eval::train_probes(d.ds, d.cfg.probe);
  d.probe_seconds = seconds_since(t0);
  const auto& h = d.probes.sdr_report.held_out;
  report(7, h.accuracy >= 0.99 && h.macro_f1 >= 0.99 && d.probe_seconds < 600,
         fmt("SDR held-out accuracy %.2f%%, macro-F1 %.2f%%, probe training %.0f s", 100 * h.accuracy, 100 * h.macro_f1,
             d.probe_seconds));

  std::cout << "training the four ablation variants (" << d.cfg.train.max_steps << " steps each)" << std::endl;
  d.runs = training::ablate(d.ds, d.cfg.model, d.cfg.train, dir / "ablation");
  for (const auto& r : d.runs) {
    std::cout << "evaluating " << r.card.variant.name() << std::endl;
    d.evals.push_back(eval::evaluate_model(*r.model, d.ds, d.probes, d.cfg.eval));
    eval::write_artifacts(d.evals.back(), dir / "eval" / r.card.variant.name());
  }
}

void ablation_criteria(const Desk& d) {
  std::vector<eval::EvalReport> reps;
  for (const auto& e : d.evals) reps.push_back(e.report);
  const auto s = cli::ablation_summary(reps);
  const double full = s.get("full_dca"), a = s.get("no_dialect_id_dca"), b = s.get("no_dsdr_dca"), n = s.get("neither_dca");
  const bool ordered = s.get("dca_ordered") == 1.0;
  const bool gap = full - n >= 30.0, chance = std::abs(n - 100.0 / 3.0) <= 10.0;
  report(4, ordered && gap && chance,
         fmt("DCA full %.2f, no_dialect_id %.2f, no_dsdr %.2f, neither %.2f", full, a, b, n) +
             "; strict ordering: " + (ordered ? "yes" : "no") + fmt("; full-neither %.2f; neither-chance %.2f", full - n, n - 100.0 / 3.0));
  const double decs_gap = s.get("decs_gap_full_neither");
  report(5, decs_gap >= 0.2,
         fmt("DECS full %.3f, neither %.3f, gap %.3f", s.get("full_decs"), s.get("neither_decs"), decs_gap));
  const double rank = reps[0].get("secs_rank_rate");
  report(6, rank >= 0.9, fmt("full model: own-reference cosine beats every other speaker for %.1f%% of syntheses (SECS %.3f)",
                             100 * rank, reps[0].get("secs")));
  const auto& t = d.evals[0].timings;
  const auto rtf = eval::compute_rtf(t, d.cfg.eval.hop, d.cfg.eval.sample_rate);
  report(8, t.size() >= 100 && rtf.mean < 1.0, fmt("RTF %.4f +- %.4f over %.0f syntheses", rtf.mean, rtf.std, double(t.size())));
}

void clustering_suite(const Desk& d) {
  const auto& rep = d.evals[0].report;
  bool monotone = true;
  std::string curve;
  for (std::size_t k = 1; k <= d.cfg.eval.max_k; ++k) {
    const double v = rep.get("inertia_k" + std::to_string(k));
    if (k > 1 && v > rep.get("inertia_k" + std::to_string(k - 1))) monotone = false;
    curve += fmt(k == 1 ? "%.4g" : ",%.4g", v);
  }
  // k = N on the trained speaker embeddings.
  const auto& emb = d.evals[0].speaker_embeddings;
  std::vector<eval::Vec> subset(emb.begin(), emb.begin() + std::min<std::ptrdiff_t>(12, std::ptrdiff_t(emb.size())));
  const double kn = eval::kmeans(subset, subset.size()).inertia;
  // Four-point fixture against exhaustive search.
  const std::vector<eval::Vec> pts{{0, 0}, {1, 0}, {0, 3}, {5, 5}};
  double brute = std::numeric_limits<double>::infinity();
  for (unsigned mask = 1; mask < 15; ++mask) {
    double ss = 0;
    for (unsigned side = 0; side < 2; ++side) {
      eval::Vec c{0, 0};
      double cnt = 0;
      for (unsigned i = 0; i < 4; ++i)
        if ((mask >> i & 1) == side) c[0] += pts[i][0], c[1] += pts[i][1], ++cnt;
      c[0] /= cnt;
      c[1] /= cnt;
      for (unsigned i = 0; i < 4; ++i)
        if ((mask >> i & 1) == side) ss += eval::sq_dist(pts[i], c);
    }
    brute = std::min(brute, ss);
  }
  const double km2 = eval::kmeans(pts, 2).inertia;
  // PCA on a planar fixture.
  Rng rng(4);
  std::vector<eval::Vec> plane;
  for (int i = 0; i < 40; ++i) {
    const double a = 3 * rng.normal(), b = rng.normal();
    plane.push_back({1 + a, -2 + a + b, 3 - b, 0.5 + 2 * b, 7 + a});
  }
  const auto pca = eval::project_pca(plane);
  double rec_err = 0;
  for (std::size_t i = 0; i < plane.size(); ++i)
    for (std::size_t j = 0; j < 5; ++j)
      rec_err = std::max(rec_err, std::abs(pca.mean[j] + pca.coords[i][0] * pca.components[0][j] +
                                           pca.coords[i][1] * pca.components[1][j] - plane[i][j]));
  const bool ok = monotone && kn == 0.0 && std::abs(km2 - brute) < 1e-12 && rec_err < 1e-9;
  report(9, ok, "inertia k=1.." + std::to_string(d.cfg.eval.max_k) + " [" + curve + "] non-increasing: " + (monotone ? "yes" : "no") +
                    fmt("; k=N inertia %.3g; 4-point k=2 %.6g vs brute force %.6g; PCA reconstruction %.2g", kn, km2, brute, rec_err));
}

std::string strip_wall_clock(const std::string& report) {
  std::istringstream is(report);
  std::string line, out;
  while (std::getline(is, line))
    if (!eval::wall_clock_fields().count(line.substr(0, line.find(' ')))) out += line + "\n";
  return out;
}

std::string batch_frames(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".frm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.filename().string() + read_file(f);
  return all;
}

void determinism(const fs::path& dir) {
  auto cfg = cli::load_run_config(FMSD_SOURCE_DIR "/configs/smoke.json");
  cfg.train.max_steps = 500;
  cfg.eval.max_items = 6;
  fs::create_directories(dir);
  atomic_write(dir / "config.json", cli::to_json(cfg).dump(2));
  const std::string config = (dir / "config.json").string();
  struct Out {
    std::string manifest, checkpoint, frames, report;
    bool ok = true;
  };
  auto pipeline = [&](const std::string& name) {
    const auto root = dir / name;
    fs::remove_all(root);
    auto p = [&](const char* rel) { return (root / rel).string(); };
    std::vector<std::vector<std::string>> cmds{
        {"gen-corpus", "--config", config, "--seed", "17", "--out", p("corpus")},
        {"train", "--config", config, "--seed", "17", "--corpus", p("corpus"), "--out", p("model")},
        {"synth", "--config", config, "--seed", "17", "--corpus", p("corpus"), "--checkpoint", p("model"), "--batch", "--out", p("synth")},
        {"eval", "--config", config, "--seed", "17", "--corpus", p("corpus"), "--checkpoint", p("model"), "--out", p("eval")}};
    Out o;
    for (auto args : cmds) {
      args.insert(args.begin(), "fmsd");
      std::vector<const char*> argv;
      for (const auto& a : args) argv.push_back(a.c_str());
      std::ostringstream out, log;
      if (cli::run(int(argv.size()), argv.data(), out, log) != 0) {
        std::cout << log.str();
        o.ok = false;
        return o;
      }
    }
    o.manifest = read_file(root / "corpus" / "manifest.tsv");
    o.checkpoint = read_file(root / "model" / training::kCheckpointFile);
    o.frames = batch_frames(root / "synth");
    o.report = strip_wall_clock(read_file(root / "eval" / "report.txt"));
    return o;
  };
  const auto t0 = Clock::now();
  const auto a = pipeline("run_a");
  const auto b = pipeline("run_b");
  const bool ok = a.ok && b.ok && a.manifest == b.manifest && a.checkpoint == b.checkpoint && a.frames == b.frames &&
                  a.report == b.report;
  report(10, ok, std::string("two seeded runs (gen-corpus, train 500 steps, synth, eval): ") +
                     (a.ok && b.ok ? "" : "a command failed; ") + "manifest " + (a.manifest == b.manifest ? "equal" : "differs") +
                     ", checkpoint " + (a.checkpoint == b.checkpoint ? "equal" : "differs") + ", frames " +
                     (a.frames == b.frames ? "equal" : "differs") + ", report " + (a.report == b.report ? "equal" : "differs") +
                     fmt(" (%.0f s)", seconds_since(t0)));
}

void cfm_sanity(const Desk& d) {
  Rng rng(3);
  const auto x1 = random_matrix(6, 5, rng), x0 = random_matrix(6, 5, rng);
  const auto [at0, u0] = model::cfm_training_target(x1, x0, 0.0, 0.0);
  const auto [at1, u1] = model::cfm_training_target(x1, x0, 1.0, 0.0);
  bool exact = at0 == x0 && at1 == x1;
  for (std::size_t i = 0; i < x1.size(); ++i) exact = exact && u0[i] == x1[i] - x0[i];
  const auto& log = d.runs[0].log;
  const std::uint64_t last = log.back().step;
  const double early = cfm_average(log, 51, 150);
  const double late = cfm_average(log, last - 99, last);
  const double drop = 1.0 - late / early;
  const double dca = d.evals[0].report.get("dca");
  report(11, exact && drop >= 0.5 && dca >= 90.0,
         std::string("endpoints exact: ") + (exact ? "yes" : "no") +
             fmt("; CFM moving average %.4f (steps 51-150) -> %.4f (last 100 steps), drop %.1f%%; %.0f-step DCA %.2f%%", early,
                 late, 100 * drop, double(d.cfg.eval.steps), dca));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_artifacts");
  fs::create_directories(dir);
  try {
    gradient_integrity();
    routing_isolation();
    normalization_suite();
    Desk d;
    d.cfg = cli::load_run_config(FMSD_SOURCE_DIR "/configs/toy.json");
    desk_experiments(d, dir);
    ablation_criteria(d);
    clustering_suite(d);
    determinism(dir / "determinism");
    cfm_sanity(d);
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << "\nsummary\n";
  for (const auto& [id, line] : results) std::cout << line << "\n";
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failures ? 1 : 0;
}
