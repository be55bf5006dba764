#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "fmsd/cli/run.hpp"

using namespace fmsd;
using namespace fmsd::cli;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.corpus.channels = 8;
  c.corpus.vocab_size = 12;
  c.corpus.train_speakers = 2;
  c.corpus.test_speakers = 2;
  c.corpus.train_per_dialect = 6;
  c.corpus.val_per_dialect = 2;
  c.corpus.test_per_dialect = 2;
  c.corpus.min_tokens = 3;
  c.corpus.max_tokens = 5;
  auto& m = c.model;
  m.vocab_size = 12;
  m.channels = 8;
  m.d_model = 4;
  m.speaker_dim = 6;
  m.dialect_dim = 4;
  m.dsdr_ffn_dim = 5;
  m.n_dsdr_blocks = 1;
  m.t_crop = 6;
  m.ref_hidden = 4;
  m.dur_hidden = 4;
  m.dec_hidden = 4;
  m.dec_layers = 1;
  m.time_embed_dim = 4;
  c.train.lr = 1e-2;
  c.train.batch_size = 3;
  c.train.max_steps = 4;
  c.train.log_every = 1;
  c.train.checkpoint_every = 2;
  c.probe.hidden = 6;
  c.probe.embed_dim = 5;
  c.probe.batch_size = 6;
  c.probe.sdr_steps = 10;
  c.probe.sde_steps = 10;
  c.eval.steps = 3;
  c.eval.max_k = 3;
  c.eval.tsne_iterations = 30;
  return c;
}

struct Sandbox {
  fs::path root;
  explicit Sandbox(const std::string& name) : root(fs::temp_directory_path() / ("fmsd_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Sandbox() { fs::remove_all(root); }
  std::string path(const std::string& rel) const { return (root / rel).string(); }
  std::string write_config(const RunConfig& c, const std::string& name = "run.json") const {
    atomic_write(root / name, to_json(c).dump(2));
    return path(name);
  }
};

struct Result {
  int code;
  std::string out, log;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "fmsd");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, log;
  const int code = run(int(argv.size()), argv.data(), out, log);
  return {code, out.str(), log.str()};
}

std::string without_wall_clock(const std::string& report) {
  std::istringstream is(report);
  std::string line, out;
  while (std::getline(is, line)) {
    const auto key = line.substr(0, line.find(' '));
    if (!eval::wall_clock_fields().count(key)) out += line + "\n";
  }
  return out;
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndHash) {
  auto c = tiny_run();
  const auto j = to_json(c);
  EXPECT_EQ(to_json(run_config_from_json(j)), j);
  auto moved = c;
  moved.paths.corpus = "elsewhere";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  moved.train.lr = 0.5;
  EXPECT_NE(config_hash(moved), config_hash(c));
  EXPECT_NO_THROW(run_config_from_json(Json::object()));
}

TEST(RunConfig, RejectsUnknownKeysAndMismatchedShapes) {
  auto j = to_json(tiny_run());
  j["train"]["learning_rate"] = 1;
  try {
    run_config_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.learning_rate"), std::string::npos);
  }
  j = to_json(tiny_run());
  j["model"]["channels"] = 16;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
}

TEST(RunConfig, SmokeAndSeedOverrides) {
  RunConfig c;
  apply_smoke(c);
  EXPECT_EQ(c.train.max_steps, 200u);
  EXPECT_NO_THROW(c.validate());
  apply_seed(c, 77);
  EXPECT_EQ(c.corpus.seed, 77u);
  EXPECT_EQ(c.train.seed, 77u);
  EXPECT_EQ(c.probe.seed, 77u);
  EXPECT_EQ(c.eval.seed, 77u);
}

TEST(ShippedConfigs, ParseAndDescribeTheDeskModel) {
  const fs::path dir = FMSD_SOURCE_DIR "/configs";
  const auto toy = load_run_config(dir / "toy.json");
  EXPECT_EQ(toy.corpus.train_per_dialect, 1000u);
  EXPECT_LE(toy.train.max_steps, 20000u);
  const auto smoke = load_run_config(dir / "smoke.json");
  EXPECT_EQ(smoke.train.max_steps, 200u);
}

TEST(Cli, DefaultsPrintsAParsableConfig) {
  const auto r = invoke({"defaults"});
  ASSERT_EQ(r.code, 0) << r.log;
  const auto c = run_config_from_json(Json::parse(r.out));
  EXPECT_EQ(to_json(c), to_json(RunConfig{}));
}

TEST(Cli, UsageErrorsExitWithOne) {
  Sandbox sb("usage");
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
  EXPECT_EQ(invoke({"gen-corpus"}).code, 1);
  EXPECT_EQ(invoke({"gen-corpus", "--out", sb.path("c"), "--config", sb.path("missing.json")}).code, 1);

  atomic_write(sb.root / "broken.json", "{ not json");
  EXPECT_EQ(invoke({"gen-corpus", "--out", sb.path("c"), "--config", sb.path("broken.json")}).code, 1);

  auto j = to_json(tiny_run());
  j["corpus"]["speakers"] = 3;
  atomic_write(sb.root / "bad.json", j.dump());
  const auto r = invoke({"gen-corpus", "--out", sb.path("c"), "--config", sb.path("bad.json")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.log.find("corpus.speakers"), std::string::npos) << r.log;
}

TEST(Cli, GenCorpusIsDeterministic) {
  Sandbox sb("gen");
  const auto cfg = sb.write_config(tiny_run());
  const auto a = invoke({"gen-corpus", "--config", cfg, "--out", sb.path("a")});
  const auto b = invoke({"gen-corpus", "--config", cfg, "--out", sb.path("b")});
  ASSERT_EQ(a.code, 0) << a.log;
  EXPECT_EQ(a.out, b.out);
  EXPECT_NE(a.out.find("manifest_hash "), std::string::npos);
  EXPECT_TRUE(fs::exists(sb.root / "a" / "manifest.tsv"));
  EXPECT_EQ(read_file(sb.root / "a" / "config_hash.txt"), hex64(config_hash(tiny_run())) + "\n");
  const auto c = invoke({"gen-corpus", "--config", cfg, "--seed", "99", "--out", sb.path("c")});
  EXPECT_NE(a.out, c.out);
}

TEST(Cli, TrainResumeContinuesStepNumbering) {
  Sandbox sb("train");
  auto c = tiny_run();
  const auto cfg4 = sb.write_config(c, "four.json");
  c.train.max_steps = 6;
  const auto cfg6 = sb.write_config(c, "six.json");
  ASSERT_EQ(invoke({"gen-corpus", "--config", cfg4, "--out", sb.path("corpus")}).code, 0);
  auto r = invoke({"train", "--config", cfg4, "--corpus", sb.path("corpus"), "--out", sb.path("m")});
  ASSERT_EQ(r.code, 0) << r.log;
  EXPECT_NE(r.out.find("full step 4 "), std::string::npos) << r.out;
  r = invoke({"train", "--config", cfg6, "--corpus", sb.path("corpus"), "--out", sb.path("m"), "--resume"});
  ASSERT_EQ(r.code, 0) << r.log;
  EXPECT_NE(r.out.find("full step 6 "), std::string::npos) << r.out;
  const auto log = training::read_train_log(sb.root / "m" / training::kLogFile);
  ASSERT_EQ(log.size(), 6u);
  for (std::size_t i = 0; i < log.size(); ++i) EXPECT_EQ(log[i].step, i + 1);

  // The same two-stage run equals one straight six-step run.
  r = invoke({"train", "--config", cfg6, "--corpus", sb.path("corpus"), "--out", sb.path("straight")});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(read_file(sb.root / "straight" / training::kCheckpointFile), read_file(sb.root / "m" / training::kCheckpointFile));
}

TEST(Cli, AblateSynthAndEval) {
  Sandbox sb("pipeline");
  const auto cfg = sb.write_config(tiny_run());
  ASSERT_EQ(invoke({"gen-corpus", "--config", cfg, "--out", sb.path("corpus")}).code, 0);
  auto r = invoke({"ablate", "--config", cfg, "--corpus", sb.path("corpus"), "--out", sb.path("abl")});
  ASSERT_EQ(r.code, 0) << r.log;
  for (const auto& name : ablation_names()) {
    EXPECT_TRUE(fs::exists(sb.root / "abl" / name / training::kCheckpointFile)) << name;
    EXPECT_NE(r.out.find(name + " step 4 "), std::string::npos) << name;
  }
  const auto full = sb.path("abl/full");

  // Single synthesis from a corpus reference.
  const auto ds = corpus::load_dataset(sb.root / "corpus");
  const auto ref = (sb.root / "corpus" / ds.record(0).path).string();
  r = invoke({"synth", "--config", cfg, "--checkpoint", full, "--text", "ka kha ki", "--reference", ref, "--dialect", "lh",
           "--out", sb.path("one.frm")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.log.find("wz, ad, kb"), std::string::npos) << r.log;
  r = invoke({"synth", "--config", cfg, "--checkpoint", full, "--text", "zz", "--reference", ref, "--dialect", "ad", "--out",
           sb.path("one.frm")});
  EXPECT_EQ(r.code, 1);
  r = invoke({"synth", "--config", cfg, "--checkpoint", full, "--text", "ka kha ki", "--reference", ref, "--dialect", "ad",
           "--out", sb.path("one.frm")});
  ASSERT_EQ(r.code, 0) << r.log;
  const auto frames = corpus::read_frames(sb.root / "one.frm");
  EXPECT_EQ(frames.cols(), 8u);
  const auto timing = Json::parse(read_file(sb.path("one.frm") + ".timing.json"));
  EXPECT_EQ(timing["frames"].get<std::size_t>(), frames.rows());
  EXPECT_GT(timing["seconds"].get<double>(), 0.0);

  // Batch mode: one triplet per parallel test item.
  r = invoke({"synth", "--config", cfg, "--checkpoint", full, "--corpus", sb.path("corpus"), "--batch", "--out", sb.path("batch")});
  ASSERT_EQ(r.code, 0) << r.log;
  std::size_t frm = 0;
  for (const auto& e : fs::directory_iterator(sb.root / "batch")) frm += e.path().extension() == ".frm";
  EXPECT_EQ(frm, 2u * 3u);
  EXPECT_TRUE(fs::exists(sb.root / "batch" / "timing.tsv"));

  // Evaluation of one model, twice.
  r = invoke({"eval", "--config", cfg, "--checkpoint", full, "--corpus", sb.path("corpus"), "--out", sb.path("e1")});
  ASSERT_EQ(r.code, 0) << r.log;
  const auto probes = sb.path("e1/probes");
  auto r2 = invoke({"eval", "--config", cfg, "--checkpoint", full, "--corpus", sb.path("corpus"), "--probes", probes, "--out",
                 sb.path("e2")});
  ASSERT_EQ(r2.code, 0) << r2.log;
  EXPECT_NE(r2.log.find("loaded probes"), std::string::npos);
  const auto rep = eval::parse_report(read_file(sb.root / "e1" / "report.txt"));
  for (const auto& k : eval::required_report_fields(3)) EXPECT_TRUE(rep.has(k)) << k;
  ASSERT_EQ(rep.header.size(), 4u);
  EXPECT_EQ(rep.header[0].second, hex64(config_hash(tiny_run())));
  EXPECT_EQ(without_wall_clock(read_file(sb.root / "e1" / "report.txt")), without_wall_clock(read_file(sb.root / "e2" / "report.txt")));

  // Evaluation of the whole ablation set.
  r = invoke({"eval", "--config", cfg, "--checkpoint", sb.path("abl"), "--corpus", sb.path("corpus"), "--probes", probes, "--out",
           sb.path("eabl")});
  ASSERT_EQ(r.code, 0) << r.log;
  const auto summary = eval::parse_report(read_file(sb.root / "eabl" / "ablation.txt"));
  for (const char* k : {"full_dca", "neither_dca", "dca_ordered", "decs_gap_full_neither", "inertia_full_below_neither"})
    EXPECT_TRUE(summary.has(k)) << k;
  for (const auto& name : ablation_names()) EXPECT_TRUE(fs::exists(sb.root / "eabl" / name / "report.txt"));
}

TEST(Cli, RuntimeErrorsExitWithTwo) {
  Sandbox sb("runtime");
  const auto cfg = sb.write_config(tiny_run());
  EXPECT_EQ(invoke({"train", "--config", cfg, "--corpus", sb.path("nowhere"), "--out", sb.path("m")}).code, 2);
  EXPECT_EQ(invoke({"eval", "--config", cfg, "--checkpoint", sb.path("nowhere"), "--out", sb.path("e")}).code, 2);
  EXPECT_EQ(invoke({"synth", "--config", cfg, "--out", sb.path("x.frm"), "--text", "ka", "--reference", "r", "--dialect", "wz"}).code, 1);
}
