#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "fmsd/evaluation/metrics.hpp"
#include "fmsd/evaluation/probes.hpp"
#include "fmsd/evaluation/report.hpp"
#include "fmsd/training/train.hpp"

using namespace fmsd;
using namespace fmsd::eval;

namespace {

Vec random_unit(std::size_t d, Rng& rng) {
  Vec v(d);
  for (auto& x : v) x = rng.normal();
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
  return v;
}

double total_ss(const std::vector<Vec>& pts) {
  Vec mean(pts[0].size(), 0.0);
  for (const auto& p : pts)
    for (std::size_t j = 0; j < p.size(); ++j) mean[j] += p[j] / double(pts.size());
  double s = 0;
  for (const auto& p : pts) s += sq_dist(p, mean);
  return s;
}

/// Exhaustive search over all assignments of the points to two non-empty clusters.
double best_two_partition(const std::vector<Vec>& pts) {
  const std::size_t n = pts.size();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t mask = 1; mask + 1 < (std::size_t{1} << n); ++mask) {
    std::vector<Vec> a, b;
    for (std::size_t i = 0; i < n; ++i) (mask >> i & 1 ? a : b).push_back(pts[i]);
    best = std::min(best, total_ss(a) + total_ss(b));
  }
  return best;
}

corpus::CorpusConfig tiny_corpus() {
  corpus::CorpusConfig c;
  c.channels = 8;
  c.vocab_size = 12;
  c.train_speakers = 2;
  c.test_speakers = 2;
  c.train_per_dialect = 12;
  c.val_per_dialect = 3;
  c.test_per_dialect = 3;
  c.min_tokens = 3;
  c.max_tokens = 5;
  return c;
}

const corpus::Dataset& dataset() {
  static const corpus::Dataset ds = corpus::generate_dataset(tiny_corpus());
  return ds;
}

ProbeConfig tiny_probe() {
  ProbeConfig c;
  c.hidden = 6;
  c.embed_dim = 5;
  c.lr = 5e-3;
  c.batch_size = 6;
  c.sdr_steps = 20;
  c.sde_steps = 20;
  return c;
}

const ProbeSet& probes() {
  static const ProbeSet p = train_probes(dataset(), tiny_probe());
  return p;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fmsd_eval_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Dca, AllCorrectAndConfusion) {
  const std::vector<Vec> probs{{0.8, 0.1, 0.1}, {0.2, 0.7, 0.1}, {0.1, 0.2, 0.7}, {0.6, 0.3, 0.1}};
  auto r = compute_dca(probs, {0, 1, 2, 0}, 3);
  EXPECT_DOUBLE_EQ(r.percent, 100.0);
  r = compute_dca(probs, {0, 1, 2, 1}, 3);
  EXPECT_DOUBLE_EQ(r.percent, 75.0);
  EXPECT_EQ(r.confusion[1][0], 1u);
  EXPECT_EQ(r.confusion[1][1], 1u);
  EXPECT_NEAR(r.softmax_means[1][0], 0.4, 1e-12);
  EXPECT_NEAR(r.softmax_means[1][1], 0.5, 1e-12);
  for (const auto& m : r.softmax_means) EXPECT_NEAR(std::accumulate(m.begin(), m.end(), 0.0), 1.0, 1e-6);
  EXPECT_THROW(compute_dca({}, {}, 3), EvalError);
  EXPECT_THROW(compute_dca(probs, {0, 1}, 3), EvalError);
  EXPECT_THROW(compute_dca(probs, {0, 1, 2, 3}, 3), EvalError);
}

TEST(Decs, Examples) {
  const std::vector<Vec> centroids{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  EXPECT_DOUBLE_EQ(compute_decs({{1, 0, 0}}, {0}, centroids), 1.0);
  EXPECT_DOUBLE_EQ(compute_decs({{0, 1, 0}}, {0}, centroids), 0.0);
  EXPECT_DOUBLE_EQ(compute_decs({{1, 0, 0}, {0, 1, 0}}, {0, 0}, centroids), 0.5);
  EXPECT_DOUBLE_EQ(compute_decs({{-1, 0, 0}}, {0}, centroids), -1.0);
  EXPECT_THROW(compute_decs({}, {}, centroids), EvalError);
  EXPECT_THROW(compute_decs({{1, 0, 0}}, {4}, centroids), EvalError);
}

TEST(Secs, SelfPairsAndSpeakerAveraging) {
  Rng rng(1);
  const auto a = random_unit(16, rng), b = random_unit(16, rng);
  EXPECT_NEAR(compute_secs({{0, a, a}, {1, b, b}}).mean, 1.0, 1e-12);
  // Speaker 0 averages 1 and 0; speaker 1 contributes 1 on its own.
  const Vec e0{1, 0}, e1{0, 1};
  const auto r = compute_secs({{0, e0, e0}, {0, e0, e1}, {1, e1, e1}, {2, e0, e1, false}});
  EXPECT_DOUBLE_EQ(r.mean, 0.75);
  EXPECT_EQ(r.used, 3u);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_THROW(compute_secs({{0, e0, e1, false}}), EvalError);
}

TEST(Secs, RandomVectorsAverageNearZero) {
  Rng rng(2024);
  std::vector<SecsPair> pairs;
  for (int i = 0; i < 200; ++i) pairs.push_back({i % 8, random_unit(192, rng), random_unit(192, rng)});
  const double m = compute_secs(pairs).mean;
  EXPECT_LT(std::abs(m), 0.2);
  EXPECT_GE(m, -1.0);
  EXPECT_LE(m, 1.0);
}

TEST(Secs, RankRate) {
  const Vec a{1, 0}, b{0, 1};
  const std::map<int, Vec> refs{{0, a}, {1, b}};
  EXPECT_DOUBLE_EQ(secs_rank_rate({{0, a, {0.9, 0.1}}, {1, b, {0.2, 0.8}}}, refs), 1.0);
  EXPECT_DOUBLE_EQ(secs_rank_rate({{0, a, {0.1, 0.9}}, {1, b, {0.2, 0.8}}}, refs), 0.5);
}

TEST(Rtf, Examples) {
  EXPECT_DOUBLE_EQ(frames_to_seconds(125), 2.0);
  const auto r = compute_rtf({{0.5, 125}});
  EXPECT_DOUBLE_EQ(r.mean, 0.25);
  EXPECT_DOUBLE_EQ(r.std, 0.0);
  const auto same = compute_rtf({{0.3, 50}, {0.3, 50}, {0.3, 50}});
  EXPECT_NEAR(same.std, 0.0, 1e-15);
  const auto two = compute_rtf({{0.5, 125}, {1.5, 125}});
  EXPECT_DOUBLE_EQ(two.mean, 0.5);
  EXPECT_DOUBLE_EQ(two.std, 0.25);
  EXPECT_THROW(compute_rtf({{0.1, 0}}), EvalError);
  EXPECT_THROW(compute_rtf({}), EvalError);
}

TEST(Metrics, InvariantToOrdering) {
  Rng rng(5);
  std::vector<Vec> probs, emb;
  std::vector<int> labels;
  std::vector<SecsPair> pairs;
  for (int i = 0; i < 30; ++i) {
    Vec p{rng.uniform(), rng.uniform(), rng.uniform()};
    const double s = p[0] + p[1] + p[2];
    for (auto& x : p) x /= s;
    probs.push_back(p);
    emb.push_back(random_unit(4, rng));
    labels.push_back(int(rng.below(3)));
    pairs.push_back({int(rng.below(4)), random_unit(6, rng), random_unit(6, rng)});
  }
  const std::vector<Vec> centroids{random_unit(4, rng), random_unit(4, rng), random_unit(4, rng)};
  const auto dca = compute_dca(probs, labels, 3).percent;
  const auto decs = compute_decs(emb, labels, centroids);
  const auto secs = compute_secs(pairs).mean;
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[17]);
  std::vector<Vec> p2, e2;
  std::vector<int> l2;
  std::vector<SecsPair> s2;
  for (auto i : perm) {
    p2.push_back(probs[i]);
    e2.push_back(emb[i]);
    l2.push_back(labels[i]);
    s2.push_back(pairs[i]);
  }
  EXPECT_DOUBLE_EQ(compute_dca(p2, l2, 3).percent, dca);
  EXPECT_NEAR(compute_decs(e2, l2, centroids), decs, 1e-12);
  EXPECT_NEAR(compute_secs(s2).mean, secs, 1e-12);
}

TEST(ClassificationMetrics, F1Examples) {
  const auto m = classification_metrics({0, 0, 1, 1, 2, 2}, {0, 1, 1, 1, 2, 0}, 3);
  EXPECT_NEAR(m.accuracy, 4.0 / 6.0, 1e-12);
  // Balanced supports: macro and weighted F1 coincide.
  EXPECT_NEAR(m.macro_f1, m.weighted_f1, 1e-12);
  // Per class F1: 0.5, 0.8, 2/3.
  EXPECT_NEAR(m.macro_f1, (0.5 + 0.8 + 2.0 / 3.0) / 3.0, 1e-12);
  const auto u = classification_metrics({0, 0, 0, 1}, {0, 0, 1, 1}, 2);
  EXPECT_NEAR(u.weighted_f1, 0.75 * 0.8 + 0.25 * (2.0 / 3.0), 1e-12);
  EXPECT_THROW(classification_metrics({0}, {}, 2), EvalError);
}

TEST(KMeans, DegenerateCases) {
  Rng rng(3);
  std::vector<Vec> pts;
  for (int i = 0; i < 9; ++i) pts.push_back({rng.normal(), rng.normal(), rng.normal()});
  EXPECT_NEAR(kmeans(pts, 9).inertia, 0.0, 1e-12);
  EXPECT_NEAR(kmeans(pts, 1).inertia, total_ss(pts), 1e-9);
  EXPECT_THROW(kmeans(pts, 10), EvalError);
  EXPECT_THROW(kmeans(pts, 0), EvalError);
  EXPECT_THROW(kmeans({}, 1), EvalError);
}

TEST(KMeans, FourPointsMatchExhaustiveSearch) {
  const std::vector<std::vector<Vec>> cases{{{0, 0}, {1, 0}, {0, 3}, {5, 5}},
                                            {{0, 0}, {2, 0}, {4, 0}, {9, 0}},
                                            {{-1, -1}, {1, 1}, {-1, 1}, {1, -1.5}}};
  for (const auto& pts : cases) EXPECT_NEAR(kmeans(pts, 2).inertia, best_two_partition(pts), 1e-9);
}

TEST(KMeans, InertiaCurveNonIncreasing) {
  Rng rng(8);
  std::vector<Vec> pts;
  for (int c = 0; c < 4; ++c) {
    const Vec centre{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    for (int i = 0; i < 15; ++i) pts.push_back({centre[0] + rng.normal(), centre[1] + rng.normal(), centre[2] + rng.normal()});
  }
  const auto curve = kmeans_inertia_curve(pts, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  ASSERT_EQ(curve.size(), 10u);
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& [k, v] : curve) {
    EXPECT_LE(v, prev) << k;
    prev = v;
  }
  EXPECT_NEAR(curve.at(1), total_ss(pts), 1e-9);
}

TEST(Pca, PlanarPointsReconstructExactly) {
  Rng rng(4);
  const Vec origin{1, -2, 3, 0.5, 7};
  const Vec u{1, 1, 0, 0, 1}, v{0, 1, -1, 2, 0};
  std::vector<Vec> pts;
  for (int i = 0; i < 25; ++i) {
    const double a = rng.normal() * 3, b = rng.normal();
    Vec p(5);
    for (int j = 0; j < 5; ++j) p[j] = origin[j] + a * u[j] + b * v[j];
    pts.push_back(p);
  }
  const auto r = project_pca(pts);
  EXPECT_GE(r.variances[0], r.variances[1]);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      const double rec = r.mean[j] + r.coords[i][0] * r.components[0][j] + r.coords[i][1] * r.components[1][j];
      EXPECT_NEAR(rec, pts[i][j], 1e-9);
    }
  }
  EXPECT_THROW(project_pca({{1, 2}, {3, 4}}), EvalError);
}

TEST(Pca, OneDimensionalInputFillsZeros) {
  const auto r = project_pca({{1.0}, {2.0}, {4.0}});
  ASSERT_EQ(r.components.size(), 2u);
  EXPECT_EQ(r.variances[1], 0.0);
  for (const auto& c : r.coords) EXPECT_EQ(c[1], 0.0);
}

TEST(Tsne, SeparatesBlobs) {
  Rng rng(6);
  std::vector<Vec> pts;
  std::vector<int> blob;
  for (int b = 0; b < 3; ++b)
    for (int i = 0; i < 15; ++i) {
      Vec p(6, 0.0);
      p[std::size_t(b)] = 10.0;
      for (auto& x : p) x += rng.normal();
      pts.push_back(p);
      blob.push_back(b);
    }
  const auto y = project_tsne(pts);
  const auto y2 = project_tsne(pts);
  double within = 0, cross = 0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    EXPECT_EQ(y[i], y2[i]);
    for (std::size_t j = i + 1; j < y.size(); ++j) {
      const double d = std::hypot(y[i][0] - y[j][0], y[i][1] - y[j][1]);
      (blob[i] == blob[j] ? within : cross) += d;
      ++(blob[i] == blob[j] ? nw : nc);
    }
  }
  EXPECT_LT(within / double(nw), cross / double(nc));
}

TEST(Pgm, HandComputedBytes) {
  const auto img = encode_pgm(FrameMatrix::matrix({{0, 1}, {2, 3}}));
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(img.substr(0, header.size()), header);
  const auto px = img.substr(header.size());
  ASSERT_EQ(px.size(), 4u);
  // Top row is channel 1 over time, bottom row channel 0.
  EXPECT_EQ(std::vector<int>({(unsigned char)px[0], (unsigned char)px[1], (unsigned char)px[2], (unsigned char)px[3]}),
            std::vector<int>({85, 255, 0, 170}));
}

TEST(Pgm, ConstantIsMidGrayAndShape) {
  const auto img = encode_pgm(FrameMatrix::matrix(5, 3, 0.7f));
  const std::string header = "P5\n5 3\n255\n";
  ASSERT_EQ(img.substr(0, header.size()), header);
  ASSERT_EQ(img.size(), header.size() + 15);
  for (std::size_t i = header.size(); i < img.size(); ++i) EXPECT_EQ((unsigned char)img[i], 128);
  auto bad = FrameMatrix::matrix(2, 2);
  bad(0, 0) = std::nanf("");
  EXPECT_THROW(encode_pgm(bad), EvalError);

  const auto dir = temp_dir("pgm");
  dump_mel_image(FrameMatrix::matrix({{0, 1}, {2, 3}}), dir / "x.pgm");
  EXPECT_EQ(read_file(dir / "x.pgm").substr(0, 2), "P5");
  std::filesystem::remove_all(dir);
}

TEST(Probes, ContractsAndRoundTrip) {
  const auto& p = probes();
  const auto& ds = dataset();
  for (auto i : ds.indices(corpus::Split::kTest)) {
    const auto pr = p.sdr->predict_proba(ds.frames[i]);
    EXPECT_NEAR(std::accumulate(pr.begin(), pr.end(), 0.0), 1.0, 1e-6);
    const auto e = p.sde->embedding(ds.frames[i]);
    EXPECT_NEAR(std::sqrt(dot(e, e)), 1.0, 1e-6);
  }
  ASSERT_EQ(p.sde->centroids.size(), 3u);
  for (const auto& c : p.sde->centroids) EXPECT_NEAR(std::sqrt(dot(c, c)), 1.0, 1e-9);
  EXPECT_GE(p.sdr_report.held_out.macro_f1, 0.0);

  const auto dir = temp_dir("probes");
  save_probes(p, dir);
  const auto q = load_probes(dir, 8);
  const auto& f = ds.frames[ds.indices(corpus::Split::kTest)[0]];
  EXPECT_EQ(q.sdr->predict_proba(f), p.sdr->predict_proba(f));
  EXPECT_EQ(q.sde->embedding(f), p.sde->embedding(f));
  EXPECT_EQ(q.sde->centroids.size(), 3u);
  EXPECT_EQ(q.sdr_report.held_out.accuracy, p.sdr_report.held_out.accuracy);
  EXPECT_EQ(q.sde_report.within_cosine, p.sde_report.within_cosine);
  EXPECT_EQ(q.corpus_hash, ds.manifest.manifest_hash);
  std::filesystem::remove_all(dir);
}

TEST(Probes, ConfigStrictness) {
  auto j = to_json(ProbeConfig{});
  EXPECT_EQ(to_json(probe_config_from_json(j)), j);
  EXPECT_EQ(j["beta1"], 0.8);
  EXPECT_EQ(j["beta2"], 0.99);
  EXPECT_EQ(j["lr"], 2e-4);
  EXPECT_EQ(j["batch_size"], 64);
  j["extra"] = true;
  EXPECT_THROW(probe_config_from_json(j), ConfigError);
  j = to_json(ProbeConfig{});
  j["sde_objective"] = "triplet";
  EXPECT_THROW(probe_config_from_json(j), ConfigError);
}

TEST(Probes, BalancedSplitsGiveEqualF1Averages) {
  const auto r = evaluate_sdr(*probes().sdr, dataset(), corpus::Split::kTest);
  EXPECT_NEAR(r.held_out.macro_f1, r.held_out.weighted_f1, 1e-12);
}

TEST(Report, TextRoundTrip) {
  EvalReport r;
  r.header = {{"config_hash", "00ff"}, {"checkpoint_hash", "abcd"}};
  r.set("dca", 97.5);
  r.set("secs", -0.125);
  r.set("dca", 98.0);
  const auto text = r.to_text();
  EXPECT_EQ(text.rfind("# fmsd-eval-report config_hash=00ff checkpoint_hash=abcd\n", 0), 0u);
  const auto back = parse_report(text);
  EXPECT_EQ(back.header, r.header);
  EXPECT_EQ(back.fields, r.fields);
  EXPECT_DOUBLE_EQ(back.get("dca"), 98.0);
  EXPECT_THROW(back.get("decs"), EvalError);
  EXPECT_THROW(parse_report("dca\n"), EvalError);
}

TEST(Report, ParallelItemsUseSameSpeakerValidationReferences) {
  const auto& ds = dataset();
  const auto items = parallel_items(ds);
  ASSERT_EQ(items.size(), 3u);
  std::vector<int> ref_dialects;
  for (const auto& it : items) {
    const auto& ref = ds.record(it.reference);
    EXPECT_EQ(ref.split, corpus::Split::kVal);
    EXPECT_EQ(ref.speaker_id, it.speaker_id);
    EXPECT_EQ(ref.dialect_id, it.reference_dialect);
    for (int d = 0; d < 3; ++d) {
      const auto& rec = ds.record(it.records[std::size_t(d)]);
      EXPECT_EQ(rec.dialect_id, d);
      EXPECT_EQ(rec.token_ids, it.tokens);
    }
    ref_dialects.push_back(it.reference_dialect);
  }
  for (int d = 0; d < 3; ++d) EXPECT_EQ(std::count(ref_dialects.begin(), ref_dialects.end(), d), 1);
}

TEST(Report, EvaluateModelProducesWellFormedDeterministicReport) {
  model::ModelConfig mc;
  mc.vocab_size = 12;
  mc.channels = 8;
  mc.d_model = 4;
  mc.speaker_dim = 6;
  mc.dialect_dim = 4;
  mc.dsdr_ffn_dim = 5;
  mc.n_dsdr_blocks = 1;
  mc.t_crop = 6;
  mc.ref_hidden = 4;
  mc.dur_hidden = 4;
  mc.dec_hidden = 4;
  mc.dec_layers = 1;
  mc.time_embed_dim = 4;
  training::TrainConfig tc;
  tc.max_steps = 3;
  tc.batch_size = 3;
  tc.lr = 1e-2;
  const auto run = training::train_run(dataset(), mc, tc);
  EvalConfig ec;
  ec.steps = 3;
  ec.max_k = 4;
  ec.tsne_iterations = 50;
  const auto a = evaluate_model(*run.model, dataset(), probes(), ec);
  const auto b = evaluate_model(*run.model, dataset(), probes(), ec);
  const auto& r = a.report;
  for (const auto& k : required_report_fields(4)) EXPECT_TRUE(r.has(k)) << k;
  EXPECT_EQ(r.get("items"), 3.0);
  EXPECT_EQ(r.get("syntheses"), 9.0);
  EXPECT_GE(r.get("dca"), 0.0);
  EXPECT_LE(r.get("dca"), 100.0);
  for (const char* k : {"decs", "decs_real", "secs"}) {
    EXPECT_GE(r.get(k), -1.0);
    EXPECT_LE(r.get(k), 1.0);
  }
  EXPECT_GE(r.get("rtf_std"), 0.0);
  for (int k = 2; k <= 4; ++k) EXPECT_LE(r.get("inertia_k" + std::to_string(k)), r.get("inertia_k" + std::to_string(k - 1)));
  for (const auto& d : {"wz", "ad", "kb"}) {
    double s = 0;
    for (const auto& e : {"wz", "ad", "kb"}) s += r.get(std::string("softmax_") + d + "_" + e);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  for (const auto& [k, v] : r.fields) {
    if (wall_clock_fields().count(k)) continue;
    EXPECT_EQ(v, b.report.get(k)) << k;
  }
  ASSERT_EQ(a.synth.size(), 9u);
  for (std::size_t i = 0; i < a.synth.size(); ++i) EXPECT_EQ(a.synth[i], b.synth[i]);
  EXPECT_EQ(a.pca_coordinates.size(), 9u);
  EXPECT_EQ(a.tsne_coordinates, b.tsne_coordinates);

  const auto dir = temp_dir("artifacts");
  write_artifacts(a, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "projection_tsne.txt"));
  std::size_t images = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "images")) {
    EXPECT_EQ(read_file(e.path()).substr(0, 3), "P5\n");
    ++images;
  }
  EXPECT_EQ(images, 6u);
  std::filesystem::remove_all(dir);
}
