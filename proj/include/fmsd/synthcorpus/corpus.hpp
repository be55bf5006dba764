#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fmsd/synthcorpus/profiles.hpp"
#include "fmsd/synthcorpus/render.hpp"
#include "fmsd/util/io.hpp"
#include "fmsd/util/strict_json.hpp"

namespace fmsd::corpus {

struct CorpusConfig {
  std::uint64_t seed = 1234;
  std::size_t vocab_size = 216;
  std::size_t channels = 80;
  std::size_t train_speakers = 24;
  std::size_t test_speakers = 8;
  std::size_t train_per_dialect = 1000;
  std::size_t val_per_dialect = 40;
  /// Parallel test items; each is rendered once per dialect.
  std::size_t test_per_dialect = 40;
  std::size_t min_tokens = 5;
  std::size_t max_tokens = 20;
  int min_duration = 2;
  int max_duration = 5;
  double snr_db = 20.0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("corpus config: " + m); };
    if (vocab_size == 0) fail("vocab_size must be positive");
    if (channels < 8) fail("channels must be at least 8");
    if (train_speakers == 0 || test_speakers == 0) fail("speaker counts must be positive");
    if (train_per_dialect == 0) fail("train_per_dialect must be positive");
    if (min_tokens == 0 || max_tokens < min_tokens) fail("token length range is invalid");
    if (min_duration < 1 || max_duration < min_duration) fail("duration range is invalid");
  }
};

inline Json to_json(const CorpusConfig& c) {
  return Json{{"seed", c.seed},
              {"vocab_size", c.vocab_size},
              {"channels", c.channels},
              {"train_speakers", c.train_speakers},
              {"test_speakers", c.test_speakers},
              {"train_per_dialect", c.train_per_dialect},
              {"val_per_dialect", c.val_per_dialect},
              {"test_per_dialect", c.test_per_dialect},
              {"min_tokens", c.min_tokens},
              {"max_tokens", c.max_tokens},
              {"min_duration", c.min_duration},
              {"max_duration", c.max_duration},
              {"snr_db", c.snr_db}};
}

inline CorpusConfig corpus_config_from_json(const Json& j, const std::string& path = "corpus") {
  CorpusConfig c;
  StrictObject o(j, path);
  o.field("seed", c.seed)
      .field("vocab_size", c.vocab_size)
      .field("channels", c.channels)
      .field("train_speakers", c.train_speakers)
      .field("test_speakers", c.test_speakers)
      .field("train_per_dialect", c.train_per_dialect)
      .field("val_per_dialect", c.val_per_dialect)
      .field("test_per_dialect", c.test_per_dialect)
      .field("min_tokens", c.min_tokens)
      .field("max_tokens", c.max_tokens)
      .field("min_duration", c.min_duration)
      .field("max_duration", c.max_duration)
      .field("snr_db", c.snr_db);
  o.finish();
  c.validate();
  return c;
}

inline std::uint64_t config_hash(const CorpusConfig& c) { return fnv1a(to_json(c).dump()); }

enum class Split { kTrain, kVal, kTest };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw IoError("unknown split '" + std::string(s) + "'");
}

struct ManifestRecord {
  std::string id;
  Split split = Split::kTrain;
  int speaker_id = 0;
  int dialect_id = 0;
  std::vector<int> token_ids;
  std::vector<int> durations;
  /// Relative to the manifest directory.
  std::string path;
  /// Index within its (split, dialect, speaker) group; parallel test items share it across dialects.
  std::size_t index = 0;
};

struct CorpusManifest {
  std::uint64_t config_hash = 0;
  std::uint64_t manifest_hash = 0;
  std::size_t channels = 0;
  std::vector<ManifestRecord> records;

  std::array<std::size_t, kDialectCount> dialect_counts(Split s) const {
    std::array<std::size_t, kDialectCount> counts{};
    for (const auto& r : records)
      if (r.split == s) ++counts[static_cast<std::size_t>(r.dialect_id)];
    return counts;
  }
  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [s](const auto& r) { return r.split == s; }));
  }
};

namespace detail {

template <typename V>
std::string join(const V& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

inline std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  int v;
  while (is >> v) out.push_back(v);
  return out;
}

inline std::string record_line(const ManifestRecord& r) {
  return r.id + '\t' + split_name(r.split) + '\t' + std::to_string(r.speaker_id) + '\t' + dialect_label(r.dialect_id) +
         '\t' + join(r.token_ids) + '\t' + join(r.durations) + '\t' + r.path;
}

inline auto sort_key(const ManifestRecord& r) {
  return std::make_tuple(static_cast<int>(r.split), r.dialect_id, r.speaker_id, r.index, r.id);
}

}  // namespace detail

/// Text form: one header comment, then one tab-separated record per line:
/// id, split, speaker_id, dialect label, token IDs, durations, frame path.
inline std::string format_manifest(const CorpusManifest& m) {
  std::ostringstream os;
  os << "# fmsd-manifest v1 config_hash=" << hex64(m.config_hash) << " manifest_hash=" << hex64(m.manifest_hash)
     << " channels=" << m.channels << '\n';
  for (const auto& r : m.records) os << detail::record_line(r) << '\n';
  return os.str();
}

inline CorpusManifest parse_manifest(const std::string& text) {
  CorpusManifest m;
  std::istringstream is(text);
  std::string line;
  std::map<std::tuple<int, int, int>, std::size_t> next_index;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string tok;
      while (hs >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "config_hash") m.config_hash = std::stoull(val, nullptr, 16);
        if (key == "manifest_hash") m.manifest_hash = std::stoull(val, nullptr, 16);
        if (key == "channels") m.channels = std::stoul(val);
      }
      continue;
    }
    auto f = split(line, '\t');
    if (f.size() != 7) throw IoError("manifest: malformed record line: " + line);
    ManifestRecord r;
    r.id = f[0];
    r.split = parse_split(f[1]);
    r.speaker_id = std::stoi(f[2]);
    r.dialect_id = dialect_id(f[3]);
    r.token_ids = detail::parse_ints(f[4]);
    r.durations = detail::parse_ints(f[5]);
    r.path = f[6];
    if (r.token_ids.empty() || r.token_ids.size() != r.durations.size()) {
      throw IoError("manifest: token/duration mismatch in record " + r.id);
    }
    r.index = next_index[{static_cast<int>(r.split), r.dialect_id, r.speaker_id}]++;
    m.records.push_back(std::move(r));
  }
  return m;
}

/// Everything needed to render: inventory, speaker and dialect profiles.
struct CorpusWorld {
  CorpusConfig config;
  TokenInventory inventory;
  std::array<DialectProfile, kDialectCount> dialects = default_dialect_profiles();

  explicit CorpusWorld(CorpusConfig c)
      : config(std::move(c)),
        inventory(make_inventory(config.seed, config.vocab_size, config.channels, config.min_duration, config.max_duration)) {}

  SpeakerProfile speaker(int id) const { return make_speaker(config.seed, id, config.channels); }

  std::vector<int> train_speaker_ids() const {
    std::vector<int> ids(config.train_speakers);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    return ids;
  }
  /// Held-out speakers (val and test), disjoint from training speakers.
  std::vector<int> test_speaker_ids() const {
    std::vector<int> ids(config.test_speakers);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(config.train_speakers + i);
    return ids;
  }
};

struct GeneratedUtterance {
  ManifestRecord meta;
  UtteranceRecord utt;
};

/// Deterministic plan + render of every utterance; no I/O.
inline std::vector<GeneratedUtterance> generate_utterances(const CorpusWorld& world) {
  const auto& cfg = world.config;
  std::vector<GeneratedUtterance> out;
  auto random_tokens = [&](Rng& rng) {
    std::vector<int> t(static_cast<std::size_t>(rng.range(long(cfg.min_tokens), long(cfg.max_tokens))));
    for (auto& x : t) x = static_cast<int>(rng.below(cfg.vocab_size));
    return t;
  };
  auto emit = [&](Split split, int dialect, int speaker, std::size_t index, const std::vector<int>& tokens) {
    const std::uint64_t seed = Rng::mix(cfg.seed ^ (std::uint64_t(split) << 56) ^ (std::uint64_t(dialect) << 48) ^
                                        (std::uint64_t(speaker) << 24) ^ index);
    GeneratedUtterance g;
    g.utt = render_utterance(tokens, world.speaker(speaker), world.dialects[std::size_t(dialect)], world.inventory, seed,
                             {cfg.snr_db});
    char id[96];
    std::snprintf(id, sizeof id, "%s-%s-s%03d-%05zu", split_name(split).c_str(), dialect_label(dialect).c_str(), speaker,
                  index);
    g.meta.id = id;
    g.meta.split = split;
    g.meta.speaker_id = speaker;
    g.meta.dialect_id = dialect;
    g.meta.token_ids = tokens;
    g.meta.durations = g.utt.durations;
    g.meta.path = "frames/" + g.meta.id + ".frm";
    g.meta.index = index;
    out.push_back(std::move(g));
  };

  const auto train_spk = world.train_speaker_ids();
  const auto test_spk = world.test_speaker_ids();
  for (int d = 0; d < int(kDialectCount); ++d) {
    Rng rng(cfg.seed, 0x7472'0000ULL + std::uint64_t(d));
    for (std::size_t i = 0; i < cfg.train_per_dialect; ++i) {
      emit(Split::kTrain, d, train_spk[i % train_spk.size()], i / train_spk.size(), random_tokens(rng));
    }
    Rng vrng(cfg.seed, 0x7661'0000ULL + std::uint64_t(d));
    for (std::size_t i = 0; i < cfg.val_per_dialect; ++i) {
      emit(Split::kVal, d, test_spk[i % test_spk.size()], i / test_spk.size(), random_tokens(vrng));
    }
  }
  // Parallel test split: identical (tokens, speaker) rendered once per dialect.
  Rng trng(cfg.seed, 0x7465'0000ULL);
  for (std::size_t i = 0; i < cfg.test_per_dialect; ++i) {
    const auto tokens = random_tokens(trng);
    const int spk = test_spk[i % test_spk.size()];
    for (int d = 0; d < int(kDialectCount); ++d) emit(Split::kTest, d, spk, i / test_spk.size(), tokens);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return detail::sort_key(a.meta) < detail::sort_key(b.meta); });
  return out;
}

/// Hash over sorted record lines and the exact frame bytes.
inline std::uint64_t manifest_hash(const std::vector<GeneratedUtterance>& utts) {
  Fnv1a h;
  for (const auto& g : utts) {
    h.update(detail::record_line(g.meta));
    h.update("\n");
    h.update(encode_frames(g.utt.frames));
  }
  return h.digest();
}

/// Writes frames/<id>.frm and manifest.tsv under out_dir; returns the manifest.
inline CorpusManifest gen_corpus(const CorpusConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  CorpusWorld world(config);
  auto utts = generate_utterances(world);
  CorpusManifest m;
  m.config_hash = config_hash(config);
  m.manifest_hash = manifest_hash(utts);
  m.channels = config.channels;
  std::filesystem::create_directories(out_dir / "frames");
  for (auto& g : utts) {
    write_frames(out_dir / g.meta.path, g.utt.frames);
    m.records.push_back(g.meta);
  }
  atomic_write(out_dir / "manifest.tsv", format_manifest(m));
  atomic_write(out_dir / "corpus_config.json", to_json(config).dump(2) + "\n");
  return m;
}

inline CorpusManifest load_manifest(const std::filesystem::path& dir) { return parse_manifest(read_file(dir / "manifest.tsv")); }

/// Manifest plus every frame matrix, held in memory.
struct Dataset {
  CorpusManifest manifest;
  std::vector<FrameMatrix> frames;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].split == s) out.push_back(i);
    return out;
  }
  const ManifestRecord& record(std::size_t i) const { return manifest.records[i]; }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = load_manifest(dir);
  ds.frames.reserve(ds.manifest.records.size());
  for (const auto& r : ds.manifest.records) {
    auto f = read_frames(dir / r.path);
    std::size_t total = 0;
    for (int d : r.durations) total += static_cast<std::size_t>(d);
    if (f.rows() != total) throw IoError("frame count of " + r.id + " does not match its durations");
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

/// In-memory dataset straight from the generator (no files).
inline Dataset generate_dataset(const CorpusConfig& config) {
  config.validate();
  CorpusWorld world(config);
  auto utts = generate_utterances(world);
  Dataset ds;
  ds.manifest.config_hash = config_hash(config);
  ds.manifest.manifest_hash = manifest_hash(utts);
  ds.manifest.channels = config.channels;
  for (auto& g : utts) {
    ds.manifest.records.push_back(g.meta);
    ds.frames.push_back(std::move(g.utt.frames));
  }
  return ds;
}

}  // namespace fmsd::corpus
