#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fmsd/model/config.hpp"
#include "fmsd/numerics/layers.hpp"
#include "fmsd/numerics/rng.hpp"

namespace fmsd::model {

using nn::Var;
using nn::Tape;

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Standard sinusoidal table: even columns sin, odd columns cos.
template <typename T>
Tensor<T> positional_encoding(std::size_t rows, std::size_t dim) {
  auto pe = Tensor<T>::matrix(rows, dim);
  for (std::size_t p = 0; p < rows; ++p)
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -double(i - i % 2) / double(dim));
      pe(p, i) = static_cast<T>(i % 2 == 0 ? std::sin(double(p) * freq) : std::cos(double(p) * freq));
    }
  return pe;
}

/// Sinusoidal embedding of a flow time t in [0, 1], as a 1×dim row.
template <typename T>
Tensor<T> time_embedding(double t, std::size_t dim) {
  auto e = Tensor<T>::matrix(1, dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(1000.0, double(i) / double(half > 1 ? half - 1 : 1));
    e(0, i) = static_cast<T>(std::sin(t * freq));
    e(0, half + i) = static_cast<T>(std::cos(t * freq));
  }
  return e;
}

/// Contiguous window of t_crop rows starting at τ ~ Uniform{0..rows-t_crop}; shorter inputs are
/// zero-padded at the end instead.
inline FrameMatrix crop_reference(const FrameMatrix& frames, std::size_t t_crop, Rng& rng) {
  if (frames.rows() == 0) throw ModelError("crop_reference: empty reference");
  const std::size_t rows = frames.rows(), d = frames.cols();
  auto out = FrameMatrix::matrix(t_crop, d);
  const std::size_t start = rows >= t_crop ? std::size_t(rng.range(0, long(rows - t_crop))) : 0;
  const std::size_t n = std::min(rows, t_crop);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = frames(start + r, c);
  return out;
}

/// Conditional flow matching target on the straight path from noise x0 to data x1:
///   x_t = (1 - (1 - σ)t)·x0 + t·x1,  u_t = x1 - (1 - σ)·x0.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> cfm_training_target(const Tensor<T>& x1, const Tensor<T>& x0, double t,
                                                    double sigma_min) {
  if (x1.shape() != x0.shape()) {
    throw ModelError("cfm_training_target: shape mismatch " + shape_str(x1.shape()) + " vs " + shape_str(x0.shape()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw ModelError("cfm_training_target: t must lie in [0, 1]");
  const T a = static_cast<T>(1.0 - (1.0 - sigma_min) * t);
  const T b = static_cast<T>(t);
  const T c = static_cast<T>(1.0 - sigma_min);
  Tensor<T> xt(x1.shape()), ut(x1.shape());
  for (std::size_t i = 0; i < x1.size(); ++i) {
    xt[i] = a * x0[i] + b * x1[i];
    ut[i] = x1[i] - c * x0[i];
  }
  return {std::move(xt), std::move(ut)};
}

struct DurationPlan {
  std::vector<double> log_durations;
  std::vector<int> counts;

  std::size_t total_frames() const {
    std::size_t n = 0;
    for (int c : counts) n += std::size_t(c);
    return n;
  }
};

inline int realize_duration(double log_duration) {
  const double d = std::round(std::exp(std::min(log_duration, 20.0)));
  return std::max(1, static_cast<int>(d));
}

inline DurationPlan make_plan(std::vector<double> log_durations) {
  DurationPlan p;
  p.counts.reserve(log_durations.size());
  for (double l : log_durations) p.counts.push_back(realize_duration(l));
  p.log_durations = std::move(log_durations);
  return p;
}

/// Length regulation: row i repeated counts[i] times.
template <typename T>
Var<T> upsample(Var<T> encoded, const std::vector<int>& counts) {
  if (counts.size() != encoded.rows()) {
    throw ModelError("upsample: " + std::to_string(counts.size()) + " durations for " + std::to_string(encoded.rows()) +
                     " tokens");
  }
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1) throw ModelError("upsample: duration must be at least 1");
    index.insert(index.end(), std::size_t(counts[i]), i);
  }
  return nn::gather_rows(encoded, std::move(index));
}

/// Public FFN plus one dialect-private FFN, both fed the same pre-normalised input and summed.
template <typename T>
struct RoutedFfn {
  nn::LayerNorm<T> norm;
  nn::FeedForward<T> shared;
  std::vector<nn::FeedForward<T>> priv;

  RoutedFfn() = default;
  RoutedFfn(nn::ParameterStore<T>& s, const std::string& name, std::size_t dim, std::size_t hidden,
            std::size_t n_private, Rng& rng, bool zero_private = false)
      : norm(s, name + ".norm", dim), shared(s, name + ".public", dim, hidden, rng) {
    for (std::size_t k = 0; k < n_private; ++k) {
      priv.emplace_back(s, name + ".private" + std::to_string(k), dim, hidden, rng, zero_private);
    }
  }

  /// x + FFN_public(LN(x)) + FFN_private[d](LN(x)). Unselected private FFNs never touch the tape.
  Var<T> operator()(Tape<T>& tape, Var<T> x, int dialect) const {
    auto y = norm(tape, x);
    auto f = shared(tape, y);
    if (!priv.empty()) {
      if (dialect < 0 || std::size_t(dialect) >= priv.size()) {
        throw ModelError("dialect id " + std::to_string(dialect) + " out of range [0, " + std::to_string(priv.size()) + ")");
      }
      f = nn::add(f, priv[std::size_t(dialect)](tape, y));
    }
    return nn::add(x, f);
  }
};

template <typename T>
struct DsdrBlock {
  nn::LayerNorm<T> attn_norm;
  nn::Linear<T> q, k, v, o;
  RoutedFfn<T> ffn;
  std::size_t heads = 1;
  std::size_t n_dialects = 0;

  DsdrBlock() = default;
  DsdrBlock(nn::ParameterStore<T>& s, const std::string& name, std::size_t dim, std::size_t ffn_dim, std::size_t h,
            std::size_t dialects, bool with_private, Rng& rng, bool zero_private = false)
      : attn_norm(s, name + ".attn.norm", dim),
        q(s, name + ".attn.q", dim, dim, rng),
        k(s, name + ".attn.k", dim, dim, rng),
        v(s, name + ".attn.v", dim, dim, rng),
        o(s, name + ".attn.o", dim, dim, rng),
        ffn(s, name + ".ffn", dim, ffn_dim, with_private ? dialects : 0, rng, zero_private),
        heads(h),
        n_dialects(dialects) {}
};

/// Pre-norm block: a = h + MHA(LN(h)); out = a + FFN_public(LN(a)) + FFN_private[d](LN(a)).
template <typename T>
Var<T> dsdr_forward(Tape<T>& tape, Var<T> h, int dialect, const DsdrBlock<T>& b) {
  if (dialect < 0 || std::size_t(dialect) >= b.n_dialects) {
    throw ModelError("dialect id " + std::to_string(dialect) + " out of range [0, " + std::to_string(b.n_dialects) + ")");
  }
  auto x = b.attn_norm(tape, h);
  auto attn = b.o(tape, nn::scaled_dot_attention(b.q(tape, x), b.k(tape, x), b.v(tape, x), b.heads));
  return b.ffn(tape, nn::add(h, attn), dialect);
}

/// Unit speaker and dialect vectors plus the fused offset added to text features.
template <typename T>
struct Style {
  Var<T> h_spk;
  Var<T> h_did;
  Var<T> offset;
};

template <typename T>
class FmsdModel {
 public:
  FmsdModel(ModelConfig cfg, ModelVariant variant = {}, std::uint64_t seed = 1) : cfg_(std::move(cfg)), variant_(variant) {
    cfg_.validate();
    Rng rng(seed, 0x4d4f'4445'4cULL);
    const auto& c = cfg_;
    auto& s = store_;
    ref_conv1_ = nn::Conv1d<T>(s, "ref.conv1", c.channels, c.ref_hidden, 3, rng, false);
    ref_conv2_ = nn::Conv1d<T>(s, "ref.conv2", c.ref_hidden, c.ref_hidden, 3, rng, false);
    ref_out_ = nn::Linear<T>(s, "ref.out", c.ref_hidden, c.speaker_dim, rng, false);
    if (c.ref_projection) ref_proj_ = nn::Linear<T>(s, "ref.proj", c.speaker_dim, c.dialect_dim, rng, false);
    dialect_table_ = nn::Embedding<T>(s, "dialect", c.n_dialects, c.dialect_dim, rng);
    fusion_ = nn::Linear<T>(s, "fusion", c.speaker_dim + c.dialect_dim, c.d_model, rng);
    token_table_ = nn::Embedding<T>(s, "text.embed", c.vocab_size, c.d_model, rng);
    for (std::size_t b = 0; b < c.n_dsdr_blocks; ++b) {
      blocks_.emplace_back(s, "text.block" + std::to_string(b), c.d_model, c.dsdr_ffn_dim, c.heads, c.n_dialects,
                           !variant_.no_dsdr, rng);
    }
    text_norm_ = nn::LayerNorm<T>(s, "text.norm", c.d_model);
    dur_conv1_ = nn::Conv1d<T>(s, "dur.conv1", c.d_model, c.dur_hidden, 3, rng);
    dur_norm1_ = nn::LayerNorm<T>(s, "dur.norm1", c.dur_hidden);
    dur_conv2_ = nn::Conv1d<T>(s, "dur.conv2", c.dur_hidden, c.dur_hidden, 3, rng);
    dur_norm2_ = nn::LayerNorm<T>(s, "dur.norm2", c.dur_hidden);
    dur_out_ = nn::Linear<T>(s, "dur.out", c.dur_hidden, 1, rng);
    dec_in_ = nn::Conv1d<T>(s, "dec.in", c.channels + c.d_model, c.dec_hidden, 3, rng);
    dec_cond_ = nn::Linear<T>(s, "dec.cond", c.d_model + c.time_embed_dim, c.dec_hidden, rng);
    for (std::size_t l = 0; l < c.dec_layers; ++l) {
      const std::string n = "dec.layer" + std::to_string(l);
      dec_norms_.emplace_back(s, n + ".norm", c.dec_hidden);
      dec_convs_.emplace_back(s, n + ".conv", c.dec_hidden, c.dec_hidden, 3, rng);
      if (c.dsdr_in_decoder) {
        dec_ffns_.emplace_back(s, n + ".ffn", c.dec_hidden, c.dsdr_ffn_dim, variant_.no_dsdr ? 0 : c.n_dialects, rng);
      }
    }
    dec_out_norm_ = nn::LayerNorm<T>(s, "dec.out.norm", c.dec_hidden);
    dec_out_ = nn::Linear<T>(s, "dec.out", c.dec_hidden, c.channels, rng);
  }

  FmsdModel(const FmsdModel&) = delete;
  FmsdModel& operator=(const FmsdModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const ModelVariant& variant() const { return variant_; }
  nn::ParameterStore<T>& params() { return store_; }
  const nn::ParameterStore<T>& params() const { return store_; }
  const std::vector<DsdrBlock<T>>& blocks() const { return blocks_; }

  void check_dialect(int dialect) const {
    if (dialect < 0 || std::size_t(dialect) >= cfg_.n_dialects) {
      throw ModelError("dialect id " + std::to_string(dialect) + " out of range [0, " +
                       std::to_string(cfg_.n_dialects) + ")");
    }
  }

  /// log1p(x / ref_scale); zero frames stay zero.
  Tensor<T> reference_features(const FrameMatrix& crop) const {
    if (crop.rows() != cfg_.t_crop || crop.cols() != cfg_.channels) {
      throw ModelError("encode_speaker: expected " + std::to_string(cfg_.t_crop) + "x" + std::to_string(cfg_.channels) +
                       " reference crop, got " + shape_str(crop.shape()));
    }
    Tensor<T> f(crop.shape());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(std::log1p(double(crop[i]) / cfg_.ref_scale));
    return f;
  }

  /// Bias-free conv encoder, mean pooling, projection, L2 normalisation. Output is 1×speaker_dim.
  Var<T> encode_speaker(Tape<T>& tape, const FrameMatrix& crop) const {
    auto x = tape.constant(reference_features(crop), "reference");
    auto h = nn::relu(ref_conv1_(tape, x));
    h = nn::relu(ref_conv2_(tape, h));
    return nn::l2_normalize_rows(ref_out_(tape, nn::mean_rows(h)));
  }

  /// Unit row from the dialect table, or the zero vector when dialect IDs are ablated.
  Var<T> embed_dialect(Tape<T>& tape, int dialect) const {
    check_dialect(dialect);
    if (variant_.no_dialect_id) return tape.constant(Tensor<T>::matrix(1, cfg_.dialect_dim), "zero_dialect");
    return nn::l2_normalize_rows(dialect_table_(tape, {std::size_t(dialect)}));
  }

  /// Linear(h_spk ‖ h_did), a 1×d_model row.
  Var<T> style_offset(Tape<T>& tape, Var<T> h_spk, Var<T> h_did) const {
    if (h_spk.cols() != cfg_.speaker_dim || h_did.cols() != cfg_.dialect_dim) {
      throw ModelError("fuse_style: expected speaker/dialect widths " + std::to_string(cfg_.speaker_dim) + "/" +
                       std::to_string(cfg_.dialect_dim));
    }
    return fusion_(tape, nn::concat_cols<T>({h_spk, h_did}));
  }

  Style<T> make_style(Tape<T>& tape, const FrameMatrix& crop, int dialect) const {
    Style<T> s;
    s.h_spk = encode_speaker(tape, crop);
    s.h_did = embed_dialect(tape, dialect);
    s.offset = style_offset(tape, s.h_spk, s.h_did);
    return s;
  }

  Var<T> fuse_style(Tape<T>& tape, Var<T> h_text, Var<T> h_spk, Var<T> h_did) const {
    if (h_text.cols() != cfg_.d_model) throw ModelError("fuse_style: text width must equal d_model");
    return nn::add_row(h_text, style_offset(tape, h_spk, h_did));
  }

  /// Token embedding + positions, fused style, DSDR blocks, final norm. Rows = tokens.
  Var<T> encode_text(Tape<T>& tape, const std::vector<int>& tokens, const Style<T>& style, int dialect) const {
    if (tokens.empty()) throw ModelError("encode_text: empty token sequence");
    check_dialect(dialect);
    std::vector<std::size_t> ids;
    for (int t : tokens) {
      if (t < 0 || std::size_t(t) >= cfg_.vocab_size) throw ModelError("encode_text: token id " + std::to_string(t) + " out of range");
      ids.push_back(std::size_t(t));
    }
    auto h = nn::add(token_table_(tape, ids), tape.constant(positional_encoding<T>(ids.size(), cfg_.d_model), "positions"));
    h = nn::add_row(h, style.offset);
    for (const auto& b : blocks_) h = dsdr_forward(tape, h, dialect, b);
    return text_norm_(tape, h);
  }

  /// Per-token log-durations, T_tok×1.
  Var<T> predict_log_durations(Tape<T>& tape, Var<T> encoded) const {
    auto x = cfg_.detach_duration_input ? nn::detach(encoded) : encoded;
    auto h = dur_norm1_(tape, nn::relu(dur_conv1_(tape, x)));
    h = dur_norm2_(tape, nn::relu(dur_conv2_(tape, h)));
    return dur_out_(tape, h);
  }

  /// Length-regulated text features plus a frame-level positional encoding.
  Var<T> frame_conditioning(Tape<T>& tape, Var<T> encoded, const std::vector<int>& counts) const {
    auto up = upsample(encoded, counts);
    return nn::add(up, tape.constant(positional_encoding<T>(up.rows(), cfg_.d_model), "frame_positions"));
  }

  DurationPlan predict_durations(Tape<T>& tape, Var<T> encoded) const {
    const auto& v = predict_log_durations(tape, encoded).value();
    std::vector<double> logd(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) logd[i] = double(v[i]);
    return make_plan(std::move(logd));
  }

  /// v_θ(x_t, t | cond, style). x_t and the result are T_frames×channels in the flow domain.
  Var<T> velocity(Tape<T>& tape, Var<T> x_t, double t, Var<T> cond, Var<T> style_offset, int dialect) const {
    if (x_t.rows() != cond.rows()) throw ModelError("decoder: x_t and conditioning lengths differ");
    auto h = dec_in_(tape, nn::concat_cols<T>({x_t, cond}));
    auto c = nn::concat_cols<T>({style_offset, tape.constant(time_embedding<T>(t, cfg_.time_embed_dim), "time_embed")});
    h = nn::silu(nn::add_row(h, dec_cond_(tape, c)));
    for (std::size_t l = 0; l < dec_convs_.size(); ++l) {
      h = nn::add(h, dec_convs_[l](tape, nn::silu(dec_norms_[l](tape, h))));
      if (!dec_ffns_.empty()) h = dec_ffns_[l](tape, h, dialect);
    }
    return dec_out_(tape, dec_out_norm_(tape, h));
  }

  /// cos(P·h_spk, h_did), where P is the alignment projection (identity when disabled).
  Var<T> reference_similarity(Tape<T>& tape, Var<T> h_spk, Var<T> h_did) const {
    Var<T> a = h_spk;
    if (cfg_.ref_projection) {
      a = nn::l2_normalize_rows(ref_proj_(tape, h_spk));
    } else if (h_spk.cols() != h_did.cols()) {
      throw ModelError("reference_loss: dimension mismatch without projection");
    }
    return nn::sum(nn::mul(a, h_did));
  }

  /// cos² by default, the raw cosine in literal mode.
  Var<T> reference_loss(Tape<T>& tape, Var<T> h_spk, Var<T> h_did) const {
    auto c = reference_similarity(tape, h_spk, h_did);
    return cfg_.ref_loss_mode == RefLossMode::kSquared ? nn::mul(c, c) : c;
  }

  Tensor<T> to_flow_domain(const FrameMatrix& frames) const {
    Tensor<T> z(frames.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = static_cast<T>((std::log(double(frames[i]) + cfg_.feature_floor) - cfg_.feature_mean) / cfg_.feature_std);
    }
    return z;
  }

  FrameMatrix from_flow_domain(const Tensor<T>& z) const {
    FrameMatrix f(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double x = std::exp(double(z[i]) * cfg_.feature_std + cfg_.feature_mean) - cfg_.feature_floor;
      f[i] = static_cast<float>(std::max(0.0, x));
    }
    return f;
  }

 private:
  ModelConfig cfg_;
  ModelVariant variant_;
  nn::ParameterStore<T> store_;
  nn::Conv1d<T> ref_conv1_, ref_conv2_;
  nn::Linear<T> ref_out_, ref_proj_;
  nn::Embedding<T> dialect_table_;
  nn::Linear<T> fusion_;
  nn::Embedding<T> token_table_;
  std::vector<DsdrBlock<T>> blocks_;
  nn::LayerNorm<T> text_norm_;
  nn::Conv1d<T> dur_conv1_, dur_conv2_;
  nn::LayerNorm<T> dur_norm1_, dur_norm2_;
  nn::Linear<T> dur_out_;
  nn::Conv1d<T> dec_in_;
  nn::Linear<T> dec_cond_;
  std::vector<nn::LayerNorm<T>> dec_norms_;
  std::vector<nn::Conv1d<T>> dec_convs_;
  std::vector<RoutedFfn<T>> dec_ffns_;
  nn::LayerNorm<T> dec_out_norm_;
  nn::Linear<T> dec_out_;
};

struct SynthOptions {
  std::size_t steps = 0;  // 0 = model default
  std::uint64_t seed = 0;
};

struct SynthResult {
  FrameMatrix frames;
  DurationPlan plan;
  std::vector<float> speaker_embedding;
  double seconds = 0.0;
};

/// Euler integration of dx/dt = v_θ from seeded noise at t=0 to t=1; returns flow-domain frames.
template <typename T>
Tensor<T> decode_flow(const FmsdModel<T>& model, Tape<T>& tape, Var<T> cond, Var<T> style_offset, int dialect,
                      std::size_t steps, Rng& rng) {
  if (steps == 0) throw ModelError("decode_flow: steps must be at least 1");
  Tensor<T> x = Tensor<T>::matrix(cond.rows(), model.config().channels);
  for (auto& v : x.data()) v = static_cast<T>(rng.normal());
  const double dt = 1.0 / double(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const auto& v = model.velocity(tape, tape.constant(x, "x_t"), double(k) * dt, cond, style_offset, dialect).value();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<T>(dt) * v[i];
  }
  return x;
}

/// Whole inference pipeline on pre-tokenised text. Reentrant: all state is per call.
template <typename T>
SynthResult synthesize(const FmsdModel<T>& model, const std::vector<int>& tokens, const FrameMatrix& reference,
                       int dialect, SynthOptions opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng crop_rng(opt.seed, 0x4352'4f50ULL);
  Rng noise_rng(opt.seed, 0x4e4f'4953'45ULL);
  Tape<T> tape(false);
  const auto crop = crop_reference(reference, model.config().t_crop, crop_rng);
  const auto style = model.make_style(tape, crop, dialect);
  auto encoded = model.encode_text(tape, tokens, style, dialect);
  SynthResult r;
  r.plan = model.predict_durations(tape, encoded);
  auto cond = model.frame_conditioning(tape, encoded, r.plan.counts);
  const std::size_t steps = opt.steps ? opt.steps : model.config().cfm_steps;
  r.frames = model.from_flow_domain(decode_flow(model, tape, cond, style.offset, dialect, steps, noise_rng));
  for (auto v : style.h_spk.value().data()) r.speaker_embedding.push_back(static_cast<float>(v));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Speaker embedding of arbitrary frames, cropped with a seeded window.
template <typename T>
std::vector<double> speaker_embedding(const FmsdModel<T>& model, const FrameMatrix& frames, std::uint64_t seed) {
  Rng rng(seed, 0x4352'4f50ULL);
  Tape<T> tape(false);
  auto h = model.encode_speaker(tape, crop_reference(frames, model.config().t_crop, rng));
  std::vector<double> out;
  for (auto v : h.value().data()) out.push_back(double(v));
  return out;
}

}  // namespace fmsd::model
