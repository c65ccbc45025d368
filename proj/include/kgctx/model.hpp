#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "kgctx/io.hpp"
#include "kgctx/rng.hpp"
#include "kgctx/tokenizer.hpp"

namespace kgctx {

/// Relative position bias: buckets per table and the distance at which the
/// log-spaced buckets saturate.
inline constexpr std::size_t kRelativeBuckets = 32;
inline constexpr std::size_t kRelativeMaxDistance = 128;

struct ModelConfig {
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t ff_width = 512;
  std::size_t max_source_len = 512;
  std::size_t max_target_len = 32;
  std::size_t vocab_size = 4000;
  double dropout = 0.0;
  double label_smoothing = 0.0;
  std::string positional = "relative";
  // Output logits reuse the token embedding instead of a separate matrix.
  bool tie_embeddings = true;

  void validate() const {
    if (width == 0 || heads == 0 || width % heads != 0) {
      throw ValidationError("model width must be a positive multiple of heads");
    }
    if (vocab_size < SubwordVocab::kBaseSize) throw ValidationError("vocab_size must be >= 259");
    if (max_source_len == 0 || max_target_len == 0) throw ValidationError("max lengths must be > 0");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("dropout must be in [0, 1)");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
      throw ValidationError("label_smoothing must be in [0, 1)");
    }
    if (positional != "sinusoidal" && positional != "relative") {
      throw ValidationError("unsupported positional encoding '" + positional + "'");
    }
  }

  /// `key = value` lines, fixed key order.
  std::string to_text() const {
    std::ostringstream o;
    o.precision(17);
    o << "model.encoder_layers = " << encoder_layers << '\n'
      << "model.decoder_layers = " << decoder_layers << '\n'
      << "model.heads = " << heads << '\n'
      << "model.width = " << width << '\n'
      << "model.ff_width = " << ff_width << '\n'
      << "model.max_source_len = " << max_source_len << '\n'
      << "model.max_target_len = " << max_target_len << '\n'
      << "model.vocab_size = " << vocab_size << '\n'
      << "model.dropout = " << dropout << '\n'
      << "model.label_smoothing = " << label_smoothing << '\n'
      << "model.positional = " << positional << '\n'
      << "model.tie_embeddings = " << (tie_embeddings ? "true" : "false") << '\n';
    return o.str();
  }

  /// Applies one `model.*` key; returns false for keys it does not own.
  bool set(std::string_view key, std::string_view value) {
    const std::string v(value);
    if (key == "model.encoder_layers") encoder_layers = std::stoul(v);
    else if (key == "model.decoder_layers") decoder_layers = std::stoul(v);
    else if (key == "model.heads") heads = std::stoul(v);
    else if (key == "model.width") width = std::stoul(v);
    else if (key == "model.ff_width") ff_width = std::stoul(v);
    else if (key == "model.max_source_len") max_source_len = std::stoul(v);
    else if (key == "model.max_target_len") max_target_len = std::stoul(v);
    else if (key == "model.vocab_size") vocab_size = std::stoul(v);
    else if (key == "model.dropout") dropout = std::stod(v);
    else if (key == "model.label_smoothing") label_smoothing = std::stod(v);
    else if (key == "model.positional") positional = v;
    else if (key == "model.tie_embeddings") {
      if (v == "true" || v == "1") tie_embeddings = true;
      else if (v == "false" || v == "0") tie_embeddings = false;
      else throw ValidationError("model.tie_embeddings must be true or false");
    }
    else return false;
    return true;
  }

  static ModelConfig from_text(std::string_view text) {
    ModelConfig c;
    for (auto line : split(text, '\n')) {
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) continue;
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Closed-form parameter count. Per encoder layer: two RMS-norm gains,
/// four width x width attention projections, and a biased two-layer
/// feed-forward block. Decoder layers add a cross-attention block and a
/// third norm. Plus the shared token embedding, the two final norms and the
/// biased output projection (only its bias when embeddings are tied).
/// Relative positions add one buckets x heads table per stack.
inline std::size_t parameter_count(const ModelConfig& c) {
  const auto d = c.width, f = c.ff_width, v = c.vocab_size;
  const auto ffn = 2 * d * f + f + d;
  const auto enc = 4 * d * d + 2 * d + ffn;
  const auto dec = 8 * d * d + 3 * d + ffn;
  const auto rel = c.positional == "relative" ? 2 * kRelativeBuckets * c.heads : 0;
  const auto out = c.tie_embeddings ? v : d * v + v;
  return v * d + c.encoder_layers * enc + d + c.decoder_layers * dec + d + out + rel;
}

namespace detail {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using MatMap = Eigen::Map<Mat<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const Mat<Scalar>>;

inline constexpr double kNormEps = 1e-6;
inline constexpr std::size_t kNoTensor = static_cast<std::size_t>(-1);

// Bucket of key position minus query position. Bidirectional tables split
// the buckets between the two signs; causal tables only see distance <= 0.
// Small distances get their own bucket, larger ones share log-spaced buckets.
inline std::size_t relative_bucket(std::ptrdiff_t relative, bool bidirectional) {
  std::size_t buckets = kRelativeBuckets;
  std::size_t ret = 0;
  std::ptrdiff_t n = -relative;
  if (bidirectional) {
    buckets /= 2;
    if (n < 0) ret += buckets;
    n = n < 0 ? -n : n;
  } else {
    n = std::max<std::ptrdiff_t>(n, 0);
  }
  const auto exact = static_cast<std::ptrdiff_t>(buckets / 2);
  if (n < exact) return ret + static_cast<std::size_t>(n);
  const double scaled = std::log(static_cast<double>(n) / static_cast<double>(exact)) /
                        std::log(static_cast<double>(kRelativeMaxDistance) / static_cast<double>(exact)) *
                        static_cast<double>(buckets - static_cast<std::size_t>(exact));
  const auto large = static_cast<std::size_t>(exact) + static_cast<std::size_t>(scaled);
  return ret + std::min(large, buckets - 1);
}

struct AttnIds {
  std::size_t wq, wk, wv, wo;
};
struct FfnIds {
  std::size_t w1, b1, w2, b2;
};
struct EncoderLayerIds {
  std::size_t norm1;
  AttnIds attn;
  std::size_t norm2;
  FfnIds ffn;
};
struct DecoderLayerIds {
  std::size_t norm1;
  AttnIds self_attn;
  std::size_t norm2;
  AttnIds cross_attn;
  std::size_t norm3;
  FfnIds ffn;
};

template <typename Scalar>
struct NormCache {
  Mat<Scalar> x;
  std::vector<Scalar> inv_rms;
};

template <typename Scalar>
struct AttnCache {
  Mat<Scalar> xq, xkv, q, k, v, concat;
  std::vector<Mat<Scalar>> probs;
  std::size_t rel_bias = kNoTensor;
  bool bidirectional = false;
};

template <typename Scalar>
struct FfnCache {
  Mat<Scalar> x, pre, hidden;
};

template <typename Scalar>
struct DropoutCache {
  Mat<Scalar> mask;  // empty when inactive
};

template <typename Scalar>
struct EncoderLayerCache {
  NormCache<Scalar> n1, n2;
  AttnCache<Scalar> attn;
  FfnCache<Scalar> ffn;
  DropoutCache<Scalar> d1, d2;
};

template <typename Scalar>
struct DecoderLayerCache {
  NormCache<Scalar> n1, n2, n3;
  AttnCache<Scalar> self_attn, cross_attn;
  FfnCache<Scalar> ffn;
  DropoutCache<Scalar> d1, d2, d3;
};

template <typename Scalar>
struct ForwardCache {
  std::vector<TokenId> source, decoder_input;
  std::vector<std::uint8_t> source_valid;
  std::vector<EncoderLayerCache<Scalar>> enc;
  NormCache<Scalar> enc_norm;
  Mat<Scalar> memory;
  std::vector<DecoderLayerCache<Scalar>> dec;
  NormCache<Scalar> dec_norm;
  Mat<Scalar> final_hidden;
  Mat<Scalar> logits;
};

template <typename Scalar>
Mat<Scalar> rms_norm(const Mat<Scalar>& x, const ConstMatMap<Scalar>& gain, NormCache<Scalar>* cache) {
  Mat<Scalar> y(x.rows(), x.cols());
  std::vector<Scalar> inv(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar ms = x.row(i).squaredNorm() / static_cast<Scalar>(x.cols());
    inv[static_cast<std::size_t>(i)] = Scalar(1) / std::sqrt(ms + static_cast<Scalar>(kNormEps));
    y.row(i) = (x.row(i) * inv[static_cast<std::size_t>(i)]).cwiseProduct(gain.row(0));
  }
  if (cache) {
    cache->x = x;
    cache->inv_rms = std::move(inv);
  }
  return y;
}

template <typename Scalar>
Mat<Scalar> rms_norm_backward(const Mat<Scalar>& dy, const NormCache<Scalar>& c,
                              const ConstMatMap<Scalar>& gain, MatMap<Scalar> dgain) {
  const auto d = static_cast<Scalar>(dy.cols());
  Mat<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Scalar inv = c.inv_rms[static_cast<std::size_t>(i)];
    dgain.row(0) += dy.row(i).cwiseProduct(c.x.row(i)) * inv;
    RowVec<Scalar> dyg = dy.row(i).cwiseProduct(gain.row(0));
    const Scalar dot = dyg.dot(c.x.row(i));
    dx.row(i) = dyg * inv - c.x.row(i) * (inv * inv * inv * dot / d);
  }
  return dx;
}

// Row-wise masked softmax in place. A key j is visible to query i when
// key_valid[j] (or key_valid is empty) and, if causal, j <= i.
template <typename Scalar>
void masked_softmax(Mat<Scalar>& s, std::span<const std::uint8_t> key_valid, bool causal) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const bool ok = (key_valid.empty() || key_valid[static_cast<std::size_t>(j)]) && (!causal || j <= i);
      if (!ok) s(i, j) = -std::numeric_limits<Scalar>::infinity();
      else mx = std::max(mx, s(i, j));
    }
    Scalar sum = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const Scalar e = std::isinf(s(i, j)) ? Scalar(0) : std::exp(s(i, j) - mx);
      s(i, j) = e;
      sum += e;
    }
    s.row(i) /= sum;
  }
}

}  // namespace detail

/// Encoder-decoder transformer with pre-norm RMS normalization, ReLU
/// feed-forward blocks, sinusoidal positions or relative position bias, and
/// a shared token embedding.
/// Parameters live in one flat buffer; tensors are views into it.
template <typename Scalar = float>
class Seq2SeqModel {
 public:
  using Mat = detail::Mat<Scalar>;
  using MatMap = detail::MatMap<Scalar>;
  using ConstMatMap = detail::ConstMatMap<Scalar>;

  struct TensorInfo {
    std::string name;
    std::size_t rows, cols, offset;
  };

  explicit Seq2SeqModel(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    build_layout();
    params_.assign(total_, Scalar(0));
    initialize(seed);
    build_positions();
  }

  const ModelConfig& config() const { return config_; }
  std::size_t num_parameters() const { return total_; }
  std::span<Scalar> parameters() { return params_; }
  std::span<const Scalar> parameters() const { return params_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::size_t step() const { return step_; }
  void set_step(std::size_t s) { step_ = s; }

  std::size_t tensor_index(std::string_view name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name == name) return i;
    }
    throw LookupError("no tensor named '" + std::string(name) + "'");
  }
  MatMap tensor(std::string_view name) { return view(params_, tensor_index(name)); }

  // ---- inference ---------------------------------------------------------

  /// Logits for every target position: row t predicts target[t] from the
  /// source and target[0..t). Returns target.size() x vocab.
  Mat forward_logits(std::span<const TokenId> source, std::span<const TokenId> target) const {
    check_lengths(source, target.size());
    detail::ForwardCache<Scalar> cache;
    forward(source, decoder_input(target), cache, nullptr);
    return std::move(cache.logits);
  }

  /// Sum of log-probabilities of target followed by end-of-sequence.
  double sequence_log_prob(std::span<const TokenId> source, std::span<const TokenId> target) const {
    std::vector<TokenId> full(target.begin(), target.end());
    full.push_back(SubwordVocab::kEos);
    check_lengths(source, full.size());
    detail::ForwardCache<Scalar> cache;
    forward(source, decoder_input(full), cache, nullptr);
    return realized_log_prob(cache.logits, full);
  }

  /// Scores several targets against one source, sharing the encoder pass.
  std::vector<double> sequence_log_probs(std::span<const TokenId> source,
                                         const std::vector<std::vector<TokenId>>& targets) const {
    check_lengths(source, 1);
    detail::ForwardCache<Scalar> enc;
    encode(source, enc, nullptr);
    std::vector<double> out;
    out.reserve(targets.size());
    for (const auto& t : targets) {
      std::vector<TokenId> full(t.begin(), t.end());
      full.push_back(SubwordVocab::kEos);
      check_lengths(source, full.size());
      detail::ForwardCache<Scalar> cache;
      cache.memory = enc.memory;
      cache.source_valid = enc.source_valid;
      decode(decoder_input(full), cache, nullptr);
      out.push_back(realized_log_prob(cache.logits, full));
    }
    return out;
  }

  struct Sample {
    std::vector<TokenId> ids;  // without the end-of-sequence token
    double log_prob = 0.0;     // at temperature 1, including end-of-sequence when emitted
    bool terminated = false;
  };

  /// n independent ancestral samples decoded in one batch with cached keys
  /// and values. temperature <= 0 selects greedy (argmax) decoding. Each
  /// sample draws from its own stream derived from (seed, index).
  std::vector<Sample> sample(std::span<const TokenId> source, std::size_t n, double temperature,
                             std::uint64_t seed) const;

  // ---- training ----------------------------------------------------------

  struct Example {
    std::vector<TokenId> source;
    std::vector<TokenId> target;  // without end-of-sequence; appended internally
  };

  /// Mean token cross-entropy over the batch and its gradient, accumulated
  /// into grad (same layout as parameters()). Pads in targets are ignored.
  double loss_and_gradient(std::span<const Example> batch, std::span<Scalar> grad,
                           std::uint64_t dropout_seed = 0, std::size_t threads = 1) const;

  double loss(std::span<const Example> batch) const {
    std::vector<Scalar> g(total_, Scalar(0));
    return loss_and_gradient(batch, g, 0, 1);
  }

  // Used when restoring a checkpoint.
  void load_parameters(std::span<const float> values) {
    if (values.size() != total_) throw Error("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < total_; ++i) params_[i] = static_cast<Scalar>(values[i]);
  }

 private:
  MatMap view(std::span<Scalar> buf, std::size_t id) const {
    const auto& t = tensors_[id];
    return MatMap(buf.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                  static_cast<Eigen::Index>(t.cols));
  }
  ConstMatMap cview(std::size_t id) const {
    const auto& t = tensors_[id];
    return ConstMatMap(params_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                       static_cast<Eigen::Index>(t.cols));
  }

  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    tensors_.push_back({std::move(name), rows, cols, total_});
    total_ += rows * cols;
    return tensors_.size() - 1;
  }

  detail::AttnIds add_attn(const std::string& prefix) {
    const auto d = config_.width;
    return {add(prefix + ".wq", d, d), add(prefix + ".wk", d, d), add(prefix + ".wv", d, d),
            add(prefix + ".wo", d, d)};
  }
  detail::FfnIds add_ffn(const std::string& prefix) {
    const auto d = config_.width, f = config_.ff_width;
    return {add(prefix + ".w1", d, f), add(prefix + ".b1", 1, f), add(prefix + ".w2", f, d),
            add(prefix + ".b2", 1, d)};
  }

  void build_layout() {
    const auto d = config_.width;
    embed_ = add("embed", config_.vocab_size, d);
    if (config_.positional == "relative") {
      enc_rel_ = add("enc.rel_bias", kRelativeBuckets, config_.heads);
      dec_rel_ = add("dec.rel_bias", kRelativeBuckets, config_.heads);
    }
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const auto p = "enc." + std::to_string(l);
      detail::EncoderLayerIds ids{};
      ids.norm1 = add(p + ".norm1", 1, d);
      ids.attn = add_attn(p + ".attn");
      ids.norm2 = add(p + ".norm2", 1, d);
      ids.ffn = add_ffn(p + ".ffn");
      enc_.push_back(ids);
    }
    enc_norm_ = add("enc.norm", 1, d);
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      const auto p = "dec." + std::to_string(l);
      detail::DecoderLayerIds ids{};
      ids.norm1 = add(p + ".norm1", 1, d);
      ids.self_attn = add_attn(p + ".self");
      ids.norm2 = add(p + ".norm2", 1, d);
      ids.cross_attn = add_attn(p + ".cross");
      ids.norm3 = add(p + ".norm3", 1, d);
      ids.ffn = add_ffn(p + ".ffn");
      dec_.push_back(ids);
    }
    dec_norm_ = add("dec.norm", 1, d);
    if (!config_.tie_embeddings) out_w_ = add("out.w", d, config_.vocab_size);
    out_b_ = add("out.b", 1, config_.vocab_size);
  }

  void initialize(std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x696e6974ULL}));
    for (const auto& t : tensors_) {
      const bool is_norm = t.name.find("norm") != std::string::npos;
      const bool is_bias = (t.rows == 1 && !is_norm) || t.name.find("rel_bias") != std::string::npos;
      for (std::size_t i = 0; i < t.rows * t.cols; ++i) {
        Scalar v;
        if (is_norm) v = Scalar(1);
        else if (is_bias) v = Scalar(0);
        else if (t.name == "embed") v = static_cast<Scalar>(rng.normal() / std::sqrt(double(config_.width)));
        else v = static_cast<Scalar>(rng.normal() / std::sqrt(double(t.rows)));
        params_[t.offset + i] = v;
      }
    }
  }

  void build_positions() {
    const auto n = std::max(config_.max_source_len, config_.max_target_len) + 1;
    const auto d = config_.width;
    positions_ = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    if (config_.positional != "sinusoidal") return;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        positions_(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) =
            static_cast<Scalar>(std::sin(static_cast<double>(p) * freq));
        if (i + 1 < d) {
          positions_(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i + 1)) =
              static_cast<Scalar>(std::cos(static_cast<double>(p) * freq));
        }
      }
    }
  }

  void check_lengths(std::span<const TokenId> source, std::size_t target_len) const {
    if (source.size() > config_.max_source_len) {
      throw ValidationError("source length " + std::to_string(source.size()) + " exceeds " +
                            std::to_string(config_.max_source_len));
    }
    if (target_len > config_.max_target_len) {
      throw ValidationError("target length " + std::to_string(target_len) + " exceeds " +
                            std::to_string(config_.max_target_len));
    }
    for (auto id : source) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw ValidationError("source token id out of range");
      }
    }
  }

  static std::vector<TokenId> decoder_input(std::span<const TokenId> target) {
    std::vector<TokenId> in;
    in.reserve(target.size());
    in.push_back(SubwordVocab::kBos);
    for (std::size_t i = 0; i + 1 < target.size(); ++i) in.push_back(target[i]);
    in.resize(target.size());
    return in;
  }

  static double realized_log_prob(const Mat& logits, std::span<const TokenId> target) {
    double total = 0.0;
    for (std::size_t t = 0; t < target.size(); ++t) {
      const auto row = logits.row(static_cast<Eigen::Index>(t));
      const double mx = static_cast<double>(row.maxCoeff());
      double sum = 0.0;
      for (Eigen::Index j = 0; j < row.cols(); ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
      total += static_cast<double>(row(target[t])) - mx - std::log(sum);
    }
    return total;
  }

  Mat embed(std::span<const TokenId> ids) const {
    const auto d = static_cast<Eigen::Index>(config_.width);
    const auto table = cview(embed_);
    const Scalar scale = static_cast<Scalar>(std::sqrt(static_cast<double>(config_.width)));
    Mat x(static_cast<Eigen::Index>(ids.size()), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      x.row(r) = table.row(ids[i]) * scale + positions_.row(r);
    }
    return x;
  }

  void dropout(Mat& x, detail::DropoutCache<Scalar>& c, Rng* rng) const {
    if (!rng || config_.dropout <= 0.0) {
      c.mask.resize(0, 0);
      return;
    }
    const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - config_.dropout));
    c.mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      c.mask.data()[i] = rng->bernoulli(config_.dropout) ? Scalar(0) : keep_scale;
    }
    x = x.cwiseProduct(c.mask);
  }
  Mat output_logits(const Mat& hidden) const {
    Mat logits;
    if (config_.tie_embeddings) logits.noalias() = hidden * cview(embed_).transpose();
    else logits.noalias() = hidden * cview(out_w_);
    logits.rowwise() += cview(out_b_).row(0);
    return logits;
  }

  // Row-major bucket ids for a rows x cols score matrix.
  static std::vector<std::size_t> bucket_matrix(Eigen::Index rows, Eigen::Index cols, bool bidirectional) {
    std::vector<std::size_t> b(static_cast<std::size_t>(rows * cols));
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        b[static_cast<std::size_t>(i * cols + j)] = detail::relative_bucket(j - i, bidirectional);
      }
    }
    return b;
  }

  static Mat dropout_backward(const Mat& dy, const detail::DropoutCache<Scalar>& c) {
    if (c.mask.size() == 0) return dy;
    return dy.cwiseProduct(c.mask);
  }

  Mat attention(const Mat& xq, const Mat& xkv, const detail::AttnIds& ids,
                std::span<const std::uint8_t> key_valid, bool causal,
                detail::AttnCache<Scalar>& c, std::size_t rel_bias = detail::kNoTensor,
                bool bidirectional = false) const {
    const auto h = static_cast<Eigen::Index>(config_.heads);
    const auto dh = static_cast<Eigen::Index>(config_.width / config_.heads);
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
    c.xq = xq;
    c.xkv = xkv;
    c.q.noalias() = xq * cview(ids.wq);
    c.k.noalias() = xkv * cview(ids.wk);
    c.v.noalias() = xkv * cview(ids.wv);
    c.concat.resize(xq.rows(), xq.cols());
    c.probs.resize(static_cast<std::size_t>(h));
    c.rel_bias = rel_bias;
    c.bidirectional = bidirectional;
    std::vector<std::size_t> buckets;
    if (rel_bias != detail::kNoTensor) buckets = bucket_matrix(xq.rows(), xkv.rows(), bidirectional);
    for (Eigen::Index head = 0; head < h; ++head) {
      Mat s = (c.q.middleCols(head * dh, dh) * c.k.middleCols(head * dh, dh).transpose()) * scale;
      if (rel_bias != detail::kNoTensor) {
        const auto table = cview(rel_bias);
        for (Eigen::Index i = 0; i < s.size(); ++i) {
          s.data()[i] += table(static_cast<Eigen::Index>(buckets[static_cast<std::size_t>(i)]), head);
        }
      }
      detail::masked_softmax(s, key_valid, causal);
      c.concat.middleCols(head * dh, dh).noalias() = s * c.v.middleCols(head * dh, dh);
      c.probs[static_cast<std::size_t>(head)] = std::move(s);
    }
    return c.concat * cview(ids.wo);
  }

  // Returns (d xq, d xkv).
  std::pair<Mat, Mat> attention_backward(const Mat& dout, const detail::AttnCache<Scalar>& c,
                                         const detail::AttnIds& ids, std::span<Scalar> grad) const {
    const auto h = static_cast<Eigen::Index>(config_.heads);
    const auto dh = static_cast<Eigen::Index>(config_.width / config_.heads);
    const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
    view(grad, ids.wo).noalias() += c.concat.transpose() * dout;
    Mat dconcat = dout * cview(ids.wo).transpose();
    Mat dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    std::vector<std::size_t> buckets;
    if (c.rel_bias != detail::kNoTensor) buckets = bucket_matrix(c.xq.rows(), c.xkv.rows(), c.bidirectional);
    for (Eigen::Index head = 0; head < h; ++head) {
      const Mat& p = c.probs[static_cast<std::size_t>(head)];
      const auto doh = dconcat.middleCols(head * dh, dh);
      Mat dp = doh * c.v.middleCols(head * dh, dh).transpose();
      dv.middleCols(head * dh, dh).noalias() = p.transpose() * doh;
      Mat ds = p.cwiseProduct(dp);
      const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = ds.rowwise().sum();
      ds -= p.cwiseProduct(rowdot.replicate(1, p.cols()));
      if (c.rel_bias != detail::kNoTensor) {
        auto g = view(grad, c.rel_bias);
        for (Eigen::Index i = 0; i < ds.size(); ++i) {
          g(static_cast<Eigen::Index>(buckets[static_cast<std::size_t>(i)]), head) += ds.data()[i];
        }
      }
      dq.middleCols(head * dh, dh).noalias() = (ds * c.k.middleCols(head * dh, dh)) * scale;
      dk.middleCols(head * dh, dh).noalias() = (ds.transpose() * c.q.middleCols(head * dh, dh)) * scale;
    }
    view(grad, ids.wq).noalias() += c.xq.transpose() * dq;
    view(grad, ids.wk).noalias() += c.xkv.transpose() * dk;
    view(grad, ids.wv).noalias() += c.xkv.transpose() * dv;
    Mat dxq = dq * cview(ids.wq).transpose();
    Mat dxkv = dk * cview(ids.wk).transpose() + dv * cview(ids.wv).transpose();
    return {std::move(dxq), std::move(dxkv)};
  }

  Mat feed_forward(const Mat& x, const detail::FfnIds& ids, detail::FfnCache<Scalar>& c) const {
    c.x = x;
    c.pre = x * cview(ids.w1);
    c.pre.rowwise() += cview(ids.b1).row(0);
    c.hidden = c.pre.cwiseMax(Scalar(0));
    Mat y = c.hidden * cview(ids.w2);
    y.rowwise() += cview(ids.b2).row(0);
    return y;
  }

  Mat feed_forward_backward(const Mat& dy, const detail::FfnCache<Scalar>& c,
                            const detail::FfnIds& ids, std::span<Scalar> grad) const {
    view(grad, ids.w2).noalias() += c.hidden.transpose() * dy;
    view(grad, ids.b2).row(0) += dy.colwise().sum();
    Mat dh = dy * cview(ids.w2).transpose();
    for (Eigen::Index i = 0; i < dh.size(); ++i) {
      if (c.pre.data()[i] <= Scalar(0)) dh.data()[i] = Scalar(0);
    }
    view(grad, ids.w1).noalias() += c.x.transpose() * dh;
    view(grad, ids.b1).row(0) += dh.colwise().sum();
    return dh * cview(ids.w1).transpose();
  }

  void encode(std::span<const TokenId> source, detail::ForwardCache<Scalar>& c, Rng* rng) const {
    c.source.assign(source.begin(), source.end());
    c.source_valid.resize(source.size());
    bool any = false;
    for (std::size_t i = 0; i < source.size(); ++i) {
      c.source_valid[i] = source[i] != SubwordVocab::kPad;
      any = any || c.source_valid[i];
    }
    if (!any) throw ValidationError("source has no non-pad tokens");
    Mat x = embed(source);
    c.enc.resize(enc_.size());
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const auto& ids = enc_[l];
      auto& lc = c.enc[l];
      Mat a = detail::rms_norm<Scalar>(x, cview(ids.norm1), &lc.n1);
      Mat att = attention(a, a, ids.attn, c.source_valid, false, lc.attn, enc_rel_, true);
      dropout(att, lc.d1, rng);
      x += att;
      Mat b = detail::rms_norm<Scalar>(x, cview(ids.norm2), &lc.n2);
      Mat f = feed_forward(b, ids.ffn, lc.ffn);
      dropout(f, lc.d2, rng);
      x += f;
    }
    c.memory = detail::rms_norm<Scalar>(x, cview(enc_norm_), &c.enc_norm);
  }

  void decode(const std::vector<TokenId>& dec_in, detail::ForwardCache<Scalar>& c, Rng* rng) const {
    c.decoder_input = dec_in;
    Mat y = embed(dec_in);
    c.dec.resize(dec_.size());
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const auto& ids = dec_[l];
      auto& lc = c.dec[l];
      Mat a = detail::rms_norm<Scalar>(y, cview(ids.norm1), &lc.n1);
      Mat s = attention(a, a, ids.self_attn, {}, true, lc.self_attn, dec_rel_, false);
      dropout(s, lc.d1, rng);
      y += s;
      Mat b = detail::rms_norm<Scalar>(y, cview(ids.norm2), &lc.n2);
      Mat x = attention(b, c.memory, ids.cross_attn, c.source_valid, false, lc.cross_attn);
      dropout(x, lc.d2, rng);
      y += x;
      Mat e = detail::rms_norm<Scalar>(y, cview(ids.norm3), &lc.n3);
      Mat f = feed_forward(e, ids.ffn, lc.ffn);
      dropout(f, lc.d3, rng);
      y += f;
    }
    c.final_hidden = detail::rms_norm<Scalar>(y, cview(dec_norm_), &c.dec_norm);
    c.logits = output_logits(c.final_hidden);
  }

  void forward(std::span<const TokenId> source, const std::vector<TokenId>& dec_in,
               detail::ForwardCache<Scalar>& c, Rng* rng) const {
    encode(source, c, rng);
    decode(dec_in, c, rng);
  }

  void embed_backward(const Mat& dx, std::span<const TokenId> ids, std::span<Scalar> grad) const {
    auto g = view(grad, embed_);
    const Scalar scale = static_cast<Scalar>(std::sqrt(static_cast<double>(config_.width)));
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += dx.row(static_cast<Eigen::Index>(i)) * scale;
  }

  void backward(const Mat& dlogits, const detail::ForwardCache<Scalar>& c, std::span<Scalar> grad) const {
    Mat dhidden;
    if (config_.tie_embeddings) {
      view(grad, embed_).noalias() += dlogits.transpose() * c.final_hidden;
      dhidden = dlogits * cview(embed_);
    } else {
      view(grad, out_w_).noalias() += c.final_hidden.transpose() * dlogits;
      dhidden = dlogits * cview(out_w_).transpose();
    }
    view(grad, out_b_).row(0) += dlogits.colwise().sum();
    Mat dy = detail::rms_norm_backward<Scalar>(dhidden, c.dec_norm,
                                               cview(dec_norm_), view(grad, dec_norm_));
    Mat dmem = Mat::Zero(c.memory.rows(), c.memory.cols());
    for (std::size_t li = dec_.size(); li-- > 0;) {
      const auto& ids = dec_[li];
      const auto& lc = c.dec[li];
      Mat df = feed_forward_backward(dropout_backward(dy, lc.d3), lc.ffn, ids.ffn, grad);
      dy += detail::rms_norm_backward<Scalar>(df, lc.n3, cview(ids.norm3), view(grad, ids.norm3));
      auto [dq, dkv] = attention_backward(dropout_backward(dy, lc.d2), lc.cross_attn, ids.cross_attn, grad);
      dmem += dkv;
      dy += detail::rms_norm_backward<Scalar>(dq, lc.n2, cview(ids.norm2), view(grad, ids.norm2));
      auto [sq, skv] = attention_backward(dropout_backward(dy, lc.d1), lc.self_attn, ids.self_attn, grad);
      Mat da = sq + skv;
      dy += detail::rms_norm_backward<Scalar>(da, lc.n1, cview(ids.norm1), view(grad, ids.norm1));
    }
    embed_backward(dy, c.decoder_input, grad);

    Mat dx = detail::rms_norm_backward<Scalar>(dmem, c.enc_norm, cview(enc_norm_), view(grad, enc_norm_));
    for (std::size_t li = enc_.size(); li-- > 0;) {
      const auto& ids = enc_[li];
      const auto& lc = c.enc[li];
      Mat df = feed_forward_backward(dropout_backward(dx, lc.d2), lc.ffn, ids.ffn, grad);
      dx += detail::rms_norm_backward<Scalar>(df, lc.n2, cview(ids.norm2), view(grad, ids.norm2));
      auto [dq, dkv] = attention_backward(dropout_backward(dx, lc.d1), lc.attn, ids.attn, grad);
      Mat da = dq + dkv;
      dx += detail::rms_norm_backward<Scalar>(da, lc.n1, cview(ids.norm1), view(grad, ids.norm1));
    }
    embed_backward(dx, c.source, grad);
  }

  // Cross-entropy (optionally label-smoothed) summed over positions; writes
  // d loss / d logits scaled by `scale` into dlogits.
  double token_loss(const Mat& logits, std::span<const TokenId> target, Scalar scale, Mat& dlogits) const {
    const auto v = logits.cols();
    const double eps = config_.label_smoothing;
    dlogits.resize(logits.rows(), v);
    double total = 0.0;
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      const auto row = logits.row(t);
      const Scalar mx = row.maxCoeff();
      RowVec p = (row.array() - mx).exp().matrix();
      const Scalar sum = p.sum();
      const double lse = static_cast<double>(mx) + std::log(static_cast<double>(sum));
      p /= sum;
      const auto gold = target[static_cast<std::size_t>(t)];
      double nll = lse - static_cast<double>(row(gold));
      if (eps > 0.0) {
        const double mean_nll = lse - static_cast<double>(row.sum()) / static_cast<double>(v);
        nll = (1.0 - eps) * nll + eps * mean_nll;
        p.array() -= static_cast<Scalar>(eps / static_cast<double>(v));
        p(gold) -= static_cast<Scalar>(1.0 - eps);
      } else {
        p(gold) -= Scalar(1);
      }
      dlogits.row(t) = p * scale;
      total += nll;
    }
    return total;
  }
  using RowVec = detail::RowVec<Scalar>;

  ModelConfig config_;
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
  std::vector<Scalar> params_;
  Mat positions_;
  std::size_t step_ = 0;

  std::size_t embed_ = 0, enc_norm_ = 0, dec_norm_ = 0, out_w_ = detail::kNoTensor, out_b_ = 0;
  std::size_t enc_rel_ = detail::kNoTensor, dec_rel_ = detail::kNoTensor;
  std::vector<detail::EncoderLayerIds> enc_;
  std::vector<detail::DecoderLayerIds> dec_;
};

template <typename Scalar>
double Seq2SeqModel<Scalar>::loss_and_gradient(std::span<const Example> batch, std::span<Scalar> grad,
                                               std::uint64_t dropout_seed, std::size_t threads) const {
  if (grad.size() != total_) throw Error("gradient buffer size mismatch");
  if (batch.empty()) throw Error("empty batch");
  // Targets with pads stripped and end-of-sequence appended.
  std::vector<std::vector<TokenId>> targets(batch.size());
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (auto id : batch[i].target) {
      if (id != SubwordVocab::kPad) targets[i].push_back(id);
    }
    targets[i].push_back(SubwordVocab::kEos);
    check_lengths(batch[i].source, targets[i].size());
    tokens += targets[i].size();
  }
  const Scalar scale = Scalar(1) / static_cast<Scalar>(tokens);

  auto run = [&](std::size_t begin, std::size_t end, std::span<Scalar> g) {
    double total = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng(derive_seed(dropout_seed, {step_, i}));
      Rng* r = config_.dropout > 0.0 ? &rng : nullptr;
      detail::ForwardCache<Scalar> cache;
      forward(batch[i].source, decoder_input(targets[i]), cache, r);
      Mat dlogits;
      total += token_loss(cache.logits, targets[i], scale, dlogits);
      backward(dlogits, cache, g);
    }
    return total;
  };

  threads = std::max<std::size_t>(1, std::min(threads, batch.size()));
  double total = 0.0;
  if (threads == 1) {
    total = run(0, batch.size(), grad);
  } else {
    // Fixed contiguous shards reduced in shard order: deterministic for a
    // given thread count.
    std::vector<std::vector<Scalar>> grads(threads, std::vector<Scalar>(total_, Scalar(0)));
    std::vector<double> losses(threads, 0.0);
    std::vector<std::thread> pool;
    const std::size_t per = (batch.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = std::min(batch.size(), t * per), e = std::min(batch.size(), b + per);
      pool.emplace_back([&, t, b, e] { losses[t] = run(b, e, grads[t]); });
    }
    for (auto& th : pool) th.join();
    for (std::size_t t = 0; t < threads; ++t) {
      total += losses[t];
      for (std::size_t k = 0; k < total_; ++k) grad[k] += grads[t][k];
    }
  }
  return total / static_cast<double>(tokens);
}

template <typename Scalar>
std::vector<typename Seq2SeqModel<Scalar>::Sample> Seq2SeqModel<Scalar>::sample(
    std::span<const TokenId> source, std::size_t n, double temperature, std::uint64_t seed) const {
  if (n == 0) throw ValidationError("need at least one sample");
  check_lengths(source, 1);
  detail::ForwardCache<Scalar> enc;
  encode(source, enc, nullptr);

  const auto d = static_cast<Eigen::Index>(config_.width);
  const auto h = static_cast<Eigen::Index>(config_.heads);
  const auto dh = d / h;
  const auto max_t = static_cast<Eigen::Index>(config_.max_target_len);
  const auto rows = static_cast<Eigen::Index>(n);
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
  const bool greedy = !(temperature > 0.0);

  struct LayerState {
    Mat cross_k, cross_v, self_k, self_v;
  };
  std::vector<LayerState> state(dec_.size());
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    state[l].cross_k = enc.memory * cview(dec_[l].cross_attn.wk);
    state[l].cross_v = enc.memory * cview(dec_[l].cross_attn.wv);
    state[l].self_k.resize(rows * max_t, d);
    state[l].self_v.resize(rows * max_t, d);
  }

  std::vector<Sample> out(n);
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(derive_seed(seed, {i}));
  std::vector<TokenId> current(n, SubwordVocab::kBos);
  const auto table = cview(embed_);
  const Scalar emb_scale = static_cast<Scalar>(std::sqrt(static_cast<double>(config_.width)));
  std::vector<double> probs(config_.vocab_size);

  for (Eigen::Index t = 0; t < max_t; ++t) {
    Mat x(rows, d);
    for (Eigen::Index i = 0; i < rows; ++i) x.row(i) = table.row(current[i]) * emb_scale + positions_.row(t);
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const auto& ids = dec_[l];
      auto& st = state[l];
      // causal self-attention over the cached prefix
      Mat a = detail::rms_norm<Scalar>(x, cview(ids.norm1), nullptr);
      Mat q = a * cview(ids.self_attn.wq);
      Mat k = a * cview(ids.self_attn.wk);
      Mat v = a * cview(ids.self_attn.wv);
      Mat o(rows, d);
      for (Eigen::Index i = 0; i < rows; ++i) {
        st.self_k.row(i * max_t + t) = k.row(i);
        st.self_v.row(i * max_t + t) = v.row(i);
        if (out[static_cast<std::size_t>(i)].terminated) {
          o.row(i).setZero();
          continue;
        }
        const auto keys = st.self_k.middleRows(i * max_t, t + 1);
        const auto vals = st.self_v.middleRows(i * max_t, t + 1);
        for (Eigen::Index head = 0; head < h; ++head) {
          RowVec s = (q.row(i).segment(head * dh, dh) * keys.middleCols(head * dh, dh).transpose()) * scale;
          if (dec_rel_ != detail::kNoTensor) {
            const auto table = cview(dec_rel_);
            for (Eigen::Index j = 0; j <= t; ++j) {
              s(j) += table(static_cast<Eigen::Index>(detail::relative_bucket(j - t, false)), head);
            }
          }
          const Scalar mx = s.maxCoeff();
          s = (s.array() - mx).exp().matrix();
          s /= s.sum();
          o.row(i).segment(head * dh, dh).noalias() = s * vals.middleCols(head * dh, dh);
        }
      }
      x += o * cview(ids.self_attn.wo);
      // cross-attention against the shared encoder memory
      Mat b = detail::rms_norm<Scalar>(x, cview(ids.norm2), nullptr);
      Mat cq = b * cview(ids.cross_attn.wq);
      Mat co(rows, d);
      for (Eigen::Index head = 0; head < h; ++head) {
        Mat s = (cq.middleCols(head * dh, dh) * st.cross_k.middleCols(head * dh, dh).transpose()) * scale;
        detail::masked_softmax(s, enc.source_valid, false);
        co.middleCols(head * dh, dh).noalias() = s * st.cross_v.middleCols(head * dh, dh);
      }
      x += co * cview(ids.cross_attn.wo);
      Mat e = detail::rms_norm<Scalar>(x, cview(ids.norm3), nullptr);
      detail::FfnCache<Scalar> scratch;
      x += feed_forward(e, ids.ffn, scratch);
    }
    Mat z = detail::rms_norm<Scalar>(x, cview(dec_norm_), nullptr);
    Mat logits = output_logits(z);

    bool all_done = true;
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = out[i];
      if (s.terminated) continue;
      const auto row = logits.row(static_cast<Eigen::Index>(i));
      const double mx = static_cast<double>(row.maxCoeff());
      double sum = 0.0;
      for (Eigen::Index j = 0; j < row.cols(); ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
      const double lse = mx + std::log(sum);
      TokenId tok = 0;
      if (greedy) {
        Eigen::Index arg;
        row.maxCoeff(&arg);
        tok = static_cast<TokenId>(arg);
      } else {
        double tsum = 0.0;
        for (Eigen::Index j = 0; j < row.cols(); ++j) {
          probs[static_cast<std::size_t>(j)] = std::exp((static_cast<double>(row(j)) - mx) / temperature);
          tsum += probs[static_cast<std::size_t>(j)];
        }
        double u = rngs[i].uniform() * tsum;
        tok = static_cast<TokenId>(row.cols() - 1);
        for (Eigen::Index j = 0; j < row.cols(); ++j) {
          u -= probs[static_cast<std::size_t>(j)];
          if (u < 0.0) {
            tok = static_cast<TokenId>(j);
            break;
          }
        }
      }
      s.log_prob += static_cast<double>(row(tok)) - lse;
      if (tok == SubwordVocab::kEos) {
        s.terminated = true;
      } else {
        s.ids.push_back(tok);
        current[i] = tok;
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return out;
}

/// Adam with linear warmup and global-norm gradient clipping.
struct AdamOptimizer {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 0;
  std::vector<double> m, v;
  std::size_t t = 0;

  template <typename Scalar>
  void step(std::span<Scalar> params, std::span<const Scalar> grad) {
    if (m.size() != params.size()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    ++t;
    double norm2 = 0.0;
    for (auto g : grad) norm2 += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(norm2);
    const double clip = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    double lr = learning_rate;
    if (warmup_steps > 0 && t < warmup_steps) lr *= static_cast<double>(t) / static_cast<double>(warmup_steps);
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grad[i]) * clip;
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + epsilon);
      params[i] = static_cast<Scalar>(static_cast<double>(params[i]) - update);
    }
  }
};

/// One optimizer step on a batch; returns the mean token cross-entropy
/// before the update. Throws on a non-finite loss.
template <typename Scalar>
double train_step(Seq2SeqModel<Scalar>& model, AdamOptimizer& opt,
                  std::span<const typename Seq2SeqModel<Scalar>::Example> batch,
                  std::uint64_t dropout_seed = 0, std::size_t threads = 1) {
  std::vector<Scalar> grad(model.num_parameters(), Scalar(0));
  const double loss = model.loss_and_gradient(batch, grad, dropout_seed, threads);
  if (!std::isfinite(loss)) {
    throw Error("non-finite training loss at step " + std::to_string(model.step()));
  }
  opt.step(model.parameters(), std::span<const Scalar>(grad));
  model.set_step(model.step() + 1);
#ifndef NDEBUG
  for (auto p : model.parameters()) {
    if (!std::isfinite(static_cast<double>(p))) throw Error("non-finite parameter after update");
  }
#endif
  return loss;
}

// ---- checkpoints -----------------------------------------------------------

/// Text blocks stored alongside the tensors.
struct CheckpointMeta {
  std::string run_config;  // resolved `key = value` config
  std::string vocab;       // serialized SubwordVocab
};

/// `KGCTX-CKPT v1` header, length-prefixed text blocks (model config, run
/// config, vocab), a tensor table, then raw little-endian float32 data in
/// table order.
template <typename Scalar>
std::string serialize_checkpoint(const Seq2SeqModel<Scalar>& model, const CheckpointMeta& meta) {
  std::string out = "KGCTX-CKPT v1\n";
  auto block = [&](std::string_view name, std::string_view body) {
    out += name;
    out += ' ';
    out += std::to_string(body.size());
    out += '\n';
    out += body;
  };
  block("model", model.config().to_text());
  block("run", meta.run_config);
  block("vocab", meta.vocab);
  out += "step " + std::to_string(model.step()) + "\n";
  out += "tensors " + std::to_string(model.tensors().size()) + "\n";
  for (const auto& t : model.tensors()) {
    out += t.name + " " + std::to_string(t.rows) + " " + std::to_string(t.cols) + "\n";
  }
  out += "data\n";
  const auto params = model.parameters();
  const std::size_t start = out.size();
  out.resize(start + params.size() * 4);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float f = static_cast<float>(params[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) out[start + i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

template <typename Scalar = float>
struct LoadedCheckpoint {
  Seq2SeqModel<Scalar> model;
  CheckpointMeta meta;
};

template <typename Scalar = float>
LoadedCheckpoint<Scalar> deserialize_checkpoint(std::string_view data) {
  std::size_t pos = 0;
  auto line = [&]() {
    const auto nl = data.find('\n', pos);
    if (nl == std::string_view::npos) throw Error("truncated checkpoint");
    auto l = data.substr(pos, nl - pos);
    pos = nl + 1;
    return l;
  };
  auto block = [&](std::string_view name) {
    auto header = line();
    auto parts = split(header, ' ');
    if (parts.size() != 2 || parts[0] != name) throw Error("checkpoint: expected block '" + std::string(name) + "'");
    const auto len = std::stoull(std::string(parts[1]));
    if (pos + len > data.size()) throw Error("truncated checkpoint");
    auto body = data.substr(pos, len);
    pos += len;
    return std::string(body);
  };
  if (line() != "KGCTX-CKPT v1") throw Error("not a KGCTX-CKPT v1 checkpoint");
  const auto config = ModelConfig::from_text(block("model"));
  CheckpointMeta meta;
  meta.run_config = block("run");
  meta.vocab = block("vocab");
  auto step_line = split(line(), ' ');
  if (step_line.size() != 2 || step_line[0] != "step") throw Error("checkpoint: expected step");
  const auto step = std::stoull(std::string(step_line[1]));
  auto count_line = split(line(), ' ');
  if (count_line.size() != 2 || count_line[0] != "tensors") throw Error("checkpoint: expected tensor table");
  Seq2SeqModel<Scalar> model(config, 0);
  const auto count = std::stoull(std::string(count_line[1]));
  if (count != model.tensors().size()) throw Error("checkpoint: tensor count does not match config");
  for (std::size_t i = 0; i < count; ++i) {
    auto f = split(line(), ' ');
    const auto& t = model.tensors()[i];
    if (f.size() != 3 || f[0] != t.name || std::stoull(std::string(f[1])) != t.rows ||
        std::stoull(std::string(f[2])) != t.cols) {
      throw Error("checkpoint: tensor table mismatch at '" + t.name + "'");
    }
  }
  if (line() != "data") throw Error("checkpoint: expected data section");
  const auto n = model.num_parameters();
  if (data.size() - pos != n * 4) throw Error("checkpoint: data size mismatch");
  std::vector<float> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + i * 4 + static_cast<std::size_t>(b)])) << (8 * b);
    }
    std::memcpy(&values[i], &bits, 4);
  }
  model.load_parameters(values);
  model.set_step(step);
  return {std::move(model), std::move(meta)};
}

}  // namespace kgctx
