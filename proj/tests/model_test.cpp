#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "kgctx/model.hpp"

using namespace kgctx;

namespace {

struct Variant {
  const char* positional;
  bool tied;
};

const Variant kVariants[] = {{"sinusoidal", false}, {"sinusoidal", true}, {"relative", false}, {"relative", true}};

std::string variant_name(const ::testing::TestParamInfo<Variant>& info) {
  return std::string(info.param.positional) + (info.param.tied ? "Tied" : "Untied");
}

ModelConfig tiny_config(const Variant& v = {"relative", true}) {
  ModelConfig c;
  c.positional = v.positional;
  c.tie_embeddings = v.tied;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.width = 8;
  c.ff_width = 16;
  c.vocab_size = 270;
  c.max_source_len = 16;
  c.max_target_len = 8;
  return c;
}

template <typename Scalar>
void zero_output(Seq2SeqModel<Scalar>& m) {
  m.tensor(m.config().tie_embeddings ? "embed" : "out.w").setZero();
  m.tensor("out.b").setZero();
}

class ModelVariant : public ::testing::TestWithParam<Variant> {};

}  // namespace

TEST_P(ModelVariant, ParameterCountMatchesClosedForm) {
  for (std::size_t layers : {0, 1, 3}) {
    for (std::size_t width : {8, 16, 32}) {
      ModelConfig c = tiny_config(GetParam());
      c.encoder_layers = layers;
      c.decoder_layers = layers + 1;
      c.width = width;
      c.ff_width = 3 * width;
      Seq2SeqModel<float> m(c, 1);
      EXPECT_EQ(m.num_parameters(), parameter_count(c));
    }
  }
}

TEST(ModelConfig, DefaultParameterCount) {
  // 4000*128 + 2*(4*128^2 + 2*128 + 2*128*512 + 512 + 128) + 128
  //   + 2*(8*128^2 + 3*128 + 2*128*512 + 512 + 128) + 128 + 4000 + 2*32*4
  EXPECT_EQ(parameter_count(ModelConfig{}), 1'437'856u);
  ModelConfig untied;
  untied.tie_embeddings = false;
  untied.positional = "sinusoidal";
  EXPECT_EQ(parameter_count(untied), 1'437'856u - 256u + 128u * 4000u);
}

TEST(ModelConfig, RejectsUnknownPositional) {
  ModelConfig c = tiny_config();
  c.positional = "rotary";
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(RelativeBucket, SmallDistancesExactAndSaturates) {
  for (std::ptrdiff_t d = 0; d < 8; ++d) {
    EXPECT_EQ(detail::relative_bucket(-d, true), static_cast<std::size_t>(d));
    EXPECT_EQ(detail::relative_bucket(d, true), d == 0 ? 0u : 16u + static_cast<std::size_t>(d));
  }
  for (std::ptrdiff_t d = 0; d < 16; ++d) EXPECT_EQ(detail::relative_bucket(-d, false), static_cast<std::size_t>(d));
  EXPECT_EQ(detail::relative_bucket(5, false), 0u);  // future keys share bucket 0
  EXPECT_EQ(detail::relative_bucket(-1000, true), 15u);
  EXPECT_EQ(detail::relative_bucket(1000, true), 31u);
  EXPECT_EQ(detail::relative_bucket(-1000, false), 31u);
  std::size_t last = 0;
  for (std::ptrdiff_t d = 0; d < 300; ++d) {
    const auto b = detail::relative_bucket(-d, false);
    EXPECT_GE(b, last);
    last = b;
  }
}

TEST(ModelConfig, RejectsWidthNotDivisibleByHeads) {
  ModelConfig c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(ModelConfig, TextRoundTrip) {
  ModelConfig c = tiny_config();
  c.dropout = 0.125;
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
}

TEST_P(ModelVariant, ZeroOutputProjectionGivesUniformLogProb) {
  Seq2SeqModel<double> m(tiny_config(GetParam()), 3);
  zero_output(m);
  const std::vector<TokenId> src{10, 11, 12};
  const std::vector<TokenId> tgt{20, 21, 22};  // + EOS -> L = 4
  const double v = 270.0;
  EXPECT_NEAR(m.sequence_log_prob(src, tgt), -4.0 * std::log(v), 1e-12);

  std::vector<Seq2SeqModel<double>::Example> batch{{src, tgt}};
  EXPECT_NEAR(m.loss(batch), std::log(v), 1e-12);
}

TEST_P(ModelVariant, SoftmaxRowsNormalize) {
  Seq2SeqModel<float> m(tiny_config(GetParam()), 4);
  const std::vector<TokenId> src{5, 6, 7, 8};
  const std::vector<TokenId> tgt{30, 31, 32};
  auto logits = m.forward_logits(src, tgt);
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double mx = logits.row(t).maxCoeff();
    double sum = 0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(logits(t, j) - mx);
    double total = 0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) total += std::exp(logits(t, j) - mx) / sum;
    EXPECT_NEAR(total, 1.0, 1e-5);
  }
}

TEST_P(ModelVariant, CausalMaskAndPadInvariance) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Seq2SeqModel<double> m(tiny_config(GetParam()), seed);
    const std::vector<TokenId> src{40, 41, 42};
    const std::vector<TokenId> tgt{50, 51, 52, 53, 54};
    const auto base = m.forward_logits(src, tgt);
    for (std::size_t t = 0; t < tgt.size(); ++t) {
      auto changed = tgt;
      changed[t] = 99;
      const auto other = m.forward_logits(src, changed);
      for (std::size_t p = 0; p < tgt.size(); ++p) {
        const double diff = (base.row(static_cast<Eigen::Index>(p)) - other.row(static_cast<Eigen::Index>(p))).cwiseAbs().maxCoeff();
        if (p <= t) EXPECT_EQ(diff, 0.0) << "position " << p << " saw target " << t;
        else EXPECT_GT(diff, 0.0) << "position " << p << " ignored target " << t;
      }
    }
    std::vector<TokenId> padded = src;
    padded.insert(padded.end(), {0, 0, 0, 0});
    const auto with_pad = m.forward_logits(padded, tgt);
    EXPECT_LT((with_pad - base).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(m.sequence_log_prob(padded, tgt), m.sequence_log_prob(src, tgt), 1e-12);
  }
}

TEST_P(ModelVariant, GradientMatchesCentralDifferences) {
  ModelConfig c = tiny_config(GetParam());
  Seq2SeqModel<double> m(c, 11);
  std::vector<Seq2SeqModel<double>::Example> batch{
      {{10, 11, 12, 13}, {20, 21, 22}},
      {{14, 15, 0}, {23, 24}},
  };
  std::vector<double> grad(m.num_parameters(), 0.0);
  m.loss_and_gradient(batch, grad);

  Rng rng(5);
  auto params = m.parameters();
  int checked = 0;
  while (checked < 20) {
    const auto i = static_cast<std::size_t>(rng.below(params.size()));
    if (std::abs(grad[i]) < 1e-6) continue;  // untouched rows carry no signal
    const double h = 1e-6;
    const double keep = params[i];
    params[i] = keep + h;
    const double up = m.loss(batch);
    params[i] = keep - h;
    const double down = m.loss(batch);
    params[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double rel = std::abs(fd - grad[i]) / std::max(std::abs(fd), std::abs(grad[i]));
    EXPECT_LT(rel, 1e-3) << "param " << i << " analytic " << grad[i] << " numeric " << fd;
    ++checked;
  }
}

TEST_P(ModelVariant, SamplesCarryTheirSequenceLogProb) {
  Seq2SeqModel<double> m(tiny_config(GetParam()), 21);
  const std::vector<TokenId> src{60, 61, 62};
  auto samples = m.sample(src, 16, 1.0, 99);
  ASSERT_EQ(samples.size(), 16u);
  for (const auto& s : samples) {
    if (!s.terminated) continue;
    EXPECT_NEAR(s.log_prob, m.sequence_log_prob(src, s.ids), 1e-9);
  }
  auto again = m.sample(src, 16, 1.0, 99);
  for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_EQ(samples[i].ids, again[i].ids);
}

TEST_P(ModelVariant, GreedySamplesAreIdentical) {
  Seq2SeqModel<float> m(tiny_config(GetParam()), 22);
  const std::vector<TokenId> src{60, 61, 62};
  auto samples = m.sample(src, 8, 0.0, 1);
  for (const auto& s : samples) EXPECT_EQ(s.ids, samples[0].ids);
}

TEST_P(ModelVariant, OverfitsSingleBatch) {
  ModelConfig c = tiny_config(GetParam());
  c.width = 32;
  c.ff_width = 64;
  c.heads = 4;
  Seq2SeqModel<float> m(c, 7);
  std::vector<Seq2SeqModel<float>::Example> batch{
      {{10, 11, 12, 13}, {20, 21, 22}},
      {{14, 15, 16}, {23, 24}},
      {{17, 18}, {25}},
  };
  AdamOptimizer opt;
  opt.learning_rate = 3e-3;
  const double initial = train_step(m, opt, std::span<const Seq2SeqModel<float>::Example>(batch));
  double last = initial;
  for (int i = 1; i < 200; ++i) last = train_step(m, opt, std::span<const Seq2SeqModel<float>::Example>(batch));
  EXPECT_LT(m.loss(batch), 0.05 * initial);
  (void)last;
  // memorized target beats every single-token corruption
  const std::vector<TokenId> src{10, 11, 12, 13};
  const std::vector<TokenId> tgt{20, 21, 22};
  const double gold = m.sequence_log_prob(src, tgt);
  for (std::size_t p = 0; p < tgt.size(); ++p) {
    for (TokenId v = 3; v < 270; ++v) {
      if (v == tgt[p]) continue;
      auto bad = tgt;
      bad[p] = v;
      ASSERT_GT(gold, m.sequence_log_prob(src, bad));
    }
  }
}

TEST_P(ModelVariant, CheckpointRoundTripPreservesLogits) {
  Seq2SeqModel<float> m(tiny_config(GetParam()), 8);
  m.set_step(17);
  const auto bytes = serialize_checkpoint(m, {"a = 1\n", "vocab-text"});
  auto loaded = deserialize_checkpoint<float>(bytes);
  EXPECT_EQ(loaded.model.step(), 17u);
  EXPECT_EQ(loaded.meta.run_config, "a = 1\n");
  EXPECT_EQ(loaded.meta.vocab, "vocab-text");
  const std::vector<TokenId> src{5, 6, 7};
  const std::vector<TokenId> tgt{8, 9};
  EXPECT_EQ((m.forward_logits(src, tgt) - loaded.model.forward_logits(src, tgt)).cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(serialize_checkpoint(loaded.model, loaded.meta), bytes);
}

TEST(Checkpoint, RejectsCorruptHeader) {
  EXPECT_THROW(deserialize_checkpoint<float>("NOPE\n"), Error);
}

TEST(Seq2SeqModel, RejectsOverlongInputs) {
  Seq2SeqModel<float> m(tiny_config(), 1);
  std::vector<TokenId> src(17, 5);
  std::vector<TokenId> tgt{5};
  EXPECT_THROW(m.forward_logits(src, tgt), ValidationError);
}

INSTANTIATE_TEST_SUITE_P(Variants, ModelVariant, ::testing::ValuesIn(kVariants), variant_name);
