#include <gtest/gtest.h>

#include <complex>

#include "kgctx/evaluator.hpp"
#include "kgctx/kge.hpp"
#include "test_util.hpp"

using namespace kgctx;
using namespace kgctx::testing;

namespace {

// Re(<s, r, conj(o)>) with std::complex.
double complex_oracle(std::span<const double> s, std::span<const double> r, std::span<const double> o) {
  const std::size_t d = s.size() / 2;
  std::complex<double> total = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    total += std::complex<double>(s[k], s[d + k]) * std::complex<double>(r[k], r[d + k]) *
             std::conj(std::complex<double>(o[k], o[d + k]));
  }
  return total.real();
}

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST(ComplEx, ScoreMatchesStdComplex) {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const std::size_t d = 1 + rng.below(16);
    const auto s = random_vec(rng, 2 * d), r = random_vec(rng, 2 * d), o = random_vec(rng, 2 * d);
    EXPECT_NEAR(complex_score(s, r, o), complex_oracle(s, r, o), 1e-12);
  }
}

TEST(ComplEx, GradientMatchesCentralDifferences) {
  Rng rng(2);
  const std::size_t d = 5;
  auto s = random_vec(rng, 2 * d), r = random_vec(rng, 2 * d), o = random_vec(rng, 2 * d);
  std::vector<double> gs(2 * d), gr(2 * d), go(2 * d);
  detail::complex_score_grad(s, r, o, 1.0, gs, gr, go);
  const double h = 1e-6;
  for (auto [vec, grad] : {std::pair{&s, &gs}, std::pair{&r, &gr}, std::pair{&o, &go}}) {
    for (std::size_t k = 0; k < 2 * d; ++k) {
      const double keep = (*vec)[k];
      (*vec)[k] = keep + h;
      const double up = complex_oracle(s, r, o);
      (*vec)[k] = keep - h;
      const double down = complex_oracle(s, r, o);
      (*vec)[k] = keep;
      EXPECT_NEAR((*grad)[k], (up - down) / (2 * h), 1e-7);
    }
  }
}

TEST(ComplEx, TrainingFitsSmallGraph) {
  Rng rng(3);
  auto kg = random_kg(rng, 30, 3, 120);
  KgeOptions opt;
  opt.dim = 16;
  opt.epochs = 60;
  opt.negatives = 10;
  std::vector<double> losses;
  const auto m = train_kge(kg, opt, &losses);
  ASSERT_EQ(losses.size(), 60u);
  EXPECT_LT(losses.back(), 0.5 * losses.front());
  // Ranking train triples should be far better than chance (MRR ~ 0.13 for 30 entities).
  PredictionMap preds;
  for (const auto& [q, gold] : evaluation_queries(kg, Split::train, true)) preds.insert_or_assign(q, kge_full_ranking(m, q));
  EXPECT_GT(evaluate(kg, Split::train, preds).overall.mrr, 0.5);
  EXPECT_EQ(train_kge(kg, opt), m);
}

TEST(ComplEx, FullRankingCoversEveryEntity) {
  Rng rng(4);
  auto kg = random_kg(rng, 20, 2, 40);
  KgeOptions opt;
  opt.dim = 4;
  const auto m = init_kge(kg, opt);
  const auto l = kge_full_ranking(m, {0, 1, Direction::in});
  ASSERT_EQ(l.candidates.size(), kg.num_entities());
  for (const auto& c : l.candidates) EXPECT_DOUBLE_EQ(c.score, complex_score(m, c.entity, 1, 0));
}

TEST(ComplEx, SerializationRoundTrip) {
  Rng rng(5);
  auto kg = random_kg(rng, 10, 2, 20);
  KgeOptions opt;
  opt.dim = 3;
  const auto m = init_kge(kg, opt);
  std::string run;
  const auto back = deserialize_kge(serialize_kge(m, "seed = 1\n"), &run);
  EXPECT_EQ(back, m);
  EXPECT_EQ(run, "seed = 1\n");
  auto bytes = serialize_kge(m);
  EXPECT_THROW(deserialize_kge(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(deserialize_kge(bytes + "x"), Error);
  EXPECT_THROW(deserialize_kge("KGCTX-KGE v9\n"), Error);
  EXPECT_THROW(ComplExModel(1, 1, 0), ValidationError);
}

TEST(Router, PicksBySeenFrequency) {
  RankedAnswerList s, k;
  s.candidates = {{1, 0.0}};
  k.candidates = {{2, 0.0}};
  EXPECT_EQ(&router_ensemble(s, k, 0), &s);
  EXPECT_EQ(&router_ensemble(s, k, 1), &k);
  EXPECT_EQ(&router_ensemble(s, k, 20), &k);
  EXPECT_EQ(&router_ensemble(s, k, 5, 11), &s);
  EXPECT_EQ(&router_ensemble(s, k, 11, 11), &k);
}
