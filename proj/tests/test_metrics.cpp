#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "msac/error.hpp"
#include "msac/metrics.hpp"

#include <cmath>
#include <random>
#include <set>
#include <vector>

using namespace msac;

namespace {

// O(n*m) pair count, ties worth one half.
double brute_auroc(const std::vector<double>& id, const std::vector<double>& ood) {
  unsigned long long greater = 0, ties = 0;
  for (double a : id)
    for (double b : ood) {
      greater += a > b;
      ties += a == b;
    }
  return static_cast<double>(2 * greater + ties) / (2.0 * static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

// Sweep every distinct score as a threshold; keep the largest with TPR >= 95%.
double brute_fpr95(const std::vector<double>& id, const std::vector<double>& ood) {
  std::set<double> candidates(id.begin(), id.end());
  candidates.insert(ood.begin(), ood.end());
  double best = -INFINITY;
  for (double t : candidates) {
    std::size_t pass = 0;
    for (double a : id) pass += a >= t;
    if (100 * pass >= 95 * id.size()) best = std::max(best, t);
  }
  std::size_t fp = 0;
  for (double b : ood) fp += b >= best;
  return static_cast<double>(fp) / static_cast<double>(ood.size());
}

std::vector<double> random_scores(std::mt19937_64& rng, std::size_t n, bool coarse) {
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::uniform_int_distribution<int> small(0, 9);
  std::vector<double> v(n);
  for (double& x : v) x = coarse ? small(rng) : u(rng);
  return v;
}

}  // namespace

TEST_CASE("war examples") {
  const std::vector<int> p{0, 0, 1}, l{0, 1, 1};
  CHECK(war(l, l) == 1.0);
  CHECK(war(p, l) == doctest::Approx(2.0 / 3.0));
  CHECK(war(std::vector<int>{1}, std::vector<int>{0}) == 0.0);
  CHECK_THROWS_AS(war(std::vector<int>{1, 2}, std::vector<int>{0}), Error);
  CHECK_THROWS_AS(war(std::vector<int>{}, std::vector<int>{}), Error);
}

TEST_CASE("uar examples") {
  const std::vector<int> p{0, 0, 1}, l{0, 1, 1};
  CHECK(uar(p, l) == doctest::Approx(0.75));
  // class 1 never occurs in the labels, so only classes 0 and 2 are averaged
  const std::vector<int> p2{0, 1, 2, 2}, l2{0, 0, 2, 2};
  CHECK(uar(p2, l2) == doctest::Approx(0.75));
  CHECK_THROWS_AS(uar(std::vector<int>{0}, std::vector<int>{0, 1}), Error);
}

TEST_CASE("confusion matrix examples") {
  const std::vector<int> p{0, 0, 1}, l{0, 1, 1};
  const ConfusionMatrix m = confusion_matrix(p, l, 2);
  CHECK(m(0, 0) == 1);
  CHECK(m(0, 1) == 0);
  CHECK(m(1, 0) == 1);
  CHECK(m(1, 1) == 1);

  const std::vector<int> perfect{0, 1, 1, 2, 2, 2};
  const ConfusionMatrix d = confusion_matrix(perfect, perfect, 3);
  CHECK(d(0, 0) == 1);
  CHECK(d(1, 1) == 2);
  CHECK(d(2, 2) == 3);
  CHECK(d.sum() == 6);

  const ConfusionMatrix z = confusion_matrix(std::vector<int>{}, std::vector<int>{}, 4);
  CHECK(z.rows() == 4);
  CHECK(z.sum() == 0);

  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{4}, std::vector<int>{0}, 4), Error);
  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{0}, std::vector<int>{-1}, 4), Error);
}

TEST_CASE("eval report agrees with hand-tallied confusion on random label sets") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + trial % 5;
    const std::size_t n = 1 + rng() % 80;
    std::uniform_int_distribution<int> cls(0, k - 1);
    std::vector<int> p(n), l(n);
    for (std::size_t i = 0; i < n; ++i) {
      l[i] = cls(rng);
      p[i] = (rng() % 3 == 0) ? cls(rng) : l[i];
    }
    // tally by hand
    std::vector<std::vector<int>> tally(k, std::vector<int>(k, 0));
    for (std::size_t i = 0; i < n; ++i) ++tally[l[i]][p[i]];
    int correct = 0, present = 0;
    double recall = 0.0;
    for (int c = 0; c < k; ++c) {
      int row = 0;
      for (int j = 0; j < k; ++j) row += tally[c][j];
      correct += tally[c][c];
      if (row) {
        recall += static_cast<double>(tally[c][c]) / row;
        ++present;
      }
    }
    const EvalReport r = make_eval_report(p, l, k);
    for (int c = 0; c < k; ++c)
      for (int j = 0; j < k; ++j) CHECK(r.confusion(c, j) == tally[c][j]);
    CHECK(r.war == doctest::Approx(static_cast<double>(correct) / n).epsilon(1e-12));
    CHECK(r.uar == doctest::Approx(recall / present).epsilon(1e-12));
    CHECK(war(p, l) == doctest::Approx(r.war).epsilon(1e-12));
    CHECK(r.num_samples() == n);
  }
}

TEST_CASE("uar equals war when every class has the same count") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + trial % 4, per = 1 + trial % 7;
    std::vector<int> l, p;
    for (int c = 0; c < k; ++c)
      for (int i = 0; i < per; ++i) {
        l.push_back(c);
        p.push_back(static_cast<int>(rng() % k));
      }
    CHECK(uar(p, l) == doctest::Approx(war(p, l)).epsilon(1e-12));
  }
}

TEST_CASE("constant predictor on a balanced 2-class set") {
  const std::vector<int> l{0, 1, 0, 1}, p{0, 0, 0, 0};
  CHECK(war(p, l) == 0.5);
  CHECK(uar(p, l) == 0.5);
}

TEST_CASE("row normalization gives unit row sums") {
  ConfusionMatrix m(4, 4);
  m << 5, 1, 0, 2, 0, 3, 3, 0, 1, 1, 1, 1, 0, 0, 0, 0;
  const Eigen::MatrixXd r = row_normalized(m);
  for (int i = 0; i < 3; ++i) CHECK(r.row(i).sum() == doctest::Approx(1.0));
  CHECK(r.row(3).sum() == 0.0);
  CHECK(r(0, 0) == doctest::Approx(5.0 / 8.0));
}

TEST_CASE("auroc examples") {
  CHECK(auroc(std::vector<double>{3, 2}, std::vector<double>{1, 0}) == 1.0);
  CHECK(auroc(std::vector<double>{1}, std::vector<double>{1}) == 0.5);
  CHECK(auroc(std::vector<double>{2, 0}, std::vector<double>{1}) == 0.5);
  CHECK(auroc(std::vector<double>{0, 1}, std::vector<double>{2, 3}) == 0.0);
  CHECK_THROWS_AS(auroc(std::vector<double>{}, std::vector<double>{1}), Error);
  CHECK_THROWS_AS(auroc(std::vector<double>{1}, std::vector<double>{}), Error);
}

TEST_CASE("sort-based auroc equals brute-force pair counting exactly") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 200, m = 1 + rng() % 200;
    const bool coarse = trial % 2 == 0;  // heavy ties on half the trials
    const auto id = random_scores(rng, n, coarse), ood = random_scores(rng, m, coarse);
    CHECK(auroc(id, ood) == brute_auroc(id, ood));
  }
}

TEST_CASE("auroc is antisymmetric without ties") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto id = random_scores(rng, 1 + rng() % 50, false), ood = random_scores(rng, 1 + rng() % 50, false);
    CHECK(auroc(id, ood) + auroc(ood, id) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("fpr95 examples") {
  CHECK(fpr95(std::vector<double>{4, 3, 2, 1}, std::vector<double>{2.5, 0.5}) == 0.5);
  CHECK(tpr95_threshold(std::vector<double>{4, 3, 2, 1}) == 1.0);
  CHECK(fpr95(std::vector<double>{4, 3, 2, 1}, std::vector<double>{0.0, -1.0}) == 0.0);
  CHECK(fpr95(std::vector<double>{4, 3, 2, 1}, std::vector<double>{5.0, 9.0}) == 1.0);
  // with 40 ID scores the quota is 38, so the two lowest may be rejected
  std::vector<double> id;
  for (int i = 0; i < 40; ++i) id.push_back(i);
  CHECK(tpr95_threshold(id) == 2.0);
  CHECK(fpr95(id, std::vector<double>{1.5, 2.0}) == 0.5);
  CHECK_THROWS_AS(fpr95(std::vector<double>{}, std::vector<double>{1}), Error);
}

TEST_CASE("closed-form fpr95 equals a brute-force threshold sweep exactly") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 200, m = 1 + rng() % 200;
    const bool coarse = trial % 2 == 0;
    const auto id = random_scores(rng, n, coarse), ood = random_scores(rng, m, coarse);
    CHECK(fpr95(id, ood) == brute_fpr95(id, ood));
  }
}

TEST_CASE("detection metrics are invariant under strictly increasing transforms") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    auto id = random_scores(rng, 1 + rng() % 60, trial % 2), ood = random_scores(rng, 1 + rng() % 60, trial % 2);
    auto f = [](double x) { return std::exp(0.7 * x) + 3.0; };
    std::vector<double> id2, ood2;
    for (double x : id) id2.push_back(f(x));
    for (double x : ood) ood2.push_back(f(x));
    CHECK(auroc(id, ood) == auroc(id2, ood2));
    CHECK(fpr95(id, ood) == fpr95(id2, ood2));
  }
}

TEST_CASE("NaN scores are a numerical failure") {
  try {
    auroc(std::vector<double>{NAN}, std::vector<double>{1});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::kNumerical);
  }
}
