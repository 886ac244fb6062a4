#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "oracles.hpp"
#include "roadimp/metrics.hpp"
#include "roadimp/tensor.hpp"

using namespace roadimp;

TEST_CASE("average_precision: worked examples") {
  CHECK(*average_precision({0.9, 0.1}, {1, 0}) == doctest::Approx(1.0));
  // AP([0.9, 0.8, 0.35, 0.1], [1,0,1,0]) = (1 + 2/3) / 2 = 5/6
  CHECK(*average_precision({0.9, 0.8, 0.35, 0.1}, {1, 0, 1, 0}) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  // all positive -> precision 1 at every rank
  CHECK(*average_precision({0.2, 0.9, 0.5}, {1, 1, 1}) == doctest::Approx(1.0));
  CHECK_FALSE(average_precision({0.4, 0.6}, {0, 0}).has_value());
}

TEST_CASE("average_precision equals the brute-force oracle on random instances") {
  Rng rng(110);
  for (int rep = 0; rep < 1000; ++rep) {
    const int64_t n = rng.uniform_int(1, 64);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool any_pos = false;
    for (int64_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform(0.0, 1.0);
      if (rep % 3 == 0) scores[i] = std::round(scores[i] * 8.0) / 8.0;  // ties
      labels[i] = rng.uniform(0.0, 1.0) < 0.3 ? 1 : 0;
      any_pos |= labels[i] == 1;
    }
    if (!any_pos) labels[0] = 1;
    const double got = *average_precision(scores, labels);
    const double expect = oracles::ap_bruteforce(scores, labels);
    CHECK(std::abs(got - expect) < 1e-12);
  }
}

TEST_CASE("average_precision is invariant under strictly monotone transforms") {
  Rng rng(111);
  for (int rep = 0; rep < 50; ++rep) {
    const int64_t n = rng.uniform_int(2, 40);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int64_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform(-3.0, 3.0);
      labels[i] = rng.uniform(0.0, 1.0) < 0.4 ? 1 : 0;
    }
    labels[0] = 1;
    std::vector<double> warped(n);
    for (int64_t i = 0; i < n; ++i)
      warped[i] = std::exp(0.7 * scores[i]) + std::atan(scores[i]);
    CHECK(*average_precision(scores, labels) ==
          doctest::Approx(*average_precision(warped, labels)).epsilon(1e-15));
  }
}

TEST_CASE("f1_score: worked example and conventions") {
  // scores [0.9, 0.6, 0.4], labels [1, 0, 1]: TP=1 FP=1 FN=1 -> F1 = 0.5
  CHECK(f1_score({0.9, 0.6, 0.4}, {1, 0, 1}) == doctest::Approx(0.5));
  CHECK(f1_score({0.9, 0.1}, {1, 0}) == doctest::Approx(1.0));
  // no predicted positives but a true positive -> 0 by convention
  CHECK(f1_score({0.1, 0.2}, {1, 0}) == 0.0);
  // threshold uses >=
  CHECK(f1_score({0.5}, {1}) == doctest::Approx(1.0));
}

TEST_CASE("accuracy: all-unimportant predictor on 10% positives scores 0.9") {
  std::vector<double> scores(100, 0.0);
  std::vector<int> labels(100, 0);
  for (int i = 0; i < 10; ++i) labels[i] = 1;
  CHECK(accuracy(scores, labels) == doctest::Approx(0.9));
  CHECK(f1_score(scores, labels) == 0.0);  // the high-Acc / zero-F1 situation
}

TEST_CASE("f1 and accuracy match confusion-matrix counting on random data") {
  Rng rng(112);
  for (int rep = 0; rep < 300; ++rep) {
    const int64_t n = rng.uniform_int(1, 50);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int64_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform(0.0, 1.0);
      labels[i] = rng.uniform(0.0, 1.0) < 0.5 ? 1 : 0;
    }
    const auto c = oracles::count_confusion(scores, labels, 0.5);
    const double p = c.tp + c.fp > 0 ? double(c.tp) / (c.tp + c.fp) : 0.0;
    const double r = c.tp + c.fn > 0 ? double(c.tp) / (c.tp + c.fn) : 0.0;
    const double f1_expect = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
    CHECK(f1_score(scores, labels) == doctest::Approx(f1_expect).epsilon(1e-12));
    CHECK(accuracy(scores, labels) ==
          doctest::Approx(double(c.tp + c.tn) / n).epsilon(1e-12));
  }
}

TEST_CASE("metrics are invariant to permutations of the pooled pairs") {
  Rng rng(113);
  std::vector<double> scores(40);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) {
    scores[i] = rng.uniform(0.0, 1.0);
    labels[i] = i % 3 == 0 ? 1 : 0;
  }
  std::vector<size_t> perm(40);
  for (size_t i = 0; i < 40; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<double> s2(40);
  std::vector<int> l2(40);
  for (size_t i = 0; i < 40; ++i) {
    s2[i] = scores[perm[i]];
    l2[i] = labels[perm[i]];
  }
  CHECK(*average_precision(scores, labels) ==
        doctest::Approx(*average_precision(s2, l2)).epsilon(1e-15));
  CHECK(f1_score(scores, labels) == doctest::Approx(f1_score(s2, l2)));
  CHECK(accuracy(scores, labels) == doctest::Approx(accuracy(s2, l2)));
}

TEST_CASE("EvalReport serializes and reloads losslessly") {
  EvalReport r;
  r.ap = 0.123456789012345678;
  r.f1 = 1.0 / 3.0;
  r.acc = 0.9999999999999999;
  r.pr_curve = {{0.25, 1.0}, {0.5, 2.0 / 3.0}};
  PerObjectResult o;
  o.clip_id = "s0001:15";
  o.track_id = 42;
  o.score = 0.1234567890123456789;
  o.label = 1;
  o.gate_p = 0.75;
  o.gate_p_c = 0.001;
  r.per_object.push_back(o);

  const auto path = std::filesystem::temp_directory_path() / "roadimp_report.json";
  r.save(path);
  EvalReport back = EvalReport::load(path);
  CHECK(back.ap == r.ap);
  CHECK(back.f1 == r.f1);
  CHECK(back.acc == r.acc);
  REQUIRE(back.pr_curve.size() == r.pr_curve.size());
  for (size_t i = 0; i < r.pr_curve.size(); ++i) {
    CHECK(back.pr_curve[i].first == r.pr_curve[i].first);
    CHECK(back.pr_curve[i].second == r.pr_curve[i].second);
  }
  REQUIRE(back.per_object.size() == 1);
  CHECK(back.per_object[0].clip_id == o.clip_id);
  CHECK(back.per_object[0].score == o.score);
  CHECK(back.per_object[0].gate_p_c == o.gate_p_c);
}
