#include "hybrid/perf_model.hpp"

#include <doctest.h>

using namespace hybrid;

TEST_CASE("pure transformer ratio is one") {
  for (CostPreset p : {CostPreset::Linear, CostPreset::Sqrt, CostPreset::Quadratic}) {
    const CostProfile prof = make_profile(p, 0.0);
    for (double l : {1e3, 1e5, 1e7}) CHECK(throughput_ratio(prof, 32, l) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("linear attention cost approaches 1/(1-r) at long context") {
  const CostProfile prof = make_profile(CostPreset::Linear, 0.5);
  CHECK(std::abs(limit_ratio(prof, 64, 131072) - 2.0) <= 1e-9);
  double prev = 0.0;
  for (double l = 1024; l <= 1e9; l *= 4) {
    const double R = throughput_ratio(prof, 64, l);
    CHECK(R > prev);
    CHECK(R < 2.0);
    prev = R;
  }
  CHECK(prev == doctest::Approx(2.0).epsilon(1e-4));
  const CostProfile quarter = make_profile(CostPreset::Linear, 0.25);
  CHECK(limit_ratio(quarter, 16, 1e6) == doctest::Approx(1.0 / 0.75).epsilon(1e-12));
}

TEST_CASE("square-root attention cost at r=1/2") {
  const CostProfile prof = make_profile(CostPreset::Sqrt, 0.5);
  // (1/(1-r)^2) sqrt(b)/sqrt(2b) = 4/sqrt(2)
  CHECK(limit_ratio(prof, 64, 1e6) == doctest::Approx(4.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(throughput_ratio(prof, 64, 1e12) == doctest::Approx(4.0 / std::sqrt(2.0)).epsilon(1e-4));
}

TEST_CASE("quadratic attention cost at r=1/2 has limit one") {
  CHECK(limit_ratio(make_profile(CostPreset::Quadratic, 0.5), 64, 1e6) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a measured 2.26x limit implies sub-linear attention batch scaling") {
  const double s = implied_attention_scaling(2.26);
  CHECK(s == doctest::Approx(4.0 / 2.26).epsilon(1e-15));
  CHECK(s < 2.0);
  CHECK(s > 1.0);
  // A custom profile with that scaling reproduces the ratio.
  CostProfile p = make_profile(CostPreset::Linear, 0.5);
  const double exponent = std::log2(s);
  p.t_attn = [exponent](double b, double l) { return 1e-6 * std::pow(b, exponent) * l; };
  CHECK(limit_ratio(p, 64, 131072) == doctest::Approx(2.26).epsilon(1e-12));
}

TEST_CASE("hybrid batch") {
  CHECK(hybrid_batch(64, 0.5) == 128.0);
  CHECK(hybrid_batch(30, 0.25) == doctest::Approx(40.0));
  CHECK_THROWS_AS(hybrid_batch(64, 1.0), RangeError);
  CHECK_THROWS_AS(hybrid_batch(0, 0.5), RangeError);
}

TEST_CASE("profiles reject bad ratios and missing costs") {
  CHECK_THROWS_AS(make_profile(CostPreset::Linear, -0.1), RangeError);
  CHECK_THROWS_AS(make_profile(CostPreset::Linear, 1.0), RangeError);
  CostProfile p;
  CHECK_THROWS_AS(throughput_ratio(p, 1, 1), RangeError);
  CHECK_THROWS_AS(parse_cost_preset("cubic"), RangeError);
}

TEST_CASE("KV traffic is conserved exactly under saturation") {
  int checked = 0;
  for (std::int64_t b : {1, 3, 8, 64, 255})
    for (std::int64_t l : {1, 1000, 131072, 1048576})
      for (Rational r : {Rational(0), Rational(1, 4), Rational(1, 2), Rational(2, 3), Rational(7, 8)}) {
        const KvTraffic t = kv_traffic(b, 32, l, r);
        CHECK(t.transformer == t.hybrid);
        CHECK(t.transformer == Rational(b * 32 * l));
        ++checked;
      }
  CHECK(checked == 100);
  CHECK_THROWS_AS(kv_traffic(1, 1, 1, Rational(1)), RangeError);
}
