#include "hybrid/perf_model.hpp"

#include <cmath>

namespace hybrid {

std::string_view to_string(CostPreset p) {
  switch (p) {
    case CostPreset::Linear:
      return "linear";
    case CostPreset::Sqrt:
      return "sqrt";
    case CostPreset::Quadratic:
      return "quadratic";
  }
  return "unknown";
}

CostPreset parse_cost_preset(std::string_view name) {
  if (name == "linear") return CostPreset::Linear;
  if (name == "sqrt") return CostPreset::Sqrt;
  if (name == "quadratic") return CostPreset::Quadratic;
  throw RangeError("unknown cost preset: " + std::string(name));
}

CostProfile make_profile(CostPreset preset, double hybrid_ratio, const PresetCoefficients& c) {
  CostProfile p;
  p.hybrid_ratio = hybrid_ratio;
  p.name = std::string(to_string(preset));
  const double a = c.attn;
  switch (preset) {
    case CostPreset::Linear:
      p.t_attn = [a](double b, double l) { return a * b * l; };
      break;
    case CostPreset::Sqrt:
      p.t_attn = [a](double b, double l) { return a * std::sqrt(b) * l; };
      break;
    case CostPreset::Quadratic:
      p.t_attn = [a](double b, double l) { return a * b * b * l; };
      break;
  }
  p.t_mlp = [c](double b) { return c.mlp_base + c.mlp_slope * b; };
  p.t_ssm = [c](double b) { return c.ssm_base + c.ssm_slope * b; };
  check_profile(p);
  return p;
}

void check_profile(const CostProfile& p) {
  require(p.t_attn && p.t_mlp && p.t_ssm, "cost profile needs all three cost functions");
  require(p.hybrid_ratio >= 0.0 && p.hybrid_ratio < 1.0,
          "hybrid ratio r must lie in [0, 1), got " + std::to_string(p.hybrid_ratio));
  require(p.layers >= 1, "layer count must be positive");
}

double hybrid_batch(double b, double r) {
  require(r >= 0.0 && r < 1.0, "hybrid ratio r must lie in [0, 1)");
  require(b > 0.0, "batch must be positive");
  return b / (1.0 - r);
}

double throughput_ratio(const CostProfile& p, double b, double l) {
  check_profile(p);
  require(l > 0.0, "context length must be positive");
  const double r = p.hybrid_ratio;
  const double bh = hybrid_batch(b, r);
  const double transformer = p.t_attn(b, l) + p.t_mlp(b);
  const double hybrid = (1.0 - r) * p.t_attn(bh, l) + p.t_mlp(bh) + r * p.t_ssm(bh);
  if (!(transformer > 0.0 && hybrid > 0.0)) throw NumericalError("cost functions must be positive");
  return transformer / hybrid / (1.0 - r);
}

double limit_ratio(const CostProfile& p, double b, double l) {
  check_profile(p);
  const double r = p.hybrid_ratio;
  const double num = p.t_attn(b, l), den = p.t_attn(hybrid_batch(b, r), l);
  if (!(num > 0.0 && den > 0.0)) throw NumericalError("attention cost must be positive");
  return num / den / ((1.0 - r) * (1.0 - r));
}

double implied_attention_scaling(double measured_ratio) {
  require(measured_ratio > 0.0, "ratio must be positive");
  return 4.0 / measured_ratio;
}

KvTraffic kv_traffic(std::int64_t b, std::int64_t layers, std::int64_t l, Rational r) {
  require(b > 0 && layers > 0 && l > 0, "b, n and l must be positive");
  require(r >= Rational(0) && r < Rational(1), "hybrid ratio r must lie in [0, 1)");
  const Rational keep = Rational(1) - r;
  const Rational bh = Rational(b) / keep;
  return {Rational(b) * layers * l, bh * keep * layers * l};
}

}  // namespace hybrid
