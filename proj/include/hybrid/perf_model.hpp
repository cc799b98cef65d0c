#pragma once

#include "hybrid/types.hpp"

#include <boost/rational.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

namespace hybrid {

/// Per-layer decode forward times. t_attn(b, l) covers one attention layer at
/// batch b and context l; t_mlp and t_ssm depend on the batch only.
struct CostProfile {
  std::function<double(double b, double l)> t_attn;
  std::function<double(double b)> t_mlp;
  std::function<double(double b)> t_ssm;
  double hybrid_ratio = 0.5;  // r, fraction of mixing layers that are SSMs
  Index layers = 32;          // n
  std::string name = "custom";
};

enum class CostPreset { Linear, Sqrt, Quadratic };

std::string_view to_string(CostPreset p);
CostPreset parse_cost_preset(std::string_view name);

/// t_attn = attn_coef * s(b) * l with s(b) = b, sqrt(b) or b^2; MLP and SSM
/// costs are affine in b with small slopes.
struct PresetCoefficients {
  double attn = 1e-6;
  double mlp_base = 1.0;
  double mlp_slope = 1e-3;
  double ssm_base = 0.5;
  double ssm_slope = 1e-3;
};

CostProfile make_profile(CostPreset preset, double hybrid_ratio, const PresetCoefficients& c = {});

void check_profile(const CostProfile& p);

/// Batch the hybrid reaches under the same KV budget: b' = b / (1 - r).
double hybrid_batch(double b, double r);

/// R = (1/(1-r)) [t_attn(b,l) + t_mlp(b)] / [(1-r) t_attn(b',l) + t_mlp(b') + r t_ssm(b')].
double throughput_ratio(const CostProfile& p, double b, double l);

/// Attention-dominated limit (1/(1-r)^2) t_attn(b,l) / t_attn(b',l).
double limit_ratio(const CostProfile& p, double b, double l);

/// Attention batch-scaling factor t_attn(2b)/t_attn(b) implied by a measured
/// limit ratio at r = 1/2: 4 / R.
double implied_attention_scaling(double measured_ratio);

using Rational = boost::rational<std::int64_t>;

/// Aggregate KV traffic per decode step: transformer b n l vs hybrid b' (1-r) n l.
struct KvTraffic {
  Rational transformer;
  Rational hybrid;
};

KvTraffic kv_traffic(std::int64_t b, std::int64_t layers, std::int64_t l, Rational r);

/// Context length whose KV cache equals one SSM layer's fixed state read.
inline constexpr std::int64_t kSsmStateEquivalentTokens = 2048;

}  // namespace hybrid
