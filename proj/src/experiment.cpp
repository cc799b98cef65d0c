#include "hybrid/experiment.hpp"

#include "hybrid/composition.hpp"
#include "hybrid/perf_model.hpp"
#include "hybrid/priming.hpp"
#include "hybrid/realization.hpp"
#include "hybrid/seqpar.hpp"
#include "hybrid/tiled_decode.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace hybrid {

namespace fs = std::filesystem;

ConfigError::ConfigError(std::vector<std::string> diagnostics)
    : Error([&] {
        std::string msg = "invalid config:";
        for (const auto& d : diagnostics) msg += "\n  " + d;
        return msg;
      }()),
      diagnostics_(std::move(diagnostics)) {}

namespace {

using Diagnostics = std::vector<std::string>;

template <typename T>
std::string type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else return "a list";
}

template <typename T>
bool json_matches(const Json& j) {
  if constexpr (std::is_same_v<T, bool>) return j.is_boolean();
  else if constexpr (std::is_integral_v<T>) return j.is_number_integer();
  else if constexpr (std::is_floating_point_v<T>) return j.is_number();
  else if constexpr (std::is_same_v<T, std::string>) return j.is_string();
  else {
    if (!j.is_array()) return false;
    for (const auto& e : j)
      if (!json_matches<typename T::value_type>(e)) return false;
    return true;
  }
}

/// Reads typed fields from one JSON object, collecting problems instead of throwing.
class BlockReader {
 public:
  BlockReader(const Json* block, std::string prefix, Diagnostics& diags)
      : block_(block), prefix_(std::move(prefix)), diags_(diags) {
    if (block_ && !block_->is_object()) {
      diags_.push_back(prefix_ + ": expected an object");
      block_ = nullptr;
    }
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!block_ || !block_->contains(key)) return fallback;
    const Json& j = block_->at(key);
    if (!json_matches<T>(j)) {
      diags_.push_back(name(key) + ": expected " + type_name<T>());
      return fallback;
    }
    return j.get<T>();
  }

  template <typename T>
  std::optional<T> required(const std::string& key) {
    seen_.insert(key);
    if (!block_ || !block_->contains(key)) {
      diags_.push_back(name(key) + ": required field is missing");
      return std::nullopt;
    }
    const Json& j = block_->at(key);
    if (!json_matches<T>(j)) {
      diags_.push_back(name(key) + ": expected " + type_name<T>());
      return std::nullopt;
    }
    return j.get<T>();
  }

  void mark(const std::string& key) { seen_.insert(key); }

  void check(bool ok, const std::string& message) {
    if (!ok) diags_.push_back(prefix_ + ": " + message);
  }

  void finish() {
    if (!block_) return;
    for (const auto& [key, value] : block_->items())
      if (!seen_.count(key)) diags_.push_back(name(key) + ": unknown field");
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

 private:
  const Json* block_;
  std::string prefix_;
  Diagnostics& diags_;
  std::set<std::string> seen_;
};

// ---- per-command parameters ----

struct MixerParams {
  std::string mixer = "attention";  // attention, swa, uniform
  Index T = 16;
  Index d_k = 8;
  Index window = 4;
  double scale = 0.0;  // 0: d_k^{-1/4}
  double rank_tol = kDefaultRankTol;
};

void read_mixer(BlockReader& r, MixerParams& p) {
  p.mixer = r.get<std::string>("mixer", p.mixer);
  p.T = r.get<Index>("T", p.T);
  p.d_k = r.get<Index>("d_k", p.d_k);
  p.window = r.get<Index>("window", p.window);
  p.scale = r.get<double>("scale", p.scale);
  p.rank_tol = r.get<double>("rank_tol", p.rank_tol);
  r.check(p.mixer == "attention" || p.mixer == "swa" || p.mixer == "uniform",
          "mixer must be attention, swa or uniform");
  r.check(p.T >= 1 && p.d_k >= 1, "T and d_k must be >= 1");
  r.check(p.window >= 1, "window must be >= 1");
  r.check(p.scale >= 0.0, "scale must be >= 0");
  r.check(p.rank_tol > 0.0 && p.rank_tol < 1.0, "rank_tol must lie in (0, 1)");
}

MatrixXd make_mixer(const MixerParams& p, Rng& rng) {
  const double scale = p.scale > 0.0 ? p.scale : std::pow(double(p.d_k), -0.25);
  TokenSequence<double> seq = random_sequence(p.T, p.d_k, 1, rng, scale);
  if (p.mixer == "uniform") seq.queries.setZero();
  return p.mixer == "swa" ? build_swa_mixer(seq, p.window) : build_attention_mixer(seq);
}

struct RealizeParams {
  MixerParams mixer;
  Index instances = 1;
};

struct HankelParams {
  MixerParams mixer;
};

struct SsmEquivParams {
  Index T = 16, d_k = 8, d_v = 4, instances = 10, iterations = 30;
  double regularizer = 1.0;
};

struct ComposeParams {
  std::vector<std::string> kinds = {"mamba2", "gdn", "gka"};
  Index T = 32, chunks = 4, d_k = 8, d_v = 4;
};

struct SpsimParams {
  std::vector<std::int64_t> lengths = {16384, 32768, 65536, 131072, 262144, 524288, 1048576};
  std::int64_t width = 8192, ranks = 8, state_heads = 32, d_k = 128, d_v = 128, conv_width = 4,
               elem_bytes = 2, heads = 16;
  Index T = 64, d_k_sim = 4, d_v_sim = 3;
  std::vector<Index> rank_counts = {2, 4, 8};
};

struct TileParams {
  Index d_k = 128, d_v = 128, b_k = 64, b_v = 64, steps = 20, iterations = 30;
  double alpha = 0.05;
  std::vector<Index> grid_sizes = {1, 2, 4, 8, 16, 32, 64, 128};
};

struct SelectParams {
  Index window = kDefaultSelectionWindow, M = 1;
  RecallTaskConfig task;
};

struct PerfParams {
  std::string preset = "linear";
  double r = 0.5, b = 64.0;
  std::vector<double> lengths = {1024, 4096, 16384, 65536, 131072, 262144, 1048576, 16777216};
};

struct PrimeParams {
  Index d_model = 16, d_head = 8, d_ff = 32, layers = 2, T = 8, steps = 10;
  std::vector<Index> ssm_layers = {1};
  std::string kind = "gdn", mode = "e2e";
  double step_size = 0.05;
  Index q_heads = 4, kv_heads = 2, head_dim = 4, agqa_trials = 1000;
};

struct Parsed {
  std::string command;
  std::uint64_t seed = kDefaultSeed;
  fs::path output_dir;
  Json effective;  // config with overrides applied, output_dir removed (hashed)
  RealizeParams realize;
  HankelParams hankel;
  SsmEquivParams ssm;
  ComposeParams compose;
  SpsimParams spsim;
  TileParams tile;
  SelectParams select;
  PerfParams perf;
  PrimeParams prime;
};

bool is_kind(const std::string& s) { return s == "mamba2" || s == "gdn" || s == "gka"; }

void parse_block(Parsed& p, const Json* block, Diagnostics& d) {
  BlockReader r(block, p.command, d);
  if (p.command == "realize") {
    read_mixer(r, p.realize.mixer);
    p.realize.instances = r.get<Index>("instances", p.realize.instances);
    r.check(p.realize.instances >= 1, "instances must be >= 1");
  } else if (p.command == "hankel") {
    p.hankel.mixer.T = 3;
    p.hankel.mixer.mixer = "uniform";
    read_mixer(r, p.hankel.mixer);
  } else if (p.command == "ssm-equiv") {
    auto& s = p.ssm;
    s.T = r.get<Index>("T", s.T);
    s.d_k = r.get<Index>("d_k", s.d_k);
    s.d_v = r.get<Index>("d_v", s.d_v);
    s.instances = r.get<Index>("instances", s.instances);
    s.iterations = r.get<Index>("iterations", s.iterations);
    s.regularizer = r.get<double>("regularizer", s.regularizer);
    r.check(s.T >= 1 && s.d_k >= 1 && s.d_v >= 1 && s.instances >= 1, "sizes must be >= 1");
    r.check(s.iterations >= 1, "iterations must be >= 1");
    r.check(s.regularizer > 0.0, "regularizer must be > 0");
  } else if (p.command == "compose") {
    auto& c = p.compose;
    c.kinds = r.get<std::vector<std::string>>("kinds", c.kinds);
    c.T = r.get<Index>("T", c.T);
    c.chunks = r.get<Index>("chunks", c.chunks);
    c.d_k = r.get<Index>("d_k", c.d_k);
    c.d_v = r.get<Index>("d_v", c.d_v);
    for (const auto& k : c.kinds) r.check(is_kind(k), "unknown kind '" + k + "'");
    r.check(c.chunks >= 1 && c.T >= 1 && c.d_k >= 1 && c.d_v >= 1, "sizes must be >= 1");
    r.check(c.chunks >= 1 && c.T % std::max<Index>(c.chunks, 1) == 0, "T must be divisible by chunks");
  } else if (p.command == "spsim") {
    auto& s = p.spsim;
    s.lengths = r.get<std::vector<std::int64_t>>("lengths", s.lengths);
    s.width = r.get<std::int64_t>("width", s.width);
    s.ranks = r.get<std::int64_t>("ranks", s.ranks);
    s.state_heads = r.get<std::int64_t>("state_heads", s.state_heads);
    s.d_k = r.get<std::int64_t>("d_k", s.d_k);
    s.d_v = r.get<std::int64_t>("d_v", s.d_v);
    s.conv_width = r.get<std::int64_t>("conv_width", s.conv_width);
    s.elem_bytes = r.get<std::int64_t>("elem_bytes", s.elem_bytes);
    s.heads = r.get<std::int64_t>("heads", s.heads);
    s.T = r.get<Index>("T", s.T);
    s.d_k_sim = r.get<Index>("d_k_sim", s.d_k_sim);
    s.d_v_sim = r.get<Index>("d_v_sim", s.d_v_sim);
    s.rank_counts = r.get<std::vector<Index>>("rank_counts", s.rank_counts);
    r.check(!s.lengths.empty(), "lengths must not be empty");
    for (auto l : s.lengths) r.check(l >= 1, "lengths must be >= 1");
    r.check(s.width >= 1 && s.ranks >= 1 && s.state_heads >= 1 && s.d_k >= 1 && s.d_v >= 1 &&
                s.conv_width >= 1 && s.elem_bytes >= 1 && s.heads >= 0,
            "accounting sizes must be positive");
    r.check(s.heads == 0 || s.heads % std::max<std::int64_t>(s.ranks, 1) == 0,
            "heads must be divisible by ranks for a2a head scattering");
    r.check(s.d_k_sim >= 1 && s.d_v_sim >= 1, "d_k_sim and d_v_sim must be >= 1");
    for (Index n : s.rank_counts) {
      r.check(n >= 1, "rank_counts entries must be >= 1");
      if (n >= 1 && s.T % (2 * n) == 0)
        r.check(s.T / (2 * n) >= kDefaultConvWidth - 1,
                "T / (2 * " + std::to_string(n) + ") must be >= conv halo " + std::to_string(kDefaultConvWidth - 1));
      if (n >= 1)
        r.check(s.T % (2 * n) == 0, "T = " + std::to_string(s.T) + " is not divisible by 2 * " +
                                        std::to_string(n) + " for zigzag sharding");
    }
  } else if (p.command == "tile-bench") {
    auto& t = p.tile;
    t.d_k = r.get<Index>("d_k", t.d_k);
    t.d_v = r.get<Index>("d_v", t.d_v);
    t.b_k = r.get<Index>("b_k", t.b_k);
    t.b_v = r.get<Index>("b_v", t.b_v);
    t.steps = r.get<Index>("steps", t.steps);
    t.iterations = r.get<Index>("iterations", t.iterations);
    t.alpha = r.get<double>("alpha", t.alpha);
    t.grid_sizes = r.get<std::vector<Index>>("grid_sizes", t.grid_sizes);
    r.check(t.d_k >= 1 && t.d_v >= 1 && t.b_k >= 1 && t.b_v >= 1, "tile sizes must be >= 1");
    if (t.b_k >= 1) r.check(t.d_k % t.b_k == 0, "b_k (" + std::to_string(t.b_k) + ") must divide d_k (" +
                                                    std::to_string(t.d_k) + ")");
    if (t.b_v >= 1) r.check(t.d_v % t.b_v == 0, "b_v (" + std::to_string(t.b_v) + ") must divide d_v (" +
                                                    std::to_string(t.d_v) + ")");
    r.check(t.steps >= 1 && t.iterations >= 1, "steps and iterations must be >= 1");
    r.check(t.alpha > 0.0, "alpha must be > 0");
    for (Index g : t.grid_sizes)
      r.check(g >= 1 && t.d_k % std::max<Index>(g, 1) == 0,
              "grid size " + std::to_string(g) + " must divide d_k");
  } else if (p.command == "select-layers") {
    auto& s = p.select;
    s.window = r.get<Index>("window", s.window);
    s.M = r.get<Index>("M", s.M);
    s.task.length = r.get<Index>("length", s.task.length);
    s.task.vocab = r.get<Index>("vocab", s.task.vocab);
    s.task.samples = r.get<Index>("samples", s.task.samples);
    s.task.sharpness = r.get<double>("sharpness", s.task.sharpness);
    r.check(s.window >= 1, "window must be >= 1");
    r.check(s.M >= 0 && s.M <= RecallEvaluator::layers(), "M must lie in [0, 3]");
    r.check(s.task.length >= 2 && s.task.vocab >= 2 && s.task.samples >= 1,
            "length and vocab must be >= 2, samples >= 1");
    r.check(s.task.sharpness > 0.0, "sharpness must be > 0");
  } else if (p.command == "perf-model") {
    auto& f = p.perf;
    f.preset = r.get<std::string>("preset", f.preset);
    f.r = r.get<double>("r", f.r);
    f.b = r.get<double>("b", f.b);
    f.lengths = r.get<std::vector<double>>("lengths", f.lengths);
    r.check(f.preset == "linear" || f.preset == "sqrt" || f.preset == "quadratic",
            "preset must be linear, sqrt or quadratic");
    r.check(f.r >= 0.0 && f.r < 1.0, "r must lie in [0, 1)");
    r.check(f.b > 0.0, "b must be > 0");
    r.check(!f.lengths.empty(), "lengths must not be empty");
    for (double l : f.lengths) r.check(l > 0.0, "lengths must be > 0");
  } else if (p.command == "prime") {
    auto& q = p.prime;
    q.d_model = r.get<Index>("d_model", q.d_model);
    q.d_head = r.get<Index>("d_head", q.d_head);
    q.d_ff = r.get<Index>("d_ff", q.d_ff);
    q.layers = r.get<Index>("layers", q.layers);
    q.T = r.get<Index>("T", q.T);
    q.steps = r.get<Index>("steps", q.steps);
    q.ssm_layers = r.get<std::vector<Index>>("ssm_layers", q.ssm_layers);
    q.kind = r.get<std::string>("kind", q.kind);
    q.mode = r.get<std::string>("mode", q.mode);
    q.step_size = r.get<double>("step_size", q.step_size);
    q.q_heads = r.get<Index>("q_heads", q.q_heads);
    q.kv_heads = r.get<Index>("kv_heads", q.kv_heads);
    q.head_dim = r.get<Index>("head_dim", q.head_dim);
    q.agqa_trials = r.get<Index>("agqa_trials", q.agqa_trials);
    r.check(q.d_model >= 1 && q.d_head >= 1 && q.d_ff >= 1 && q.layers >= 1 && q.T >= 1,
            "stack sizes must be >= 1");
    r.check(q.steps >= 0 && q.step_size > 0.0, "steps must be >= 0 and step_size > 0");
    r.check(!q.ssm_layers.empty(), "ssm_layers must not be empty");
    for (Index i : q.ssm_layers) r.check(i >= 0 && i < q.layers, "ssm_layers entries must lie in [0, layers)");
    r.check(is_kind(q.kind), "kind must be mamba2, gdn or gka");
    r.check(q.mode == "e2e" || q.mode == "layerwise", "mode must be e2e or layerwise");
    r.check(q.q_heads >= 1 && q.kv_heads >= 1 && q.head_dim >= 1 && q.agqa_trials >= 1,
            "AGQA sizes must be >= 1");
    if (q.kv_heads >= 1) r.check(q.q_heads % q.kv_heads == 0, "q_heads must be divisible by kv_heads");
  }
  r.finish();
}

Parsed parse(const Json& config, const Overrides& overrides, Diagnostics& d) {
  Parsed p;
  if (!config.is_object()) {
    d.push_back("config must be a JSON object");
    return p;
  }
  BlockReader top(&config, "", d);
  const auto command = top.required<std::string>("command");
  const auto seed = top.get<std::int64_t>("seed", static_cast<std::int64_t>(kDefaultSeed));
  top.check(seed >= 0, "seed must be non-negative");
  p.seed = overrides.seed ? *overrides.seed : static_cast<std::uint64_t>(seed);
  if (overrides.output_dir) {
    top.get<std::string>("output_dir", "");
    p.output_dir = *overrides.output_dir;
  } else if (const auto out = top.required<std::string>("output_dir")) {
    p.output_dir = *out;
  }
  const Json* block = nullptr;
  if (command) {
    if (std::find(kCommands.begin(), kCommands.end(), *command) == kCommands.end()) {
      std::string known;
      for (const auto& c : kCommands) known += (known.empty() ? "" : ", ") + c;
      d.push_back("command: unknown command '" + *command + "' (known: " + known + ")");
    } else {
      p.command = *command;
      top.mark(p.command);
      if (config.contains(p.command)) block = &config.at(p.command);
    }
  }
  top.finish();
  if (!p.command.empty()) parse_block(p, block, d);
  p.effective = config;
  p.effective.erase("output_dir");
  p.effective["seed"] = p.seed;
  return p;
}

// ---- running ----

struct Context {
  const Parsed& p;
  ReportBundle& bundle;

  std::ofstream open(const std::string& name) {
    const fs::path path = p.output_dir / name;
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    bundle.files.push_back(path);
    return out;
  }
  std::string comment() const {
    return "config " + bundle.config_hash + " command " + p.command + " seed " + std::to_string(p.seed);
  }
  void json(const std::string& name, Json j) {
    j["config_hash"] = bundle.config_hash;
    auto out = open(name);
    out << j.dump(2) << '\n';
  }
  void violation(const std::string& what) { bundle.violations.push_back(what); }
  void note(const std::string& line) { bundle.summary.push_back(line); }
};

Index count_rank_violations(const MatrixXd& reconstructed, Index n, double rank_tol) {
  Index violations = 0;
  for (Index rank : hankel_profile(reconstructed, rank_tol).ranks)
    if (rank > n) ++violations;
  return violations;
}

void run_realize(Context& ctx) {
  const auto& q = ctx.p.realize;
  Rng rng(ctx.p.seed);
  auto out = ctx.open("realize.csv");
  CsvWriter csv(out, ctx.comment(), {"instance", "T", "n_min", "state_dim", "max_abs_error", "rank_bound_violations"});
  for (Index i = 0; i < q.instances; ++i) {
    const MatrixXd M = make_mixer(q.mixer, rng);
    RealizeOptions options;
    options.rank_tol = q.mixer.rank_tol;
    options.pad_seed = ctx.p.seed;
    const Realization R = realize(M, options);
    const MinimalityReport rep = verify_minimality(R, M, q.mixer.rank_tol);
    const Index bound = count_rank_violations(io_matrix(R, R.horizon()), R.state_dim, q.mixer.rank_tol);
    csv.row(i, q.mixer.T, rep.n_min, rep.state_dim, rep.reconstruction_error, bound);
    if (rep.reconstruction_error >= 1e-9)
      ctx.violation("instance " + std::to_string(i) + ": reconstruction error " + format_double(rep.reconstruction_error));
    if (!rep.is_minimal) ctx.violation("instance " + std::to_string(i) + ": state dimension is not minimal");
    if (bound > 0) ctx.violation("instance " + std::to_string(i) + ": Hankel rank exceeds the state dimension");
    if (i == 0) {
      Json j = realization_to_json(R);
      j["mixer"] = tensor_to_json(M);
      ctx.json("realization.json", std::move(j));
    }
  }
  ctx.note("realized " + std::to_string(q.instances) + " mixer(s) of length " + std::to_string(q.mixer.T));
}

void run_hankel(Context& ctx) {
  const auto& q = ctx.p.hankel;
  Rng rng(ctx.p.seed);
  const MatrixXd M = make_mixer(q.mixer, rng);
  const HankelProfile profile = hankel_profile(M, q.mixer.rank_tol);
  auto out = ctx.open("hankel.csv");
  CsvWriter csv(out, ctx.comment(), {"cut", "rank", "top_singular_value"});
  for (Index c = 0; c < profile.cuts(); ++c) {
    const VectorXd& sv = profile.singular_values[static_cast<std::size_t>(c)];
    csv.row(c + 1, profile.ranks[static_cast<std::size_t>(c)], sv.size() ? sv(0) : 0.0);
  }
  ctx.json("hankel_summary.json", {{"T", q.mixer.T}, {"mixer", q.mixer.mixer}, {"n_min", profile.n_min}});
  ctx.note("n_min = " + std::to_string(profile.n_min));
}

void run_ssm_equiv(Context& ctx) {
  const auto& q = ctx.p.ssm;
  Rng rng(ctx.p.seed);
  auto out = ctx.open("ssm_equiv.csv");
  CsvWriter csv(out, ctx.comment(),
                {"instance", "form_max_abs_diff", "sherman_morrison_max_abs_diff", "chebyshev_residual_ratio"});
  for (Index i = 0; i < q.instances; ++i) {
    TokenSequence<double> seq = random_sequence(q.T, q.d_k, q.d_v, rng);
    seq.keys = normalize_rows(seq.keys);
    GateTrack<double> gates = GateTrack<double>::constant(q.T, 1.0, 1.0, q.regularizer);
    for (auto& b : gates.write) b = random_uniform(rng, 0.1, 1.0);
    const double form = gka_recurrence_equivalence(seq, gates);

    ShermanMorrisonGain sm(q.d_k, q.regularizer);
    MatrixXd H = MatrixXd::Zero(q.d_k, q.d_k);
    double sm_err = 0.0;
    for (Index t = 0; t < q.T; ++t) {
      const VectorXd k = seq.keys.row(t).transpose();
      const double beta = gates.write[static_cast<std::size_t>(t)];
      sm.update(k, beta);
      H += beta * k * k.transpose();
      const MatrixXd dense = (H + q.regularizer * MatrixXd::Identity(q.d_k, q.d_k)).inverse();
      sm_err = std::max(sm_err, (dense - sm.inverse()).cwiseAbs().maxCoeff());
    }
    const VectorXd rhs = seq.queries.row(q.T - 1).transpose();
    auto apply_h = [&](const VectorXd& z) -> VectorXd { return H * z; };
    const auto cheb = chebyshev_solve<double>(apply_h, q.regularizer, rhs, static_cast<int>(q.iterations),
                                              default_spectral_bounds<double>(H, q.regularizer));
    const double ratio = cheb.residual_history.back() / cheb.residual_history.front();
    csv.row(i, form, sm_err, ratio);
    if (form > 1e-9) ctx.violation("instance " + std::to_string(i) + ": forms differ by " + format_double(form));
    if (sm_err > 1e-10) ctx.violation("instance " + std::to_string(i) + ": Sherman-Morrison drift " + format_double(sm_err));
  }
  ctx.note("checked " + std::to_string(q.instances) + " GKA instance(s)");
}

void run_compose(Context& ctx) {
  const auto& q = ctx.p.compose;
  Rng rng(ctx.p.seed);
  auto out = ctx.open("compose.csv");
  CsvWriter csv(out, ctx.comment(), {"kind", "chunks", "merge_mode", "max_abs_deviation"});
  const Index len = q.T / q.chunks;
  for (const auto& name : q.kinds) {
    const SsmKind kind = parse_ssm_kind(name);
    TokenSequence<double> seq = random_sequence(q.T, q.d_k, q.d_v, rng);
    seq.keys = normalize_rows(seq.keys);
    const GateTrack<double> gates = default_gates(seq, 1.0, rng());
    std::vector<ChunkRecord> records;
    for (Index c = 0; c < q.chunks; ++c)
      records.push_back(make_chunk_record(kind, seq.slice(c * len, len), gates.slice(c * len, len)));
    const ChunkRecord full = full_sequence_record(kind, seq, gates);
    auto deviation = [&](const ChunkRecord& r) {
      double d = (r.S - full.S).cwiseAbs().maxCoeff();
      if (full.has_info()) d = std::max(d, (r.H - full.H).cwiseAbs().maxCoeff());
      return d;
    };
    const double caso = deviation(caso_compose(records));
    csv.row(name, q.chunks, "caso", caso);
    csv.row(name, q.chunks, "picaso_r", deviation(picaso_r(records)));
    if (caso > 1e-10) ctx.violation(name + ": caso deviates by " + format_double(caso));
    if (kind == SsmKind::GKA) {
      // Without decay the information pair is purely additive.
      const GateTrack<double> flat = GateTrack<double>::constant(q.T, 1.0, 1.0, 1.0);
      std::vector<GkaInfoState<double>> infos;
      for (Index c = 0; c < q.chunks; ++c)
        infos.push_back(gka_info_forward(seq.slice(c * len, len), flat.slice(c * len, len)).final_state);
      const auto whole = gka_info_forward(seq, flat).final_state;
      const auto merged = gka_compose(infos, GkaMerge::Sum);
      const double d = std::max((merged.H - whole.H).cwiseAbs().maxCoeff(), (merged.U - whole.U).cwiseAbs().maxCoeff());
      csv.row(name, q.chunks, "gka_sum_no_decay", d);
      if (d > 1e-12) ctx.violation("gka sum without decay deviates by " + format_double(d));
    }
  }
  ctx.note("composed " + std::to_string(q.kinds.size()) + " kind(s) over " + std::to_string(q.chunks) + " chunks");
}

void run_spsim(Context& ctx) {
  const auto& q = ctx.p.spsim;
  {
    auto out = ctx.open("comm_volume.csv");
    CsvWriter csv(out, ctx.comment(), {"method", "l", "bytes_per_rank", "bytes_total"});
    for (CommMethod m : {CommMethod::P2P, CommMethod::A2A, CommMethod::USP})
      for (auto l : q.lengths) {
        CommConfig c;
        c.length = static_cast<std::uint64_t>(l);
        c.width = static_cast<std::uint64_t>(q.width);
        c.ranks = static_cast<std::uint64_t>(q.ranks);
        c.state_bytes = state_bytes(q.state_heads, q.d_k, q.d_v, q.elem_bytes);
        c.conv_width = static_cast<std::uint64_t>(q.conv_width);
        c.elem_bytes = static_cast<std::uint64_t>(q.elem_bytes);
        c.heads = static_cast<std::uint64_t>(q.heads);
        const double per_rank = comm_volume(m, c);
        csv.row(std::string(to_string(m)), l, per_rank, per_rank * double(q.ranks));
      }
  }
  Rng rng(ctx.p.seed);
  auto out = ctx.open("sp_equivalence.csv");
  CsvWriter csv(out, ctx.comment(), {"kind", "pattern", "ranks", "p2p_max_abs_diff", "usp_max_abs_diff", "conv_bitwise_equal"});
  for (SsmKind kind : kAllSsmKinds) {
    TokenSequence<double> seq = random_sequence(q.T, q.d_k_sim, q.d_v_sim, rng);
    seq.keys = normalize_rows(seq.keys);
    const GateTrack<double> gates = default_gates(seq, 1.0, rng());
    const MatrixXd reference = kind == SsmKind::GKA ? gka_info_forward(seq, gates).outputs
                                                    : ssm_forward(kind, seq, gates).outputs;
    const MatrixXd filter = random_normal(kDefaultConvWidth, q.d_v_sim, rng);
    const MatrixXd conv_ref = conv1d_reference(seq.values, filter);
    for (ShardPattern pattern : {ShardPattern::Simple, ShardPattern::Zigzag})
      for (Index n : q.rank_counts) {
        const ShardPlan plan = shard(q.T, n, pattern);
        // The layer under USP is the same code path as the reference, on the gathered tokens.
        MatrixXd packed(q.T, q.d_k_sim * 2 + q.d_v_sim);
        packed << seq.queries, seq.keys, seq.values;
        auto layer = [&](const MatrixXd& x) -> MatrixXd {
          TokenSequence<double> s{x.leftCols(q.d_k_sim), x.middleCols(q.d_k_sim, q.d_k_sim), x.rightCols(q.d_v_sim)};
          return kind == SsmKind::GKA ? gka_info_forward(s, gates).outputs : ssm_forward(kind, s, gates).outputs;
        };
        const double usp = (usp_forward(layer, packed, plan).outputs - reference).cwiseAbs().maxCoeff();
        const bool conv_equal = conv1d_sp(seq.values, filter, plan).outputs == conv_ref;
        double p2p = std::numeric_limits<double>::quiet_NaN();
        if (kind != SsmKind::GKA) {
          p2p = (p2p_forward(kind, seq, gates, plan).outputs - reference).cwiseAbs().maxCoeff();
          if (!(p2p < 1e-10)) ctx.violation(std::string(to_string(kind)) + " p2p deviates by " + format_double(p2p));
        }
        if (usp != 0.0) ctx.violation(std::string(to_string(kind)) + " usp deviates by " + format_double(usp));
        if (!conv_equal) ctx.violation("sharded conv differs from the single-device conv");
        csv.row(std::string(to_string(kind)), std::string(to_string(pattern)), n, p2p, usp, conv_equal ? 1 : 0);
      }
  }
  ctx.note("volume sweep over " + std::to_string(q.lengths.size()) + " lengths");
}

void run_tile_bench(Context& ctx) {
  const auto& q = ctx.p.tile;
  {
    auto out = ctx.open("tile_traffic.csv");
    CsvWriter csv(out, ctx.comment(), {"variant", "g", "r", "loads", "stores", "skipped_fraction"});
    for (DecodeVariant v : {DecodeVariant::Reference, DecodeVariant::TiledSmallBatch, DecodeVariant::TiledLargeBatch})
      for (Index g : q.grid_sizes) {
        const TrafficReport t = traffic_model(q.d_k, q.d_k / g, v, static_cast<int>(q.iterations));
        csv.row(std::string(to_string(v)), g, q.iterations, t.tiles_loaded, t.tiles_stored, t.skipped_fraction);
      }
  }
  Rng rng(ctx.p.seed);
  auto out = ctx.open("tile_equivalence.csv");
  CsvWriter csv(out, ctx.comment(), {"step", "max_variant_diff", "exact_gap_r1", "exact_gap_r"});
  DecodeState state{MatrixXd::Zero(q.d_k, q.d_k), MatrixXd::Zero(q.d_v, q.d_k)};
  for (Index s = 0; s < q.steps; ++s) {
    VectorXd k = random_normal(q.d_k, 1, rng);
    k.normalize();
    const VectorXd v = random_normal(q.d_v, 1, rng), qv = random_normal(q.d_k, 1, rng);
    const double decay = random_uniform(rng, 0.9, 1.0), write = random_uniform(rng, 0.1, 1.0);
    DecodeOptions options;
    options.iterations = static_cast<int>(q.iterations);
    options.alpha = q.alpha;
    options.grid = {q.d_k, q.d_v, q.b_k, q.b_v};
    std::vector<DecodeResult> results;
    for (DecodeVariant v_ : {DecodeVariant::Reference, DecodeVariant::TiledSmallBatch, DecodeVariant::TiledLargeBatch}) {
      options.variant = v_;
      results.push_back(decode_step(state, k, v, qv, decay, write, options));
    }
    double diff = 0.0;
    for (std::size_t a = 0; a < results.size(); ++a)
      for (std::size_t b = a + 1; b < results.size(); ++b)
        diff = std::max(diff, (results[a].output - results[b].output).cwiseAbs().maxCoeff());
    const auto& ref = results.front();
    MatrixXd A = ref.state.H;
    A.diagonal().array() += ref.lambda;
    const VectorXd exact = ref.state.U * A.ldlt().solve(qv);
    options.variant = DecodeVariant::Reference;
    options.iterations = 1;
    const double gap1 = (decode_step(state, k, v, qv, decay, write, options).output - exact).norm();
    const double gap = (ref.output - exact).norm();
    csv.row(s, diff, gap1, gap);
    if (diff >= 1e-9) ctx.violation("step " + std::to_string(s) + ": decode variants differ by " + format_double(diff));
    state = ref.state;
  }
  ctx.note("ran " + std::to_string(q.steps) + " decode steps per variant");
}

void run_select_layers(Context& ctx) {
  const auto& q = ctx.p.select;
  RecallTaskConfig task = q.task;
  task.seed = ctx.p.seed;
  const RecallEvaluator evaluator(task);
  const ImportanceTable table = importance_scores(std::cref(evaluator), RecallEvaluator::layers(), q.window);
  const std::vector<Index> chosen = select_layers(table, q.M);
  {
    auto out = ctx.open("importance.csv");
    CsvWriter csv(out, ctx.comment(), {"layer", "score", "importance"});
    for (Index i = 0; i < table.layers(); ++i)
      csv.row(i, table.scores[static_cast<std::size_t>(i)], table.importance[static_cast<std::size_t>(i)]);
  }
  ctx.json("selection.json", {{"selected", chosen}, {"M", q.M}, {"window", q.window}, {"baseline", table.baseline}});
  std::string list;
  for (Index i : chosen) list += (list.empty() ? "" : ",") + std::to_string(i);
  ctx.note("selected layers {" + list + "} with window " + std::to_string(q.window));
}

void run_perf_model(Context& ctx) {
  const auto& q = ctx.p.perf;
  const CostProfile profile = make_profile(parse_cost_preset(q.preset), q.r);
  auto out = ctx.open("perf_model.csv");
  CsvWriter csv(out, ctx.comment(), {"l", "R", "R_limit"});
  for (double l : q.lengths) csv.row(l, throughput_ratio(profile, q.b, l), limit_ratio(profile, q.b, l));
  ctx.note("R at l = " + format_double(q.lengths.back()) + ": " +
           format_double(throughput_ratio(profile, q.b, q.lengths.back())));
}

void run_prime(Context& ctx) {
  const auto& q = ctx.p.prime;
  Rng rng(ctx.p.seed);
  // AGQA at initialisation and the gate blend.
  const AgqaParams agqa = agqa_init(q.q_heads, q.kv_heads, q.head_dim, kDefaultAgqaRank, ctx.p.seed);
  Index agqa_mismatch = 0;
  for (Index t = 0; t < q.agqa_trials; ++t) {
    const MatrixXd X = random_normal(q.kv_heads, q.head_dim, rng);
    if (agqa_forward(agqa, X) != gqa_replicate(X, q.q_heads / q.kv_heads)) ++agqa_mismatch;
  }
  if (agqa_mismatch) ctx.violation(std::to_string(agqa_mismatch) + " AGQA outputs differ from GQA replication");

  const ToyStack<double> teacher = random_attention_stack(q.layers, q.d_model, q.d_head, q.d_ff, rng);
  ToyStack<double> hybrid = prime_hybrid(teacher, q.ssm_layers, parse_ssm_kind(q.kind), ctx.p.seed);
  const MatrixXd inputs = random_normal(q.T, q.d_model, rng);
  const AlignmentMode mode = parse_alignment_mode(q.mode);

  // Analytic gradient against central differences on the first gate parameter.
  const LossGradient g = alignment_gradient(mode, hybrid, teacher, inputs);
  const double h = 1e-5;
  VectorXd theta = stack_gate_parameters(hybrid);
  ToyStack<double> probe = hybrid;
  theta(0) += h;
  set_stack_gate_parameters(probe, theta);
  const double up = alignment_loss_value(mode, probe, teacher, inputs);
  theta(0) -= 2 * h;
  set_stack_gate_parameters(probe, theta);
  const double down = alignment_loss_value(mode, probe, teacher, inputs);
  const double fd = (up - down) / (2 * h);
  const double rel = std::abs(fd - g.gradient(0)) / std::max({std::abs(fd), std::abs(g.gradient(0)), 1e-12});

  const DescentLog log = stage1_descent(mode, hybrid, teacher, inputs, static_cast<int>(q.steps), q.step_size);
  {
    auto out = ctx.open("prime_descent.csv");
    CsvWriter csv(out, ctx.comment(), {"step", "loss"});
    for (std::size_t s = 0; s < log.losses.size(); ++s) csv.row(s, log.losses[s]);
  }
  ctx.json("prime_checks.json", {{"agqa_trials", q.agqa_trials},
                                 {"agqa_mismatches", agqa_mismatch},
                                 {"gradient_autodiff", g.gradient(0)},
                                 {"gradient_central_difference", fd},
                                 {"gradient_relative_error", rel}});
  if (rel > 1e-5) ctx.violation("gate gradient differs from central differences by " + format_double(rel) + " (relative)");
  ctx.note("alignment loss " + format_double(log.losses.front()) + " -> " + format_double(log.losses.back()));
}

}  // namespace

std::vector<std::string> validate(const Json& config, const Overrides& overrides) {
  Diagnostics d;
  parse(config, overrides, d);
  return d;
}

ReportBundle run(const Json& config, const Overrides& overrides) {
  Diagnostics d;
  const Parsed p = parse(config, overrides, d);
  if (!d.empty()) throw ConfigError(std::move(d));
  std::error_code ec;
  fs::create_directories(p.output_dir, ec);
  if (ec) throw Error("cannot create output directory " + p.output_dir.string() + ": " + ec.message());

  ReportBundle bundle;
  bundle.command = p.command;
  bundle.config_hash = fnv1a_hex(p.effective.dump());
  Context ctx{p, bundle};
  try {
    if (p.command == "realize") run_realize(ctx);
    else if (p.command == "hankel") run_hankel(ctx);
    else if (p.command == "ssm-equiv") run_ssm_equiv(ctx);
    else if (p.command == "compose") run_compose(ctx);
    else if (p.command == "spsim") run_spsim(ctx);
    else if (p.command == "tile-bench") run_tile_bench(ctx);
    else if (p.command == "select-layers") run_select_layers(ctx);
    else if (p.command == "perf-model") run_perf_model(ctx);
    else if (p.command == "prime") run_prime(ctx);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw Error(p.command + ": " + e.what());
  }
  return bundle;
}

}  // namespace hybrid
