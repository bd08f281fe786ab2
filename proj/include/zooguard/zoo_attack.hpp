#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "flow_dataset.hpp"
#include "models.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace zooguard {

/// ZOO attack parameters. Field names mirror the JSON keys.
struct ZooConfig {
  double confidence = 0.0;
  bool targeted = false;
  double learning_rate = 1e-2;
  std::size_t max_iter = 100;
  std::size_t binary_search_steps = 5;
  double initial_const = 1e-1;
  bool abort_early = true;
  bool use_resize = false;
  bool use_importance = true;
  std::size_t nb_parallel = 8;
  std::size_t batch_size = 32;
  // wide enough to straddle the split thresholds of tree ensembles
  double variable_h = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [](const std::string& what) { throw Error(ErrorCode::config_error, "zoo config: " + what); };
    if (!(confidence >= 0.0)) bad("confidence must be >= 0");
    if (!(learning_rate > 0.0)) bad("learning_rate must be > 0");
    if (max_iter < 1) bad("max_iter must be >= 1");
    if (binary_search_steps < 1) bad("binary_search_steps must be >= 1");
    if (!(initial_const > 0.0)) bad("initial_const must be > 0");
    if (nb_parallel < 1) bad("nb_parallel must be >= 1");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (!(variable_h > 0.0)) bad("variable_h must be > 0");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["confidence"] = confidence;
    j["targeted"] = targeted;
    j["learning_rate"] = learning_rate;
    j["max_iter"] = max_iter;
    j["binary_search_steps"] = binary_search_steps;
    j["initial_const"] = initial_const;
    j["abort_early"] = abort_early;
    j["use_resize"] = use_resize;
    j["use_importance"] = use_importance;
    j["nb_parallel"] = nb_parallel;
    j["batch_size"] = batch_size;
    j["variable_h"] = variable_h;
    j["seed"] = seed;
    return j;
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static ZooConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "confidence",  "targeted",   "learning_rate",  "max_iter",    "binary_search_steps",
        "initial_const", "abort_early", "use_resize",  "use_importance", "nb_parallel",
        "batch_size",  "variable_h", "seed"};
    require(j.is_object(), ErrorCode::config_error, "zoo config must be a JSON object");
    for (const auto& item : j.items()) {
      require(known.count(item.key()) > 0, ErrorCode::config_error, "zoo config: unknown key '" + item.key() + "'");
    }
    ZooConfig c;
    try {
      c.confidence = j.value("confidence", c.confidence);
      c.targeted = j.value("targeted", c.targeted);
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.max_iter = j.value("max_iter", c.max_iter);
      c.binary_search_steps = j.value("binary_search_steps", c.binary_search_steps);
      c.initial_const = j.value("initial_const", c.initial_const);
      c.abort_early = j.value("abort_early", c.abort_early);
      c.use_resize = j.value("use_resize", c.use_resize);
      c.use_importance = j.value("use_importance", c.use_importance);
      c.nb_parallel = j.value("nb_parallel", c.nb_parallel);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.variable_h = j.value("variable_h", c.variable_h);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::config_error, std::string("zoo config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Margin loss

inline constexpr double kProbabilityFloor = 1e-12;

/// Log-probability margin before the hinge. Negative means the attack goal
/// holds: the true class lost (untargeted) or the target won (targeted).
inline double raw_margin(std::span<const double> probs, std::size_t label, bool targeted) {
  require(label < probs.size(), ErrorCode::precondition_violation, "margin label out of range");
  const double own = std::log(std::max(probs[label], kProbabilityFloor));
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (i != label) other = std::max(other, std::log(std::max(probs[i], kProbabilityFloor)));
  }
  return targeted ? other - own : own - other;
}

/// Hinged log-margin: max(margin, -confidence).
inline double margin_loss(std::span<const double> probs, std::size_t label, bool targeted, double confidence) {
  return std::max(raw_margin(probs, label, targeted), -confidence);
}

/// Attack goal with margin `confidence`, agreeing with lowest-index argmax.
inline bool goal_met(std::span<const double> probs, std::size_t label, bool targeted, double confidence) {
  if (raw_margin(probs, label, targeted) > -confidence) return false;
  const std::size_t predicted = argmax(probs);
  return targeted ? predicted == label : predicted != label;
}

// ---------------------------------------------------------------------------
// Zeroth-order gradient estimate

/// Symmetric difference (f(x + h e_i) - f(x - h e_i)) / 2h. `f` sees a
/// perturbed copy; `x` is untouched.
template <typename Fn>
double estimate_coordinate_gradient(Fn&& f, std::span<const double> x, std::size_t coord, double h) {
  require(coord < x.size(), ErrorCode::precondition_violation, "coordinate out of range");
  require(h > 0.0, ErrorCode::precondition_violation, "finite-difference step must be > 0");
  std::vector<double> probe(x.begin(), x.end());
  probe[coord] = x[coord] + h;
  const double up = f(std::span<const double>(probe));
  probe[coord] = x[coord] - h;
  const double down = f(std::span<const double>(probe));
  return (up - down) / (2.0 * h);
}

// ---------------------------------------------------------------------------
// Per-coordinate Adam

struct AdamState {
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;

  std::vector<double> m;
  std::vector<double> v;
  std::vector<std::uint64_t> t;

  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0), t(n, 0) {}
};

/// Advances only `coord`'s moments and returns the signed step for it.
inline double adam_coordinate_step(AdamState& state, std::size_t coord, double grad, double learning_rate) {
  require(coord < state.m.size(), ErrorCode::precondition_violation, "adam coordinate out of range");
  if (!std::isfinite(grad)) throw Error(ErrorCode::non_finite_gradient, "coordinate " + std::to_string(coord));
  auto& t = state.t[coord];
  ++t;
  auto& m = state.m[coord];
  auto& v = state.v[coord];
  m = AdamState::beta1 * m + (1.0 - AdamState::beta1) * grad;
  v = AdamState::beta2 * v + (1.0 - AdamState::beta2) * grad * grad;
  const double m_hat = m / (1.0 - std::pow(AdamState::beta1, static_cast<double>(t)));
  const double v_hat = v / (1.0 - std::pow(AdamState::beta2, static_cast<double>(t)));
  return -learning_rate * m_hat / (std::sqrt(v_hat) + AdamState::epsilon);
}

// ---------------------------------------------------------------------------
// Coordinate sampling

inline constexpr double kImportanceDecay = 0.9;
inline constexpr double kImportanceFloor = 1e-3;

/// Draws min(k, #positive weights) distinct indices with probability
/// proportional to weight. Zero-weight indices are never drawn.
inline std::vector<std::size_t> sample_coordinates(std::span<const double> weights, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool;
  std::vector<double> w;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    require(weights[i] >= 0.0 && std::isfinite(weights[i]), ErrorCode::precondition_violation,
            "importance weights must be finite and non-negative");
    if (weights[i] > 0.0) {
      pool.push_back(i);
      w.push_back(weights[i]);
    }
  }
  require(!pool.empty(), ErrorCode::no_eligible_coordinates, "no coordinate has positive weight");
  k = std::min(k, pool.size());
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    double total = 0.0;
    for (double v : w) total += v;
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = w.size() - 1;
    for (std::size_t j = 0; j < w.size(); ++j) {
      acc += w[j];
      if (u < acc) {
        pick = j;
        break;
      }
    }
    out.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    w.erase(w.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Constraints

/// Feasible region of the attack in scaled space: which coordinates may move,
/// their box, and which are integral in raw units.
struct AttackConstraints {
  std::vector<bool> attackable;
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<bool> integral;
  /// Raw-unit valid ranges, needed for integral rounding.
  std::vector<std::optional<std::pair<double, double>>> raw_range;
  std::optional<Scaler> scaler;

  std::size_t size() const noexcept { return attackable.size(); }

  std::vector<std::size_t> eligible() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < attackable.size(); ++i) {
      if (attackable[i]) out.push_back(i);
    }
    return out;
  }

  /// Every coordinate attackable inside [0,1]; nothing integral.
  static AttackConstraints unconstrained(std::size_t d) {
    AttackConstraints c;
    c.attackable.assign(d, true);
    c.lower.assign(d, 0.0);
    c.upper.assign(d, 1.0);
    c.integral.assign(d, false);
    c.raw_range.assign(d, std::nullopt);
    return c;
  }

  /// Mutable, non-constant columns are attackable; valid ranges become
  /// scaled boxes inside [0,1].
  static AttackConstraints from_schema(const FeatureSchema& schema, const Scaler& scaler) {
    check_arity(scaler.size(), schema.size(), "constraints scaler");
    AttackConstraints c;
    const std::size_t d = schema.size();
    c.attackable.resize(d);
    c.lower.assign(d, 0.0);
    c.upper.assign(d, 1.0);
    c.integral.resize(d);
    c.raw_range.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
      const auto& col = schema[i];
      c.attackable[i] = col.is_mutable && col.kind != FeatureKind::identity && !scaler.is_constant(i);
      c.integral[i] = col.integral;
      c.raw_range[i] = col.valid_range;
      if (col.valid_range && !scaler.is_constant(i)) {
        c.lower[i] = scaler.transform_one(i, col.valid_range->first);
        c.upper[i] = scaler.transform_one(i, col.valid_range->second);
      }
    }
    c.scaler = scaler;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Resize plan

/// Coordinate-space reduction schedule. Tabular flow vectors have no spatial
/// grid to downsample, so the plan is always the identity; a request for
/// resizing is reported as a warning.
struct ResizePlan {
  bool identity = true;
  std::vector<std::string> warnings;

  std::vector<std::size_t> coordinates(std::span<const std::size_t> eligible) const {
    return {eligible.begin(), eligible.end()};
  }
};

inline ResizePlan resize_schedule(const ZooConfig& config, std::size_t num_features) {
  ResizePlan plan;
  if (config.use_resize) {
    plan.warnings.push_back("use_resize ignored: resizing applies to image grids, the " +
                            std::to_string(num_features) + "-feature tabular input is attacked at full resolution");
  }
  return plan;
}

inline ResizePlan resize_schedule(const ZooConfig& config, const FeatureSchema& schema) {
  return resize_schedule(config, schema.size());
}

// ---------------------------------------------------------------------------
// Objective

/// ||x - original||^2 + c * margin_loss(model(x)). One model query per
/// evaluation.
struct AttackObjective {
  const ProbModel& model;
  std::span<const double> original;
  std::size_t label;
  bool targeted;
  double confidence;
  double c;

  struct Evaluation {
    double objective;
    double loss;
    double l2_squared;
    bool success;
  };

  Evaluation evaluate(std::span<const double> x) const {
    const auto probs = model.predict_proba(x);
    double l2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) l2 += (x[i] - original[i]) * (x[i] - original[i]);
    const double loss = margin_loss(probs, label, targeted, confidence);
    return {l2 + c * loss, loss, l2, goal_met(probs, label, targeted, confidence)};
  }

  double operator()(std::span<const double> x) const { return evaluate(x).objective; }
};

/// Box-aware symmetric difference on the attack objective: probes are
/// clipped into the coordinate's box and the divisor is the actual probe
/// spacing. Exactly two model queries.
inline double estimate_coordinate_gradient(const AttackObjective& objective, std::span<const double> x,
                                           std::size_t coord, double h, const AttackConstraints& constraints) {
  require(coord < constraints.size(), ErrorCode::precondition_violation, "coordinate out of range");
  if (!constraints.attackable[coord]) {
    throw Error(ErrorCode::immutable_coordinate, "coordinate " + std::to_string(coord) + " is not attackable");
  }
  std::vector<double> probe(x.begin(), x.end());
  const double hi = std::min(constraints.upper[coord], x[coord] + h);
  const double lo = std::max(constraints.lower[coord], x[coord] - h);
  probe[coord] = hi;
  const double up = objective(probe);
  probe[coord] = lo;
  const double down = objective(probe);
  return hi > lo ? (up - down) / (hi - lo) : 0.0;
}

// ---------------------------------------------------------------------------
// Single-constant attack

struct AttackOutcome {
  std::vector<double> adversarial;
  double objective = 0.0;
  bool success = false;
  std::size_t queries = 0;
  std::size_t iterations = 0;
  /// best objective after each iteration (entry 0 is the starting point)
  std::vector<double> objective_trace;
};

/// Minimizes ||delta||^2 + c * margin_loss by zeroth-order coordinate Adam.
/// Every probed point is a candidate: the result is the smallest successful
/// probe if any succeeded, else the probe with the best objective.
inline AttackOutcome attack_one(const ProbModel& model, std::span<const double> x, std::size_t label, double c,
                                const ZooConfig& config, const AttackConstraints& constraints, Rng& rng) {
  const std::size_t d = x.size();
  check_arity(d, model.num_features(), "attack input");
  check_arity(constraints.size(), d, "attack constraints");
  require(label < model.num_classes(), ErrorCode::precondition_violation, "attack label out of range");
  const auto plan = resize_schedule(config, d);
  const auto eligible = plan.coordinates(constraints.eligible());
  require(!eligible.empty(), ErrorCode::no_eligible_coordinates, "every feature is immutable or constant");

  const AttackObjective objective{model, x, label, config.targeted, config.confidence, c};
  AttackOutcome out;
  const auto start = objective.evaluate(x);
  out.queries = 1;
  out.adversarial.assign(x.begin(), x.end());
  out.objective = start.objective;
  out.objective_trace.push_back(start.objective);
  if (start.success) {
    out.success = true;
    return out;
  }

  std::vector<double> weights(d, 0.0);
  for (auto i : eligible) weights[i] = 1.0;
  const std::vector<double> uniform = weights;
  AdamState adam(d);
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> probe;
  double best_success_l2 = std::numeric_limits<double>::infinity();
  std::vector<double> best_point = out.adversarial;

  auto consider = [&](const std::vector<double>& point, const AttackObjective::Evaluation& e) {
    if (e.success && e.l2_squared < best_success_l2) {
      best_success_l2 = e.l2_squared;
      out.adversarial = point;
      out.success = true;
    }
    if (e.objective < out.objective) {
      out.objective = e.objective;
      if (!out.success) best_point = point;
    }
  };

  const std::size_t k = std::min(config.nb_parallel, eligible.size());
  const auto window = static_cast<std::size_t>(std::ceil(static_cast<double>(config.max_iter) / 10.0));
  std::vector<double> grads(k);

  for (std::size_t it = 0; it < config.max_iter; ++it) {
    auto coords = sample_coordinates(config.use_importance ? weights : uniform, k, rng);
    std::sort(coords.begin(), coords.end());
    for (std::size_t j = 0; j < coords.size(); ++j) {
      const auto i = coords[j];
      probe = cur;
      const double hi = std::min(constraints.upper[i], cur[i] + config.variable_h);
      const double lo = std::max(constraints.lower[i], cur[i] - config.variable_h);
      probe[i] = hi;
      const auto e_up = objective.evaluate(probe);
      consider(probe, e_up);
      probe[i] = lo;
      const auto e_down = objective.evaluate(probe);
      consider(probe, e_down);
      out.queries += 2;
      grads[j] = hi > lo ? (e_up.objective - e_down.objective) / (hi - lo) : 0.0;
    }
    for (std::size_t j = 0; j < coords.size(); ++j) {
      const auto i = coords[j];
      const double step = adam_coordinate_step(adam, i, grads[j], config.learning_rate);
      cur[i] = std::clamp(cur[i] + step, constraints.lower[i], constraints.upper[i]);
      if (config.use_importance) {
        weights[i] = std::max(kImportanceFloor,
                              kImportanceDecay * weights[i] + (1.0 - kImportanceDecay) * std::abs(grads[j]));
      }
    }
    ++out.iterations;
    out.objective_trace.push_back(out.objective);

    if (config.abort_early && out.iterations >= window) {
      const double before = out.objective_trace[out.iterations - window];
      if (before - out.objective <= 1e-4 * std::abs(before)) break;
    }
  }
  if (!out.success) out.adversarial = best_point;
  return out;
}

// ---------------------------------------------------------------------------
// Batch attack with binary search over the penalty constant

struct ConstStep {
  double c = 0.0;
  bool success = false;
  double l2 = 0.0;
};

struct AttackResult {
  std::size_t index = 0;
  std::size_t label = 0;
  std::vector<double> original;
  std::vector<double> adversarial;
  /// raw-unit views, present when the constraints carry a scaler
  std::vector<double> original_raw;
  std::vector<double> adversarial_raw;
  bool success = false;
  std::size_t queries_used = 0;
  double l2_perturbation = 0.0;
  double l2_perturbation_raw = 0.0;
  double best_const = 0.0;
  std::size_t iterations_run = 0;
  std::vector<ConstStep> const_trace;
  std::vector<double> objective_trace;
  std::optional<std::string> error;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["index"] = index;
    j["label"] = label;
    j["success"] = success;
    j["queries_used"] = queries_used;
    j["l2_perturbation"] = l2_perturbation;
    j["l2_perturbation_raw"] = l2_perturbation_raw;
    j["best_const"] = best_const;
    j["iterations_run"] = iterations_run;
    j["original"] = original;
    j["adversarial"] = adversarial;
    j["original_raw"] = original_raw;
    j["adversarial_raw"] = adversarial_raw;
    nlohmann::ordered_json trace = nlohmann::ordered_json::array();
    for (const auto& s : const_trace) trace.push_back({{"c", s.c}, {"success", s.success}, {"l2", s.l2}});
    j["const_trace"] = std::move(trace);
    if (error) j["error"] = *error;
    return j;
  }
};

struct AttackSample {
  std::vector<double> x;
  std::size_t label = 0;
};

namespace detail {

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Rounds attackable integral coordinates in raw units, away from the
/// original value so the rounding does not undo the perturbation. Returns
/// whether anything changed.
inline bool round_integral(std::vector<double>& adv, std::span<const double> original,
                           const AttackConstraints& constraints) {
  if (!constraints.scaler) return false;
  const auto& s = *constraints.scaler;
  bool changed = false;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (!constraints.attackable[i] || !constraints.integral[i]) continue;
    if (adv[i] == original[i]) continue;
    const double raw = s.inverse_one(i, adv[i]);
    const double raw_orig = s.inverse_one(i, original[i]);
    double lo = s.min(i), hi = s.max(i);
    if (constraints.raw_range[i]) {
      lo = std::max(lo, constraints.raw_range[i]->first);
      hi = std::min(hi, constraints.raw_range[i]->second);
    }
    double r = raw >= raw_orig ? std::ceil(raw - 1e-9) : std::floor(raw + 1e-9);
    r = std::clamp(r, std::ceil(lo), std::floor(hi));
    const double z = s.transform_one(i, r);
    if (z != adv[i]) {
      adv[i] = z;
      changed = true;
    }
  }
  return changed;
}

inline std::vector<double> raw_view(std::span<const double> scaled, const AttackConstraints& constraints) {
  const auto& s = *constraints.scaler;
  auto raw = s.inverse(scaled);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (constraints.integral[i]) raw[i] = std::round(raw[i]);
  }
  return raw;
}

inline AttackResult attack_sample(const ProbModel& model, const AttackSample& sample, std::size_t index,
                                  const ZooConfig& config, const AttackConstraints& constraints) {
  AttackResult res;
  res.index = index;
  res.label = sample.label;
  res.original = sample.x;
  res.adversarial = sample.x;
  try {
    Rng rng(Rng::derive(config.seed, index));
    double lower = 0.0;
    std::optional<double> upper;
    double c = config.initial_const;
    std::optional<AttackOutcome> best;
    double best_l2 = std::numeric_limits<double>::infinity();

    for (std::size_t step = 0; step < config.binary_search_steps; ++step) {
      auto outcome = attack_one(model, sample.x, sample.label, c, config, constraints, rng);
      res.queries_used += outcome.queries;
      const double l2 = l2_distance(outcome.adversarial, sample.x);
      res.const_trace.push_back({c, outcome.success, l2});
      if (outcome.success) {
        if (l2 < best_l2) {
          best_l2 = l2;
          res.best_const = c;
          best = std::move(outcome);
        }
        upper = upper ? std::min(*upper, c) : c;
        if (best_l2 == 0.0) break;  // already adversarial, nothing to shrink
        c = 0.5 * (lower + *upper);
      } else {
        lower = std::max(lower, c);
        c = upper ? 0.5 * (lower + *upper) : c * 10.0;
      }
    }

    if (best) {
      auto adv = best->adversarial;
      round_integral(adv, sample.x, constraints);
      res.iterations_run = best->iterations;
      res.objective_trace = std::move(best->objective_trace);
      if (best_l2 > 0.0) {
        // re-verify after projection
        const auto probs = model.predict_proba(adv);
        ++res.queries_used;
        res.success = goal_met(probs, sample.label, config.targeted, config.confidence);
      } else {
        res.success = true;
      }
      if (res.success) res.adversarial = std::move(adv);
    } else {
      res.best_const = res.const_trace.empty() ? config.initial_const : res.const_trace.back().c;
    }
  } catch (const std::exception& e) {
    res.error = e.what();
    res.success = false;
    res.adversarial = sample.x;
  }
  res.l2_perturbation = l2_distance(res.adversarial, res.original);
  if (constraints.scaler) {
    res.original_raw = raw_view(res.original, constraints);
    res.adversarial_raw = raw_view(res.adversarial, constraints);
    res.l2_perturbation_raw = l2_distance(res.adversarial_raw, res.original_raw);
  }
  return res;
}

}  // namespace detail

/// Attacks every sample independently. Samples are processed in chunks of
/// `batch_size`; inside a chunk they run on up to `workers` threads with a
/// random stream derived from (seed, sample index), so results do not depend
/// on the worker count. Per-sample failures land in that result's `error`.
inline std::vector<AttackResult> attack(const ProbModel& model, std::span<const AttackSample> batch,
                                        const ZooConfig& config, const AttackConstraints& constraints,
                                        std::size_t workers = 1) {
  config.validate();
  require(!batch.empty(), ErrorCode::precondition_violation, "attack batch is empty");
  std::vector<AttackResult> results(batch.size());
  for (std::size_t start = 0; start < batch.size(); start += config.batch_size) {
    const std::size_t end = std::min(batch.size(), start + config.batch_size);
    parallel_for(end - start, workers, [&](std::size_t k) {
      const std::size_t i = start + k;
      results[i] = detail::attack_sample(model, batch[i], i, config, constraints);
    });
  }
  return results;
}

/// Decorator counting predict_proba calls; safe under concurrent queries.
class QueryCounter final : public ProbModel {
 public:
  explicit QueryCounter(const ProbModel& inner) : inner_(inner) {}

  std::vector<double> predict_proba(std::span<const double> x) const override {
    count_.fetch_add(1, std::memory_order_relaxed);
    return inner_.predict_proba(x);
  }
  std::size_t num_classes() const override { return inner_.num_classes(); }
  std::size_t num_features() const override { return inner_.num_features(); }
  std::string kind() const override { return inner_.kind(); }
  nlohmann::ordered_json to_json() const override { return inner_.to_json(); }

  std::size_t count() const { return count_.load(); }
  void reset() { count_.store(0); }

 private:
  const ProbModel& inner_;
  mutable std::atomic<std::size_t> count_{0};
};

}  // namespace zooguard
