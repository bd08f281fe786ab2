#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "flow_dataset.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace zooguard {

struct AutoencoderConfig {
  /// 0 picks min(8, d - 1)
  std::size_t latent_dim = 0;
  std::size_t epochs = 150;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kGuardOuterWidth = 64;
inline constexpr std::size_t kGuardInnerWidth = 32;

/// Six-layer hourglass autoencoder d -> 64 -> 32 -> latent -> 32 -> 64 -> d,
/// ReLU inside, sigmoid output so reconstructions live in (0,1) like the
/// scaled features.
class AutoencoderGuard {
 public:
  AutoencoderGuard() = default;
  explicit AutoencoderGuard(nn::Network net) : net_(std::move(net)) {
    require(net_.layers().size() == 6, ErrorCode::precondition_violation, "autoencoder must have 6 layers");
    require(net_.input_size() == net_.output_size(), ErrorCode::precondition_violation,
            "autoencoder output width must equal input width");
  }

  static AutoencoderGuard initialize(std::size_t d, std::size_t latent, Rng& rng) {
    require(d >= 2, ErrorCode::precondition_violation, "autoencoder needs at least 2 features");
    require(latent >= 1, ErrorCode::precondition_violation, "latent dimension must be >= 1");
    return AutoencoderGuard(nn::Network({d, kGuardOuterWidth, kGuardInnerWidth, latent, kGuardInnerWidth,
                                         kGuardOuterWidth, d},
                                        nn::Activation::relu, nn::Activation::sigmoid, rng));
  }

  std::size_t input_size() const { return net_.input_size(); }
  std::size_t latent_size() const { return net_.layers()[2].outputs; }
  const nn::Network& network() const noexcept { return net_; }

  std::vector<double> reconstruct(std::span<const double> x) const {
    check_arity(x.size(), input_size(), "reconstruct input");
    return net_.forward(x);
  }

  std::vector<double> encode(std::span<const double> x) const {
    check_arity(x.size(), input_size(), "encode input");
    nn::Trace trace;
    net_.forward(x, trace);
    return trace.post[3];
  }

  /// Mean over samples of mean squared reconstruction error, plus gradient.
  double loss_and_gradient(const std::vector<std::vector<double>>& xs, std::vector<double>& grad) const {
    grad.assign(net_.parameter_count(), 0.0);
    nn::Trace trace;
    std::vector<double> out_grad;
    double loss = 0.0;
    for (const auto& x : xs) {
      net_.forward(x, trace);
      loss += sample_loss(trace.post.back(), x, out_grad);
      net_.backward(trace, out_grad, grad);
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (auto& g : grad) g *= inv;
    return loss * inv;
  }

  double mean_loss(const std::vector<std::vector<double>>& xs) const {
    double loss = 0.0;
    std::vector<double> unused;
    for (const auto& x : xs) loss += sample_loss(net_.forward(x), x, unused);
    return loss / static_cast<double>(xs.size());
  }

  static double sample_loss(std::span<const double> out, std::span<const double> x, std::vector<double>& dout) {
    const double inv_d = 1.0 / static_cast<double>(x.size());
    dout.assign(x.size(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = out[i] - x[i];
      loss += e * e * inv_d;
      dout[i] = 2.0 * e * inv_d;
    }
    return loss;
  }

  nn::Network& mutable_network() noexcept { return net_; }

  bool operator==(const AutoencoderGuard&) const = default;

 private:
  nn::Network net_;
};

namespace detail {

inline void require_single_label(const Dataset& d, const char* who) {
  require(d.distinct_labels() <= 1, ErrorCode::mixed_labels,
          std::string(who) + ": expected benign-only records, found " + std::to_string(d.distinct_labels()) +
              " labels");
}

}  // namespace detail

/// Trains on benign traffic only; the dataset must carry a single label.
/// Optimizer is Adam on mean squared reconstruction error.
inline AutoencoderGuard train_autoencoder(const Dataset& benign, const AutoencoderConfig& config) {
  require(!benign.empty(), ErrorCode::empty_dataset, "train_autoencoder: empty dataset");
  detail::require_single_label(benign, "train_autoencoder");
  const std::size_t d = benign.num_features();
  require(d >= 2, ErrorCode::precondition_violation, "train_autoencoder: need at least 2 features");
  for (const auto& r : benign.records()) {
    for (double v : r.values) {
      require(v >= 0.0 && v <= 1.0, ErrorCode::precondition_violation,
              "train_autoencoder: inputs must be scaled into [0, 1]");
    }
  }
  const std::size_t latent = config.latent_dim > 0 ? config.latent_dim : std::min<std::size_t>(8, d - 1);
  Rng init_rng(Rng::derive(config.seed, 0));
  auto guard = AutoencoderGuard::initialize(d, latent, init_rng);

  const auto xs = feature_matrix(benign);
  nn::TrainOptions opt;
  opt.epochs = config.epochs;
  opt.batch_size = config.batch_size;
  opt.learning_rate = config.learning_rate;
  opt.optimizer = nn::Optimizer::adam;
  opt.seed = Rng::derive(config.seed, 1);
  nn::train(
      guard.mutable_network(), xs,
      [&](const nn::Trace& t, std::size_t i, std::vector<double>& g) {
        return AutoencoderGuard::sample_loss(t.post.back(), xs[i], g);
      },
      opt);
  return guard;
}

// ---------------------------------------------------------------------------
// Thresholds

struct Thresholds {
  /// reference absolute deviation per feature (scaled units)
  std::vector<double> per_feature;
  double aggregate_mse = 0.0;
  /// requested percentile in (0, 100]
  double calibration_percentile = 99.5;
  /// percentile of the per-rule limits after the joint adjustment
  double effective_percentile = 99.5;
  std::size_t holdout_size = 0;

  /// Same limits multiplied by `factor`.
  Thresholds scaled(double factor) const {
    Thresholds t = *this;
    for (auto& v : t.per_feature) v *= factor;
    t.aggregate_mse *= factor;
    return t;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["per_feature"] = per_feature;
    j["aggregate_mse"] = aggregate_mse;
    j["calibration_percentile"] = calibration_percentile;
    j["effective_percentile"] = effective_percentile;
    j["holdout_size"] = holdout_size;
    return j;
  }

  static Thresholds from_json(const nlohmann::json& j) {
    Thresholds t;
    t.per_feature = j.at("per_feature").get<std::vector<double>>();
    t.aggregate_mse = j.at("aggregate_mse").get<double>();
    t.calibration_percentile = j.value("calibration_percentile", 99.5);
    t.effective_percentile = j.value("effective_percentile", t.calibration_percentile);
    t.holdout_size = j.value("holdout_size", std::size_t{0});
    return t;
  }
};

inline constexpr double kFeatureLimitFloor = 1e-4;
inline constexpr double kMseLimitFloor = 1e-8;

struct DetectionVerdict {
  bool anomalous = false;
  /// some feature deviates beyond its own limit
  bool feature_rule = false;
  /// mean squared error above the aggregate limit
  bool aggregate_rule = false;
  std::vector<std::size_t> violated_features;
  std::vector<double> per_feature_deviation;
  double mse = 0.0;
  std::vector<double> reconstruction;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["anomalous"] = anomalous;
    j["feature_rule"] = feature_rule;
    j["aggregate_rule"] = aggregate_rule;
    j["violated_features"] = violated_features;
    j["per_feature_deviation"] = per_feature_deviation;
    j["mse"] = mse;
    j["reconstruction"] = reconstruction;
    return j;
  }
};

inline DetectionVerdict detect(const AutoencoderGuard& guard, const Thresholds& thresholds, std::span<const double> x) {
  check_arity(x.size(), guard.input_size(), "detect input");
  check_arity(thresholds.per_feature.size(), x.size(), "detect thresholds");
  DetectionVerdict v;
  v.reconstruction = guard.reconstruct(x);
  v.per_feature_deviation.resize(x.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dev = std::abs(x[i] - v.reconstruction[i]);
    v.per_feature_deviation[i] = dev;
    sq += dev * dev;
    if (dev > thresholds.per_feature[i]) v.violated_features.push_back(i);
  }
  v.mse = sq / static_cast<double>(x.size());
  v.feature_rule = !v.violated_features.empty();
  v.aggregate_rule = v.mse > thresholds.aggregate_mse;
  v.anomalous = v.feature_rule || v.aggregate_rule;
  return v;
}

/// Sets the per-feature and aggregate limits from benign holdout deviations.
///
/// Each limit is a nearest-rank percentile of its own statistic. Because the
/// verdict ORs d + 1 rules, the common rank is raised from the requested
/// percentile until the combined rule flags at most (100 - percentile)% of
/// the holdout. Limits are floored so perfectly reconstructed features never
/// get a zero-width band.
inline Thresholds calibrate_thresholds(const AutoencoderGuard& guard, const Dataset& benign_holdout,
                                       double percentile = 99.5) {
  require(!benign_holdout.empty(), ErrorCode::empty_dataset, "calibrate_thresholds: empty holdout");
  detail::require_single_label(benign_holdout, "calibrate_thresholds");
  require(percentile > 0.0 && percentile <= 100.0, ErrorCode::precondition_violation,
          "calibration percentile must lie in (0, 100]");
  const std::size_t d = guard.input_size();
  check_arity(benign_holdout.num_features(), d, "calibration holdout");
  const std::size_t n = benign_holdout.size();

  std::vector<std::vector<double>> dev(n, std::vector<double>(d));
  std::vector<double> mse(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto& x = benign_holdout[s].values;
    const auto r = guard.reconstruct(x);
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dev[s][i] = std::abs(x[i] - r[i]);
      sq += dev[s][i] * dev[s][i];
    }
    mse[s] = sq / static_cast<double>(d);
  }
  std::vector<std::vector<double>> sorted_dev(d, std::vector<double>(n));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t s = 0; s < n; ++s) sorted_dev[i][s] = dev[s][i];
    std::sort(sorted_dev[i].begin(), sorted_dev[i].end());
  }
  std::vector<double> sorted_mse = mse;
  std::sort(sorted_mse.begin(), sorted_mse.end());

  auto limits_at = [&](std::size_t rank) {
    Thresholds t;
    t.per_feature.resize(d);
    for (std::size_t i = 0; i < d; ++i) t.per_feature[i] = std::max(kFeatureLimitFloor, sorted_dev[i][rank - 1]);
    t.aggregate_mse = std::max(kMseLimitFloor, sorted_mse[rank - 1]);
    return t;
  };
  auto flagged_at = [&](const Thresholds& t) {
    std::size_t flagged = 0;
    for (std::size_t s = 0; s < n; ++s) {
      bool hit = mse[s] > t.aggregate_mse;
      for (std::size_t i = 0; i < d && !hit; ++i) hit = dev[s][i] > t.per_feature[i];
      flagged += hit ? 1 : 0;
    }
    return flagged;
  };

  const auto allowed = static_cast<std::size_t>(
      std::floor((100.0 - percentile) / 100.0 * static_cast<double>(n) + 1e-9));
  std::size_t lo = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(n) - 1e-9)), 1, n);
  std::size_t hi = n;  // rank n flags nothing
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (flagged_at(limits_at(mid)) <= allowed) hi = mid;
    else lo = mid + 1;
  }
  Thresholds t = limits_at(lo);
  t.calibration_percentile = percentile;
  t.effective_percentile = 100.0 * static_cast<double>(lo) / static_cast<double>(n);
  t.holdout_size = n;
  return t;
}

inline std::vector<std::vector<double>> purify_batch(const AutoencoderGuard& guard,
                                                     std::span<const std::vector<double>> xs) {
  std::vector<std::vector<double>> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(guard.reconstruct(x));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json guard_to_json(const AutoencoderGuard& guard,
                                            const std::optional<Thresholds>& thresholds = std::nullopt) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["kind"] = "autoencoder_guard";
  j["widths"] = guard.network().widths();
  j["hidden_activation"] = "relu";
  j["output_activation"] = "sigmoid";
  j["parameters"] = guard.network().flatten();
  if (thresholds) j["thresholds"] = thresholds->to_json();
  return j;
}

inline std::pair<AutoencoderGuard, std::optional<Thresholds>> guard_from_json(const nlohmann::json& j) {
  try {
    require(j.value("format_version", 0) == 1 && j.value("kind", std::string()) == "autoencoder_guard",
            ErrorCode::config_error, "not an autoencoder guard document");
    const auto widths = j.at("widths").get<std::vector<std::size_t>>();
    require(widths.size() == 7, ErrorCode::config_error, "guard must have 7 widths (6 layers)");
    Rng unused(0);
    nn::Network net(widths, nn::Activation::relu, nn::Activation::sigmoid, unused);
    net.unflatten(j.at("parameters").get<std::vector<double>>());
    std::optional<Thresholds> t;
    if (j.contains("thresholds")) t = Thresholds::from_json(j.at("thresholds"));
    return {AutoencoderGuard(std::move(net)), std::move(t)};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("guard json: ") + e.what());
  }
}

}  // namespace zooguard
