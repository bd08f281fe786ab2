#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "flow_dataset.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace zooguard {

/// Black-box query contract: scaled feature vector in, class probabilities
/// out. Implementations are immutable after training and safe to query from
/// many threads at once.
class ProbModel {
 public:
  virtual ~ProbModel() = default;

  virtual std::vector<double> predict_proba(std::span<const double> x) const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual std::size_t num_features() const = 0;
  virtual std::string kind() const = 0;
  virtual nlohmann::ordered_json to_json() const = 0;
};

/// Index of the largest probability; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> p) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

inline std::size_t predict_label(const ProbModel& model, std::span<const double> x) {
  return argmax(model.predict_proba(x));
}

namespace detail {

inline void require_trainable(const Dataset& train, const char* who) {
  require(!train.empty(), ErrorCode::empty_dataset, std::string(who) + ": empty training set");
  require(train.num_classes() >= 2 && train.distinct_labels() >= 2, ErrorCode::precondition_violation,
          std::string(who) + ": at least 2 classes are required");
}

inline void require_unit_box(const Dataset& train, const char* who) {
  for (const auto& r : train.records()) {
    for (double v : r.values) {
      require(v >= 0.0 && v <= 1.0, ErrorCode::precondition_violation,
              std::string(who) + ": inputs must be scaled into [0, 1]");
    }
  }
}

inline void check_format(const nlohmann::json& j, const std::string& kind) {
  require(j.value("format_version", 0) == 1, ErrorCode::config_error, "unsupported model format_version");
  require(j.value("kind", std::string()) == kind, ErrorCode::config_error,
          "expected model kind '" + kind + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MLP

struct MlpConfig {
  std::vector<std::size_t> hidden_widths = {64, 32};
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

class MlpModel final : public ProbModel {
 public:
  MlpModel() = default;
  explicit MlpModel(nn::Network net) : net_(std::move(net)) {}

  std::vector<double> predict_proba(std::span<const double> x) const override {
    auto z = net_.forward(x);
    nn::softmax_inplace(z);
    return z;
  }
  std::size_t num_classes() const override { return net_.output_size(); }
  std::size_t num_features() const override { return net_.input_size(); }
  std::string kind() const override { return "mlp"; }

  const nn::Network& network() const noexcept { return net_; }

  /// Mean cross-entropy and its gradient w.r.t. every parameter (flattened).
  double loss_and_gradient(const std::vector<std::vector<double>>& xs, std::span<const std::size_t> labels,
                           std::vector<double>& grad) const {
    grad.assign(net_.parameter_count(), 0.0);
    nn::Trace trace;
    std::vector<double> out_grad;
    double loss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      net_.forward(xs[i], trace);
      loss += cross_entropy(trace.post.back(), labels[i], out_grad);
      net_.backward(trace, out_grad, grad, true);
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (auto& g : grad) g *= inv;
    return loss * inv;
  }

  double mean_loss(const std::vector<std::vector<double>>& xs, std::span<const std::size_t> labels) const {
    double loss = 0.0;
    std::vector<double> unused;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      loss += cross_entropy(net_.forward(xs[i]), labels[i], unused);
    }
    return loss / static_cast<double>(xs.size());
  }

  /// softmax cross-entropy from logits; fills dLoss/dLogits
  static double cross_entropy(std::span<const double> logits, std::size_t label, std::vector<double>& dlogits) {
    dlogits.assign(logits.begin(), logits.end());
    nn::softmax_inplace(dlogits);
    const double loss = -std::log(std::max(dlogits[label], 1e-300));
    dlogits[label] -= 1.0;
    return loss;
  }

  nlohmann::ordered_json to_json() const override {
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["kind"] = kind();
    j["layers"] = net_.to_json();
    return j;
  }

  static MlpModel from_json(const nlohmann::json& j) {
    detail::check_format(j, "mlp");
    return MlpModel(nn::Network::from_json(j.at("layers")));
  }

 private:
  nn::Network net_;
};

/// Softmax classifier trained with momentum SGD on cross-entropy.
inline MlpModel train_mlp(const Dataset& train, const MlpConfig& config) {
  detail::require_trainable(train, "train_mlp");
  detail::require_unit_box(train, "train_mlp");
  Rng init_rng(Rng::derive(config.seed, 0));
  std::vector<std::size_t> widths{train.num_features()};
  widths.insert(widths.end(), config.hidden_widths.begin(), config.hidden_widths.end());
  widths.push_back(train.num_classes());
  nn::Network net(widths, nn::Activation::relu, nn::Activation::identity, init_rng);

  const auto xs = feature_matrix(train);
  std::vector<std::size_t> labels;
  for (const auto& r : train.records()) labels.push_back(r.label);

  nn::TrainOptions opt;
  opt.epochs = config.epochs;
  opt.batch_size = config.batch_size;
  opt.learning_rate = config.learning_rate;
  opt.momentum = config.momentum;
  opt.optimizer = nn::Optimizer::momentum_sgd;
  opt.seed = Rng::derive(config.seed, 1);
  nn::train(
      net, xs,
      [&](const nn::Trace& t, std::size_t i, std::vector<double>& g) {
        return MlpModel::cross_entropy(t.post.back(), labels[i], g);
      },
      opt, true);
  return MlpModel(std::move(net));
}

// ---------------------------------------------------------------------------
// Decision trees

/// Axis-aligned binary tree. Leaves carry a value vector: class counts for
/// classification trees, a single score for regression trees.
struct DecisionTree {
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
    std::vector<double> value;

    bool is_leaf() const noexcept { return feature < 0; }
    bool operator==(const Node&) const = default;
  };

  std::vector<Node> nodes;

  const Node& leaf_for(std::span<const double> x) const {
    std::uint32_t i = 0;
    while (!nodes[i].is_leaf()) {
      const auto& n = nodes[i];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[i];
  }

  std::size_t depth() const {
    std::size_t best = 0;
    std::vector<std::pair<std::uint32_t, std::size_t>> stack{{0, 0}};
    while (!stack.empty()) {
      auto [i, dep] = stack.back();
      stack.pop_back();
      best = std::max(best, dep);
      if (!nodes[i].is_leaf()) {
        stack.push_back({nodes[i].left, dep + 1});
        stack.push_back({nodes[i].right, dep + 1});
      }
    }
    return best;
  }

  bool operator==(const DecisionTree&) const = default;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json feature = nlohmann::ordered_json::array();
    nlohmann::ordered_json threshold = nlohmann::ordered_json::array();
    nlohmann::ordered_json left = nlohmann::ordered_json::array();
    nlohmann::ordered_json right = nlohmann::ordered_json::array();
    nlohmann::ordered_json value = nlohmann::ordered_json::array();
    for (const auto& n : nodes) {
      feature.push_back(n.feature);
      threshold.push_back(n.threshold);
      left.push_back(n.left);
      right.push_back(n.right);
      value.push_back(n.value);
    }
    nlohmann::ordered_json j;
    j["feature"] = std::move(feature);
    j["threshold"] = std::move(threshold);
    j["left"] = std::move(left);
    j["right"] = std::move(right);
    j["value"] = std::move(value);
    return j;
  }

  static DecisionTree from_json(const nlohmann::json& j) {
    DecisionTree t;
    const auto& f = j.at("feature");
    t.nodes.resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
      auto& n = t.nodes[i];
      n.feature = f.at(i).get<int>();
      n.threshold = j.at("threshold").at(i).get<double>();
      n.left = j.at("left").at(i).get<std::uint32_t>();
      n.right = j.at("right").at(i).get<std::uint32_t>();
      n.value = j.at("value").at(i).get<std::vector<double>>();
    }
    return t;
  }
};

namespace detail {

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

/// Builds a tree over rows `idx` of `xs`. `Criterion` supplies leaf values
/// and split gains from per-row statistics.
template <typename Criterion>
class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<double>>& xs, Criterion& crit, std::size_t max_depth,
              std::size_t min_leaf, std::size_t features_per_node, Rng* rng)
      : xs_(xs), crit_(crit), max_depth_(max_depth), min_leaf_(std::max<std::size_t>(1, min_leaf)),
        features_per_node_(features_per_node), rng_(rng) {}

  DecisionTree build(std::vector<std::size_t> idx) {
    DecisionTree tree;
    grow(tree, idx, 0);
    return tree;
  }

 private:
  std::uint32_t grow(DecisionTree& tree, std::vector<std::size_t>& idx, std::size_t depth) {
    const auto id = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes[id].value = crit_.leaf_value(idx);

    if (depth >= max_depth_ || idx.size() < 2 * min_leaf_ || crit_.is_pure(idx)) return id;
    const SplitChoice s = best_split(idx);
    if (s.feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (auto i : idx) {
      (xs_[i][static_cast<std::size_t>(s.feature)] <= s.threshold ? left : right).push_back(i);
    }
    idx.clear();
    idx.shrink_to_fit();
    const auto l = grow(tree, left, depth + 1);
    const auto r = grow(tree, right, depth + 1);
    auto& node = tree.nodes[id];
    node.feature = s.feature;
    node.threshold = s.threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  SplitChoice best_split(const std::vector<std::size_t>& idx) {
    const std::size_t d = xs_.front().size();
    std::vector<std::size_t> features(d);
    std::iota(features.begin(), features.end(), std::size_t{0});
    std::size_t budget = d;
    if (rng_ && features_per_node_ > 0 && features_per_node_ < d) {
      rng_->shuffle(features.begin(), features.end());
      budget = features_per_node_;
    }

    SplitChoice best;
    std::vector<std::size_t> sorted(idx);
    for (std::size_t k = 0; k < d; ++k) {
      // keep drawing features past the budget until some split is valid
      if (k >= budget && best.feature >= 0) break;
      const std::size_t f = features[k];
      std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        return xs_[a][f] < xs_[b][f] || (xs_[a][f] == xs_[b][f] && a < b);
      });
      crit_.begin_scan(sorted);
      for (std::size_t pos = 0; pos + 1 < sorted.size(); ++pos) {
        crit_.move_left(sorted[pos]);
        const double lo = xs_[sorted[pos]][f];
        const double hi = xs_[sorted[pos + 1]][f];
        if (!(hi > lo)) continue;
        const std::size_t n_left = pos + 1;
        if (n_left < min_leaf_ || sorted.size() - n_left < min_leaf_) continue;
        const double gain = crit_.gain();
        if (gain > best.gain + 1e-12) {
          best.gain = gain;
          best.feature = static_cast<int>(f);
          best.threshold = lo + 0.5 * (hi - lo);
        }
      }
    }
    return best;
  }

  const std::vector<std::vector<double>>& xs_;
  Criterion& crit_;
  std::size_t max_depth_;
  std::size_t min_leaf_;
  std::size_t features_per_node_;
  Rng* rng_;
};

/// Gini impurity decrease for classification trees; leaves hold class counts.
class GiniCriterion {
 public:
  GiniCriterion(const std::vector<std::size_t>& labels, std::size_t num_classes)
      : labels_(labels), k_(num_classes) {}

  std::vector<double> leaf_value(const std::vector<std::size_t>& idx) const {
    std::vector<double> counts(k_, 0.0);
    for (auto i : idx) counts[labels_[i]] += 1.0;
    return counts;
  }

  bool is_pure(const std::vector<std::size_t>& idx) const {
    for (auto i : idx) {
      if (labels_[i] != labels_[idx.front()]) return false;
    }
    return true;
  }

  void begin_scan(const std::vector<std::size_t>& idx) {
    total_ = leaf_value(idx);
    left_.assign(k_, 0.0);
    n_ = static_cast<double>(idx.size());
    n_left_ = 0.0;
    parent_ = impurity(total_, n_);
  }

  void move_left(std::size_t i) {
    left_[labels_[i]] += 1.0;
    n_left_ += 1.0;
  }

  double gain() const {
    const double n_right = n_ - n_left_;
    double sq_left = 0.0, sq_right = 0.0;
    for (std::size_t c = 0; c < k_; ++c) {
      const double r = total_[c] - left_[c];
      sq_left += left_[c] * left_[c];
      sq_right += r * r;
    }
    const double gini_left = n_left_ > 0.0 ? 1.0 - sq_left / (n_left_ * n_left_) : 0.0;
    const double gini_right = n_right > 0.0 ? 1.0 - sq_right / (n_right * n_right) : 0.0;
    return parent_ - (n_left_ / n_) * gini_left - (n_right / n_) * gini_right;
  }

 private:
  static double impurity(const std::vector<double>& counts, double n) {
    if (n <= 0.0) return 0.0;
    double sq = 0.0;
    for (double c : counts) sq += c * c;
    return 1.0 - sq / (n * n);
  }

  const std::vector<std::size_t>& labels_;
  std::size_t k_;
  std::vector<double> total_, left_;
  double n_ = 0.0, n_left_ = 0.0, parent_ = 0.0;
};

/// Second-order (Newton) gain on logistic-loss gradients; leaves hold the
/// unshrunk score -G/(H + lambda).
class NewtonCriterion {
 public:
  NewtonCriterion(const std::vector<double>& grad, const std::vector<double>& hess, double lambda,
                  double min_child_hessian)
      : g_(grad), h_(hess), lambda_(lambda), min_child_hessian_(min_child_hessian) {}

  std::vector<double> leaf_value(const std::vector<std::size_t>& idx) const {
    double g = 0.0, h = 0.0;
    for (auto i : idx) {
      g += g_[i];
      h += h_[i];
    }
    return {-g / (h + lambda_)};
  }

  bool is_pure(const std::vector<std::size_t>&) const { return false; }

  void begin_scan(const std::vector<std::size_t>& idx) {
    G_ = H_ = GL_ = HL_ = 0.0;
    for (auto i : idx) {
      G_ += g_[i];
      H_ += h_[i];
    }
  }

  void move_left(std::size_t i) {
    GL_ += g_[i];
    HL_ += h_[i];
  }

  double gain() const {
    const double GR = G_ - GL_;
    const double HR = H_ - HL_;
    if (HL_ < min_child_hessian_ || HR < min_child_hessian_) return 0.0;
    return 0.5 * (GL_ * GL_ / (HL_ + lambda_) + GR * GR / (HR + lambda_) - G_ * G_ / (H_ + lambda_));
  }

 private:
  const std::vector<double>& g_;
  const std::vector<double>& h_;
  double lambda_;
  double min_child_hessian_;
  double G_ = 0.0, H_ = 0.0, GL_ = 0.0, HL_ = 0.0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Random forest

struct ForestConfig {
  std::size_t num_trees = 50;
  std::size_t max_depth = 12;
  std::size_t min_leaf = 1;
  /// Features examined per split; 0 means floor(sqrt(d)).
  std::size_t feature_subsample = 0;
  std::uint64_t seed = 0;
};

class ForestModel final : public ProbModel {
 public:
  ForestModel() = default;
  ForestModel(std::vector<DecisionTree> trees, std::vector<std::uint64_t> tree_seeds, std::size_t num_features,
              std::size_t num_classes, std::size_t feature_subsample)
      : trees_(std::move(trees)), tree_seeds_(std::move(tree_seeds)), num_features_(num_features),
        num_classes_(num_classes), feature_subsample_(feature_subsample) {}

  /// Leaf class distribution of a single tree.
  std::vector<double> tree_proba(std::size_t t, std::span<const double> x) const {
    const auto& counts = trees_.at(t).leaf_for(x).value;
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    std::vector<double> p(counts.size());
    for (std::size_t c = 0; c < counts.size(); ++c) p[c] = counts[c] / total;
    return p;
  }

  std::vector<double> predict_proba(std::span<const double> x) const override {
    check_arity(x.size(), num_features_, "forest input");
    std::vector<double> p(num_classes_, 0.0);
    for (const auto& tree : trees_) {
      const auto& counts = tree.leaf_for(x).value;
      const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
      for (std::size_t c = 0; c < num_classes_; ++c) p[c] += counts[c] / total;
    }
    for (auto& v : p) v /= static_cast<double>(trees_.size());
    return p;
  }

  std::size_t num_classes() const override { return num_classes_; }
  std::size_t num_features() const override { return num_features_; }
  std::string kind() const override { return "forest"; }
  const std::vector<DecisionTree>& trees() const noexcept { return trees_; }
  const std::vector<std::uint64_t>& tree_seeds() const noexcept { return tree_seeds_; }

  nlohmann::ordered_json to_json() const override {
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["kind"] = kind();
    j["num_features"] = num_features_;
    j["num_classes"] = num_classes_;
    j["feature_subsample"] = feature_subsample_;
    j["tree_seeds"] = tree_seeds_;
    nlohmann::ordered_json trees = nlohmann::ordered_json::array();
    for (const auto& t : trees_) trees.push_back(t.to_json());
    j["trees"] = std::move(trees);
    return j;
  }

  static ForestModel from_json(const nlohmann::json& j) {
    detail::check_format(j, "forest");
    std::vector<DecisionTree> trees;
    for (const auto& jt : j.at("trees")) trees.push_back(DecisionTree::from_json(jt));
    return ForestModel(std::move(trees), j.at("tree_seeds").get<std::vector<std::uint64_t>>(),
                       j.at("num_features").get<std::size_t>(), j.at("num_classes").get<std::size_t>(),
                       j.at("feature_subsample").get<std::size_t>());
  }

 private:
  std::vector<DecisionTree> trees_;
  std::vector<std::uint64_t> tree_seeds_;
  std::size_t num_features_ = 0;
  std::size_t num_classes_ = 0;
  std::size_t feature_subsample_ = 0;
};

/// Bagged Gini CART trees with per-split feature subsampling.
inline ForestModel train_forest(const Dataset& train, const ForestConfig& config) {
  // A single observed label is allowed: every leaf is then pure.
  require(!train.empty(), ErrorCode::empty_dataset, "train_forest: empty training set");
  require(train.num_classes() >= 2, ErrorCode::precondition_violation, "train_forest: at least 2 classes are required");
  require(config.num_trees >= 1, ErrorCode::precondition_violation, "train_forest: num_trees must be >= 1");
  const std::size_t d = train.num_features();
  const std::size_t per_node =
      config.feature_subsample > 0
          ? std::min(config.feature_subsample, d)
          : std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(d)))));
  const auto xs = feature_matrix(train);
  std::vector<std::size_t> labels;
  for (const auto& r : train.records()) labels.push_back(r.label);
  detail::GiniCriterion crit(labels, train.num_classes());

  std::vector<DecisionTree> trees;
  std::vector<std::uint64_t> seeds;
  for (std::size_t t = 0; t < config.num_trees; ++t) {
    const auto tree_seed = Rng::derive(config.seed, t);
    Rng rng(tree_seed);
    std::vector<std::size_t> sample(xs.size());
    for (auto& s : sample) s = static_cast<std::size_t>(rng.below(xs.size()));
    detail::TreeBuilder<detail::GiniCriterion> builder(xs, crit, config.max_depth, config.min_leaf, per_node, &rng);
    trees.push_back(builder.build(std::move(sample)));
    seeds.push_back(tree_seed);
  }
  return ForestModel(std::move(trees), std::move(seeds), d, train.num_classes(), per_node);
}

// ---------------------------------------------------------------------------
// Gradient-boosted trees

struct GbtConfig {
  std::size_t rounds = 50;
  std::size_t max_depth = 3;
  double shrinkage = 0.3;
  double lambda = 1.0;
  std::uint64_t seed = 0;
};

/// Logistic-loss boosting. Binary problems use one score chain for class 1;
/// multiclass problems use one one-vs-rest chain per class, normalized.
class GbtModel final : public ProbModel {
 public:
  GbtModel() = default;
  GbtModel(std::vector<double> initial_scores, std::vector<std::vector<DecisionTree>> chains, double shrinkage,
           std::size_t num_features, std::size_t num_classes)
      : initial_(std::move(initial_scores)), chains_(std::move(chains)), shrinkage_(shrinkage),
        num_features_(num_features), num_classes_(num_classes) {}

  std::size_t num_chains() const noexcept { return chains_.size(); }
  std::size_t rounds() const noexcept { return chains_.empty() ? 0 : chains_.front().size(); }
  double shrinkage() const noexcept { return shrinkage_; }
  const std::vector<double>& initial_scores() const noexcept { return initial_; }
  const std::vector<std::vector<DecisionTree>>& chains() const noexcept { return chains_; }

  /// Score of chain `k` after the first `upto` rounds.
  double staged_score(std::size_t k, std::span<const double> x, std::size_t upto) const {
    double s = initial_.at(k);
    for (std::size_t r = 0; r < upto; ++r) s += shrinkage_ * chains_[k][r].leaf_for(x).value[0];
    return s;
  }

  std::vector<double> scores(std::span<const double> x) const {
    std::vector<double> s(chains_.size());
    for (std::size_t k = 0; k < chains_.size(); ++k) s[k] = staged_score(k, x, chains_[k].size());
    return s;
  }

  std::vector<double> predict_proba(std::span<const double> x) const override {
    check_arity(x.size(), num_features_, "gbt input");
    const auto s = scores(x);
    return probabilities(s);
  }

  std::vector<double> probabilities(std::span<const double> s) const {
    if (num_classes_ == 2) {
      const double p1 = nn::activate(nn::Activation::sigmoid, s[0]);
      return {1.0 - p1, p1};
    }
    std::vector<double> p(num_classes_);
    double total = 0.0;
    for (std::size_t k = 0; k < num_classes_; ++k) {
      p[k] = nn::activate(nn::Activation::sigmoid, s[k]);
      total += p[k];
    }
    for (auto& v : p) v /= total;
    return p;
  }

  std::size_t num_classes() const override { return num_classes_; }
  std::size_t num_features() const override { return num_features_; }
  std::string kind() const override { return "gbt"; }

  nlohmann::ordered_json to_json() const override {
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["kind"] = kind();
    j["num_features"] = num_features_;
    j["num_classes"] = num_classes_;
    j["shrinkage"] = shrinkage_;
    j["initial_scores"] = initial_;
    nlohmann::ordered_json chains = nlohmann::ordered_json::array();
    for (const auto& chain : chains_) {
      nlohmann::ordered_json jc = nlohmann::ordered_json::array();
      for (const auto& t : chain) jc.push_back(t.to_json());
      chains.push_back(std::move(jc));
    }
    j["chains"] = std::move(chains);
    return j;
  }

  static GbtModel from_json(const nlohmann::json& j) {
    detail::check_format(j, "gbt");
    std::vector<std::vector<DecisionTree>> chains;
    for (const auto& jc : j.at("chains")) {
      std::vector<DecisionTree> chain;
      for (const auto& jt : jc) chain.push_back(DecisionTree::from_json(jt));
      chains.push_back(std::move(chain));
    }
    return GbtModel(j.at("initial_scores").get<std::vector<double>>(), std::move(chains),
                    j.at("shrinkage").get<double>(), j.at("num_features").get<std::size_t>(),
                    j.at("num_classes").get<std::size_t>());
  }

 private:
  std::vector<double> initial_;
  std::vector<std::vector<DecisionTree>> chains_;
  double shrinkage_ = 0.3;
  std::size_t num_features_ = 0;
  std::size_t num_classes_ = 0;
};

inline GbtModel train_gbt(const Dataset& train, const GbtConfig& config) {
  detail::require_trainable(train, "train_gbt");
  require(config.shrinkage > 0.0, ErrorCode::precondition_violation, "train_gbt: shrinkage must be > 0");
  const std::size_t k = train.num_classes();
  const std::size_t n_chains = k == 2 ? 1 : k;
  const auto xs = feature_matrix(train);
  const std::size_t n = xs.size();
  const auto counts = train.class_counts();

  std::vector<double> initial(n_chains);
  std::vector<std::vector<DecisionTree>> chains(n_chains);
  std::vector<double> y(n), score(n), grad(n), hess(n);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});

  for (std::size_t c = 0; c < n_chains; ++c) {
    const std::size_t positive = k == 2 ? 1 : c;
    const double prior = std::clamp(static_cast<double>(counts[positive]) / static_cast<double>(n), 1e-6, 1.0 - 1e-6);
    initial[c] = std::log(prior / (1.0 - prior));
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = train[i].label == positive ? 1.0 : 0.0;
      score[i] = initial[c];
    }
    for (std::size_t round = 0; round < config.rounds; ++round) {
      for (std::size_t i = 0; i < n; ++i) {
        const double p = nn::activate(nn::Activation::sigmoid, score[i]);
        grad[i] = p - y[i];
        hess[i] = std::max(p * (1.0 - p), 1e-16);
      }
      detail::NewtonCriterion crit(grad, hess, config.lambda, 1e-3);
      detail::TreeBuilder<detail::NewtonCriterion> builder(xs, crit, config.max_depth, 1, 0, nullptr);
      auto tree = builder.build(all);
      for (std::size_t i = 0; i < n; ++i) {
        score[i] += config.shrinkage * tree.leaf_for(xs[i]).value[0];
        if (!std::isfinite(score[i])) {
          throw Error(ErrorCode::diverged_training, "non-finite boosting score in round " + std::to_string(round));
        }
      }
      chains[c].push_back(std::move(tree));
    }
  }
  return GbtModel(std::move(initial), std::move(chains), config.shrinkage, train.num_features(), k);
}

// ---------------------------------------------------------------------------
// Serialization

inline std::unique_ptr<ProbModel> model_from_json(const nlohmann::json& j) {
  const auto kind = j.value("kind", std::string());
  try {
    if (kind == "mlp") return std::make_unique<MlpModel>(MlpModel::from_json(j));
    if (kind == "forest") return std::make_unique<ForestModel>(ForestModel::from_json(j));
    if (kind == "gbt") return std::make_unique<GbtModel>(GbtModel::from_json(j));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("model json: ") + e.what());
  }
  throw Error(ErrorCode::config_error, "unknown model kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Evaluation

struct MetricsReport {
  double accuracy = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  double macro_f1 = 0.0;
  /// confusion[true][predicted]
  std::vector<std::vector<std::size_t>> confusion;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : confusion) n += std::accumulate(row.begin(), row.end(), std::size_t{0});
    return n;
  }

  bool operator==(const MetricsReport&) const = default;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["accuracy"] = accuracy;
    j["macro_f1"] = macro_f1;
    j["precision"] = precision;
    j["recall"] = recall;
    j["f1"] = f1;
    j["confusion"] = confusion;
    j["count"] = total();
    return j;
  }
};

/// Metrics from a confusion matrix. Precision, recall and F1 of a class with
/// no support are 0; macro-F1 averages the classes that occur as truth or
/// prediction.
inline MetricsReport metrics_from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  MetricsReport m;
  const std::size_t k = confusion.size();
  m.confusion = std::move(confusion);
  m.precision.assign(k, 0.0);
  m.recall.assign(k, 0.0);
  m.f1.assign(k, 0.0);
  std::size_t correct = 0, total = 0, active = 0;
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = m.confusion[c][c], row = 0, col = 0;
    for (std::size_t o = 0; o < k; ++o) {
      row += m.confusion[c][o];
      col += m.confusion[o][c];
    }
    correct += tp;
    total += row;
    if (col > 0) m.precision[c] = static_cast<double>(tp) / static_cast<double>(col);
    if (row > 0) m.recall[c] = static_cast<double>(tp) / static_cast<double>(row);
    const double pr = m.precision[c] + m.recall[c];
    if (pr > 0.0) m.f1[c] = 2.0 * m.precision[c] * m.recall[c] / pr;
    if (row > 0 || col > 0) {
      ++active;
      f1_sum += m.f1[c];
    }
  }
  m.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  m.macro_f1 = active > 0 ? f1_sum / static_cast<double>(active) : 0.0;
  return m;
}

inline MetricsReport evaluate(const ProbModel& model, std::span<const std::vector<double>> xs,
                              std::span<const std::size_t> labels) {
  check_arity(labels.size(), xs.size(), "evaluate labels");
  const std::size_t k = model.num_classes();
  std::vector<std::vector<std::size_t>> confusion(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    check_arity(xs[i].size(), model.num_features(), "evaluate input");
    require(labels[i] < k, ErrorCode::precondition_violation, "label outside model classes");
    ++confusion[labels[i]][predict_label(model, xs[i])];
  }
  return metrics_from_confusion(std::move(confusion));
}

inline MetricsReport evaluate(const ProbModel& model, const Dataset& test) {
  check_arity(test.num_features(), model.num_features(), "evaluate dataset");
  std::vector<std::vector<double>> xs;
  std::vector<std::size_t> labels;
  xs.reserve(test.size());
  for (const auto& r : test.records()) {
    xs.push_back(r.values);
    labels.push_back(r.label);
  }
  return evaluate(model, xs, labels);
}

}  // namespace zooguard
