#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace zooguard {

enum class FeatureKind { numeric, categorical_encoded, identity };

inline const char* to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::numeric: return "numeric";
    case FeatureKind::categorical_encoded: return "categorical-encoded";
    case FeatureKind::identity: return "identity";
  }
  return "numeric";
}

inline FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "numeric") return FeatureKind::numeric;
  if (s == "categorical-encoded" || s == "categorical") return FeatureKind::categorical_encoded;
  if (s == "identity") return FeatureKind::identity;
  throw Error(ErrorCode::config_error, "unknown feature kind '" + s + "'");
}

struct Column {
  std::string name;
  FeatureKind kind = FeatureKind::numeric;
  bool is_mutable = false;
  /// Raw-unit bounds an attacker must respect.
  std::optional<std::pair<double, double>> valid_range;
  bool integral = false;
};

class FeatureSchema {
 public:
  FeatureSchema() = default;
  explicit FeatureSchema(std::vector<Column> columns) : columns_(std::move(columns)) { validate(); }

  std::size_t size() const noexcept { return columns_.size(); }
  const Column& operator[](std::size_t i) const { return columns_.at(i); }
  const std::vector<Column>& columns() const noexcept { return columns_; }

  std::optional<std::size_t> index_of(const std::string& name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (columns_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(columns_.size());
    for (const auto& c : columns_) out.push_back(c.name);
    return out;
  }

  bool operator==(const FeatureSchema& other) const {
    if (columns_.size() != other.columns_.size()) return false;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      const auto& a = columns_[i];
      const auto& b = other.columns_[i];
      if (a.name != b.name || a.kind != b.kind || a.is_mutable != b.is_mutable ||
          a.valid_range != b.valid_range || a.integral != b.integral) {
        return false;
      }
    }
    return true;
  }

 private:
  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : columns_) {
      require(seen.insert(c.name).second, ErrorCode::config_error,
              "duplicate column name '" + c.name + "'");
      require(!(c.kind == FeatureKind::identity && c.is_mutable), ErrorCode::config_error,
              "identity column '" + c.name + "' cannot be mutable");
      if (c.valid_range) {
        require(c.valid_range->first <= c.valid_range->second, ErrorCode::config_error,
                "column '" + c.name + "' has valid_range lo > hi");
      }
    }
  }

  std::vector<Column> columns_;
};

struct FlowRecord {
  std::vector<double> values;
  std::size_t label = 0;

  bool operator==(const FlowRecord&) const = default;
};

/// Labeled flow-feature table. Immutable after construction; every record is
/// checked against the schema and the label map up front.
class Dataset {
 public:
  Dataset() = default;
  Dataset(FeatureSchema schema, std::vector<FlowRecord> records, std::vector<std::string> label_map)
      : schema_(std::move(schema)), records_(std::move(records)), label_map_(std::move(label_map)) {
    for (const auto& r : records_) {
      check_arity(r.values.size(), schema_.size(), "flow record");
      require(r.label < label_map_.size(), ErrorCode::precondition_violation,
              "record label " + std::to_string(r.label) + " outside label map");
    }
  }

  const FeatureSchema& schema() const noexcept { return schema_; }
  const std::vector<FlowRecord>& records() const noexcept { return records_; }
  const std::vector<std::string>& label_map() const noexcept { return label_map_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  std::size_t num_features() const noexcept { return schema_.size(); }
  std::size_t num_classes() const noexcept { return label_map_.size(); }
  const FlowRecord& operator[](std::size_t i) const { return records_.at(i); }

  std::optional<std::size_t> label_index(const std::string& name) const {
    for (std::size_t i = 0; i < label_map_.size(); ++i) {
      if (label_map_[i] == name) return i;
    }
    return std::nullopt;
  }

  /// Number of distinct labels actually present.
  std::size_t distinct_labels() const {
    std::set<std::size_t> present;
    for (const auto& r : records_) present.insert(r.label);
    return present.size();
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(label_map_.size(), 0);
    for (const auto& r : records_) ++counts[r.label];
    return counts;
  }

  Dataset with_records(std::vector<FlowRecord> records) const {
    return Dataset(schema_, std::move(records), label_map_);
  }

  bool operator==(const Dataset& other) const {
    return schema_ == other.schema_ && records_ == other.records_ && label_map_ == other.label_map_;
  }

 private:
  FeatureSchema schema_;
  std::vector<FlowRecord> records_;
  std::vector<std::string> label_map_;
};

/// Feature vectors of every record, in record order.
inline std::vector<std::vector<double>> feature_matrix(const Dataset& d) {
  std::vector<std::vector<double>> xs;
  xs.reserve(d.size());
  for (const auto& r : d.records()) xs.push_back(r.values);
  return xs;
}

/// Records carrying `label`, with the schema and label map unchanged.
inline Dataset filter_label(const Dataset& d, std::size_t label) {
  std::vector<FlowRecord> kept;
  for (const auto& r : d.records()) {
    if (r.label == label) kept.push_back(r);
  }
  return d.with_records(std::move(kept));
}

// ---------------------------------------------------------------------------
// Schema sidecar JSON

inline nlohmann::ordered_json schema_to_json(const FeatureSchema& schema) {
  nlohmann::ordered_json cols = nlohmann::ordered_json::array();
  for (const auto& c : schema.columns()) {
    nlohmann::ordered_json j;
    j["name"] = c.name;
    j["kind"] = to_string(c.kind);
    j["mutable"] = c.is_mutable;
    if (c.valid_range) {
      j["valid_range"] = {c.valid_range->first, c.valid_range->second};
    }
    j["integral"] = c.integral;
    cols.push_back(std::move(j));
  }
  nlohmann::ordered_json out;
  out["columns"] = std::move(cols);
  return out;
}

inline FeatureSchema schema_from_json(const nlohmann::json& j) {
  try {
    std::vector<Column> cols;
    for (const auto& jc : j.at("columns")) {
      Column c;
      c.name = jc.at("name").get<std::string>();
      c.kind = feature_kind_from_string(jc.value("kind", std::string("numeric")));
      c.is_mutable = jc.value("mutable", false);
      c.integral = jc.value("integral", false);
      if (jc.contains("valid_range") && !jc.at("valid_range").is_null()) {
        const auto& vr = jc.at("valid_range");
        c.valid_range = std::make_pair(vr.at(0).get<double>(), vr.at(1).get<double>());
      }
      cols.push_back(std::move(c));
    }
    return FeatureSchema(std::move(cols));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, std::string("schema sidecar: ") + e.what());
  }
}

inline FeatureSchema load_schema(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io_error, "cannot open schema file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::config_error, "schema file '" + path + "': " + e.what());
  }
  return schema_from_json(j);
}

// ---------------------------------------------------------------------------
// Identity features

/// Column names (lowercased) that never reach a model: time stamps, endpoint
/// addresses and ports, flow ids.
inline const std::set<std::string>& default_identity_blocklist() {
  static const std::set<std::string> names = {"timestamp", "flow_start", "flow_end", "src_ip",
                                              "dst_ip",    "src_port",   "dst_port", "flow_id"};
  return names;
}

namespace detail {

inline std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return s;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        current.push_back('"');
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        current.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(trim(current));
      current.clear();
    } else {
      current.push_back(ch);
    }
  }
  fields.push_back(trim(current));
  return fields;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double value = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return value;
}

}  // namespace detail

inline bool is_identity_name(const std::string& name, const std::set<std::string>& blocklist) {
  return blocklist.count(detail::lowercase(name)) > 0;
}

inline Dataset drop_identity_features(
    const Dataset& d, const std::set<std::string>& blocklist = default_identity_blocklist()) {
  std::vector<std::size_t> keep;
  std::vector<Column> kept_cols;
  for (std::size_t i = 0; i < d.schema().size(); ++i) {
    const auto& c = d.schema()[i];
    if (c.kind == FeatureKind::identity || is_identity_name(c.name, blocklist)) continue;
    keep.push_back(i);
    kept_cols.push_back(c);
  }
  require(!keep.empty(), ErrorCode::all_features_dropped,
          "every column is an identity feature");
  if (keep.size() == d.schema().size()) return d;

  std::vector<FlowRecord> records;
  records.reserve(d.size());
  for (const auto& r : d.records()) {
    FlowRecord out;
    out.label = r.label;
    out.values.reserve(keep.size());
    for (auto i : keep) out.values.push_back(r.values[i]);
    records.push_back(std::move(out));
  }
  return Dataset(FeatureSchema(std::move(kept_cols)), std::move(records), d.label_map());
}

// ---------------------------------------------------------------------------
// CSV ingestion

/// Loads a flow CSV. Without a schema, every non-label column is numeric
/// unless its name is on the identity blocklist. Identity cells that are not
/// numbers (IP strings, dates) are stored as NaN; they are dropped before any
/// model sees them.
inline Dataset load_csv(const std::string& path, const std::optional<FeatureSchema>& schema = std::nullopt,
                        const std::string& label_column = "label") {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io_error, "cannot open '" + path + "'");

  std::string line;
  auto next_line = [&](std::string& out) {
    while (std::getline(in, out)) {
      if (!out.empty() && out.back() == '\r') out.pop_back();
      if (!detail::trim(out).empty()) return true;
    }
    return false;
  };

  require(next_line(line), ErrorCode::empty_dataset, "'" + path + "' has no header");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
      static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF) {
    line.erase(0, 3);
  }
  const auto header = detail::split_csv_line(line);

  std::optional<std::size_t> label_pos;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == label_column) label_pos = i;
  }
  require(label_pos.has_value(), ErrorCode::missing_label_column,
          "'" + path + "' has no column named '" + label_column + "'");

  // feature column -> position in the CSV row
  std::vector<std::size_t> positions;
  std::vector<Column> columns;
  if (schema) {
    for (const auto& c : schema->columns()) {
      auto it = std::find(header.begin(), header.end(), c.name);
      require(it != header.end(), ErrorCode::config_error,
              "schema column '" + c.name + "' missing from '" + path + "'");
      positions.push_back(static_cast<std::size_t>(it - header.begin()));
      columns.push_back(c);
    }
  } else {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i == *label_pos) continue;
      Column c;
      c.name = header[i];
      c.kind = is_identity_name(c.name, default_identity_blocklist()) ? FeatureKind::identity
                                                                       : FeatureKind::numeric;
      positions.push_back(i);
      columns.push_back(std::move(c));
    }
  }

  std::vector<std::vector<double>> rows;
  std::vector<std::string> raw_labels;
  std::size_t row_no = 0;
  while (next_line(line)) {
    ++row_no;
    const auto fields = detail::split_csv_line(line);
    require(fields.size() == header.size(), ErrorCode::parse_error,
            "row " + std::to_string(row_no) + " has " + std::to_string(fields.size()) +
                " fields, header has " + std::to_string(header.size()));
    std::vector<double> values;
    values.reserve(positions.size());
    for (std::size_t k = 0; k < positions.size(); ++k) {
      auto parsed = detail::parse_number(fields[positions[k]]);
      if (!parsed) {
        if (columns[k].kind != FeatureKind::identity) throw ParseError(row_no, columns[k].name);
        parsed = std::numeric_limits<double>::quiet_NaN();
      }
      values.push_back(*parsed);
    }
    rows.push_back(std::move(values));
    raw_labels.push_back(fields[*label_pos]);
  }
  require(!rows.empty(), ErrorCode::empty_dataset, "'" + path + "' has no data rows");

  std::vector<std::string> label_map(raw_labels.begin(), raw_labels.end());
  std::sort(label_map.begin(), label_map.end());
  label_map.erase(std::unique(label_map.begin(), label_map.end()), label_map.end());

  std::vector<FlowRecord> records;
  records.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto it = std::lower_bound(label_map.begin(), label_map.end(), raw_labels[i]);
    records.push_back({std::move(rows[i]), static_cast<std::size_t>(it - label_map.begin())});
  }
  return Dataset(FeatureSchema(std::move(columns)), std::move(records), std::move(label_map));
}

namespace detail {

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    std::ostringstream os;
    os << static_cast<long long>(v);
    return os.str();
  }
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Writes `d` as a CSV that load_csv reads back exactly (shortest round-trip
/// formatting, labels by name).
inline void write_csv(const Dataset& d, const std::string& path, const std::string& label_column = "label") {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::io_error, "cannot write '" + path + "'");
  for (const auto& c : d.schema().columns()) out << c.name << ',';
  out << label_column << '\n';
  for (const auto& r : d.records()) {
    for (double v : r.values) out << detail::format_number(v) << ',';
    out << d.label_map()[r.label] << '\n';
  }
  require(static_cast<bool>(out), ErrorCode::io_error, "failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Scaling

/// Per-feature min-max normalization into [0,1]. Features whose fitted range
/// is empty are constant: they map to 0 and are never attacked.
class Scaler {
 public:
  Scaler() = default;
  Scaler(std::vector<double> mins, std::vector<double> maxs) : mins_(std::move(mins)), maxs_(std::move(maxs)) {
    check_arity(maxs_.size(), mins_.size(), "scaler bounds");
    for (std::size_t i = 0; i < mins_.size(); ++i) {
      require(mins_[i] <= maxs_[i], ErrorCode::precondition_violation, "scaler min > max");
    }
  }

  std::size_t size() const noexcept { return mins_.size(); }
  double min(std::size_t i) const { return mins_.at(i); }
  double max(std::size_t i) const { return maxs_.at(i); }
  bool is_constant(std::size_t i) const { return !(maxs_.at(i) > mins_.at(i)); }
  const std::vector<double>& mins() const noexcept { return mins_; }
  const std::vector<double>& maxs() const noexcept { return maxs_; }

  double transform_one(std::size_t i, double x) const {
    if (is_constant(i)) return 0.0;
    const double z = (x - mins_[i]) / (maxs_[i] - mins_[i]);
    return std::clamp(z, 0.0, 1.0);
  }

  double inverse_one(std::size_t i, double z) const {
    if (is_constant(i)) return mins_[i];
    return mins_[i] + z * (maxs_[i] - mins_[i]);
  }

  std::vector<double> transform(std::span<const double> x) const {
    check_arity(x.size(), size(), "scaler transform");
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = transform_one(i, x[i]);
    return z;
  }

  std::vector<double> inverse(std::span<const double> z) const {
    check_arity(z.size(), size(), "scaler inverse");
    std::vector<double> x(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) x[i] = inverse_one(i, z[i]);
    return x;
  }

  Dataset transform(const Dataset& d) const {
    std::vector<FlowRecord> records;
    records.reserve(d.size());
    for (const auto& r : d.records()) records.push_back({transform(r.values), r.label});
    return d.with_records(std::move(records));
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["format_version"] = 1;
    j["kind"] = "minmax_scaler";
    j["min"] = mins_;
    j["max"] = maxs_;
    return j;
  }

  static Scaler from_json(const nlohmann::json& j) {
    try {
      return Scaler(j.at("min").get<std::vector<double>>(), j.at("max").get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::config_error, std::string("scaler json: ") + e.what());
    }
  }

 private:
  std::vector<double> mins_;
  std::vector<double> maxs_;
};

inline Scaler fit_scaler(const Dataset& train) {
  require(!train.empty(), ErrorCode::empty_dataset, "cannot fit a scaler on an empty dataset");
  const std::size_t d = train.num_features();
  std::vector<double> mins(d, std::numeric_limits<double>::infinity());
  std::vector<double> maxs(d, -std::numeric_limits<double>::infinity());
  for (const auto& r : train.records()) {
    for (std::size_t i = 0; i < d; ++i) {
      if (std::isnan(r.values[i])) continue;
      mins[i] = std::min(mins[i], r.values[i]);
      maxs[i] = std::max(maxs[i], r.values[i]);
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (mins[i] > maxs[i]) mins[i] = maxs[i] = 0.0;  // all NaN
  }
  return Scaler(std::move(mins), std::move(maxs));
}

// ---------------------------------------------------------------------------
// Splitting

/// Stratified, seeded train/test partition. Record order is preserved inside
/// each side.
inline std::pair<Dataset, Dataset> split(const Dataset& d, double test_fraction, std::uint64_t seed) {
  require(test_fraction > 0.0 && test_fraction < 1.0, ErrorCode::precondition_violation,
          "test_fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(d.num_classes());
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d[i].label].push_back(i);

  std::vector<bool> in_test(d.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    require(idx.size() >= 2, ErrorCode::class_too_small,
            "class '" + d.label_map()[c] + "' has fewer than 2 records");
    auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * test_fraction));
    n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    Rng rng(Rng::derive(seed, c));
    rng.shuffle(idx.begin(), idx.end());
    for (std::size_t k = 0; k < n_test; ++k) in_test[idx[k]] = true;
  }

  std::vector<FlowRecord> train;
  std::vector<FlowRecord> test;
  for (std::size_t i = 0; i < d.size(); ++i) (in_test[i] ? test : train).push_back(d[i]);
  return {d.with_records(std::move(train)), d.with_records(std::move(test))};
}

// ---------------------------------------------------------------------------
// Synthetic flows

struct SynthConfig {
  std::size_t num_records = 1000;
  std::size_t num_features = 10;
  std::size_t num_classes = 2;
  /// Minimum pairwise centroid distance, in units of per-feature standard
  /// deviation.
  double class_separation = 4.0;
  double mutable_fraction = 0.6;
  /// Rank of the shared correlation structure; 0 picks ceil(d/3).
  std::size_t manifold_rank = 0;
  /// Share of each feature's variance that is independent noise.
  double noise_fraction = 0.05;
};

inline nlohmann::ordered_json to_json(const SynthConfig& c) {
  nlohmann::ordered_json j;
  j["num_records"] = c.num_records;
  j["num_features"] = c.num_features;
  j["num_classes"] = c.num_classes;
  j["class_separation"] = c.class_separation;
  j["mutable_fraction"] = c.mutable_fraction;
  j["manifold_rank"] = c.manifold_rank;
  j["noise_fraction"] = c.noise_fraction;
  return j;
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.num_records = j.value("num_records", c.num_records);
  c.num_features = j.value("num_features", c.num_features);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.class_separation = j.value("class_separation", c.class_separation);
  c.mutable_fraction = j.value("mutable_fraction", c.mutable_fraction);
  c.manifold_rank = j.value("manifold_rank", c.manifold_rank);
  c.noise_fraction = j.value("noise_fraction", c.noise_fraction);
  return c;
}

namespace detail {

struct SynthFeature {
  const char* name;
  double offset;
  double scale;
  bool integral;
  std::optional<std::pair<double, double>> valid_range;
};

// Attacker-controllable traffic parameters: sizes, timing, rate, header fields.
inline const std::vector<SynthFeature>& mutable_features() {
  static const std::vector<SynthFeature> f = {
      {"pkt_len", 800.0, 80.0, false, std::make_pair(40.0, 1514.0)},
      {"iat_mean", 0.05, 0.004, false, std::make_pair(0.0, 1.0)},
      {"rate", 500.0, 50.0, false, std::make_pair(0.0, 1e6)},
      {"ttl", 128.0, 8.0, true, std::make_pair(1.0, 255.0)},
      {"dscp", 32.0, 3.0, true, std::make_pair(0.0, 63.0)},
      {"protocol_type", 10.0, 1.5, true, std::make_pair(0.0, 255.0)},
      {"flow_duration", 2.0, 0.2, false, std::make_pair(0.0, 1e6)},
      {"send_freq", 40.0, 4.0, false, std::make_pair(0.0, 1e6)},
  };
  return f;
}

inline const std::vector<SynthFeature>& fixed_features() {
  static const std::vector<SynthFeature> f = {
      {"header_length", 200.0, 20.0, false, std::nullopt},
      {"tot_sum", 5000.0, 400.0, false, std::nullopt},
      {"magnitude", 30.0, 2.0, false, std::nullopt},
      {"radius", 10.0, 1.0, false, std::nullopt},
      {"covariance", 100.0, 10.0, false, std::nullopt},
      {"variance", 1.0, 0.1, false, std::nullopt},
      {"weight", 150.0, 12.0, false, std::nullopt},
      {"number", 9.0, 0.5, false, std::nullopt},
  };
  return f;
}

inline std::string cycled_name(const char* base, std::size_t cycle) {
  return cycle == 0 ? std::string(base) : std::string(base) + "_" + std::to_string(cycle + 1);
}

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> n = {"benign", "bruteforce", "ddos",     "dos",
                                             "mirai",  "recon",      "spoofing", "webattack"};
  return n;
}

}  // namespace detail

/// Desk-scale flow generator. Each class is a Gaussian cluster around its own
/// centroid; all classes share a low-rank correlation structure plus a little
/// independent noise, and every feature has unit marginal spread before being
/// mapped to plausible raw units.
inline Dataset synth_flows(const SynthConfig& config, std::uint64_t seed) {
  require(config.num_classes >= 2, ErrorCode::precondition_violation, "synth_flows needs >= 2 classes");
  require(config.num_features >= 2, ErrorCode::precondition_violation, "synth_flows needs >= 2 features");
  require(config.mutable_fraction >= 0.0 && config.mutable_fraction <= 1.0,
          ErrorCode::precondition_violation, "mutable_fraction must lie in [0, 1]");
  require(config.noise_fraction > 0.0 && config.noise_fraction <= 1.0, ErrorCode::precondition_violation,
          "noise_fraction must lie in (0, 1]");

  const std::size_t d = config.num_features;
  const std::size_t k = config.num_classes;
  const std::size_t rank =
      std::min(d, config.manifold_rank == 0 ? (d + 2) / 3 : config.manifold_rank);
  Rng rng(seed);

  // schema
  const auto n_mutable = static_cast<std::size_t>(std::ceil(config.mutable_fraction * static_cast<double>(d) - 1e-9));
  std::vector<Column> columns;
  std::vector<detail::SynthFeature> units;
  for (std::size_t j = 0; j < d; ++j) {
    const bool is_mut = j < n_mutable;
    const auto& pool = is_mut ? detail::mutable_features() : detail::fixed_features();
    const std::size_t slot = is_mut ? j : j - n_mutable;
    const auto& f = pool[slot % pool.size()];
    Column c;
    c.name = detail::cycled_name(f.name, slot / pool.size());
    c.kind = FeatureKind::numeric;
    c.is_mutable = is_mut;
    c.valid_range = f.valid_range;
    c.integral = f.integral;
    columns.push_back(std::move(c));
    units.push_back(f);
  }

  // centroids, rescaled so the closest pair sits exactly at the separation
  std::vector<std::vector<double>> centroids(k, std::vector<double>(d));
  for (auto& c : centroids) {
    for (auto& v : c) v = rng.normal();
  }
  double min_dist = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (centroids[a][j] - centroids[b][j]) * (centroids[a][j] - centroids[b][j]);
      min_dist = std::min(min_dist, std::sqrt(s));
    }
  }
  const double stretch = min_dist > 0.0 ? config.class_separation / min_dist : 1.0;
  for (auto& c : centroids) {
    for (auto& v : c) v *= stretch;
  }

  // loadings: each row scaled so shared + noise variance is 1
  const double noise_sd = std::sqrt(config.noise_fraction);
  std::vector<std::vector<double>> loadings(d, std::vector<double>(rank));
  for (auto& row : loadings) {
    double norm = 0.0;
    for (auto& v : row) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : row) v *= std::sqrt(1.0 - config.noise_fraction) / norm;
  }

  std::vector<std::string> names(k);
  const auto& base_names = detail::synth_class_names();
  for (std::size_t c = 0; c < k; ++c) {
    names[c] = c < base_names.size() ? base_names[c] : "zz_class_" + std::to_string(c);
  }
  // base names are already sorted; keep label indices consistent with load_csv
  std::vector<std::size_t> order(k);
  for (std::size_t c = 0; c < k; ++c) order[c] = c;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return names[a] < names[b]; });
  std::vector<std::string> label_map(k);
  std::vector<std::size_t> label_of(k);
  for (std::size_t pos = 0; pos < k; ++pos) {
    label_map[pos] = names[order[pos]];
    label_of[order[pos]] = pos;
  }

  std::vector<FlowRecord> records;
  records.reserve(config.num_records);
  std::vector<double> latent(rank);
  for (std::size_t i = 0; i < config.num_records; ++i) {
    const std::size_t cls = i % k;
    for (auto& z : latent) z = rng.normal();
    FlowRecord r;
    r.label = label_of[cls];
    r.values.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      double s = centroids[cls][j] + noise_sd * rng.normal();
      for (std::size_t q = 0; q < rank; ++q) s += loadings[j][q] * latent[q];
      double raw = units[j].offset + units[j].scale * s;
      if (units[j].integral) raw = std::round(raw);
      if (units[j].valid_range) raw = std::clamp(raw, units[j].valid_range->first, units[j].valid_range->second);
      r.values[j] = raw;
    }
    records.push_back(std::move(r));
  }
  return Dataset(FeatureSchema(std::move(columns)), std::move(records), std::move(label_map));
}

}  // namespace zooguard
