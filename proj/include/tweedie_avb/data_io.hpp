#pragma once

// CSV ingestion, train/valid/test splits, covariate standardisation and
// synthetic data with known ground truth.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/mixed_model.hpp"
#include "tweedie_avb/tweedie.hpp"

namespace tweedie_avb {

struct SchemaConfig {
  std::string response_column;
  std::vector<std::string> fixed_columns;
  std::optional<std::string> group_column;
  /// Expanded to one indicator per level, first level dropped.
  std::vector<std::string> categorical_columns;
  /// Multiplies every response on load (e.g. to change currency units).
  double response_scale = 1.0;

  void validate() const {
    if (response_column.empty()) throw ConfigError("schema: response column not set");
    if (!(response_scale > 0.0) || !std::isfinite(response_scale)) {
      throw ConfigError("schema: response_scale must be positive and finite");
    }
    std::set<std::string> seen{response_column};
    auto add = [&](const std::string& name) {
      if (name.empty()) throw ConfigError("schema: empty column name");
      if (!seen.insert(name).second) {
        throw ConfigError("schema: column '" + name + "' listed twice or equals the response");
      }
    };
    for (const auto& c : fixed_columns) add(c);
    for (const auto& c : categorical_columns) add(c);
    if (group_column) add(*group_column);
  }
};

struct CategoricalEncoding {
  std::string column;
  /// Sorted levels; levels[0] is the dropped reference level.
  std::vector<std::string> levels;
};

/// Level and group orderings learnt from the training file, reused when
/// loading validation, test or prediction files.
struct DataEncoding {
  std::vector<CategoricalEncoding> categoricals;
  std::vector<std::string> group_labels;
};

struct LoadOptions {
  /// Apply this encoding instead of learning one from the file.
  const DataEncoding* encoding = nullptr;
  /// Allow a file without the response column (responses are set to 0).
  bool response_optional = false;
};

struct LoadedCsv {
  Dataset data;
  DataEncoding encoding;
};

namespace detail {

/// Splits one CSV record. Supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"' && field.empty() && !was_quoted) {
      quoted = was_quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
      was_quoted = false;
    } else {
      field.push_back(c);
    }
  }
  if (quoted) throw DataError("unterminated quote on line " + std::to_string(line_no));
  out.push_back(std::move(field));
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::optional<double> parse_double(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = t.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
  return v;
}

/// Numeric order when every label parses as a number, otherwise lexicographic.
inline std::vector<std::string> sorted_levels(const std::set<std::string>& labels) {
  std::vector<std::string> out(labels.begin(), labels.end());
  const bool numeric = std::all_of(out.begin(), out.end(),
                                   [](const std::string& s) { return parse_double(s).has_value(); });
  if (numeric) {
    std::stable_sort(out.begin(), out.end(), [](const std::string& a, const std::string& b) {
      return *parse_double(a) < *parse_double(b);
    });
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw DataError("cannot format value");
  return std::string(buf, ptr);
}

inline std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

}  // namespace detail

/// Reads a comma-separated file with a header row into a Dataset.
inline LoadedCsv read_csv_dataset(const std::filesystem::path& path, const SchemaConfig& schema,
                                  const LoadOptions& options = {}) {
  schema.validate();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path.string() + "' is empty (header row required)");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  std::vector<std::string> header = detail::split_csv_line(line, 1);
  for (auto& h : header) h = detail::trim(h);
  std::map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (!col.emplace(header[j], j).second) {
      throw DataError("'" + path.string() + "': duplicate column '" + header[j] + "'");
    }
  }
  auto find = [&](const std::string& name) -> std::size_t {
    auto it = col.find(name);
    if (it == col.end()) throw DataError("'" + path.string() + "': missing column '" + name + "'");
    return it->second;
  };
  const bool has_response = col.contains(schema.response_column);
  if (!has_response && !options.response_optional) find(schema.response_column);
  std::vector<std::size_t> fixed_idx, cat_idx;
  for (const auto& c : schema.fixed_columns) fixed_idx.push_back(find(c));
  for (const auto& c : schema.categorical_columns) cat_idx.push_back(find(c));
  const std::optional<std::size_t> group_idx =
      schema.group_column ? std::optional<std::size_t>(find(*schema.group_column)) : std::nullopt;

  std::vector<std::vector<std::string>> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line, line_no);
    if (fields.size() != header.size()) {
      throw DataError("'" + path.string() + "' line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    records.push_back(std::move(fields));
  }

  auto cell_error = [&](std::size_t r, const std::string& column, const std::string& what) {
    return DataError("'" + path.string() + "' row " + std::to_string(r + 1) + ", column '" + column +
                     "': " + what);
  };

  LoadedCsv out;
  if (options.encoding != nullptr) {
    out.encoding = *options.encoding;
    if (out.encoding.categoricals.size() != cat_idx.size()) {
      throw ShapeError("encoding has " + std::to_string(out.encoding.categoricals.size()) +
                       " categorical columns, schema has " + std::to_string(cat_idx.size()));
    }
  } else {
    for (std::size_t k = 0; k < cat_idx.size(); ++k) {
      std::set<std::string> levels;
      for (const auto& rec : records) levels.insert(detail::trim(rec[cat_idx[k]]));
      out.encoding.categoricals.push_back({schema.categorical_columns[k], detail::sorted_levels(levels)});
    }
    if (group_idx) {
      std::set<std::string> labels;
      for (const auto& rec : records) labels.insert(detail::trim(rec[*group_idx]));
      out.encoding.group_labels = detail::sorted_levels(labels);
    }
  }

  Dataset& data = out.data;
  for (const auto& c : schema.fixed_columns) {
    data.column_names.push_back(c);
    data.indicator_columns.push_back(false);
  }
  for (const auto& enc : out.encoding.categoricals) {
    for (std::size_t l = 1; l < enc.levels.size(); ++l) {
      data.column_names.push_back(enc.column + "=" + enc.levels[l]);
      data.indicator_columns.push_back(true);
    }
  }
  std::map<std::string, int> group_id;
  if (group_idx) {
    data.group_labels = out.encoding.group_labels;
    for (std::size_t g = 0; g < data.group_labels.size(); ++g) group_id[data.group_labels[g]] = static_cast<int>(g);
  }

  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    double y = 0.0;
    if (has_response) {
      const auto v = detail::parse_double(rec[col.at(schema.response_column)]);
      if (!v) throw cell_error(r, schema.response_column, "cannot parse '" + rec[col.at(schema.response_column)] + "'");
      if (!(*v >= 0.0) || !std::isfinite(*v)) throw cell_error(r, schema.response_column, "negative or non-finite response");
      y = *v * schema.response_scale;
    }
    data.responses.push_back(y);
    for (std::size_t k = 0; k < fixed_idx.size(); ++k) {
      const auto v = detail::parse_double(rec[fixed_idx[k]]);
      if (!v || !std::isfinite(*v)) {
        throw cell_error(r, schema.fixed_columns[k], "cannot parse '" + rec[fixed_idx[k]] + "'");
      }
      data.fixed_design.push_back(*v);
    }
    for (std::size_t k = 0; k < cat_idx.size(); ++k) {
      const auto& levels = out.encoding.categoricals[k].levels;
      const std::string value = detail::trim(rec[cat_idx[k]]);
      const auto it = std::find(levels.begin(), levels.end(), value);
      if (it == levels.end()) {
        throw cell_error(r, schema.categorical_columns[k], "level '" + value + "' not seen in training data");
      }
      const auto level = static_cast<std::size_t>(it - levels.begin());
      for (std::size_t l = 1; l < levels.size(); ++l) data.fixed_design.push_back(l == level ? 1.0 : 0.0);
    }
    if (group_idx) {
      const std::string label = detail::trim(rec[*group_idx]);
      auto it = group_id.find(label);
      if (it == group_id.end()) {
        // Unseen group: appended after the known ones.
        it = group_id.emplace(label, static_cast<int>(data.group_labels.size())).first;
        data.group_labels.push_back(label);
      }
      data.group_index.push_back(it->second);
    }
  }
  data.group_count = static_cast<int>(data.group_labels.size());
  data.validate();
  return out;
}

inline Dataset load_csv(const std::filesystem::path& path, const SchemaConfig& schema) {
  return read_csv_dataset(path, schema).data;
}

/// Writes response, design columns and group labels (when present) with
/// shortest round-trip formatting.
inline void write_csv(const std::filesystem::path& path, const Dataset& data,
                      const std::string& response_column = "y", const std::string& group_column = "group") {
  data.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << detail::quote_csv(response_column);
  for (const auto& c : data.column_names) out << ',' << detail::quote_csv(c);
  if (data.has_groups()) out << ',' << detail::quote_csv(group_column);
  out << '\n';
  for (std::size_t i = 0; i < data.rows(); ++i) {
    out << detail::format_double(data.responses[i]);
    for (double v : data.row(i)) out << ',' << detail::format_double(v);
    if (data.has_groups()) {
      const int g = data.group_index[i];
      const std::string label = static_cast<std::size_t>(g) < data.group_labels.size()
                                    ? data.group_labels[static_cast<std::size_t>(g)]
                                    : std::to_string(g);
      out << ',' << detail::quote_csv(label);
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

// --- splitting ----------------------------------------------------------------

struct SplitSpec {
  double train = 0.5;
  double valid = 0.25;
  double test = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    for (double f : {train, valid, test}) {
      if (!(f > 0.0 && f < 1.0)) throw ConfigError("split fractions must lie in (0, 1)");
    }
    if (std::abs(train + valid + test - 1.0) > 1e-12) throw ConfigError("split fractions must sum to 1");
  }
};

struct SplitIndices {
  std::vector<std::size_t> train, valid, test;
};

/// Seeded shuffle, then valid and test take round-half-even(M * fraction)
/// rows each and train takes the rest.
inline SplitIndices split_indices(std::size_t m, const SplitSpec& spec) {
  spec.validate();
  if (m < 4) throw ConfigError("splitting needs at least 4 rows");
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const double md = static_cast<double>(m);
  const auto n_valid = static_cast<std::size_t>(std::nearbyint(md * spec.valid));
  const auto n_test = static_cast<std::size_t>(std::nearbyint(md * spec.test));
  if (n_valid == 0 || n_test == 0 || n_valid + n_test >= m) {
    throw ConfigError("split fractions leave an empty partition for " + std::to_string(m) + " rows");
  }
  SplitIndices s;
  const std::size_t n_train = m - n_valid - n_test;
  s.train.assign(idx.begin(), idx.begin() + static_cast<long>(n_train));
  s.valid.assign(idx.begin() + static_cast<long>(n_train), idx.begin() + static_cast<long>(n_train + n_valid));
  s.test.assign(idx.begin() + static_cast<long>(n_train + n_valid), idx.end());
  return s;
}

struct DatasetSplit {
  Dataset train, valid, test;
};

inline DatasetSplit split_dataset(const Dataset& data, const SplitSpec& spec) {
  const SplitIndices s = split_indices(data.rows(), spec);
  return {data.subset(s.train), data.subset(s.valid), data.subset(s.test)};
}

// --- standardisation ----------------------------------------------------------

/// x -> (x - mean) / scale per continuous column, with the population
/// standard deviation of the training rows as scale.
struct Standardization {
  std::vector<double> means;
  std::vector<double> scales;
  std::vector<bool> applied;

  Dataset apply(const Dataset& data) const {
    if (data.cols() != means.size()) {
      throw ShapeError("standardisation fitted on " + std::to_string(means.size()) + " columns, data has " +
                       std::to_string(data.cols()));
    }
    Dataset out = data;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      for (std::size_t j = 0; j < out.cols(); ++j) {
        if (applied[j]) out.at(i, j) = (out.at(i, j) - means[j]) / scales[j];
      }
    }
    return out;
  }
};

struct StandardizeResult {
  Dataset train;
  std::vector<Dataset> others;
  Standardization transform;
  std::vector<std::string> warnings;
};

inline Standardization fit_standardization(const Dataset& train, std::vector<std::string>* warnings = nullptr) {
  if (train.rows() == 0) throw UsageError("cannot standardise an empty training set");
  Standardization t;
  const double m = static_cast<double>(train.rows());
  for (std::size_t j = 0; j < train.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < train.rows(); ++i) mean += train.at(i, j);
    mean /= m;
    double ss = 0.0;
    for (std::size_t i = 0; i < train.rows(); ++i) ss += (train.at(i, j) - mean) * (train.at(i, j) - mean);
    const double sd = std::sqrt(ss / m);
    const bool indicator = j < train.indicator_columns.size() && train.indicator_columns[j];
    const bool constant = !(sd > 0.0);
    if (constant && !indicator && warnings != nullptr) {
      warnings->push_back("column '" + train.column_names[j] + "' has zero variance; left unscaled");
    }
    const bool apply = !indicator && !constant;
    t.means.push_back(apply ? mean : 0.0);
    t.scales.push_back(apply ? sd : 1.0);
    t.applied.push_back(apply);
  }
  return t;
}

inline StandardizeResult standardize(const Dataset& train, const std::vector<Dataset>& others = {}) {
  StandardizeResult r;
  r.transform = fit_standardization(train, &r.warnings);
  r.train = r.transform.apply(train);
  for (const auto& d : others) r.others.push_back(r.transform.apply(d));
  return r;
}

// --- simulation ---------------------------------------------------------------

struct SimTruth {
  std::vector<double> fixed_weights{0.1, 0.3, -0.2};  ///< intercept first
  double p_index = 1.5;
  double dispersion = 1.0;
  double sigma_b = 0.5;
  /// Realised random effects, filled by simulate_dataset.
  std::vector<double> group_effects;
  std::size_t rows = 5000;
  int groups = 10;
  double covariate_mean = 0.0;
  double covariate_sd = 1.0;

  std::size_t covariates() const { return fixed_weights.empty() ? 0 : fixed_weights.size() - 1; }

  void validate() const {
    if (fixed_weights.empty()) throw ConfigError("truth needs at least an intercept");
    for (double w : fixed_weights) {
      if (!std::isfinite(w)) throw ConfigError("non-finite true weight");
    }
    if (!(p_index > 1.0 && p_index < 2.0)) throw ConfigError("true index parameter must lie in (1, 2)");
    if (!(dispersion > 0.0) || !std::isfinite(dispersion)) throw ConfigError("true dispersion must be positive");
    if (!(sigma_b >= 0.0) || !std::isfinite(sigma_b)) throw ConfigError("true sigma_b must be non-negative");
    if (rows == 0) throw ConfigError("number of rows must be positive");
    if (groups < 0) throw ConfigError("number of groups must be non-negative");
    if (!(covariate_sd >= 0.0) || !std::isfinite(covariate_mean)) throw ConfigError("invalid covariate spec");
  }
};

struct Simulation {
  Dataset data;
  SimTruth truth;
};

/// x ~ N(mean, sd^2) per covariate, group uniform on [0, G), b_g ~ N(0, sigma_b^2),
/// y ~ Tweedie(exp(eta), p, phi).
inline Simulation simulate_dataset(const SimTruth& truth, std::mt19937_64& rng) {
  truth.validate();
  Simulation sim{{}, truth};
  Dataset& data = sim.data;
  const std::size_t d = truth.covariates();
  for (std::size_t j = 0; j < d; ++j) {
    data.column_names.push_back("x" + std::to_string(j + 1));
    data.indicator_columns.push_back(false);
  }
  data.group_count = truth.groups;
  for (int g = 0; g < truth.groups; ++g) data.group_labels.push_back(std::to_string(g));

  std::normal_distribution<double> normal;
  sim.truth.group_effects.clear();
  for (int g = 0; g < truth.groups; ++g) sim.truth.group_effects.push_back(truth.sigma_b * normal(rng));

  std::uniform_int_distribution<int> pick_group(0, std::max(truth.groups - 1, 0));
  data.responses.reserve(truth.rows);
  data.fixed_design.reserve(truth.rows * d);
  for (std::size_t i = 0; i < truth.rows; ++i) {
    double eta = truth.fixed_weights[0];
    for (std::size_t j = 0; j < d; ++j) {
      const double x = truth.covariate_mean + truth.covariate_sd * normal(rng);
      data.fixed_design.push_back(x);
      eta += truth.fixed_weights[j + 1] * x;
    }
    if (truth.groups > 0) {
      const int g = pick_group(rng);
      data.group_index.push_back(g);
      eta += sim.truth.group_effects[static_cast<std::size_t>(g)];
    }
    if (!(std::abs(eta) <= detail::kEtaLimit)) {
      throw ObservationError("simulated linear predictor overflows at row " + std::to_string(i), i);
    }
    data.responses.push_back(tweedie_sample(to_compound({std::exp(eta), truth.p_index, truth.dispersion}), rng));
  }
  data.validate();
  return sim;
}

}  // namespace tweedie_avb
