#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "recourse/data.hpp"
#include "recourse/random.hpp"

namespace recourse {

using nlohmann::json;

namespace {

TextMode parse_text_mode(const std::string& s) {
  if (s == "binary") return TextMode::Binary;
  if (s == "tf" || s == "term_frequency") return TextMode::TermFrequency;
  if (s == "tfidf" || s == "tf-idf") return TextMode::TfIdf;
  throw ConfigError("unknown text mode '" + s + "'");
}

bool is_ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }
bool is_ascii_space(unsigned char c) { return c == ' ' || (c >= '\t' && c <= '\r'); }

}  // namespace

FeaturizerSpec FeaturizerSpec::from_json(const json& j) {
  FeaturizerSpec spec;
  try {
    if (j.contains("text"))
      for (const auto& [name, f] : j.at("text").items()) {
        TextFieldSpec t;
        t.mode = parse_text_mode(f.value("mode", std::string("tfidf")));
        t.min_df = f.value("min_df", std::size_t{1});
        t.is_mutable = f.value("mutable", true);
        spec.text[name] = t;
      }
    for (const char* group : {"categorical", "numeric"}) {
      if (!j.contains(group)) continue;
      auto& dst = std::string(group) == "categorical" ? spec.categorical : spec.numeric;
      for (const auto& [name, f] : j.at(group).items()) dst[name] = FieldSpec{f.value("mutable", true)};
    }
    spec.bounded = j.value("bounded", true);
  } catch (const json::exception& e) {
    throw ConfigError("featurizer spec: " + std::string(e.what()));
  }
  return spec;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_ascii_space(c) || is_ascii_punct(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
      continue;
    }
    current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

FeaturizedCatalog featurize(const std::vector<RawItemRecord>& records, const FeaturizerSpec& spec) {
  if (records.empty()) throw DataError("featurize needs at least one record");
  FeaturizedCatalog out;
  for (const auto& r : records) {
    if (out.items.find(r.external_id)) throw DataError("duplicate item id '" + r.external_id + "'");
    out.items.intern(r.external_id);
  }

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<Eigen::Triplet<double>> triplets;
  std::vector<bool> mask;
  std::vector<double> lo, hi;
  auto add_column = [&](std::string name, const std::string& source, bool is_mutable, double lower, double upper) {
    out.features.push_back({std::move(name), source});
    mask.push_back(is_mutable);
    lo.push_back(lower);
    hi.push_back(upper);
    return static_cast<Eigen::Index>(out.features.size() - 1);
  };
  auto require_field = [&](const std::string& field, auto member) {
    for (const auto& r : records)
      if ((r.*member).count(field)) return;
    throw DataError("featurizer spec references unknown field '" + field + "'");
  };

  const auto n_docs = static_cast<double>(records.size());
  for (const auto& [field, fs] : spec.text) {
    require_field(field, &RawItemRecord::text_fields);
    std::vector<std::map<std::string, std::size_t>> counts(records.size());
    std::map<std::string, std::size_t> df;
    for (std::size_t r = 0; r < records.size(); ++r) {
      const auto it = records[r].text_fields.find(field);
      if (it == records[r].text_fields.end()) continue;
      for (auto& tok : tokenize(it->second)) ++counts[r][tok];
      for (const auto& [tok, c] : counts[r]) ++df[tok];
    }
    std::map<std::string, Eigen::Index> column;
    for (const auto& [tok, d] : df) {
      if (d < fs.min_df) continue;
      const double upper = fs.mode == TextMode::Binary ? 1.0 : inf;
      column[tok] = add_column(field + ":" + tok, field, fs.is_mutable, 0.0, upper);
    }
    for (std::size_t r = 0; r < records.size(); ++r)
      for (const auto& [tok, c] : counts[r]) {
        const auto col = column.find(tok);
        if (col == column.end()) continue;
        double value = 1.0;
        if (fs.mode == TextMode::TermFrequency) value = static_cast<double>(c);
        if (fs.mode == TextMode::TfIdf)
          value = static_cast<double>(c) * (std::log((1.0 + n_docs) / (1.0 + static_cast<double>(df[tok]))) + 1.0);
        triplets.emplace_back(static_cast<Eigen::Index>(r), col->second, value);
      }
  }

  for (const auto& [field, fs] : spec.categorical) {
    require_field(field, &RawItemRecord::categorical_fields);
    std::set<std::string> values;
    for (const auto& r : records)
      if (auto it = r.categorical_fields.find(field); it != r.categorical_fields.end()) values.insert(it->second);
    std::map<std::string, Eigen::Index> column;
    for (const auto& v : values) column[v] = add_column(field + "=" + v, field, fs.is_mutable, 0.0, 1.0);
    for (std::size_t r = 0; r < records.size(); ++r)
      if (auto it = records[r].categorical_fields.find(field); it != records[r].categorical_fields.end())
        triplets.emplace_back(static_cast<Eigen::Index>(r), column.at(it->second), 1.0);
  }

  for (const auto& [field, fs] : spec.numeric) {
    require_field(field, &RawItemRecord::numeric_fields);
    double min_v = inf, max_v = -inf;
    for (const auto& r : records)
      if (auto it = r.numeric_fields.find(field); it != r.numeric_fields.end()) {
        if (!std::isfinite(it->second)) throw DataError("non-finite numeric field '" + field + "'");
        min_v = std::min(min_v, it->second);
        max_v = std::max(max_v, it->second);
      }
    const auto col = add_column(field, field, fs.is_mutable, 0.0, 1.0);
    for (std::size_t r = 0; r < records.size(); ++r)
      if (auto it = records[r].numeric_fields.find(field); it != records[r].numeric_fields.end()) {
        const double value = max_v > min_v ? (it->second - min_v) / (max_v - min_v) : 0.0;
        if (value != 0.0) triplets.emplace_back(static_cast<Eigen::Index>(r), col, value);
      }
  }

  const auto f = static_cast<Eigen::Index>(out.features.size());
  Catalog::SparseRows features(static_cast<Eigen::Index>(records.size()), f);
  features.setFromTriplets(triplets.begin(), triplets.end());
  std::optional<FeatureBounds<double>> bounds;
  if (spec.bounded)
    bounds = FeatureBounds<double>{Eigen::Map<Eigen::VectorXd>(lo.data(), f), Eigen::Map<Eigen::VectorXd>(hi.data(), f)};
  out.catalog = Catalog(std::move(features), std::move(mask), std::move(bounds));
  return out;
}

GroupingSpec GroupingSpec::from_json(const json& j) {
  GroupingSpec spec;
  try {
    const auto strategy = j.value("strategy", std::string("activity"));
    if (strategy == "activity" || strategy == "activity_quantile") {
      spec.strategy = GroupingStrategy::ActivityQuantile;
    } else if (strategy == "metadata" || strategy == "metadata_quantile") {
      spec.strategy = GroupingStrategy::MetadataQuantile;
      spec.field = j.at("field").get<std::string>();
    } else {
      throw ConfigError("unknown grouping strategy '" + strategy + "'");
    }
    spec.n_groups = j.value("n_groups", std::size_t{5});
  } catch (const json::exception& e) {
    throw ConfigError("grouping spec: " + std::string(e.what()));
  }
  if (spec.n_groups == 0) throw ConfigError("grouping needs at least one group");
  return spec;
}

json GroupingSpec::to_json() const {
  json j{{"strategy", strategy == GroupingStrategy::ActivityQuantile ? "activity" : "metadata"},
         {"n_groups", n_groups}};
  if (strategy == GroupingStrategy::MetadataQuantile) j["field"] = field;
  return j;
}

std::vector<std::vector<UserId>> group_users(const Ratings& ratings, const UserMetadata* metadata,
                                             const GroupingSpec& spec) {
  if (spec.n_groups == 0) throw ConfigError("grouping needs at least one group");
  const std::size_t n = ratings.num_users();
  std::vector<double> key(n);
  for (UserId u = 0; u < n; ++u) {
    if (spec.strategy == GroupingStrategy::ActivityQuantile) {
      key[u] = static_cast<double>(ratings.ratings(u).size());
      continue;
    }
    if (!metadata || u >= metadata->size())
      throw DataError("grouping by '" + spec.field + "' needs user metadata");
    const auto it = (*metadata)[u].find(spec.field);
    if (it == (*metadata)[u].end())
      throw DataError("user " + std::to_string(u) + " has no metadata field '" + spec.field + "'");
    key[u] = it->second;
  }
  std::vector<UserId> order(n);
  std::iota(order.begin(), order.end(), UserId{0});
  std::stable_sort(order.begin(), order.end(), [&](UserId a, UserId b) { return key[a] < key[b]; });

  std::vector<std::vector<UserId>> groups(spec.n_groups);
  const std::size_t base = n / spec.n_groups, extra = n % spec.n_groups;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < spec.n_groups; ++g) {
    const std::size_t size = base + (g < extra ? 1 : 0);
    groups[g].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                     order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(groups[g].begin(), groups[g].end());
    pos += size;
  }
  return groups;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_users == 0 || spec.n_items == 0 || spec.n_features == 0)
    throw ConfigError("synthetic data needs positive sizes");
  if (!(spec.density > 0 && spec.density <= 1)) throw ConfigError("density must lie in (0, 1]");
  if (!(spec.feature_density > 0 && spec.feature_density <= 1))
    throw ConfigError("feature density must lie in (0, 1]");
  if (spec.rating_lo > spec.rating_hi) throw ConfigError("empty rating range");
  if (!(spec.quality_spread >= 0)) throw ConfigError("quality spread must be non-negative");

  Rng rng(spec.seed);
  Dataset data;
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    data.items.items.intern("i" + std::to_string(i));
    const double quality = spec.quality_spread > 0 ? std::exp(spec.quality_spread * standard_normal(rng)) : 1.0;
    for (std::size_t c = 0; c < spec.n_features; ++c) {
      if (uniform_unit(rng) >= spec.feature_density) continue;
      // (0, 1]: a drawn feature is never an explicit zero.
      const double value = quality * (1.0 - uniform_unit(rng));
      triplets.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c), value);
    }
  }
  for (std::size_t c = 0; c < spec.n_features; ++c) data.items.features.push_back({"f" + std::to_string(c), "synthetic"});
  Catalog::SparseRows features(static_cast<Eigen::Index>(spec.n_items), static_cast<Eigen::Index>(spec.n_features));
  features.setFromTriplets(triplets.begin(), triplets.end());
  data.items.catalog = Catalog(std::move(features), std::vector<bool>(spec.n_features, true));

  const auto span = static_cast<std::uint64_t>(spec.rating_hi - spec.rating_lo + 1);
  std::vector<std::vector<Rating<double>>> per_user(spec.n_users);
  data.metadata.resize(spec.n_users);
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    data.users.intern("u" + std::to_string(u));
    data.metadata[u]["age"] = static_cast<double>(18 + uniform_index(rng, 53));
    for (std::size_t i = 0; i < spec.n_items; ++i) {
      if (uniform_unit(rng) >= spec.density) continue;
      const double r = static_cast<double>(spec.rating_lo + static_cast<int>(uniform_index(rng, span)));
      per_user[u].push_back({i, r});
    }
  }
  data.ratings = Ratings(std::move(per_user));
  return data;
}

}  // namespace recourse
