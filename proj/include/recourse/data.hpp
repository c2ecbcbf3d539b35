#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "recourse/core.hpp"

namespace recourse {

using Catalog = ItemCatalog<double>;
using Ratings = RatingStore<double>;

/// Bidirectional map between external string ids and dense indices,
/// assigned in insertion order.
class IdDictionary {
 public:
  IdDictionary() = default;
  static IdDictionary from_names(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  std::size_t intern(const std::string& name);
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t at(std::string_view name) const;
  const std::string& name(std::size_t index) const { return names_.at(index); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct RatingsTable {
  Ratings store;
  IdDictionary users;
  IdDictionary items;
};

/// Parses `user_id,item_id,rating` CSV (header optional). When `items` is
/// given, item ids must already exist in it; otherwise a new dictionary is
/// built. `users` seeds the user dictionary; new users are appended in order
/// of first appearance.
RatingsTable parse_ratings(std::istream& in, const IdDictionary* items = nullptr, IdDictionary users = {});
RatingsTable load_ratings(const std::filesystem::path& path, const IdDictionary* items = nullptr,
                          IdDictionary users = {});
void save_ratings(const std::filesystem::path& path, const Ratings& ratings, const IdDictionary& users,
                  const IdDictionary& items);

struct RawItemRecord {
  std::string external_id;
  std::map<std::string, std::string> text_fields;
  std::map<std::string, std::string> categorical_fields;
  std::map<std::string, double> numeric_fields;
};

std::vector<RawItemRecord> parse_item_records(std::istream& in);
std::vector<RawItemRecord> load_item_records(const std::filesystem::path& path);

enum class TextMode { Binary, TermFrequency, TfIdf };

struct TextFieldSpec {
  TextMode mode = TextMode::TfIdf;
  std::size_t min_df = 1;
  bool is_mutable = true;
};

struct FieldSpec {
  bool is_mutable = true;
};

/// How raw records become feature columns. Column order: text fields, then
/// categorical, then numeric, each group ordered by field name; text
/// vocabularies and categorical values are sorted lexicographically.
struct FeaturizerSpec {
  std::map<std::string, TextFieldSpec> text;
  std::map<std::string, FieldSpec> categorical;
  std::map<std::string, FieldSpec> numeric;
  bool bounded = true;  // emit [0,1] / [0,inf) boxes for the derived columns

  static FeaturizerSpec from_json(const nlohmann::json& j);
};

struct FeatureInfo {
  std::string name;
  std::string source_field;
};

struct FeaturizedCatalog {
  Catalog catalog;
  IdDictionary items;
  std::vector<FeatureInfo> features;
};

/// Lowercases ASCII letters, turns ASCII punctuation into separators and
/// splits on whitespace. Non-ASCII bytes are kept inside tokens.
std::vector<std::string> tokenize(std::string_view text);

FeaturizedCatalog featurize(const std::vector<RawItemRecord>& records, const FeaturizerSpec& spec);

/// Writes `catalog.csv` (header `f=<int>`, then `item_index,feature_index,value`
/// triples in row-major order) and the `catalog.json` sidecar.
void save_catalog(const std::filesystem::path& dir, const FeaturizedCatalog& catalog);
FeaturizedCatalog load_catalog(const std::filesystem::path& dir);

/// Per-user numeric metadata, indexed by UserId. Empty when unavailable.
using UserMetadata = std::vector<std::map<std::string, double>>;

enum class GroupingStrategy { ActivityQuantile, MetadataQuantile };

struct GroupingSpec {
  GroupingStrategy strategy = GroupingStrategy::ActivityQuantile;
  std::string field;  // metadata key, for MetadataQuantile
  std::size_t n_groups = 5;

  static GroupingSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Sorts users by (key, UserId) and cuts the order into n_groups contiguous
/// blocks whose sizes differ by at most one; earlier blocks take the
/// remainder.
std::vector<std::vector<UserId>> group_users(const Ratings& ratings, const UserMetadata* metadata,
                                             const GroupingSpec& spec);

struct Dataset {
  FeaturizedCatalog items;
  Ratings ratings;
  IdDictionary users;
  UserMetadata metadata;
};

struct SyntheticSpec {
  std::size_t n_users = 200;
  std::size_t n_items = 300;
  std::size_t n_features = 50;
  double density = 0.05;          // probability that a (user, item) pair is rated
  int rating_lo = 1;              // ratings are uniform integers in [lo, hi]
  int rating_hi = 5;
  double feature_density = 0.2;   // probability that an item feature is nonzero
  double quality_spread = 0.0;    // log-normal sigma of a per-item scale applied to its whole row
  std::uint64_t seed = 0;
};

/// Random non-negative sparse features, all mutable and unbounded, with
/// ratings and an `age` metadata field per user.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Dataset directory: catalog.csv + catalog.json, ratings.csv and an
/// optional users.csv (`user_id,<field>...`).
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);

}  // namespace recourse
