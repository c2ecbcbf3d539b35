#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

#include "recourse/core.hpp"

namespace recourse {

struct MetricsReport {
  double success_rate = 0;
  std::size_t l0_changes = 0;
  double l0_fraction = 0;
  double l1_change = 0;
  double rbo_mean = 0;
  double rbo_min = 0;
};

/// Zero-based position of `item` in the user's ranking, counting only items
/// that rank before it. std::nullopt when the item is excluded for the user.
template <typename Scalar>
std::optional<std::size_t> item_position(const ItemCatalog<Scalar>& catalog, const RatingStore<Scalar>& ratings,
                                         const Vector<Scalar>& w, UserId user, ItemId item, bool exclude_rated) {
  if (exclude_rated && ratings.has_rated(user, item)) return std::nullopt;
  const Vector<Scalar> scores = catalog.scores(w);
  const auto rated = ratings.rated_items(user);
  std::size_t ahead = 0;
  for (ItemId j = 0; j < static_cast<ItemId>(scores.size()); ++j) {
    if (j == item) continue;
    if (exclude_rated && std::binary_search(rated.begin(), rated.end(), j)) continue;
    if (ranks_before(scores[j], j, scores[item], item)) ++ahead;
  }
  return ahead;
}

/// Fraction of the group whose top-k contains `item`.
template <typename Scalar>
double success_rate(const ItemCatalog<Scalar>& catalog_after, const RatingStore<Scalar>& ratings, ItemId item,
                    std::span<const UserId> group, std::size_t k, bool exclude_rated = true) {
  if (group.empty()) throw DataError("success rate over an empty group");
  catalog_after.check_item(item);
  std::size_t hits = 0;
  for (UserId u : group) {
    const auto profile = build_profile(ratings, catalog_after, u);
    const auto pos = item_position(catalog_after, ratings, profile.w, u, item, exclude_rated);
    if (pos && *pos < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(group.size());
}

struct FeatureDelta {
  std::size_t l0 = 0;
  double l1 = 0;
};

template <typename DerivedA, typename DerivedB>
FeatureDelta feature_delta(const Eigen::MatrixBase<DerivedA>& v_new, const Eigen::MatrixBase<DerivedB>& v_old,
                           double zero_tol = 1e-9) {
  if (v_new.size() != v_old.size()) throw DataError("feature_delta on vectors of different length");
  FeatureDelta out;
  for (Eigen::Index i = 0; i < v_new.size(); ++i) {
    const double d = std::abs(static_cast<double>(v_new.coeff(i)) - static_cast<double>(v_old.coeff(i)));
    if (d > zero_tol) ++out.l0;
    out.l1 += d;
  }
  return out;
}

/// Truncated rank-biased overlap at depth min(|a|, |b|, depth):
///   (1 - p) * sum_{d=1..D} p^{d-1} * |a[:d] ∩ b[:d]| / d
template <typename Id>
double rbo(std::span<const Id> list_a, std::span<const Id> list_b, double p,
           std::optional<std::size_t> depth = std::nullopt) {
  if (!(p > 0 && p < 1)) throw ConfigError("rbo persistence p must lie in (0, 1)");
  auto check_unique = [](std::span<const Id> list) {
    std::unordered_set<Id> seen(list.begin(), list.end());
    if (seen.size() != list.size()) throw DataError("ranked list contains duplicate ids");
  };
  check_unique(list_a);
  check_unique(list_b);

  std::size_t d = std::min(list_a.size(), list_b.size());
  if (depth) d = std::min(d, *depth);
  std::unordered_set<Id> seen_a, seen_b;
  std::size_t overlap = 0;
  double weight = 1.0;  // p^{k-1}
  double sum = 0.0;
  for (std::size_t k = 1; k <= d; ++k) {
    const Id& x = list_a[k - 1];
    const Id& y = list_b[k - 1];
    if (x == y) {
      ++overlap;
    } else {
      if (seen_b.count(x)) ++overlap;
      if (seen_a.count(y)) ++overlap;
    }
    seen_a.insert(x);
    seen_b.insert(y);
    sum += weight * static_cast<double>(overlap) / static_cast<double>(k);
    weight *= p;
  }
  return (1.0 - p) * sum;
}

template <typename Id>
double rbo(const std::vector<Id>& a, const std::vector<Id>& b, double p,
           std::optional<std::size_t> depth = std::nullopt) {
  return rbo(std::span<const Id>(a), std::span<const Id>(b), p, depth);
}

struct SideEffect {
  double mean = 0;
  double min = 0;
};

using UserRankings = std::map<UserId, std::vector<ItemId>>;

/// Per-user RBO between rankings before and after a change, aggregated.
inline SideEffect side_effect_report(const UserRankings& before, const UserRankings& after, double p,
                                     std::optional<std::size_t> depth = std::nullopt) {
  if (before.size() != after.size()) throw DataError("side-effect report over different user sets");
  if (before.empty()) throw DataError("side-effect report over an empty user set");
  SideEffect out{0.0, std::numeric_limits<double>::infinity()};
  auto it_after = after.begin();
  for (const auto& [user, list] : before) {
    if (it_after->first != user) throw DataError("side-effect report over different user sets");
    const double value = rbo(list, it_after->second, p, depth);
    out.mean += value;
    out.min = std::min(out.min, value);
    ++it_after;
  }
  out.mean /= static_cast<double>(before.size());
  return out;
}

}  // namespace recourse
