#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "recourse/errors.hpp"

namespace recourse {

using ItemId = std::size_t;
using UserId = std::size_t;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Dot product summed over the nonzero entries of `a` in ascending index
/// order. Every score in the library goes through this ordering (or the
/// equivalent sparse-row walk), so a score computed from a dense feature
/// vector is bit-identical to the same row's score inside a catalog.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar ordered_dot(const Eigen::MatrixBase<DerivedA>& a,
                                      const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  Scalar sum(0);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const Scalar x = a.coeff(i);
    if (x != Scalar(0)) sum += x * b.coeff(i);
  }
  return sum;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& values) {
  return values.derived().array().isFinite().all();
}

/// Per-feature box; infinite ends mean unbounded on that side.
template <typename Scalar>
struct FeatureBounds {
  Vector<Scalar> lo;
  Vector<Scalar> hi;

  static FeatureBounds unbounded(Eigen::Index f) {
    constexpr Scalar inf = std::numeric_limits<Scalar>::infinity();
    return {Vector<Scalar>::Constant(f, -inf), Vector<Scalar>::Constant(f, inf)};
  }
};

/// Item feature matrix (one sparse row per item) plus the per-feature
/// mutability mask and optional bounds. Immutable after construction.
template <typename Scalar>
class ItemCatalog {
 public:
  using SparseRows = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

  ItemCatalog() = default;

  ItemCatalog(SparseRows features, std::vector<bool> mutable_mask,
              std::optional<FeatureBounds<Scalar>> bounds = std::nullopt)
      : features_(std::move(features)),
        mutable_mask_(std::move(mutable_mask)),
        bounds_(std::move(bounds)) {
    features_.makeCompressed();
    validate();
  }

  /// All-mutable catalog from a dense matrix; handy for tests and tools.
  static ItemCatalog from_dense(const DenseMatrix<Scalar>& dense,
                                std::vector<bool> mutable_mask = {},
                                std::optional<FeatureBounds<Scalar>> bounds = std::nullopt) {
    if (mutable_mask.empty()) mutable_mask.assign(static_cast<std::size_t>(dense.cols()), true);
    SparseRows sparse = dense.sparseView();
    return ItemCatalog(std::move(sparse), std::move(mutable_mask), std::move(bounds));
  }

  Eigen::Index num_items() const { return features_.rows(); }
  Eigen::Index num_features() const { return features_.cols(); }

  const SparseRows& features() const { return features_; }
  const std::vector<bool>& mutable_mask() const { return mutable_mask_; }
  const std::optional<FeatureBounds<Scalar>>& bounds() const { return bounds_; }

  bool is_mutable(Eigen::Index feature) const {
    return mutable_mask_[static_cast<std::size_t>(feature)];
  }

  void check_item(ItemId item) const {
    if (item >= static_cast<ItemId>(num_items()))
      throw DataError("unknown item id " + std::to_string(item));
  }

  Vector<Scalar> row(ItemId item) const {
    check_item(item);
    Vector<Scalar> out = Vector<Scalar>::Zero(num_features());
    for (typename SparseRows::InnerIterator it(features_, static_cast<Eigen::Index>(item)); it; ++it)
      out[it.col()] = it.value();
    return out;
  }

  /// Score of a single catalog row against a profile vector.
  Scalar row_score(ItemId item, const Vector<Scalar>& w) const {
    Scalar sum(0);
    for (typename SparseRows::InnerIterator it(features_, static_cast<Eigen::Index>(item)); it; ++it)
      if (it.value() != Scalar(0)) sum += it.value() * w[it.col()];
    return sum;
  }

  /// Scores of every item against `w`, in ItemId order.
  Vector<Scalar> scores(const Vector<Scalar>& w) const {
    if (w.size() != num_features())
      throw DataError("profile has " + std::to_string(w.size()) + " features, catalog has " +
                      std::to_string(num_features()));
    Vector<Scalar> out(num_items());
    for (Eigen::Index i = 0; i < num_items(); ++i) out[i] = row_score(static_cast<ItemId>(i), w);
    return out;
  }

  template <typename Derived>
  Vector<Scalar> clamp(const Eigen::MatrixBase<Derived>& v) const {
    if (!bounds_) return v;
    return v.cwiseMax(bounds_->lo).cwiseMin(bounds_->hi);
  }

  /// Copy of this catalog with one row replaced.
  ItemCatalog with_row(ItemId item, const Vector<Scalar>& values) const {
    check_item(item);
    if (values.size() != num_features()) throw DataError("replacement row has wrong dimension");
    std::vector<Eigen::Triplet<Scalar>> triplets;
    triplets.reserve(static_cast<std::size_t>(features_.nonZeros() + values.size()));
    for (Eigen::Index r = 0; r < num_items(); ++r) {
      if (r == static_cast<Eigen::Index>(item)) {
        for (Eigen::Index c = 0; c < values.size(); ++c)
          if (values[c] != Scalar(0)) triplets.emplace_back(r, c, values[c]);
        continue;
      }
      for (typename SparseRows::InnerIterator it(features_, r); it; ++it)
        triplets.emplace_back(r, it.col(), it.value());
    }
    SparseRows replaced(num_items(), num_features());
    replaced.setFromTriplets(triplets.begin(), triplets.end());
    return ItemCatalog(std::move(replaced), mutable_mask_, bounds_);
  }

 private:
  void validate() const {
    const auto f = static_cast<std::size_t>(features_.cols());
    if (mutable_mask_.size() != f)
      throw DataError("mutability mask has length " + std::to_string(mutable_mask_.size()) +
                      ", expected " + std::to_string(f));
    for (Eigen::Index k = 0; k < features_.nonZeros(); ++k)
      if (!std::isfinite(features_.valuePtr()[k])) throw DataError("catalog contains a non-finite feature");
    if (!bounds_) return;
    const auto& b = *bounds_;
    if (b.lo.size() != features_.cols() || b.hi.size() != features_.cols())
      throw DataError("bounds dimension does not match feature count");
    for (Eigen::Index c = 0; c < features_.cols(); ++c)
      if (std::isnan(b.lo[c]) || std::isnan(b.hi[c]) || b.lo[c] > b.hi[c])
        throw DataError("invalid bounds at feature " + std::to_string(c));
    for (Eigen::Index r = 0; r < features_.rows(); ++r) {
      // Implicit zeros must also respect the box.
      Vector<Scalar> dense = row(static_cast<ItemId>(r));
      if ((dense.array() < b.lo.array()).any() || (dense.array() > b.hi.array()).any())
        throw DataError("item " + std::to_string(r) + " lies outside the feature bounds");
    }
  }

  SparseRows features_;
  std::vector<bool> mutable_mask_;
  std::optional<FeatureBounds<Scalar>> bounds_;
};

template <typename Scalar>
struct Rating {
  ItemId item;
  Scalar value;
};

/// Per-user rating lists, indexed by dense UserId.
template <typename Scalar>
class RatingStore {
 public:
  RatingStore() = default;

  explicit RatingStore(std::vector<std::vector<Rating<Scalar>>> per_user)
      : per_user_(std::move(per_user)), sorted_items_(per_user_.size()) {
    for (std::size_t u = 0; u < per_user_.size(); ++u) {
      auto& items = sorted_items_[u];
      items.reserve(per_user_[u].size());
      for (const auto& r : per_user_[u]) {
        if (!std::isfinite(r.value))
          throw DataError("non-finite rating for user " + std::to_string(u));
        items.push_back(r.item);
      }
      std::sort(items.begin(), items.end());
      if (std::adjacent_find(items.begin(), items.end()) != items.end())
        throw DataError("duplicate rating for user " + std::to_string(u));
    }
  }

  std::size_t num_users() const { return per_user_.size(); }

  std::size_t num_ratings() const {
    std::size_t n = 0;
    for (const auto& r : per_user_) n += r.size();
    return n;
  }

  void check_user(UserId user) const {
    if (user >= per_user_.size()) throw DataError("unknown user id " + std::to_string(user));
  }

  std::span<const Rating<Scalar>> ratings(UserId user) const {
    check_user(user);
    return per_user_[user];
  }

  /// Items the user rated, ascending.
  std::span<const ItemId> rated_items(UserId user) const {
    check_user(user);
    return sorted_items_[user];
  }

  bool has_rated(UserId user, ItemId item) const {
    const auto items = rated_items(user);
    return std::binary_search(items.begin(), items.end(), item);
  }

 private:
  std::vector<std::vector<Rating<Scalar>>> per_user_;
  std::vector<std::vector<ItemId>> sorted_items_;
};

/// Rating-weighted sum of a user's rated item rows. An item's score for the
/// user is its dot product with `w`.
template <typename Scalar>
struct UserProfile {
  UserId user = 0;
  Vector<Scalar> w;
};

template <typename Scalar>
UserProfile<Scalar> build_profile(const RatingStore<Scalar>& ratings, const ItemCatalog<Scalar>& catalog,
                                  UserId user) {
  using SparseRows = typename ItemCatalog<Scalar>::SparseRows;
  UserProfile<Scalar> profile{user, Vector<Scalar>::Zero(catalog.num_features())};
  for (const auto& r : ratings.ratings(user)) {
    catalog.check_item(r.item);
    for (typename SparseRows::InnerIterator it(catalog.features(), static_cast<Eigen::Index>(r.item)); it;
         ++it)
      profile.w[it.col()] += r.value * it.value();
  }
  return profile;
}

template <typename Scalar>
std::vector<UserProfile<Scalar>> build_profiles(const RatingStore<Scalar>& ratings,
                                                const ItemCatalog<Scalar>& catalog,
                                                std::span<const UserId> users) {
  std::vector<UserProfile<Scalar>> out;
  out.reserve(users.size());
  for (UserId u : users) out.push_back(build_profile(ratings, catalog, u));
  return out;
}

template <typename Derived>
typename Derived::Scalar score_item(const Eigen::MatrixBase<Derived>& item,
                                    const UserProfile<typename Derived::Scalar>& profile) {
  if (item.size() != profile.w.size())
    throw DataError("item has " + std::to_string(item.size()) + " features, profile has " +
                    std::to_string(profile.w.size()));
  return ordered_dot(item, profile.w);
}

/// Ranking order: higher score first, then smaller id.
template <typename Scalar>
constexpr bool ranks_before(Scalar score_a, ItemId a, Scalar score_b, ItemId b) {
  return score_a > score_b || (score_a == score_b && a < b);
}

/// Sorts item ids by (score desc, id asc), skipping excluded ids (ascending).
template <typename Scalar>
std::vector<ItemId> rank_scores(const Vector<Scalar>& scores, std::span<const ItemId> excluded = {}) {
  std::vector<ItemId> order;
  order.reserve(static_cast<std::size_t>(scores.size()));
  auto skip = excluded.begin();
  for (ItemId i = 0; i < static_cast<ItemId>(scores.size()); ++i) {
    while (skip != excluded.end() && *skip < i) ++skip;
    if (skip != excluded.end() && *skip == i) continue;
    order.push_back(i);
  }
  std::sort(order.begin(), order.end(),
            [&](ItemId a, ItemId b) { return ranks_before(scores[a], a, scores[b], b); });
  return order;
}

template <typename Scalar>
std::vector<ItemId> rank_items(const ItemCatalog<Scalar>& catalog, const UserProfile<Scalar>& profile,
                               bool exclude_rated, const RatingStore<Scalar>& ratings) {
  const Vector<Scalar> scores = catalog.scores(profile.w);
  if (!exclude_rated) return rank_scores(scores);
  return rank_scores(scores, ratings.rated_items(profile.user));
}

/// The k-th best competitor for one user. An item with a given score enters
/// the top-k iff it ranks before this competitor.
template <typename Scalar>
struct TopKThreshold {
  Scalar score;
  ItemId item;

  bool admits(Scalar candidate_score, ItemId candidate) const {
    return ranks_before(candidate_score, candidate, score, item);
  }
};

template <typename Scalar>
TopKThreshold<Scalar> topk_threshold(const ItemCatalog<Scalar>& catalog, const UserProfile<Scalar>& profile,
                                     std::size_t k, ItemId omit, bool exclude_rated,
                                     const RatingStore<Scalar>& ratings) {
  if (k == 0) throw ConfigError("k must be positive");
  const Vector<Scalar> scores = catalog.scores(profile.w);
  std::vector<ItemId> competitors;
  competitors.reserve(static_cast<std::size_t>(scores.size()));
  for (ItemId i = 0; i < static_cast<ItemId>(scores.size()); ++i) {
    if (i == omit) continue;
    if (exclude_rated && ratings.has_rated(profile.user, i)) continue;
    competitors.push_back(i);
  }
  if (competitors.size() < k)
    throw ConfigError("only " + std::to_string(competitors.size()) + " competitors for user " +
                      std::to_string(profile.user) + ", need k=" + std::to_string(k));
  auto kth = competitors.begin() + static_cast<std::ptrdiff_t>(k - 1);
  std::nth_element(competitors.begin(), kth, competitors.end(),
                   [&](ItemId a, ItemId b) { return ranks_before(scores[a], a, scores[b], b); });
  return {scores[*kth], *kth};
}

}  // namespace recourse
