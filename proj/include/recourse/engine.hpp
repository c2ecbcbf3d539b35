#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "recourse/core.hpp"
#include "recourse/random.hpp"

namespace recourse {

template <typename Scalar>
struct RecourseConfig {
  std::size_t k = 10;                      // desired rank bound (top-k)
  Scalar lambda = Scalar(0.1);             // L1 weight on the feature change
  Scalar learning_rate = Scalar(0.01);
  std::size_t max_iterations = 500;
  Scalar iht_success_loss = Scalar(0.2);   // max relative sample-success loss while thresholding
  std::size_t iht_chunk = 1;               // features reverted per thresholding step
  Scalar sample_fraction = Scalar(1);
  std::uint64_t rng_seed = 0;
  std::optional<std::size_t> max_changes;  // hard cap on changed features, applied after thresholding
  bool exclude_rated = true;
  // Divide the learning rate by the largest entry of the sample's aggregate
  // profile, making the step size independent of the rating/feature scale.
  bool normalize_learning_rate = false;
  std::size_t plateau_window = 10;
  Scalar plateau_tolerance = Scalar(1e-9);

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid recourse config: " + what); };
    if (k == 0) fail("k must be positive");
    if (!(lambda >= 0) || !std::isfinite(lambda)) fail("lambda must be non-negative");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
    if (max_iterations == 0) fail("max_iterations must be positive");
    if (!(iht_success_loss >= 0 && iht_success_loss <= 1)) fail("iht_success_loss must lie in [0, 1]");
    if (iht_chunk == 0) fail("iht_chunk must be positive");
    if (!(sample_fraction > 0 && sample_fraction <= 1)) fail("sample_fraction must lie in (0, 1]");
    if (max_changes && *max_changes == 0) fail("max_changes must be positive when set");
    if (plateau_window == 0) fail("plateau_window must be positive");
  }
};

template <typename Scalar>
struct RecourseRequest {
  ItemId item = 0;
  std::vector<UserId> target_group;
  RecourseConfig<Scalar> config;
};

/// One gradient step. `loss` is the objective at the point the step started
/// from; the counts are taken after the active set was refreshed.
template <typename Scalar>
struct TraceEntry {
  std::size_t iteration;
  Scalar loss;
  std::size_t active_set_size;
  std::size_t satisfied_count;
};

enum class StopReason { AllSatisfied, MaxIterations, Plateau };

inline const char* to_string(StopReason reason) {
  switch (reason) {
    case StopReason::AllSatisfied: return "all_satisfied";
    case StopReason::MaxIterations: return "max_iterations";
    case StopReason::Plateau: return "plateau";
  }
  return "unknown";
}

template <typename Scalar>
struct RecourseResult {
  ItemId item = 0;
  Vector<Scalar> v_original;
  Vector<Scalar> v_converged;  // end of gradient descent, before thresholding
  Vector<Scalar> v_new;        // final recourse
  Scalar baseline_success_full = 0;
  Scalar success_rate_full = 0;
  Scalar success_rate_sample = 0;
  Scalar success_rate_sample_converged = 0;
  std::vector<Eigen::Index> changed_indices;
  std::vector<TraceEntry<Scalar>> trace;
  std::size_t iterations = 0;
  StopReason stop_reason = StopReason::AllSatisfied;
  std::vector<UserId> group;           // target group after preprocessing
  std::vector<UserId> sample;          // users the loss was optimized over
  std::vector<UserId> removed_raters;  // dropped because they already rated the item
  bool max_changes_forced = false;     // the change cap overrode the success-loss rule
};

template <typename Scalar>
struct LossGradient {
  Scalar loss;
  Vector<Scalar> grad;
};

/// Penalized objective -<v, aggregate> + lambda * |v - v_orig|_1 and its
/// subgradient (sign(0) = 0), with the gradient projected onto the mutable
/// features. An empty mask means every feature is mutable.
template <typename Scalar>
LossGradient<Scalar> penalized_loss(const Vector<Scalar>& v, const Vector<Scalar>& v_orig,
                                    const Vector<Scalar>& aggregate, Scalar lambda,
                                    const std::vector<bool>& mutable_mask = {}) {
  if (v.size() != v_orig.size() || v.size() != aggregate.size())
    throw DataError("loss evaluated on vectors of mismatched dimension");
  if (!mutable_mask.empty() && mutable_mask.size() != static_cast<std::size_t>(v.size()))
    throw DataError("mutability mask does not match feature dimension");
  const auto delta = (v - v_orig).array();
  LossGradient<Scalar> out;
  out.loss = -ordered_dot(v, aggregate) + lambda * delta.abs().sum();
  out.grad = -aggregate + lambda * delta.sign().matrix();
  for (std::size_t i = 0; i < mutable_mask.size(); ++i)
    if (!mutable_mask[i]) out.grad[static_cast<Eigen::Index>(i)] = Scalar(0);
  return out;
}

template <typename Scalar>
LossGradient<Scalar> loss_and_gradient(const Vector<Scalar>& v, const Vector<Scalar>& v_orig,
                                       std::span<const UserProfile<Scalar>> active_profiles, Scalar lambda,
                                       const std::vector<bool>& mutable_mask = {}) {
  Vector<Scalar> aggregate = Vector<Scalar>::Zero(v.size());
  for (const auto& p : active_profiles) {
    if (p.w.size() != v.size()) throw DataError("profile dimension does not match the item");
    aggregate += p.w;
  }
  return penalized_loss(v, v_orig, aggregate, lambda, mutable_mask);
}

template <typename Scalar>
struct ThresholdOutcome {
  Vector<Scalar> v;
  Scalar success_before = 0;  // success of the converged vector
  Scalar success_after = 0;
  bool max_changes_forced = false;
};

/// Indices where `a` and `b` differ exactly, ascending.
template <typename Scalar>
std::vector<Eigen::Index> changed_features(const Vector<Scalar>& a, const Vector<Scalar>& b) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) out.push_back(i);
  return out;
}

/// Iterative hard thresholding: revert the smallest changes back to the
/// original values, `iht_chunk` at a time, until the next revert would push
/// success below (1 - iht_success_loss) of its starting value. A set
/// `max_changes` then keeps reverting past that point.
template <typename Scalar, typename SuccessFn>
ThresholdOutcome<Scalar> hard_threshold(const Vector<Scalar>& v_conv, const Vector<Scalar>& v_orig,
                                        SuccessFn&& evaluate_success, const RecourseConfig<Scalar>& config) {
  if (v_conv.size() != v_orig.size()) throw DataError("hard_threshold on vectors of mismatched dimension");
  std::vector<Eigen::Index> order = changed_features(v_conv, v_orig);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(v_conv[a] - v_orig[a]) < std::abs(v_conv[b] - v_orig[b]);
  });

  ThresholdOutcome<Scalar> out{v_conv, Scalar(0), Scalar(0), false};
  out.success_before = evaluate_success(out.v);
  out.success_after = out.success_before;
  // Success rates are ratios of counts; the slack keeps e.g. 4/5 vs 0.8 * 1 from
  // failing on rounding.
  const Scalar floor = (Scalar(1) - config.iht_success_loss) * out.success_before - Scalar(1e-12);
  const std::size_t chunk = std::max<std::size_t>(config.iht_chunk, 1);

  std::size_t kept_from = 0;  // order[kept_from..] are still changed
  while (kept_from < order.size()) {
    const std::size_t end = std::min(order.size(), kept_from + chunk);
    for (std::size_t j = kept_from; j < end; ++j) out.v[order[j]] = v_orig[order[j]];
    const Scalar s = evaluate_success(out.v);
    if (s < floor) {
      for (std::size_t j = kept_from; j < end; ++j) out.v[order[j]] = v_conv[order[j]];
      break;
    }
    out.success_after = s;
    kept_from = end;
  }

  if (config.max_changes) {
    while (order.size() - kept_from > *config.max_changes) {
      out.v[order[kept_from]] = v_orig[order[kept_from]];
      ++kept_from;
      out.max_changes_forced = true;
    }
    if (out.max_changes_forced) out.success_after = evaluate_success(out.v);
  }
  return out;
}

/// Uniform sample without replacement of ceil(fraction * |group|) users. The
/// draw is a partial Fisher-Yates shuffle, so with a fixed seed a smaller
/// fraction always yields a subset of a larger one. Returned ascending.
inline std::vector<UserId> sample_users(std::span<const UserId> group, double fraction, std::uint64_t seed) {
  if (group.empty()) return {};
  const auto n = group.size();
  auto m = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  m = std::clamp<std::size_t>(m, 1, n);
  std::vector<UserId> pool(group.begin(), group.end());
  Rng rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_index(rng, n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

namespace detail {

/// Profiles and fixed top-k thresholds of a set of users for one item. Only
/// the item's own score changes during recourse, so thresholds are computed
/// once.
template <typename Scalar>
struct UserTargets {
  ItemId item;
  std::vector<UserProfile<Scalar>> profiles;
  std::vector<TopKThreshold<Scalar>> thresholds;

  UserTargets(const ItemCatalog<Scalar>& catalog, const RatingStore<Scalar>& ratings, ItemId a,
              std::span<const UserId> users, std::size_t k, bool exclude_rated)
      : item(a), profiles(build_profiles(ratings, catalog, users)) {
    thresholds.reserve(users.size());
    for (const auto& p : profiles)
      thresholds.push_back(topk_threshold(catalog, p, k, a, exclude_rated, ratings));
  }

  bool satisfied(std::size_t idx, const Vector<Scalar>& v) const {
    return thresholds[idx].admits(ordered_dot(v, profiles[idx].w), item);
  }

  std::size_t count_satisfied(std::span<const std::size_t> indices, const Vector<Scalar>& v) const {
    std::size_t n = 0;
    for (auto idx : indices) n += satisfied(idx, v) ? 1 : 0;
    return n;
  }
};

}  // namespace detail

/// Finds a sparse change to the item's features that moves it into the top-k
/// of as many target users as possible: subgradient descent on the penalized
/// loss over the not-yet-satisfied sampled users, then hard thresholding.
template <typename Scalar>
RecourseResult<Scalar> compute_recourse(const ItemCatalog<Scalar>& catalog, const RatingStore<Scalar>& ratings,
                                        const RecourseRequest<Scalar>& request) {
  const auto& cfg = request.config;
  cfg.validate();
  const ItemId a = request.item;
  catalog.check_item(a);
  if (static_cast<std::size_t>(catalog.num_items()) < cfg.k + 1)
    throw ConfigError("catalog needs at least k+1 items");

  RecourseResult<Scalar> result;
  result.item = a;
  std::vector<UserId> group = request.target_group;
  std::sort(group.begin(), group.end());
  group.erase(std::unique(group.begin(), group.end()), group.end());
  for (UserId u : group) {
    ratings.check_user(u);
    if (cfg.exclude_rated && ratings.has_rated(u, a))
      result.removed_raters.push_back(u);
    else
      result.group.push_back(u);
  }
  if (result.group.empty()) throw DataError("target group is empty after preprocessing");
  result.sample = sample_users(result.group, static_cast<double>(cfg.sample_fraction), cfg.rng_seed);

  const detail::UserTargets<Scalar> targets(catalog, ratings, a, result.group, cfg.k, cfg.exclude_rated);
  std::vector<std::size_t> all_idx(result.group.size());
  std::vector<std::size_t> sample_idx;
  for (std::size_t i = 0, s = 0; i < result.group.size(); ++i) {
    all_idx[i] = i;
    if (s < result.sample.size() && result.sample[s] == result.group[i]) {
      sample_idx.push_back(i);
      ++s;
    }
  }
  auto rate = [](std::size_t hits, std::size_t n) { return static_cast<Scalar>(hits) / static_cast<Scalar>(n); };

  result.v_original = catalog.row(a);
  const Vector<Scalar>& v_orig = result.v_original;
  Vector<Scalar> v = v_orig;
  result.baseline_success_full = rate(targets.count_satisfied(all_idx, v), all_idx.size());

  std::vector<std::size_t> active;
  auto refresh_active = [&] {
    active.clear();
    for (auto idx : sample_idx)
      if (!targets.satisfied(idx, v)) active.push_back(idx);
  };
  refresh_active();

  Scalar step = cfg.learning_rate;
  if (cfg.normalize_learning_rate) {
    Vector<Scalar> sample_sum = Vector<Scalar>::Zero(v.size());
    for (auto idx : sample_idx) sample_sum += targets.profiles[idx].w;
    step /= sample_sum.cwiseAbs().maxCoeff() + Scalar(1e-12);
  }

  Vector<Scalar> aggregate = Vector<Scalar>::Zero(v.size());
  std::vector<std::size_t> aggregate_of;  // active set the aggregate was summed over
  std::vector<Scalar> losses;
  result.stop_reason = StopReason::AllSatisfied;
  for (std::size_t iter = 1; !active.empty(); ++iter) {
    if (iter > cfg.max_iterations) {
      result.stop_reason = StopReason::MaxIterations;
      break;
    }
    if (active != aggregate_of) {
      aggregate.setZero();
      for (auto idx : active) aggregate += targets.profiles[idx].w;
      aggregate_of = active;
    }
    const auto lg = penalized_loss(v, v_orig, aggregate, cfg.lambda, catalog.mutable_mask());
    if (!std::isfinite(lg.loss))
      throw NumericError("non-finite loss at iteration " + std::to_string(iter));
    v = catalog.clamp(v - step * lg.grad);
    if (!all_finite(v)) throw NumericError("non-finite feature values at iteration " + std::to_string(iter));
    refresh_active();
    result.iterations = iter;
    result.trace.push_back({iter, lg.loss, active.size(), sample_idx.size() - active.size()});

    losses.push_back(lg.loss);
    if (losses.size() > cfg.plateau_window) {
      const Scalar prev = losses[losses.size() - 1 - cfg.plateau_window];
      const Scalar change = std::abs(lg.loss - prev);
      if (change <= cfg.plateau_tolerance * std::max(Scalar(1), std::abs(lg.loss)) && !active.empty()) {
        result.stop_reason = StopReason::Plateau;
        break;
      }
    }
  }
  result.v_converged = v;

  auto sample_success = [&](const Vector<Scalar>& x) {
    return rate(targets.count_satisfied(sample_idx, x), sample_idx.size());
  };
  auto thresholded = hard_threshold(result.v_converged, v_orig, sample_success, cfg);
  result.v_new = std::move(thresholded.v);
  result.max_changes_forced = thresholded.max_changes_forced;
  result.success_rate_sample_converged = thresholded.success_before;
  result.success_rate_sample = thresholded.success_after;
  result.success_rate_full = rate(targets.count_satisfied(all_idx, result.v_new), all_idx.size());
  result.changed_indices = changed_features(result.v_new, v_orig);
  return result;
}

}  // namespace recourse
