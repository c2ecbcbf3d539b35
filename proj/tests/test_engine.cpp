#include <doctest.h>

#include <numeric>

#include "oracles.hpp"
#include "recourse/engine.hpp"
#include "recourse/errors.hpp"

using namespace recourse;

namespace {

Vector<double> vec(std::initializer_list<double> xs) {
  Vector<double> v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

std::vector<UserId> all_users(std::size_t n) {
  std::vector<UserId> out(n);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

}  // namespace

TEST_CASE("loss and gradient examples") {
  SUBCASE("v = v_orig, nobody active") {
    auto lg = loss_and_gradient<double>(vec({1, 2}), vec({1, 2}), {}, 0.3);
    CHECK(lg.loss == 0.0);
    CHECK(lg.grad == vec({0, 0}));
  }
  SUBCASE("one profile, no penalty") {
    std::vector<UserProfile<double>> active{{0, vec({2, -1})}};
    auto lg = loss_and_gradient<double>(vec({0, 0}), vec({0, 0}), active, 0.0);
    CHECK(lg.loss == 0.0);
    CHECK(lg.grad == vec({-2, 1}));
  }
  SUBCASE("pure L1 term") {
    auto lg = loss_and_gradient<double>(vec({1, 0}), vec({0, 0}), {}, 0.5);
    CHECK(lg.loss == 0.5);
    CHECK(lg.grad == vec({0.5, 0}));
  }
  SUBCASE("immutable features get no gradient") {
    std::vector<UserProfile<double>> active{{0, vec({2, -1})}};
    auto lg = loss_and_gradient<double>(vec({0, 0}), vec({0, 0}), active, 0.0, {true, false});
    CHECK(lg.grad == vec({-2, 0}));
  }
  SUBCASE("dimension mismatch") {
    std::vector<UserProfile<double>> active{{0, vec({2, -1, 0})}};
    CHECK_THROWS_AS(loss_and_gradient<double>(vec({0, 0}), vec({0, 0}), active, 0.0), DataError);
  }
}

TEST_CASE("compute_recourse on the two-feature hand example") {
  // i0 = (1,0), i1 = (0,1), a = i2 = (0,0); the user rated i0 with 2 so w = (2,0).
  DenseMatrix<double> m(3, 2);
  m << 1, 0, 0, 1, 0, 0;
  const auto cat = ItemCatalog<double>::from_dense(m);
  RatingStore<double> ratings({{{0, 2.0}}});
  RecourseRequest<double> req;
  req.item = 2;
  req.target_group = {0};
  req.config.k = 1;
  req.config.lambda = 0;
  req.config.exclude_rated = false;

  const auto res = compute_recourse(cat, ratings, req);
  CHECK(res.stop_reason == StopReason::AllSatisfied);
  CHECK(res.success_rate_full == 1.0);
  CHECK(res.baseline_success_full == 0.0);
  // Each step adds lr * 2 to v[0]; success needs 2 v[0] > 2 (a tie loses to i0).
  CHECK(res.v_converged[0] > 1.0);
  CHECK(res.v_converged[0] <= 1.0 + 0.02 + 1e-12);
  CHECK(res.v_converged[1] == 0.0);
  CHECK(res.iterations == doctest::Approx(51).epsilon(0.02));
  CHECK(res.v_new == res.v_converged);
  CHECK(res.changed_indices == std::vector<Eigen::Index>{0});
}

TEST_CASE("compute_recourse trivial cases") {
  DenseMatrix<double> m(3, 2);
  m << 1, 0, 0, 1, 0, 0;
  const auto cat = ItemCatalog<double>::from_dense(m);
  RatingStore<double> ratings({{{0, 2.0}}});
  RecourseRequest<double> req;
  req.target_group = {0};
  req.config.k = 1;
  req.config.exclude_rated = false;

  SUBCASE("already in the top-k") {
    req.item = 0;
    const auto res = compute_recourse(cat, ratings, req);
    CHECK(res.iterations == 0);
    CHECK(res.v_new == res.v_original);
    CHECK(res.changed_indices.empty());
    CHECK(res.success_rate_full == 1.0);
  }
  SUBCASE("overwhelming penalty leaves the item alone") {
    req.item = 2;
    req.config.lambda = 1e6;
    req.config.learning_rate = 1e-9;
    req.config.max_iterations = 50;
    const auto res = compute_recourse(cat, ratings, req);
    CHECK(res.v_new == res.v_original);
    CHECK(res.success_rate_full == res.baseline_success_full);
  }
  SUBCASE("raters are removed from the group") {
    req.item = 0;
    req.config.exclude_rated = true;
    CHECK_THROWS_AS(compute_recourse(cat, ratings, req), DataError);
  }
  SUBCASE("overflow reports a numeric error") {
    req.item = 2;
    req.config.lambda = 0;
    req.config.learning_rate = 1e308;
    CHECK_THROWS_AS(compute_recourse(cat, ratings, req), NumericError);
  }
  SUBCASE("invalid config") {
    req.item = 2;
    req.config.sample_fraction = 0;
    CHECK_THROWS_AS(compute_recourse(cat, ratings, req), ConfigError);
  }
}

TEST_CASE("hard_threshold examples") {
  RecourseConfig<double> cfg;
  SUBCASE("nothing changed") {
    const auto v = vec({1, 2, 3});
    auto out = hard_threshold(v, v, [](const Vector<double>&) { return 1.0; }, cfg);
    CHECK(out.v == v);
  }
  SUBCASE("keeps the change that matters") {
    Vector<double> orig = Vector<double>::Zero(8);
    Vector<double> conv = orig;
    conv[3] = 0.01;
    conv[7] = 5.0;
    auto success = [&](const Vector<double>& x) { return x[7] == 5.0 ? 1.0 : 0.0; };
    auto out = hard_threshold(conv, orig, success, cfg);
    CHECK(out.v[3] == 0.0);
    CHECK(out.v[7] == 5.0);
    CHECK(out.success_after == 1.0);
  }
  SUBCASE("zero starting success reverts everything") {
    auto out = hard_threshold(vec({1, 2}), vec({0, 0}), [](const Vector<double>&) { return 0.0; }, cfg);
    CHECK(out.v == vec({0, 0}));
  }
  SUBCASE("stops at the loss threshold") {
    // Each revert of changes 0..3 costs 0.1 success; 20% allows two.
    Vector<double> orig = Vector<double>::Zero(4);
    const auto conv = vec({1, 2, 3, 4});
    auto success = [&](const Vector<double>& x) {
      double s = 1.0;
      for (Eigen::Index i = 0; i < 4; ++i)
        if (x[i] == 0) s -= 0.1;
      return s;
    };
    auto out = hard_threshold(conv, orig, success, cfg);
    CHECK(out.v == vec({0, 0, 3, 4}));
    CHECK(out.success_after == doctest::Approx(0.8));
    CHECK_FALSE(out.max_changes_forced);

    cfg.max_changes = 1;
    auto capped = hard_threshold(conv, orig, success, cfg);
    CHECK(capped.v == vec({0, 0, 0, 4}));
    CHECK(capped.max_changes_forced);
    CHECK(capped.success_after == doctest::Approx(0.7));
  }
}

TEST_CASE("sample_users") {
  const auto group = all_users(40);
  CHECK(sample_users(group, 1.0, 3) == group);
  CHECK(sample_users(group, 0.005, 3).size() == 1);
  CHECK(sample_users(group, 0.2, 3).size() == 8);
  CHECK(sample_users(group, 0.2, 3) == sample_users(group, 0.2, 3));
  CHECK(sample_users(std::vector<UserId>{}, 0.5, 1).empty());

  // Smaller fractions draw subsets of larger ones under one seed.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto small = sample_users(group, 0.05, seed);
    const auto large = sample_users(group, 0.2, seed);
    CHECK(std::includes(large.begin(), large.end(), small.begin(), small.end()));
  }
}

TEST_CASE("property: recourse results respect the engine invariants") {
  oracle::Gen gen(21);
  int validity_checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    auto inst = gen.instance(gen.index(8, 20), gen.index(2, 8), gen.index(2, 10), false);
    const auto n_f = inst.num_features();
    std::vector<bool> mask(n_f, true);
    const bool masked = trial % 3 == 0;
    if (masked)
      for (std::size_t c = 0; c < n_f; ++c) mask[c] = gen.coin(0.6);
    DenseMatrix<double> m(static_cast<Eigen::Index>(inst.num_items()), static_cast<Eigen::Index>(n_f));
    for (std::size_t i = 0; i < inst.num_items(); ++i)
      for (std::size_t c = 0; c < n_f; ++c)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = inst.items[i][c];
    const auto cat = ItemCatalog<double>::from_dense(m, mask);
    const auto store = inst.store();

    RecourseRequest<double> req;
    req.item = gen.index(0, inst.num_items() - 1);
    req.target_group = all_users(inst.num_users());
    req.config.k = gen.index(1, 3);
    req.config.lambda = masked ? 0.1 : 0.0;
    req.config.learning_rate = 0.05;
    req.config.normalize_learning_rate = true;
    req.config.max_iterations = 20000;
    req.config.sample_fraction = gen.coin(0.5) ? 1.0 : 0.5;
    req.config.rng_seed = static_cast<std::uint64_t>(trial);
    req.config.exclude_rated = false;

    RecourseResult<double> res;
    try {
      res = compute_recourse(cat, store, req);
    } catch (const ConfigError&) {
      continue;  // too few competitors for k
    }

    for (std::size_t c = 0; c < n_f; ++c)
      if (!mask[c]) CHECK(res.v_new[static_cast<Eigen::Index>(c)] == res.v_original[static_cast<Eigen::Index>(c)]);
    CHECK(changed_features(res.v_new, res.v_original).size() <=
          changed_features(res.v_converged, res.v_original).size());
    CHECK(res.success_rate_sample >= 0.8 * res.success_rate_sample_converged - 1e-12);

    const auto again = compute_recourse(cat, store, req);
    CHECK(again.v_new == res.v_new);
    CHECK(again.sample == res.sample);
    CHECK(again.iterations == res.iterations);

    // Validity: with no penalty, no mask and every sampled profile nonzero,
    // each step strictly raises every unsatisfied user's score.
    bool all_nonzero = true;
    for (auto u : res.sample)
      if (build_profile(store, cat, u).w.isZero()) all_nonzero = false;
    if (!masked && all_nonzero) {
      CHECK(res.success_rate_sample_converged == 1.0);
      ++validity_checked;
    }

    // Full-group success agrees with a brute-force recount. Profiles stay
    // as they were before the change, including for raters of the item.
    auto moved = inst;
    for (std::size_t c = 0; c < n_f; ++c) moved.items[req.item][c] = res.v_new[static_cast<Eigen::Index>(c)];
    std::size_t expected = 0;
    for (auto u : res.group) {
      const auto w = oracle::profile(inst, u);
      const double s = oracle::dot(moved.items[req.item], w);
      std::size_t ahead = 0;
      for (std::size_t j = 0; j < inst.num_items(); ++j) {
        if (j == req.item) continue;
        const double sj = oracle::dot(inst.items[j], w);
        if (sj > s || (sj == s && j < req.item)) ++ahead;
      }
      expected += ahead < req.config.k ? 1 : 0;
    }
    CHECK(res.success_rate_full ==
          doctest::Approx(static_cast<double>(expected) / static_cast<double>(res.group.size())));
  }
  CHECK(validity_checked > 10);
}
