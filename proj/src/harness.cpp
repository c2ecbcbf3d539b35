#include "recourse/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <thread>

#include "recourse/random.hpp"

namespace recourse {

using nlohmann::json;

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  jobs = std::min(std::max<std::size_t>(jobs, 1), n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  workers.reserve(jobs);
  for (std::size_t t = 0; t < jobs; ++t)
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

UserRankings rank_group(const Catalog& catalog, const Ratings& ratings, std::span<const UserId> users,
                        bool exclude_rated) {
  UserRankings out;
  for (UserId u : users) out[u] = rank_items(catalog, build_profile(ratings, catalog, u), exclude_rated, ratings);
  return out;
}

std::vector<ItemId> without(const std::vector<ItemId>& list, ItemId item) {
  std::vector<ItemId> out;
  out.reserve(list.size());
  for (ItemId i : list)
    if (i != item) out.push_back(i);
  return out;
}

struct GroupState {
  std::vector<UserId> users;
  UserRankings before;
  std::vector<std::optional<ItemSelection>> selections;  // per target rank
  std::vector<std::string> selection_errors;
};

ExperimentCell run_cell(const Dataset& data, const ExperimentSpec& spec, const GroupState& state, std::size_t g,
                        std::size_t rank_idx, double fraction, const RunOptions& options) {
  ExperimentCell cell;
  cell.group = g;
  cell.target_rank = spec.target_ranks[rank_idx];
  cell.sample_fraction = fraction;
  cell.group_size = state.users.size();
  const auto start = std::chrono::steady_clock::now();
  try {
    if (!state.selections[rank_idx]) throw DataError(state.selection_errors[rank_idx]);
    const auto& selection = *state.selections[rank_idx];
    const auto& catalog = data.items.catalog;
    cell.item = selection.item;
    cell.item_id = data.items.items.name(selection.item);
    cell.mean_rank = selection.mean_rank;

    RecourseRequest<double> request;
    request.item = selection.item;
    request.target_group = state.users;
    request.config = spec.recourse;
    request.config.k = spec.k;
    request.config.sample_fraction = fraction;
    // Shared across fractions so that samples are nested as the fraction grows.
    request.config.rng_seed = mix_seed(spec.rng_seed, g, cell.target_rank);
    const auto result = compute_recourse(catalog, data.ratings, request);

    const bool exclude = request.config.exclude_rated;
    const Catalog after = catalog.with_row(selection.item, result.v_new);
    cell.sample_size = result.sample.size();
    cell.metrics.success_rate = success_rate(after, data.ratings, selection.item, result.group, spec.k, exclude);
    const auto delta = feature_delta(result.v_new, result.v_original);
    cell.metrics.l0_changes = delta.l0;
    cell.metrics.l0_fraction = static_cast<double>(delta.l0) / static_cast<double>(catalog.num_features());
    cell.metrics.l1_change = delta.l1;
    cell.l0_converged = feature_delta(result.v_converged, result.v_original).l0;

    UserRankings before, post;
    for (UserId u : result.group) before[u] = state.before.at(u);
    post = rank_group(after, data.ratings, result.group, exclude);
    const auto side = side_effect_report(before, post, spec.rbo_p, spec.rbo_depth);
    cell.metrics.rbo_mean = side.mean;
    cell.metrics.rbo_min = side.min;
    for (const auto& [u, list] : before)
      if (without(list, selection.item) != without(post.at(u), selection.item)) cell.others_order_preserved = false;

    cell.baseline_success = result.baseline_success_full;
    cell.success_rate_sample = result.success_rate_sample;
    cell.success_rate_sample_converged = result.success_rate_sample_converged;
    cell.iterations = result.iterations;
    cell.stop_reason = to_string(result.stop_reason);
  } catch (const std::exception& e) {
    cell.error = e.what();
    if (cell.error.empty()) cell.error = "unknown error";
  }
  if (options.record_timing)
    cell.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

}  // namespace

json config_to_json(const RecourseConfig<double>& c) {
  json j{{"k", c.k},
         {"lambda", c.lambda},
         {"learning_rate", c.learning_rate},
         {"max_iterations", c.max_iterations},
         {"iht_success_loss", c.iht_success_loss},
         {"iht_chunk", c.iht_chunk},
         {"sample_fraction", c.sample_fraction},
         {"rng_seed", c.rng_seed},
         {"exclude_rated", c.exclude_rated},
         {"normalize_learning_rate", c.normalize_learning_rate},
         {"plateau_window", c.plateau_window},
         {"plateau_tolerance", c.plateau_tolerance}};
  j["max_changes"] = c.max_changes ? json(*c.max_changes) : json(nullptr);
  return j;
}

RecourseConfig<double> config_from_json(const json& j, RecourseConfig<double> c) {
  try {
    c.k = j.value("k", c.k);
    c.lambda = j.value("lambda", c.lambda);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.iht_success_loss = j.value("iht_success_loss", c.iht_success_loss);
    c.iht_chunk = j.value("iht_chunk", c.iht_chunk);
    c.sample_fraction = j.value("sample_fraction", c.sample_fraction);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.exclude_rated = j.value("exclude_rated", c.exclude_rated);
    c.normalize_learning_rate = j.value("normalize_learning_rate", c.normalize_learning_rate);
    c.plateau_window = j.value("plateau_window", c.plateau_window);
    c.plateau_tolerance = j.value("plateau_tolerance", c.plateau_tolerance);
    if (j.contains("max_changes"))
      c.max_changes = j["max_changes"].is_null() ? std::nullopt : std::optional(j["max_changes"].get<std::size_t>());
  } catch (const json::exception& e) {
    throw ConfigError("recourse config: " + std::string(e.what()));
  }
  return c;
}

void ExperimentSpec::validate() const {
  for (auto r : target_ranks)
    if (r <= k) throw ConfigError("target rank " + std::to_string(r) + " must exceed k=" + std::to_string(k));
  for (auto f : sample_fractions)
    if (!(f > 0 && f <= 1)) throw ConfigError("sample fraction " + format_double(f) + " outside (0, 1]");
  if (!(pre_exposure_cap >= 0 && pre_exposure_cap <= 1)) throw ConfigError("pre_exposure_cap outside [0, 1]");
  if (!(rbo_p > 0 && rbo_p < 1)) throw ConfigError("rbo_p outside (0, 1)");
  if (grouping.n_groups == 0) throw ConfigError("grouping needs at least one group");
  auto c = recourse;
  c.k = k;
  c.validate();
}

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  ExperimentSpec spec;
  try {
    spec.target_ranks = j.value("target_ranks", spec.target_ranks);
    spec.sample_fractions = j.value("sample_fractions", spec.sample_fractions);
    spec.k = j.value("k", spec.k);
    spec.pre_exposure_cap = j.value("pre_exposure_cap", spec.pre_exposure_cap);
    if (j.contains("grouping")) spec.grouping = GroupingSpec::from_json(j["grouping"]);
    if (j.contains("recourse")) spec.recourse = config_from_json(j["recourse"], spec.recourse);
    spec.rng_seed = j.value("rng_seed", spec.rng_seed);
    spec.rbo_p = j.value("rbo_p", spec.rbo_p);
    if (j.contains("rbo_depth") && !j["rbo_depth"].is_null()) spec.rbo_depth = j["rbo_depth"].get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError("experiment spec: " + std::string(e.what()));
  }
  spec.validate();
  return spec;
}

json ExperimentSpec::to_json() const {
  json j{{"target_ranks", target_ranks},
         {"sample_fractions", sample_fractions},
         {"k", k},
         {"pre_exposure_cap", pre_exposure_cap},
         {"grouping", grouping.to_json()},
         {"recourse", config_to_json(recourse)},
         {"rng_seed", rng_seed},
         {"rbo_p", rbo_p}};
  j["rbo_depth"] = rbo_depth ? json(*rbo_depth) : json(nullptr);
  return j;
}

ItemSelection select_item_at_rank(const UserRankings& rankings, std::size_t num_items, std::size_t target_rank,
                                  std::size_t k, double cap) {
  if (rankings.empty()) throw DataError("item selection over an empty group");
  std::vector<double> rank_sum(num_items, 0.0);
  std::vector<std::size_t> seen(num_items, 0), in_topk(num_items, 0);
  for (const auto& [user, list] : rankings)
    for (std::size_t pos = 0; pos < list.size(); ++pos) {
      const ItemId item = list[pos];
      if (item >= num_items) throw DataError("ranking refers to unknown item");
      rank_sum[item] += static_cast<double>(pos + 1);
      ++seen[item];
      if (pos < k) ++in_topk[item];
    }
  const double max_exposed = cap * static_cast<double>(rankings.size());
  std::optional<ItemSelection> best;
  double best_gap = std::numeric_limits<double>::infinity();
  for (ItemId i = 0; i < num_items; ++i) {
    if (seen[i] == 0 || static_cast<double>(in_topk[i]) > max_exposed) continue;
    const double mean = rank_sum[i] / static_cast<double>(seen[i]);
    const double gap = std::abs(mean - static_cast<double>(target_rank));
    if (gap < best_gap) {
      best_gap = gap;
      best = ItemSelection{i, mean};
    }
  }
  if (!best) throw DataError("no eligible item near rank " + std::to_string(target_rank));
  return *best;
}

ItemSelection select_item_at_rank(const Catalog& catalog, const Ratings& ratings, std::span<const UserId> group,
                                  std::size_t target_rank, std::size_t k, double cap, bool exclude_rated) {
  if (group.empty()) throw DataError("item selection over an empty group");
  return select_item_at_rank(rank_group(catalog, ratings, group, exclude_rated),
                             static_cast<std::size_t>(catalog.num_items()), target_rank, k, cap);
}

ExperimentReport run_experiment(const Dataset& data, const ExperimentSpec& spec, const RunOptions& options) {
  spec.validate();
  ExperimentReport report;
  if (spec.sample_fractions.empty() || spec.target_ranks.empty()) return report;

  const auto groups = group_users(data.ratings, data.metadata.empty() ? nullptr : &data.metadata, spec.grouping);
  const auto& catalog = data.items.catalog;
  std::vector<GroupState> states(groups.size());
  parallel_for(groups.size(), options.jobs, [&](std::size_t g) {
    auto& st = states[g];
    st.users = groups[g];
    st.selections.resize(spec.target_ranks.size());
    st.selection_errors.resize(spec.target_ranks.size());
    if (st.users.empty()) {
      std::fill(st.selection_errors.begin(), st.selection_errors.end(), "empty user group");
      return;
    }
    st.before = rank_group(catalog, data.ratings, st.users, spec.recourse.exclude_rated);
    for (std::size_t r = 0; r < spec.target_ranks.size(); ++r) {
      try {
        st.selections[r] = select_item_at_rank(st.before, static_cast<std::size_t>(catalog.num_items()),
                                               spec.target_ranks[r], spec.k, spec.pre_exposure_cap);
      } catch (const Error& e) {
        st.selection_errors[r] = e.what();
      }
    }
  });

  struct Slot {
    std::size_t group, rank_idx;
    double fraction;
  };
  std::vector<Slot> slots;
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t r = 0; r < spec.target_ranks.size(); ++r)
      for (double f : spec.sample_fractions) slots.push_back({g, r, f});
  report.cells.resize(slots.size());
  parallel_for(slots.size(), options.jobs, [&](std::size_t i) {
    const auto& s = slots[i];
    report.cells[i] = run_cell(data, spec, states[s.group], s.group, s.rank_idx, s.fraction, options);
  });
  return report;
}

ExperimentAggregate ExperimentReport::aggregate() const {
  ExperimentAggregate agg;
  agg.cells = cells.size();
  std::size_t ok = 0;
  for (const auto& c : cells) {
    if (!c.ok()) {
      ++agg.failed;
      continue;
    }
    ++ok;
    agg.success_rate += c.metrics.success_rate;
    agg.l0_fraction += c.metrics.l0_fraction;
    agg.rbo_mean += c.metrics.rbo_mean;
  }
  if (ok > 0) {
    agg.success_rate /= static_cast<double>(ok);
    agg.l0_fraction /= static_cast<double>(ok);
    agg.rbo_mean /= static_cast<double>(ok);
  }
  return agg;
}

void write_report_csv(std::ostream& out, const ExperimentReport& report) {
  out << "group,target_rank,sample_fraction,item,success_rate,l0,l0_fraction,l1,rbo_mean,rbo_min,iterations,wall_ms\n";
  for (const auto& c : report.cells) {
    out << c.group << ',' << c.target_rank << ',' << format_double(c.sample_fraction) << ',' << c.item_id << ',';
    if (c.ok())
      out << format_double(c.metrics.success_rate) << ',' << c.metrics.l0_changes << ','
          << format_double(c.metrics.l0_fraction) << ',' << format_double(c.metrics.l1_change) << ','
          << format_double(c.metrics.rbo_mean) << ',' << format_double(c.metrics.rbo_min) << ',' << c.iterations;
    else
      out << ",,,,,,";
    out << ',' << format_double(c.wall_ms) << '\n';
  }
}

json report_to_json(const ExperimentReport& report) {
  json cells = json::array();
  for (const auto& c : report.cells) {
    json j{{"group", c.group},
           {"target_rank", c.target_rank},
           {"sample_fraction", c.sample_fraction},
           {"item_id", c.item_id},
           {"mean_rank", c.mean_rank},
           {"group_size", c.group_size},
           {"sample_size", c.sample_size},
           {"success_rate", c.metrics.success_rate},
           {"l0", c.metrics.l0_changes},
           {"l0_fraction", c.metrics.l0_fraction},
           {"l1", c.metrics.l1_change},
           {"rbo_mean", c.metrics.rbo_mean},
           {"rbo_min", c.metrics.rbo_min},
           {"baseline_success", c.baseline_success},
           {"success_rate_sample", c.success_rate_sample},
           {"success_rate_sample_converged", c.success_rate_sample_converged},
           {"l0_converged", c.l0_converged},
           {"iterations", c.iterations},
           {"stop_reason", c.stop_reason},
           {"others_order_preserved", c.others_order_preserved},
           {"wall_ms", c.wall_ms},
           {"error", c.error}};
    j["item"] = c.item ? json(*c.item) : json(nullptr);
    cells.push_back(std::move(j));
  }
  const auto agg = report.aggregate();
  return {{"cells", cells},
          {"aggregate",
           {{"cells", agg.cells},
            {"failed", agg.failed},
            {"success_rate", agg.success_rate},
            {"l0_fraction", agg.l0_fraction},
            {"rbo_mean", agg.rbo_mean}}}};
}

ExperimentReport report_from_json(const json& j) {
  ExperimentReport report;
  try {
    for (const auto& cj : j.at("cells")) {
      ExperimentCell c;
      c.group = cj.at("group").get<std::size_t>();
      c.target_rank = cj.at("target_rank").get<std::size_t>();
      c.sample_fraction = cj.at("sample_fraction").get<double>();
      if (!cj.at("item").is_null()) c.item = cj["item"].get<ItemId>();
      c.item_id = cj.at("item_id").get<std::string>();
      c.mean_rank = cj.at("mean_rank").get<double>();
      c.group_size = cj.at("group_size").get<std::size_t>();
      c.sample_size = cj.at("sample_size").get<std::size_t>();
      c.metrics.success_rate = cj.at("success_rate").get<double>();
      c.metrics.l0_changes = cj.at("l0").get<std::size_t>();
      c.metrics.l0_fraction = cj.at("l0_fraction").get<double>();
      c.metrics.l1_change = cj.at("l1").get<double>();
      c.metrics.rbo_mean = cj.at("rbo_mean").get<double>();
      c.metrics.rbo_min = cj.at("rbo_min").get<double>();
      c.baseline_success = cj.at("baseline_success").get<double>();
      c.success_rate_sample = cj.at("success_rate_sample").get<double>();
      c.success_rate_sample_converged = cj.at("success_rate_sample_converged").get<double>();
      c.l0_converged = cj.at("l0_converged").get<std::size_t>();
      c.iterations = cj.at("iterations").get<std::size_t>();
      c.stop_reason = cj.at("stop_reason").get<std::string>();
      c.others_order_preserved = cj.at("others_order_preserved").get<bool>();
      c.wall_ms = cj.at("wall_ms").get<double>();
      c.error = cj.at("error").get<std::string>();
      report.cells.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw DataError("report json: " + std::string(e.what()));
  }
  return report;
}

void write_report(const ExperimentReport& report, const std::string& format, const std::filesystem::path& path) {
  if (format != "csv" && format != "json") throw ConfigError("unknown report format '" + format + "'");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  if (format == "csv")
    write_report_csv(out, report);
  else
    out << report_to_json(report).dump(2) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace recourse
