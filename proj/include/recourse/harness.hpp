#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "recourse/data.hpp"
#include "recourse/engine.hpp"
#include "recourse/metrics.hpp"

namespace recourse {

struct ExperimentSpec {
  std::vector<std::size_t> target_ranks{11, 21, 51, 101};
  std::vector<double> sample_fractions{0.005, 0.01, 0.02, 0.05, 0.10, 0.20};
  std::size_t k = 10;
  double pre_exposure_cap = 0.01;  // max fraction of the group already seeing the item in its top-k
  GroupingSpec grouping;
  RecourseConfig<double> recourse;  // k and sample_fraction are overridden per cell
  std::uint64_t rng_seed = 0;
  double rbo_p = 0.5;
  std::optional<std::size_t> rbo_depth;

  void validate() const;
  static ExperimentSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

nlohmann::json config_to_json(const RecourseConfig<double>& config);
/// Overlays the keys present in `j` onto `base`.
RecourseConfig<double> config_from_json(const nlohmann::json& j, RecourseConfig<double> base = {});

struct ItemSelection {
  ItemId item = 0;
  double mean_rank = 0;  // 1-based, averaged over users who can see the item
};

/// Item whose mean rank over the group is closest to `target_rank`, skipping
/// items already in the top-k of more than cap * |group| users. Ties go to
/// the smaller ItemId.
ItemSelection select_item_at_rank(const Catalog& catalog, const Ratings& ratings, std::span<const UserId> group,
                                  std::size_t target_rank, std::size_t k, double cap, bool exclude_rated = true);

/// Same, from precomputed rankings of every group member.
ItemSelection select_item_at_rank(const UserRankings& rankings, std::size_t num_items, std::size_t target_rank,
                                  std::size_t k, double cap);

struct ExperimentCell {
  std::size_t group = 0;
  std::size_t target_rank = 0;
  double sample_fraction = 0;
  std::optional<ItemId> item;
  std::string item_id;
  double mean_rank = 0;
  std::size_t group_size = 0;
  std::size_t sample_size = 0;
  MetricsReport metrics;
  double baseline_success = 0;
  double success_rate_sample = 0;
  double success_rate_sample_converged = 0;
  std::size_t l0_converged = 0;
  std::size_t iterations = 0;
  std::string stop_reason;
  bool others_order_preserved = true;  // rankings changed only in the item's position
  double wall_ms = 0;
  std::string error;

  bool ok() const { return error.empty(); }
};

struct ExperimentAggregate {
  std::size_t cells = 0;
  std::size_t failed = 0;
  double success_rate = 0;
  double l0_fraction = 0;
  double rbo_mean = 0;
};

struct ExperimentReport {
  std::vector<ExperimentCell> cells;

  ExperimentAggregate aggregate() const;
};

struct RunOptions {
  std::size_t jobs = 1;
  bool record_timing = false;  // off: wall_ms stays 0 and reports are byte-reproducible
};

ExperimentReport run_experiment(const Dataset& data, const ExperimentSpec& spec, const RunOptions& options = {});

void write_report_csv(std::ostream& out, const ExperimentReport& report);
nlohmann::json report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::json& j);
void write_report(const ExperimentReport& report, const std::string& format, const std::filesystem::path& path);

/// One SVG per target rank (success rate vs sample fraction, a line per
/// group) plus `l0_fraction.svg`. Returns the files written.
std::vector<std::filesystem::path> render_charts(const ExperimentReport& report, const std::filesystem::path& dir);

}  // namespace recourse
