#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "recourse/data.hpp"
#include "recourse/engine.hpp"
#include "recourse/harness.hpp"
#include "recourse/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace recourse;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ItemId resolve_item(const Dataset& data, const std::string& id) {
  if (auto idx = data.items.items.find(id)) return *idx;
  try {
    std::size_t used = 0;
    const auto idx = std::stoull(id, &used);
    if (used == id.size() && idx < data.items.items.size()) return static_cast<ItemId>(idx);
  } catch (const std::exception&) {
  }
  throw DataError("unknown item '" + id + "'");
}

struct FeaturizeArgs {
  std::string items, spec, out, ratings, users;
};

int run_featurize(const FeaturizeArgs& a) {
  const auto spec = FeaturizerSpec::from_json(read_json_file(a.spec));
  Dataset data;
  data.items = featurize(load_item_records(a.items), spec);
  save_catalog(a.out, data.items);
  if (!a.ratings.empty()) {
    if (!a.users.empty()) fs::copy_file(a.users, fs::path(a.out) / "users.csv", fs::copy_options::overwrite_existing);
    auto table = load_ratings(a.ratings, &data.items.items);
    save_ratings(fs::path(a.out) / "ratings.csv", table.store, table.users, data.items.items);
    load_dataset(a.out);  // validates ratings against users.csv and the catalog
  }
  std::cout << "featurized " << data.items.items.size() << " items into " << data.items.catalog.num_features()
            << " features -> " << a.out << '\n';
  return kOk;
}

struct SynthArgs {
  SyntheticSpec spec;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  const auto data = generate_synthetic(a.spec);
  save_dataset(a.out, data);
  std::cout << "wrote " << a.spec.n_users << " users, " << a.spec.n_items << " items, "
            << data.ratings.num_ratings() << " ratings -> " << a.out << '\n';
  return kOk;
}

struct RecourseArgs {
  std::string data, item, out;
  std::size_t group = 0;
  std::size_t n_groups = 5;
  std::string group_by;
  RecourseConfig<double> config;
  std::optional<std::size_t> max_changes;
  bool include_rated = false;
};

int run_recourse(RecourseArgs a) {
  const auto data = load_dataset(a.data);
  GroupingSpec grouping;
  grouping.n_groups = a.n_groups;
  if (!a.group_by.empty()) {
    grouping.strategy = GroupingStrategy::MetadataQuantile;
    grouping.field = a.group_by;
  }
  const auto groups = group_users(data.ratings, data.metadata.empty() ? nullptr : &data.metadata, grouping);
  if (a.group >= groups.size()) throw ConfigError("group index out of range");
  a.config.max_changes = a.max_changes;
  a.config.exclude_rated = !a.include_rated;

  RecourseRequest<double> request{resolve_item(data, a.item), groups[a.group], a.config};
  const auto result = compute_recourse(data.items.catalog, data.ratings, request);
  const auto after = data.items.catalog.with_row(request.item, result.v_new);
  const auto delta = feature_delta(result.v_new, result.v_original);

  json changes = json::array();
  for (auto i : result.changed_indices)
    changes.push_back({{"index", i},
                       {"feature", data.items.features[static_cast<std::size_t>(i)].name},
                       {"from", result.v_original[i]},
                       {"to", result.v_new[i]}});
  json trace = json::array();
  for (const auto& t : result.trace)
    trace.push_back({{"iteration", t.iteration},
                     {"loss", t.loss},
                     {"active_set_size", t.active_set_size},
                     {"satisfied_count", t.satisfied_count}});
  auto names = [&](const std::vector<UserId>& users) {
    json arr = json::array();
    for (auto u : users) arr.push_back(data.users.name(u));
    return arr;
  };
  json out{{"item", data.items.items.name(request.item)},
           {"group", a.group},
           {"config", config_to_json(a.config)},
           {"group_size", result.group.size()},
           {"sample", names(result.sample)},
           {"removed_raters", names(result.removed_raters)},
           {"baseline_success", result.baseline_success_full},
           {"success_rate_full", success_rate(after, data.ratings, request.item, result.group, a.config.k,
                                              a.config.exclude_rated)},
           {"success_rate_sample", result.success_rate_sample},
           {"success_rate_sample_converged", result.success_rate_sample_converged},
           {"l0", delta.l0},
           {"l0_fraction", static_cast<double>(delta.l0) / static_cast<double>(data.items.catalog.num_features())},
           {"l1", delta.l1},
           {"l0_converged", feature_delta(result.v_converged, result.v_original).l0},
           {"iterations", result.iterations},
           {"stop_reason", to_string(result.stop_reason)},
           {"max_changes_forced", result.max_changes_forced},
           {"changes", changes},
           {"trace", trace}};
  if (a.out.empty() || a.out == "-")
    std::cout << out.dump(2) << '\n';
  else
    write_json_file(a.out, out);
  std::cerr << "success " << result.success_rate_full << " over " << result.group.size() << " users, " << delta.l0
            << " features changed\n";
  return kOk;
}

struct ExperimentArgs {
  std::string data, spec, out;
  std::size_t jobs = 1;
  bool charts = false;
  bool timing = false;
};

int run_experiment_cmd(const ExperimentArgs& a) {
  const auto spec = ExperimentSpec::from_json(read_json_file(a.spec));
  const auto data = load_dataset(a.data);
  const auto report = run_experiment(data, spec, RunOptions{a.jobs, a.timing});
  fs::create_directories(a.out);
  write_report(report, "csv", fs::path(a.out) / "report.csv");
  write_report(report, "json", fs::path(a.out) / "report.json");
  if (a.charts) render_charts(report, fs::path(a.out) / "charts");
  const auto agg = report.aggregate();
  std::cerr << agg.cells << " cells (" << agg.failed << " failed): mean success " << agg.success_rate
            << ", mean l0 fraction " << agg.l0_fraction << ", mean rbo " << agg.rbo_mean << '\n';
  return kOk;
}

int run_report(const std::string& in, const std::string& format) {
  const auto report = report_from_json(read_json_file(fs::path(in) / "report.json"));
  if (format == "csv")
    write_report_csv(std::cout, report);
  else if (format == "json")
    std::cout << report_to_json(report).dump(2) << '\n';
  else
    throw ConfigError("unknown format '" + format + "'");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-level recourse for content-filtering recommenders"};
  app.require_subcommand(1);

  FeaturizeArgs fa;
  auto* featurize_cmd = app.add_subcommand("featurize", "Featurize JSONL item records into a catalog");
  featurize_cmd->add_option("--items", fa.items, "JSON Lines item records")->required()->check(CLI::ExistingFile);
  featurize_cmd->add_option("--spec", fa.spec, "Featurizer spec (JSON)")->required()->check(CLI::ExistingFile);
  featurize_cmd->add_option("--out", fa.out, "Output dataset directory")->required();
  featurize_cmd->add_option("--ratings", fa.ratings, "Ratings CSV to validate and copy alongside")
      ->check(CLI::ExistingFile);
  featurize_cmd->add_option("--users", fa.users, "users.csv metadata to copy alongside")->check(CLI::ExistingFile);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth_cmd->add_option("--users", sa.spec.n_users)->required();
  synth_cmd->add_option("--items", sa.spec.n_items)->required();
  synth_cmd->add_option("--features", sa.spec.n_features)->required();
  synth_cmd->add_option("--density", sa.spec.density)->required();
  synth_cmd->add_option("--feature-density", sa.spec.feature_density, "Fraction of nonzero item features");
  synth_cmd->add_option("--quality-spread", sa.spec.quality_spread, "Log-normal sigma of per-item feature scale");
  synth_cmd->add_option("--rating-min", sa.spec.rating_lo);
  synth_cmd->add_option("--rating-max", sa.spec.rating_hi);
  synth_cmd->add_option("--seed", sa.spec.seed);
  synth_cmd->add_option("--out", sa.out)->required();

  RecourseArgs ra;
  auto* recourse_cmd = app.add_subcommand("recourse", "Compute a recourse for one item and user group");
  recourse_cmd->add_option("--data", ra.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  recourse_cmd->add_option("--item", ra.item, "Item external id or index")->required();
  recourse_cmd->add_option("--group", ra.group, "Target group index");
  recourse_cmd->add_option("--groups", ra.n_groups, "Number of user groups");
  recourse_cmd->add_option("--group-by", ra.group_by, "Metadata field to group by (default: activity)");
  recourse_cmd->add_option("--k", ra.config.k);
  recourse_cmd->add_option("--sample", ra.config.sample_fraction);
  recourse_cmd->add_option("--lambda", ra.config.lambda);
  recourse_cmd->add_option("--lr", ra.config.learning_rate);
  recourse_cmd->add_option("--max-iters", ra.config.max_iterations);
  recourse_cmd->add_option("--iht-loss", ra.config.iht_success_loss);
  recourse_cmd->add_option("--iht-chunk", ra.config.iht_chunk);
  recourse_cmd->add_option("--max-changes", ra.max_changes);
  recourse_cmd->add_flag("--normalize-lr", ra.config.normalize_learning_rate);
  recourse_cmd->add_flag("--include-rated", ra.include_rated, "Keep users who already rated the item");
  recourse_cmd->add_option("--seed", ra.config.rng_seed);
  recourse_cmd->add_option("--out", ra.out, "Result JSON path ('-' for stdout)");

  ExperimentArgs ea;
  auto* experiment_cmd = app.add_subcommand("experiment", "Run the full experiment grid");
  experiment_cmd->add_option("--data", ea.data)->required()->check(CLI::ExistingDirectory);
  experiment_cmd->add_option("--spec", ea.spec)->required()->check(CLI::ExistingFile);
  experiment_cmd->add_option("--out", ea.out)->required();
  experiment_cmd->add_option("--jobs", ea.jobs, "Max parallel cells")->check(CLI::PositiveNumber);
  experiment_cmd->add_flag("--charts", ea.charts, "Render SVG charts");
  experiment_cmd->add_flag("--timing", ea.timing, "Record wall-clock time per cell");

  std::string report_in, report_format = "csv";
  auto* report_cmd = app.add_subcommand("report", "Print a stored experiment report");
  report_cmd->add_option("--in", report_in)->required()->check(CLI::ExistingDirectory);
  report_cmd->add_option("--format", report_format)->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*featurize_cmd) return run_featurize(fa);
    if (*synth_cmd) return run_synth(sa);
    if (*recourse_cmd) return run_recourse(ra);
    if (*experiment_cmd) return run_experiment_cmd(ea);
    if (*report_cmd) return run_report(report_in, report_format);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
