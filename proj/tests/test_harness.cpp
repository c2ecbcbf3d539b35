#include <doctest.h>

#include <cstdlib>
#include <numeric>
#include <regex>
#include <sstream>

#include "recourse/errors.hpp"
#include "recourse/harness.hpp"
#include "test_util.hpp"

using namespace recourse;

namespace {

UserRankings identity_rankings(std::size_t users, std::size_t items) {
  std::vector<ItemId> order(items);
  std::iota(order.begin(), order.end(), 0);
  UserRankings out;
  for (UserId u = 0; u < users; ++u) out[u] = order;
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

ExperimentCell sample_cell(std::size_t group, double fraction, double success) {
  ExperimentCell c;
  c.group = group;
  c.target_rank = 11;
  c.sample_fraction = fraction;
  c.item = 3;
  c.item_id = "i3";
  c.mean_rank = 11.25;
  c.group_size = 40;
  c.sample_size = 8;
  c.metrics = {success, 2, 0.04, 0.1 + 0.2, 0.99, 0.97};
  c.iterations = 17;
  c.stop_reason = "all_satisfied";
  return c;
}

}  // namespace

TEST_CASE("select_item_at_rank") {
  SUBCASE("exact mean rank wins") {
    const auto sel = select_item_at_rank(identity_rankings(100, 30), 30, 11, 10, 0.01);
    CHECK(sel.item == 10);
    CHECK(sel.mean_rank == 11.0);
  }
  SUBCASE("items over the exposure cap are skipped") {
    auto rankings = identity_rankings(100, 30);
    for (UserId u : {0, 1}) {
      auto& r = rankings[u];
      r.erase(r.begin() + 10);
      r.insert(r.begin(), 10);
    }
    CHECK(select_item_at_rank(rankings, 30, 11, 10, 1.0).item == 10);
    CHECK(select_item_at_rank(rankings, 30, 11, 10, 0.01).item == 11);
  }
  SUBCASE("equidistant items go to the smaller id") {
    auto rankings = identity_rankings(2, 30);
    // Item 10 at ranks 11 and 11, item 11 at ranks 12 and 12: target 11.5 ties.
    rankings[0] = rankings[1];
    CHECK(select_item_at_rank(rankings, 30, 11, 10, 0.01).item == 10);
    auto swapped = identity_rankings(2, 30);
    std::swap(swapped[0][10], swapped[0][11]);
    // Now both items have mean rank 11.5; a target of 11 is 0.5 from each.
    CHECK(select_item_at_rank(swapped, 30, 11, 10, 0.01).item == 10);
  }
  SUBCASE("nothing eligible") {
    CHECK_THROWS_AS(select_item_at_rank(identity_rankings(5, 10), 10, 11, 10, 0.0), DataError);
  }
}

TEST_CASE("experiment spec json") {
  ExperimentSpec spec;
  spec.target_ranks = {21};
  spec.recourse.lambda = 0.5;
  spec.rbo_depth = 50;
  const auto back = ExperimentSpec::from_json(spec.to_json());
  CHECK(back.target_ranks == spec.target_ranks);
  CHECK(back.recourse.lambda == 0.5);
  CHECK(back.rbo_depth == spec.rbo_depth);
  CHECK_THROWS_AS(ExperimentSpec::from_json(nlohmann::json::parse(R"({"target_ranks": [5]})")), ConfigError);
  CHECK_THROWS_AS(ExperimentSpec::from_json(nlohmann::json::parse(R"({"sample_fractions": [1.5]})")), ConfigError);
  CHECK_THROWS_AS(ExperimentSpec::from_json(nlohmann::json::parse(R"({"recourse": {"lambda": -1}})")),
                  ConfigError);
}

TEST_CASE("report serialization") {
  SUBCASE("empty report is a header line") {
    std::ostringstream out;
    write_report_csv(out, ExperimentReport{});
    CHECK(out.str() ==
          "group,target_rank,sample_fraction,item,success_rate,l0,l0_fraction,l1,rbo_mean,rbo_min,iterations,"
          "wall_ms\n");
  }
  SUBCASE("two cells") {
    ExperimentReport report;
    report.cells = {sample_cell(0, 0.05, 0.75), sample_cell(1, 0.2, 1.0)};
    std::ostringstream out;
    write_report_csv(out, report);
    const auto lines = lines_of(out.str());
    REQUIRE(lines.size() == 3);
    CHECK(lines[1] == "0,11,0.05,i3,0.75,2,0.04,0.30000000000000004,0.99,0.97,17,0");

    const auto back = report_from_json(nlohmann::json::parse(report_to_json(report).dump()));
    std::ostringstream again;
    write_report_csv(again, back);
    CHECK(again.str() == out.str());
    REQUIRE(back.cells.size() == 2);
    CHECK(back.cells[0].metrics.l1_change == report.cells[0].metrics.l1_change);
    CHECK(back.cells[1].mean_rank == 11.25);
  }
  SUBCASE("failed cells keep their place with empty metrics") {
    ExperimentReport report;
    auto c = sample_cell(0, 0.05, 0.0);
    c.error = "no eligible item near rank 11";
    c.item.reset();
    c.item_id.clear();
    report.cells = {c};
    std::ostringstream out;
    write_report_csv(out, report);
    CHECK(lines_of(out.str())[1] == "0,11,0.05,,,,,,,,,0");
  }
  SUBCASE("unknown format") {
    const test::TempDir dir;
    CHECK_THROWS_AS(write_report(ExperimentReport{}, "xml", dir.path / "r.xml"), ConfigError);
  }
}

TEST_CASE("charts") {
  ExperimentReport report;
  for (std::size_t g = 0; g < 3; ++g)
    for (double f : {0.01, 0.1, 1.0}) report.cells.push_back(sample_cell(g, f, 1.0));
  const test::TempDir dir;
  const auto files = render_charts(report, dir.path);
  REQUIRE(files.size() == 2);
  CHECK(files[0].filename() == "success_rank_11.svg");
  CHECK(files[1].filename() == "l0_fraction.svg");

  const auto svg = test::read_file(files[0]);
  // The first grid line drawn is y = 0 at the bottom; the last is y = 1 at the top.
  const std::regex grid(R"re(class="grid" x1="[^"]+" y1="([^"]+)")re");
  std::string top_y;
  for (std::sregex_iterator it(svg.begin(), svg.end(), grid), end; it != end; ++it) top_y = (*it)[1];
  REQUIRE_FALSE(top_y.empty());
  const std::regex series(R"re(class="series" data-group="\d+"[^>]*points="([^"]*)")re");
  int curves = 0;
  for (std::sregex_iterator it(svg.begin(), svg.end(), series), end; it != end; ++it) {
    ++curves;
    std::istringstream pts((*it)[1].str());
    for (std::string pt; pts >> pt;) CHECK(pt.substr(pt.find(',') + 1) == top_y);
  }
  CHECK(curves == 3);
}

TEST_CASE("run_experiment") {
  const auto data = generate_synthetic({.n_users = 30, .n_items = 60, .n_features = 10, .density = 0.1,
                                        .feature_density = 0.5, .seed = 5});
  ExperimentSpec spec;
  spec.target_ranks = {11, 21};
  spec.sample_fractions = {0.2, 1.0};
  spec.grouping.n_groups = 2;
  spec.pre_exposure_cap = 0.5;
  spec.rng_seed = 3;

  SUBCASE("no fractions, no cells") {
    spec.sample_fractions.clear();
    CHECK(run_experiment(data, spec).cells.empty());
  }
  SUBCASE("cells are ordered and independent of parallelism") {
    const auto serial = run_experiment(data, spec);
    REQUIRE(serial.cells.size() == 8);
    CHECK(serial.cells[0].group == 0);
    CHECK(serial.cells[1].sample_fraction == 1.0);
    CHECK(serial.cells[2].target_rank == 21);
    CHECK(serial.cells[7].group == 1);
    for (const auto& c : serial.cells) {
      CHECK(c.ok());
      CHECK(c.others_order_preserved);
      CHECK(c.metrics.l0_changes <= c.l0_converged);
      CHECK(c.success_rate_sample >= 0.8 * c.success_rate_sample_converged - 1e-12);
    }
    const auto parallel = run_experiment(data, spec, {.jobs = 3});
    std::ostringstream a, b;
    write_report_csv(a, serial);
    write_report_csv(b, parallel);
    CHECK(a.str() == b.str());
  }
  SUBCASE("a cell that cannot select an item records the error") {
    spec.pre_exposure_cap = 0.0;
    spec.target_ranks = {58};
    spec.k = 57;
    const auto report = run_experiment(data, spec);
    REQUIRE_FALSE(report.cells.empty());
    for (const auto& c : report.cells) CHECK_FALSE(c.ok());
  }
}

#ifdef RECOURSE_CLI_PATH
namespace {

int run_cli(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(RECOURSE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("cli end to end") {
  const test::TempDir dir;
  const auto d = dir.path.string();
  const auto log = dir.path / "log.txt";
  REQUIRE(run_cli("synth --users 40 --items 80 --features 12 --density 0.1 --seed 3 --out " + d + "/data", log) == 0);

  test::write_file(dir.path / "spec.json",
                   R"({"target_ranks": [11], "sample_fractions": [0.1, 1.0], "rng_seed": 4,
                       "grouping": {"strategy": "activity", "n_groups": 2}, "pre_exposure_cap": 0.5})");
  const auto experiment = "experiment --data " + d + "/data --spec " + d + "/spec.json --charts --out ";
  REQUIRE(run_cli(experiment + d + "/run1", log) == 0);
  REQUIRE(run_cli(experiment + d + "/run2 --jobs 2", log) == 0);
  const auto csv = test::read_file(dir.path / "run1/report.csv");
  CHECK(csv == test::read_file(dir.path / "run2/report.csv"));
  CHECK(std::filesystem::exists(dir.path / "run1/charts/success_rank_11.svg"));
  CHECK(std::filesystem::exists(dir.path / "run1/charts/l0_fraction.svg"));

  CHECK(run_cli("report --in " + d + "/run1 --format csv", log) == 0);
  CHECK(test::read_file(log) == csv);

  CHECK(run_cli("recourse --data " + d + "/data --item i5 --group 0 --groups 2 --sample 0.5 --seed 1 --out " + d +
                    "/one.json",
                log) == 0);
  const auto result = nlohmann::json::parse(test::read_file(dir.path / "one.json"));
  CHECK(result["item"] == "i5");
  CHECK(result.contains("success_rate_full"));
  CHECK(result["l0"].get<std::size_t>() <= result["l0_converged"].get<std::size_t>());

  SUBCASE("exit codes") {
    CHECK(run_cli("", log) == 1);
    CHECK(run_cli("synth --users 10", log) == 1);
    CHECK(run_cli("report --in " + d + "/run1 --format xml", log) == 1);
    CHECK(run_cli("recourse --data " + d + "/data --item nope --group 0 --out -", log) == 2);
    test::write_file(dir.path / "bad.json", R"({"target_ranks": [3]})");
    CHECK(run_cli("experiment --data " + d + "/data --spec " + d + "/bad.json --out " + d + "/bad", log) == 1);
    std::filesystem::create_directories(dir.path / "empty");
    CHECK(run_cli("experiment --data " + d + "/empty --spec " + d + "/spec.json --out " + d + "/bad", log) == 2);
    CHECK(run_cli("recourse --data " + d + "/data --item i5 --group 0 --groups 2 --lambda 0 --lr 1e308 --out -",
                  log) == 3);
  }

  SUBCASE("featurize") {
    test::write_file(dir.path / "items.jsonl",
                     R"({"id": "m1", "text": {"plot": "a b a"}, "categorical": {"genre": "x"}, "numeric": {"year": 1990}}
{"id": "m2", "text": {"plot": "b c"}, "categorical": {"genre": "y"}, "numeric": {"year": 2000}}
)");
    test::write_file(dir.path / "fspec.json",
                     R"({"text": {"plot": {"mode": "tf"}}, "categorical": {"genre": {"mutable": false}},
                         "numeric": {"year": {}}})");
    REQUIRE(run_cli("featurize --items " + d + "/items.jsonl --spec " + d + "/fspec.json --out " + d + "/feat",
                    log) == 0);
    const auto cat = load_catalog(dir.path / "feat");
    CHECK(cat.catalog.num_features() == 6);
    CHECK(cat.features[0].name == "plot:a");
    CHECK(cat.catalog.row(0)[0] == 2.0);
    CHECK_FALSE(cat.catalog.is_mutable(3));
    CHECK(cat.catalog.row(1)[5] == 1.0);
  }
}
#endif
