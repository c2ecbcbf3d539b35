#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "recourse/harness.hpp"

namespace recourse {

namespace fs = std::filesystem;

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string percent_label(double fraction) {
  std::string s = format_double(fraction * 100.0);
  if (s.size() > 6) s = fixed(fraction * 100.0, 2);
  return s + "%";
}

/// Line chart over evenly spaced categorical x positions.
std::string line_chart(const std::string& title, const std::string& y_label, const std::vector<double>& xs,
                       const std::map<std::size_t, std::vector<std::optional<double>>>& series, double y_max) {
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  auto x_at = [&](std::size_t i) {
    return xs.size() <= 1 ? kLeft + plot_w / 2 : kLeft + plot_w * static_cast<double>(i) / static_cast<double>(xs.size() - 1);
  };
  auto y_at = [&](double v) { return kTop + plot_h * (1.0 - v / y_max); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  for (int g = 0; g <= 4; ++g) {
    const double v = y_max * g / 4.0;
    const double y = y_at(v);
    svg << "<line class=\"grid\" x1=\"" << kLeft << "\" y1=\"" << fixed(y) << "\" x2=\"" << kLeft + plot_w
        << "\" y2=\"" << fixed(y) << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << fixed(y + 4) << "\" text-anchor=\"end\">" << fixed(v, 2)
        << "</text>\n";
  }
  for (std::size_t i = 0; i < xs.size(); ++i)
    svg << "<text x=\"" << fixed(x_at(i)) << "\" y=\"" << kTop + plot_h + 18 << "\" text-anchor=\"middle\">"
        << percent_label(xs[i]) << "</text>\n";
  svg << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 15
      << "\" text-anchor=\"middle\">sample fraction</text>\n";
  svg << "<text transform=\"translate(18," << kTop + plot_h / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << y_label << "</text>\n";
  svg << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << plot_w << "\" height=\"" << plot_h
      << "\" fill=\"none\" stroke=\"#444\"/>\n";

  std::size_t n = 0;
  for (const auto& [group, values] : series) {
    const char* color = kPalette[n % std::size(kPalette)];
    std::ostringstream points;
    for (std::size_t i = 0; i < values.size(); ++i)
      if (values[i]) points << fixed(x_at(i)) << ',' << fixed(y_at(*values[i])) << ' ';
    svg << "<polyline class=\"series\" data-group=\"" << group << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"2\" points=\"" << points.str() << "\"/>\n";
    for (std::size_t i = 0; i < values.size(); ++i)
      if (values[i])
        svg << "<circle cx=\"" << fixed(x_at(i)) << "\" cy=\"" << fixed(y_at(*values[i])) << "\" r=\"3\" fill=\""
            << color << "\"/>\n";
    const double ly = kTop + 10 + 18.0 * static_cast<double>(n);
    svg << "<line x1=\"" << kWidth - kRight + 15 << "\" y1=\"" << ly << "\" x2=\"" << kWidth - kRight + 35
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << kWidth - kRight + 40 << "\" y=\"" << ly + 4 << "\">group " << group << "</text>\n";
    ++n;
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::vector<fs::path> render_charts(const ExperimentReport& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());

  std::set<double> fraction_set;
  std::set<std::size_t> ranks, groups;
  for (const auto& c : report.cells) {
    fraction_set.insert(c.sample_fraction);
    ranks.insert(c.target_rank);
    groups.insert(c.group);
  }
  const std::vector<double> xs(fraction_set.begin(), fraction_set.end());
  auto x_index = [&](double f) {
    return static_cast<std::size_t>(std::lower_bound(xs.begin(), xs.end(), f) - xs.begin());
  };

  std::vector<fs::path> written;
  for (auto rank : ranks) {
    std::map<std::size_t, std::vector<std::optional<double>>> series;
    for (auto g : groups) series[g].assign(xs.size(), std::nullopt);
    for (const auto& c : report.cells)
      if (c.target_rank == rank && c.ok()) series[c.group][x_index(c.sample_fraction)] = c.metrics.success_rate;
    const auto path = dir / ("success_rank_" + std::to_string(rank) + ".svg");
    write_text(path, line_chart("Success rate, original rank " + std::to_string(rank), "success rate", xs, series, 1.0));
    written.push_back(path);
  }

  // l0 fraction, averaged over target ranks.
  std::map<std::size_t, std::vector<std::pair<double, std::size_t>>> sums;
  for (auto g : groups) sums[g].assign(xs.size(), {0.0, 0});
  for (const auto& c : report.cells)
    if (c.ok()) {
      auto& s = sums[c.group][x_index(c.sample_fraction)];
      s.first += c.metrics.l0_fraction;
      ++s.second;
    }
  std::map<std::size_t, std::vector<std::optional<double>>> series;
  double peak = 0;
  for (const auto& [g, cells] : sums) {
    auto& out = series[g];
    for (const auto& [sum, count] : cells) {
      out.push_back(count ? std::optional(sum / static_cast<double>(count)) : std::nullopt);
      if (count) peak = std::max(peak, sum / static_cast<double>(count));
    }
  }
  const double y_max = std::max(0.1, std::ceil(peak * 10.0 - 1e-9) / 10.0);
  const auto path = dir / "l0_fraction.svg";
  write_text(path, line_chart("Fraction of features changed", "l0 fraction", xs, series, y_max));
  written.push_back(path);
  return written;
}

}  // namespace recourse
