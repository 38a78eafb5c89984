#include "hsarnn/report.hpp"

#include "hsarnn/error.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace hsarnn::report {

namespace fs = std::filesystem;
using harness::AblationCell;
using harness::AblationReport;
using harness::Index;
using model::Variant;

namespace {

struct ReferenceRow {
  Variant variant;
  std::array<double, 6> rates;  // A..E, Ave.
};

constexpr std::array<ReferenceRow, 4> kReferenceRates = {{
    {Variant::SARNN, {0, 0, 0, 0, 0, 0}},
    {Variant::HSARNN, {100, 30, 0, 30, 100, 52}},
    {Variant::SARNNST, {100, 90, 40, 90, 70, 78}},
    {Variant::HSARNNST, {100, 100, 90, 100, 80, 94}},
}};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string general(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string finite_or_na(double v) { return std::isfinite(v) ? format_number(v) : "n/a"; }

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("report", "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("report", "write failed for " + path.string());
}

// Panel geometry in SVG pixels.
constexpr double kPanelW = 360.0;
constexpr double kPanelH = 240.0;
constexpr double kMargin = 36.0;
constexpr double kCaptionH = 48.0;

std::string points(const Eigen::MatrixX2d& traj, double ox, double oy) {
  std::string s;
  const double sx = (kPanelW - 2 * kMargin) / sim::kWorldY;
  const double sz = (kPanelH - 2 * kMargin) / sim::kWorldZ;
  for (Eigen::Index i = 0; i < traj.rows(); ++i) {
    if (i > 0) s += ' ';
    s += fixed(ox + kMargin + traj(i, 0) * sx, 2) + "," + fixed(oy + kPanelH - kMargin - traj(i, 1) * sz, 2);
  }
  return s;
}

}  // namespace

std::optional<double> reference_rate(Variant v, std::string_view position) {
  std::size_t col = 0;
  if (position == kAverageLabel) {
    col = 5;
  } else {
    const auto it = std::find(sim::kPositions.begin(), sim::kPositions.end(), position);
    if (it == sim::kPositions.end()) return std::nullopt;
    col = static_cast<std::size_t>(it - sim::kPositions.begin());
  }
  for (const auto& row : kReferenceRates) {
    if (row.variant == v) return row.rates[col];
  }
  return std::nullopt;
}

std::string format_number(std::optional<double> value) {
  if (!value) return "n/a";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, *value);
  return std::string(buf, res.ptr);
}

std::string report_csv(const AblationReport& report) {
  std::string out = "variant,position,successes,trials,rate,reference_rate\n";
  auto row = [&](Variant v, std::string_view pos, Index successes, Index trials, std::optional<double> rate) {
    out += std::string(model::variant_name(v)) + "," + std::string(pos) + "," + std::to_string(successes) + "," +
           std::to_string(trials) + "," + format_number(rate) + "," + format_number(reference_rate(v, pos)) + "\n";
  };
  for (const auto& c : report.cells) row(c.variant, c.position, c.successes(), c.trial_count(), c.rate());
  for (Variant v : report.variants) {
    Index successes = 0, trials = 0;
    for (const auto& c : report.cells) {
      if (c.variant != v) continue;
      successes += c.successes();
      trials += c.trial_count();
    }
    row(v, kAverageLabel, successes, trials, report.mean_rate(v));
  }
  return out;
}

std::string trajectories_csv(const AblationReport& report) {
  std::string out = "variant,position,trial,offset,success,step,y,z\n";
  for (const auto& c : report.cells) {
    const std::string prefix = std::string(model::variant_name(c.variant)) + "," + c.position + ",";
    for (const auto& t : c.trials) {
      const std::string head = prefix + std::to_string(t.trial) + "," + general(t.offset) + "," +
                               (t.success ? "1" : "0") + ",";
      for (Eigen::Index i = 0; i < t.trajectory.rows(); ++i) {
        out += head + std::to_string(i) + "," + general(t.trajectory(i, 0)) + "," + general(t.trajectory(i, 1)) + "\n";
      }
    }
  }
  return out;
}

std::string trajectory_stats_csv(const AblationReport& report) {
  std::string out = "variant,position,trials,std_y,std_z,spread\n";
  for (const auto& c : report.cells) {
    out += std::string(model::variant_name(c.variant)) + "," + c.position + "," + std::to_string(c.trial_count()) +
           "," + finite_or_na(c.spread.std_y) + "," + finite_or_na(c.spread.std_z) + "," +
           finite_or_na(c.spread.spread) + "\n";
  }
  return out;
}

std::string trajectory_svg(const AblationReport& report, const std::string& position) {
  std::vector<const AblationCell*> panels;
  for (const auto& c : report.cells) {
    if (c.position == position) panels.push_back(&c);
  }
  const std::size_t cols = 2;
  const std::size_t rows = (panels.size() + cols - 1) / cols;
  const double width = kPanelW * cols;
  const double height = kPanelH * static_cast<double>(std::max<std::size_t>(rows, 1)) + kCaptionH;
  static constexpr std::array<const char*, 4> kColors = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const AblationCell& c = *panels[i];
    const double ox = kPanelW * static_cast<double>(i % cols);
    const double oy = kPanelH * static_cast<double>(i / cols);
    const char* color = kColors[static_cast<std::size_t>(c.variant)];
    svg << "<g class=\"panel\" data-variant=\"" << model::variant_name(c.variant) << "\">\n";
    svg << "<rect x=\"" << ox + kMargin << "\" y=\"" << oy + kMargin << "\" width=\"" << kPanelW - 2 * kMargin
        << "\" height=\"" << kPanelH - 2 * kMargin << "\" fill=\"none\" stroke=\"#888\"/>\n";
    svg << "<text x=\"" << ox + kMargin << "\" y=\"" << oy + kMargin - 8 << "\">" << model::variant_name(c.variant)
        << " at " << position << ": " << c.successes() << "/" << c.trial_count()
        << " success, spread " << finite_or_na(c.spread.spread) << " m</text>\n";
    svg << "<text x=\"" << ox + kPanelW / 2 << "\" y=\"" << oy + kPanelH - 10
        << "\" text-anchor=\"middle\">y [m]</text>\n";
    svg << "<text x=\"" << ox + 12 << "\" y=\"" << oy + kPanelH / 2 << "\" transform=\"rotate(-90 " << ox + 12 << " "
        << oy + kPanelH / 2 << ")\" text-anchor=\"middle\">z [m]</text>\n";
    for (const auto& t : c.trials) {
      svg << "<polyline class=\"trial\" data-trial=\"" << t.trial << "\" fill=\"none\" stroke=\"" << color
          << "\" stroke-opacity=\"0.6\" stroke-dasharray=\"2,3\" points=\"" << points(t.trajectory, ox, oy)
          << "\"/>\n";
    }
    if (!c.trials.empty()) {
      svg << "<polyline class=\"mean\" fill=\"none\" stroke=\"black\" stroke-width=\"2\" points=\""
          << points(harness::mean_trajectory(c.trials), ox, oy) << "\"/>\n";
    }
    svg << "</g>\n";
  }
  const Index trials = panels.empty() ? 0 : panels.front()->trial_count();
  svg << "<text class=\"caption\" x=\"" << kMargin << "\" y=\"" << height - kCaptionH / 2
      << "\">Hand trajectories in the YZ plane at position " << position << ". The dotted line shows each of the "
      << trials << " trials and the solid line shows the average trajectory.</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

nlohmann::json summary_json(const AblationReport& report) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : report.cells) {
    const auto rate = c.rate();
    cells.push_back({{"variant", model::variant_name(c.variant)},
                     {"position", c.position},
                     {"successes", c.successes()},
                     {"trials", c.trial_count()},
                     {"rate", rate ? nlohmann::json(*rate) : nlohmann::json(nullptr)},
                     {"spread", std::isfinite(c.spread.spread) ? nlohmann::json(c.spread.spread) : nlohmann::json(nullptr)}});
  }
  nlohmann::json means = nlohmann::json::object();
  for (Variant v : report.variants) {
    const auto r = report.mean_rate(v);
    means[std::string(model::variant_name(v))] = r ? nlohmann::json(*r) : nlohmann::json(nullptr);
  }
  const harness::TrendFlags f = report.trends();
  auto flag = [](std::optional<bool> b) { return b ? nlohmann::json(*b) : nlohmann::json(nullptr); };
  return {{"speed", report.speed},
          {"noise", report.noise},
          {"jitter", report.jitter},
          {"trials", report.trials},
          {"seed", report.seed},
          {"cells", cells},
          {"mean_rate", means},
          {"trends",
           {{"HSARNNST>=SARNN", flag(f.hsarnnst_ge_sarnn)},
            {"HSARNNST>=SARNNST", flag(f.hsarnnst_ge_sarnnst)},
            {"SARNNST>=HSARNN", flag(f.sarnnst_ge_hsarnn)},
            {"spread_C:SARNNST<=SARNN", flag(f.st_spread_le_flat_at_c)}}}};
}

std::vector<fs::path> write_report(const AblationReport& report, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out_dir / name, text);
    written.push_back(out_dir / name);
  };
  emit("report.csv", report_csv(report));
  emit("trajectories.csv", trajectories_csv(report));
  emit("trajectory_stats.csv", trajectory_stats_csv(report));
  for (const auto& p : report.positions) emit("trajectories_" + p + ".svg", trajectory_svg(report, p));
  return written;
}

AblationReport parse_trajectories_csv(std::string_view text) {
  AblationReport report;
  report.trials = 0;
  std::map<std::pair<std::string, std::string>, std::map<Index, harness::TrialResult>> grouped;
  std::map<std::pair<std::string, std::string>, std::map<Index, std::vector<std::pair<double, double>>>> points;
  std::vector<std::pair<std::string, std::string>> order;
  std::size_t start = 0;
  bool header = true;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "variant,position,trial,offset,success,step,y,z") {
        throw FormatError("report", "header", "unexpected trajectories.csv header");
      }
      header = false;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 8) throw FormatError("report", "row", "expected 8 fields, got " + std::to_string(f.size()));
    const Variant v = model::parse_variant(f[0]);
    const auto key = std::make_pair(std::string(model::variant_name(v)), f[1]);
    if (!grouped.contains(key)) {
      order.push_back(key);
      if (std::find(report.variants.begin(), report.variants.end(), v) == report.variants.end()) {
        report.variants.push_back(v);
      }
      if (std::find(report.positions.begin(), report.positions.end(), f[1]) == report.positions.end()) {
        report.positions.push_back(f[1]);
      }
    }
    try {
      const Index trial = std::stol(f[2]);
      auto& tr = grouped[key][trial];
      tr.position = f[1];
      tr.trial = trial;
      tr.offset = std::stod(f[3]);
      tr.success = f[4] == "1";
      points[key][trial].emplace_back(std::stod(f[6]), std::stod(f[7]));
    } catch (const std::logic_error&) {
      throw FormatError("report", "row", "malformed number in '" + std::string(line) + "'");
    }
  }
  for (const auto& key : order) {
    AblationCell cell;
    cell.variant = model::parse_variant(key.first);
    cell.position = key.second;
    for (auto& [trial, tr] : grouped[key]) {
      const auto& pts = points[key][trial];
      tr.trajectory.resize(static_cast<Index>(pts.size()), 2);
      for (std::size_t i = 0; i < pts.size(); ++i) {
        tr.trajectory(static_cast<Index>(i), 0) = pts[i].first;
        tr.trajectory(static_cast<Index>(i), 1) = pts[i].second;
      }
      cell.trials.push_back(std::move(tr));
    }
    cell.spread = harness::trajectory_spread(cell.trials);
    report.trials = std::max(report.trials, cell.trial_count());
    report.cells.push_back(std::move(cell));
  }
  return report;
}

}  // namespace hsarnn::report
