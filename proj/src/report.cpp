#include "mma/report.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "mma/errors.hpp"

namespace mma {

std::string render_report_table(const TransferReport& report) {
  std::size_t width = std::string("overall").size();
  for (const auto& t : report.targets) width = std::max(width, t.name.size());
  std::size_t group_width = std::string("group").size();
  for (const auto& t : report.targets) group_width = std::max(group_width, t.group.size());

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "source: " << report.source << '\n';
  os << std::left << std::setw(static_cast<int>(width)) << "target" << "  "
     << std::setw(static_cast<int>(group_width)) << "group" << "  " << std::right
     << std::setw(8) << "clean%" << std::setw(8) << "adv%" << std::setw(8) << "asr%" << '\n';
  for (const auto& t : report.targets) {
    os << std::left << std::setw(static_cast<int>(width)) << t.name << "  "
       << std::setw(static_cast<int>(group_width)) << t.group << "  " << std::right
       << std::setw(8) << 100 * t.clean_acc << std::setw(8) << 100 * t.adv_acc << std::setw(8)
       << 100 * t.attack_success_rate << '\n';
  }
  const auto [clean, adv] = report.recompute_overall();
  os << std::left << std::setw(static_cast<int>(width)) << "overall" << "  "
     << std::setw(static_cast<int>(group_width)) << "" << "  " << std::right << std::setw(8)
     << 100 * clean << std::setw(8) << 100 * adv << '\n';
  return os.str();
}

std::string iterations_csv(const std::vector<IterationRecord>& records) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "iteration,steps,loss_total,surrogate_clean_acc,surrogate_adv_acc,"
        "surrogate_adv_acc_initial_prompt,target_clean_acc,target_adv_acc,prompt\n";
  for (const auto& r : records) {
    os << r.iteration << ',' << r.steps << ',' << r.mean_loss.total << ',' << r.surrogate_clean_acc
       << ',' << r.surrogate_adv_acc << ',' << r.surrogate_adv_acc_initial << ',';
    if (r.target_clean_acc) os << *r.target_clean_acc;
    os << ',';
    if (r.target_adv_acc) os << *r.target_adv_acc;
    os << ",\"" << r.prompt << "\"\n";
  }
  return os.str();
}

namespace {

struct Series {
  std::string label;
  std::string color;
  bool dashed;
  std::vector<std::pair<double, double>> points;
};

}  // namespace

std::string accuracy_plot_svg(const std::vector<IterationRecord>& records,
                              const std::string& title) {
  if (records.empty()) throw InputContractError("no iteration records to plot");
  std::vector<Series> series = {{"surrogate clean", "#1f77b4", true, {}},
                                {"surrogate adversarial", "#1f77b4", false, {}},
                                {"target clean", "#d62728", true, {}},
                                {"target adversarial", "#d62728", false, {}}};
  for (const auto& r : records) {
    const auto x = static_cast<double>(r.iteration);
    series[0].points.emplace_back(x, r.surrogate_clean_acc);
    series[1].points.emplace_back(x, r.surrogate_adv_acc);
    if (r.target_clean_acc) series[2].points.emplace_back(x, *r.target_clean_acc);
    if (r.target_adv_acc) series[3].points.emplace_back(x, *r.target_adv_acc);
  }
  const double w = 640, h = 400, left = 60, right = 180, top = 40, bottom = 50;
  const double x_min = static_cast<double>(records.front().iteration);
  const double x_max = std::max(x_min + 1, static_cast<double>(records.back().iteration));
  const auto px = [&](double x) { return left + (x - x_min) / (x_max - x_min) * (w - left - right); };
  const auto py = [&](double y) { return top + (1.0 - y) * (h - top - bottom); };

  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title
     << "</text>\n";
  for (int tick = 0; tick <= 10; tick += 2) {
    const double y = py(tick / 10.0);
    os << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << w - right << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << tick * 10
       << "</text>\n";
  }
  for (const auto& r : records) {
    const double x = px(static_cast<double>(r.iteration));
    os << "<text x=\"" << x << "\" y=\"" << h - bottom + 18 << "\" text-anchor=\"middle\">"
       << r.iteration << "</text>\n";
  }
  os << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 12
     << "\" text-anchor=\"middle\">iteration</text>\n";
  os << "<text x=\"16\" y=\"" << (top + h - bottom) / 2 << "\" transform=\"rotate(-90 16 "
     << (top + h - bottom) / 2 << ")\" text-anchor=\"middle\">accuracy (%)</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << w - left - right
     << "\" height=\"" << h - top - bottom << "\" fill=\"none\" stroke=\"black\"/>\n";

  double legend_y = top + 10;
  for (const auto& s : series) {
    if (s.points.empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\""
       << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << " points=\"";
    for (const auto& [x, y] : s.points) os << px(x) << ',' << py(y) << ' ';
    os << "\"/>\n";
    for (const auto& [x, y] : s.points) {
      os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << s.color
         << "\"/>\n";
    }
    const double lx = w - right + 12;
    os << "<line x1=\"" << lx << "\" y1=\"" << legend_y << "\" x2=\"" << lx + 24 << "\" y2=\""
       << legend_y << "\" stroke=\"" << s.color << "\" stroke-width=\"2\""
       << (s.dashed ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
    os << "<text x=\"" << lx + 30 << "\" y=\"" << legend_y + 4 << "\">" << s.label << "</text>\n";
    legend_y += 20;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace mma
