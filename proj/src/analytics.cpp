#include "fvla/analytics.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "fvla/io_util.hpp"

namespace fvla {

namespace {

std::string trace_header(int n_experts) {
  std::string h = "episode,timestep,token,role,selected";
  for (int e = 0; e < n_experts; ++e) h += ",p" + std::to_string(e);
  return h;
}

std::string trace_row(const TraceRecord& rec) {
  std::string row = rec.episode + "," + std::to_string(rec.timestep) + "," +
                    std::to_string(rec.token) + "," + rec.role + "," +
                    std::to_string(rec.selected);
  for (double p : rec.probs) row += "," + format_double(p);
  return row;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_trace_csv(const std::filesystem::path& path, const RouterTrace& trace) {
  std::string out = trace_header(trace.n_experts) + "\n";
  for (const auto& rec : trace.records) out += trace_row(rec) + "\n";
  write_text_file(path, out);
}

RouterTrace read_trace_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty trace file: " + path.string());
  auto header = split_csv(line);
  if (header.size() < 6 || header[0] != "episode") {
    throw DataError("malformed trace header in " + path.string());
  }
  RouterTrace trace;
  trace.n_experts = static_cast<int>(header.size()) - 5;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv(line);
    if (static_cast<int>(f.size()) != 5 + trace.n_experts) {
      throw DataError("malformed trace row in " + path.string() + ": " + line);
    }
    TraceRecord rec;
    rec.episode = f[0];
    rec.timestep = std::stoll(f[1]);
    rec.token = std::stoi(f[2]);
    rec.role = f[3];
    rec.selected = std::stoi(f[4]);
    for (int e = 0; e < trace.n_experts; ++e) rec.probs.push_back(std::stod(f[5 + e]));
    if (rec.selected < 0 || rec.selected >= trace.n_experts) {
      throw DataError("trace row selects expert " + std::to_string(rec.selected) +
                      " outside 0.." + std::to_string(trace.n_experts - 1));
    }
    trace.records.push_back(std::move(rec));
  }
  return trace;
}

TraceWriter::TraceWriter(std::filesystem::path path, int n_experts)
    : path_(std::move(path)), n_experts_(n_experts) {}

void TraceWriter::append(const TraceRecord& rec) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw DataError("cannot append to trace file: " + path_.string());
  if (!header_written_) {
    if (std::filesystem::file_size(path_) == 0) out << trace_header(n_experts_) << "\n";
    header_written_ = true;
  }
  out << trace_row(rec) << "\n";
}

LoadCurve percentile_load(const RouterTrace& trace, const std::string& task_label) {
  // Group by episode in order of first appearance; token order is file order.
  std::vector<std::string> episode_order;
  std::map<std::string, std::vector<const TraceRecord*>> by_episode;
  for (const auto& rec : trace.records) {
    auto [it, inserted] = by_episode.try_emplace(rec.episode);
    if (inserted) episode_order.push_back(rec.episode);
    it->second.push_back(&rec);
  }
  if (episode_order.empty()) throw DataError("percentile_load: no episodes in trace");

  const int n_experts = trace.n_experts;
  LoadCurve curve;
  curve.task_label = task_label;
  curve.episode_count = static_cast<int>(episode_order.size());
  curve.values = Eigen::MatrixXd::Zero(100, n_experts);

  for (const auto& ep : episode_order) {
    const auto& toks = by_episode[ep];
    const long long len = static_cast<long long>(toks.size());
    Eigen::MatrixXd ep_curve(100, n_experts);
    int first_filled = -1;
    for (int j = 0; j < 100; ++j) {
      const long long lo = j * len / 100;
      const long long hi = (j + 1) * len / 100;
      if (hi > lo) {
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(n_experts);
        for (long long i = lo; i < hi; ++i) {
          acc[toks[i]->selected] += toks[i]->probs[toks[i]->selected];
        }
        ep_curve.row(j) = acc / static_cast<double>(hi - lo);
        if (first_filled < 0) first_filled = j;
      } else if (j > 0 && first_filled >= 0) {
        ep_curve.row(j) = ep_curve.row(j - 1);  // carry forward
      } else {
        ep_curve.row(j).setZero();  // provisional until the first filled row
      }
    }
    for (int j = 0; j < first_filled; ++j) ep_curve.row(j) = ep_curve.row(first_filled);
    curve.values += ep_curve;
  }
  curve.values /= static_cast<double>(curve.episode_count);
  return curve;
}

void write_curve_csv(const std::filesystem::path& path, const LoadCurve& curve) {
  const int n_experts = static_cast<int>(curve.values.cols());
  std::string out = "percentile";
  for (int e = 0; e < n_experts; ++e) out += ",expert_" + std::to_string(e);
  out += "\n";
  for (int j = 0; j < 100; ++j) {
    out += std::to_string(j);
    for (int e = 0; e < n_experts; ++e) out += "," + format_double(curve.values(j, e));
    out += "\n";
  }
  write_text_file(path, out);
}

LoadCurve read_curve_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty curve file: " + path.string());
  auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "percentile") {
    throw DataError("malformed curve header in " + path.string());
  }
  const int n_experts = static_cast<int>(header.size()) - 1;
  LoadCurve curve;
  curve.values = Eigen::MatrixXd::Zero(100, n_experts);
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (row >= 100) throw DataError("curve file has more than 100 rows: " + path.string());
    auto f = split_csv(line);
    if (static_cast<int>(f.size()) != 1 + n_experts) {
      throw DataError("malformed curve row: " + line);
    }
    for (int e = 0; e < n_experts; ++e) curve.values(row, e) = std::stod(f[1 + e]);
    ++row;
  }
  if (row != 100) {
    throw DataError("curve file has " + std::to_string(row) + " rows, expected 100");
  }
  return curve;
}

void write_curve_svg(const std::filesystem::path& path, const LoadCurve& curve) {
  const int n_experts = static_cast<int>(curve.values.cols());
  const double w = 640, h = 420;
  const double x0 = 60, y0 = 20, plot_w = 540, plot_h = 340;
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
  svg << "  <rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << plot_w << "\" height=\""
      << plot_h << "\" fill=\"none\" stroke=\"#333\"/>\n";
  svg << "  <text x=\"" << x0 << "\" y=\"" << y0 + plot_h + 24
      << "\" font-size=\"12\">0%</text>\n";
  svg << "  <text x=\"" << x0 + plot_w - 30 << "\" y=\"" << y0 + plot_h + 24
      << "\" font-size=\"12\">100%</text>\n";
  svg << "  <text x=\"" << x0 - 25 << "\" y=\"" << y0 + plot_h << "\" font-size=\"12\">0</text>\n";
  svg << "  <text x=\"" << x0 - 25 << "\" y=\"" << y0 + 10 << "\" font-size=\"12\">1</text>\n";
  svg << "  <text x=\"" << x0 + plot_w / 2 - 80 << "\" y=\"" << y0 + plot_h + 44
      << "\" font-size=\"13\">task completion percentage (" << curve.task_label << ")</text>\n";
  for (int e = 0; e < n_experts; ++e) {
    svg << "  <polyline fill=\"none\" stroke=\"" << palette[e % 8] << "\" stroke-width=\"1.5\" points=\"";
    for (int j = 0; j < 100; ++j) {
      const double px = x0 + plot_w * (j / 99.0);
      const double py = y0 + plot_h * (1.0 - curve.values(j, e));
      svg << px << "," << py << (j + 1 < 100 ? " " : "");
    }
    svg << "\"/>\n";
    svg << "  <text x=\"" << x0 + plot_w + 6 << "\" y=\"" << y0 + 14 + 16 * e
        << "\" font-size=\"12\" fill=\"" << palette[e % 8] << "\">expert " << e << "</text>\n";
  }
  svg << "</svg>\n";
  write_text_file(path, svg.str());
}

EvalTable aggregate_eval(const std::vector<EvalRun>& runs,
                         const std::vector<std::string>& variant_order,
                         const std::vector<std::string>& mode_order) {
  EvalTable table;
  table.variants = variant_order;
  table.modes = mode_order;
  table.cells.assign(variant_order.size(), std::vector<EvalCell>(mode_order.size()));
  for (size_t v = 0; v < variant_order.size(); ++v) {
    for (size_t m = 0; m < mode_order.size(); ++m) {
      std::vector<std::pair<uint64_t, double>> seeded;
      for (const auto& run : runs) {
        if (run.variant != variant_order[v] || run.mode != mode_order[m]) continue;
        if (run.trials <= 0) throw DataError("aggregate_eval: run with zero trials");
        seeded.emplace_back(run.seed, 100.0 * run.successes / run.trials);
      }
      std::sort(seeded.begin(), seeded.end());
      EvalCell& cell = table.cells[v][m];
      if (!seeded.empty()) {
        cell.present = true;
        double sum = 0.0;
        for (const auto& [seed, rate] : seeded) {
          cell.per_seed.push_back(rate);
          sum += rate;
        }
        cell.mean = sum / seeded.size();
      }
    }
  }
  return table;
}

std::string eval_table_csv(const EvalTable& table) {
  std::string out = "variant";
  for (const auto& m : table.modes) out += "," + m;
  out += "\n";
  for (size_t v = 0; v < table.variants.size(); ++v) {
    out += table.variants[v];
    for (size_t m = 0; m < table.modes.size(); ++m) {
      const EvalCell& cell = table.cells[v][m];
      out += cell.present ? "," + format_double(cell.mean) : ",missing";
    }
    out += "\n";
  }
  out += "\n# per-seed success rates\n";
  for (size_t v = 0; v < table.variants.size(); ++v) {
    for (size_t m = 0; m < table.modes.size(); ++m) {
      const EvalCell& cell = table.cells[v][m];
      if (!cell.present) continue;
      out += table.variants[v] + "," + table.modes[m];
      for (double r : cell.per_seed) out += "," + format_double(r);
      out += "\n";
    }
  }
  return out;
}

}  // namespace fvla
