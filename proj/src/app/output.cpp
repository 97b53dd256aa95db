#include "ncf/app/output.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/chrono.h>
#include <fmt/format.h>

namespace ncf::app {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Range padded() const {
    if (!(lo <= hi)) return {0.0, 1.0};
    if (hi - lo <= 1e-300 + 1e-12 * std::abs(hi)) {
      const double pad = std::abs(hi) > 0.0 ? 0.5 * std::abs(hi) * 1e-6 + 1e-300 : 0.5;
      return {lo - pad, hi + pad};
    }
    const double pad = 0.05 * (hi - lo);
    return {lo >= 0.0 ? std::max(0.0, lo - pad) : lo - pad, hi + pad};
  }
  Range exact() const { return lo < hi ? *this : padded(); }
};

struct Frame {
  double x0, y0, w, h;  // pixel box
  Range xr, yr;

  double px(double x) const { return x0 + (x - xr.lo) / (xr.hi - xr.lo) * w; }
  double py(double y) const { return y0 + h - (y - yr.lo) / (yr.hi - yr.lo) * h; }
};

/// Enough significant digits to tell ticks `spacing` apart.
std::string tick(double v, double spacing) {
  if (spacing >= 10.0 && std::abs(v) < 1e9) return fmt::format("{:.0f}", v);
  const double mag = std::max(std::abs(v), spacing);
  const int digits = std::clamp(static_cast<int>(std::ceil(std::log10(mag / spacing))) + 2, 3, 15);
  return fmt::format("{:.{}g}", v, digits);
}

void axes(std::string& svg, const Frame& f, const std::string& title, const std::string& xlabel,
          const std::string& ylabel, bool x_ticks = true) {
  svg += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"none\" "
                     "stroke=\"#333\"/>\n",
                     f.x0, f.y0, f.w, f.h);
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                     f.x0 + f.w / 2, f.y0 - 8, escape_xml(title));
  for (int k = 0; k <= 4; ++k) {
    const double yv = f.yr.lo + k * (f.yr.hi - f.yr.lo) / 4;
    const double y = f.py(yv);
    svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"#ddd\"/>\n", f.x0, y,
                       f.x0 + f.w, y);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n",
                       f.x0 - 4, y + 3, tick(yv, (f.yr.hi - f.yr.lo) / 4));
    if (!x_ticks) continue;
    const double xv = f.xr.lo + k * (f.xr.hi - f.xr.lo) / 4;
    const double x = f.px(xv);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n", x,
                       f.y0 + f.h + 14, tick(xv, (f.xr.hi - f.xr.lo) / 4));
  }
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
                     f.x0 + f.w / 2, f.y0 + f.h + 30, escape_xml(xlabel));
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"12\" "
                     "transform=\"rotate(-90 {:.2f} {:.2f})\">{}</text>\n",
                     f.x0 - 88, f.y0 + f.h / 2, f.x0 - 88, f.y0 + f.h / 2, escape_xml(ylabel));
}

void polyline(std::string& svg, const Frame& f, const std::vector<double>& x, const std::vector<double>& y,
              const char* color) {
  std::string pts;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) continue;
    if (!pts.empty()) pts += ' ';
    pts += fmt::format("{:.2f},{:.2f}", f.px(x[i]), f.py(y[i]));
  }
  if (pts.empty()) return;
  svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"/>\n", color, pts);
}

std::string svg_open(double w, double h, bool timestamp) {
  std::string svg = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
      "viewBox=\"0 0 {:.0f} {:.0f}\" font-family=\"sans-serif\">\n",
      w, h, w, h);
  if (timestamp) svg += "<!-- generated " + utc_timestamp() + " -->\n";
  svg += fmt::format("<rect width=\"{:.0f}\" height=\"{:.0f}\" fill=\"white\"/>\n", w, h);
  return svg;
}

std::string num(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

std::string utc_timestamp() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(std::chrono::system_clock::now())));
}

std::string trajectory_csv_header(std::size_t blocks) {
  std::string h = "t,step,loss,norm_w";
  for (std::size_t b = 0; b < blocks; ++b) h += fmt::format(",block_norm_{}", b);
  for (std::size_t b = 0; b < blocks; ++b) h += fmt::format(",block_cos_{}", b);
  return h + ",kink_flag";
}

std::string trajectory_csv(const Trajectory& traj) {
  const std::size_t nb = traj.empty() ? 0 : static_cast<std::size_t>(traj.front().block_norms.size());
  std::string out = trajectory_csv_header(nb) + "\n";
  for (std::size_t i : traj.snapshot_indices()) {
    const Record& r = traj.records[i];
    out += num(r.t) + "," + std::to_string(r.step) + "," + num(r.loss) + "," + num(r.norm);
    for (std::size_t b = 0; b < nb; ++b) out += "," + num(r.block_norms[static_cast<Index>(b)]);
    for (std::size_t b = 0; b < nb; ++b) out += "," + num(r.block_cos[static_cast<Index>(b)]);
    out += r.kink ? ",1\n" : ",0\n";
  }
  return out;
}

std::string loss_norm_svg(const Trajectory& traj, const std::string& title, bool timestamp) {
  const double W = 820, H = 600;
  std::string svg = svg_open(W, H, timestamp);
  std::vector<double> step, loss, norm;
  for (std::size_t i : traj.snapshot_indices()) {
    step.push_back(static_cast<double>(traj.records[i].step));
    loss.push_back(traj.records[i].loss);
    norm.push_back(traj.records[i].norm);
  }
  Range xr;
  for (double s : step) xr.add(s);
  Range lr, nr;
  for (double v : loss) lr.add(v);
  for (double v : norm) nr.add(v);
  const Frame top{120, 50, 660, 200, xr.exact(), lr.padded()};
  const Frame bottom{120, 340, 660, 200, xr.exact(), nr.padded()};
  axes(svg, top, title + ": loss", "step", "loss");
  polyline(svg, top, step, loss, kPalette[0]);
  axes(svg, bottom, title + ": parameter norm", "step", "norm");
  polyline(svg, bottom, step, norm, kPalette[3]);
  return svg + "</svg>\n";
}

std::string angles_ncf_svg(const AnglePlot& plot, const std::string& title, bool timestamp) {
  const double W = 900, H = 480;
  std::string svg = svg_open(W, H, timestamp);
  Range xr, yr;
  for (const auto& s : plot.series) {
    for (double x : s.x) xr.add(x);
    for (double y : s.y) yr.add(y);
  }
  const bool curve = plot.ncf_curve.has_value();
  Frame left{120, 50, curve ? 520.0 : 740.0, 360, xr.exact(), curve ? Range{0.0, 360.0} : yr.padded()};
  axes(svg, left, title + ": directions", "step", plot.y_label);
  if (plot.series.empty()) {
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"12\">no angle data</text>\n",
                       left.x0 + left.w / 2, left.y0 + left.h / 2);
  }
  for (std::size_t k = 0; k < plot.series.size(); ++k)
    polyline(svg, left, plot.series[k].x, plot.series[k].y, kPalette[k % std::size(kPalette)]);
  if (curve) {
    Range nr;
    for (double v : plot.ncf_curve->x) nr.add(v);
    const Frame right{700, 50, 170, 360, nr.padded(), Range{0.0, 360.0}};
    axes(svg, right, "N(theta)", "N", "", false);
    for (int k = 0; k <= 2; ++k) {
      const double xv = right.xr.lo + k * (right.xr.hi - right.xr.lo) / 2;
      svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"9\">{:.3g}</text>\n",
                         right.px(xv), right.y0 + right.h + 14, xv);
    }
    polyline(svg, right, plot.ncf_curve->x, plot.ncf_curve->y, "#000");
    for (double a : plot.kkt_angles) {
      const double y = left.py(a);
      svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"#888\" "
                         "stroke-dasharray=\"4 3\"/>\n",
                         left.x0, y, right.x0 + right.w, y);
    }
  }
  return svg + "</svg>\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace ncf::app
