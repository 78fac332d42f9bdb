#include "plab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace plab {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {}

  void rect(double x, double y, double w, double h, const std::string& fill, const std::string& extra = {}) {
    body_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\"" << num(h)
          << "\" fill=\"" << fill << "\"" << extra << "/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& extra = {}) {
    body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"11\" font-family=\"sans-serif\""
          << extra << ">" << escape(s) << "</text>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, const std::string& extra = {}) {
    body_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
          << "\" stroke=\"" << stroke << "\"" << extra << "/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"" << num(r) << "\" fill=\"" << fill
          << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" points=\"";
    for (const auto& [x, y] : pts) body_ << num(x) << ',' << num(y) << ' ';
    body_ << "\"/>\n";
  }
  void raw(const std::string& s) { body_ << s; }

  std::string str() const {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w_) << "\" height=\"" << num(h_)
       << "\" viewBox=\"0 0 " << num(w_) << ' ' << num(h_) << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << body_.str() << "</svg>\n";
    return os.str();
  }

 private:
  double w_, h_;
  std::ostringstream body_;
};

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void pad() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
  double map(double v, double a, double b) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

// Blue-to-red ramp for t in [0, 1].
std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(40 + 200 * t));
  const int g = static_cast<int>(std::lround(90 + 40 * (1 - std::abs(2 * t - 1))));
  const int b = static_cast<int>(std::lround(220 - 190 * t));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

std::string svg_role_bars(const RoleStats& stats) {
  if (stats.by_role.empty()) throw std::invalid_argument("no role statistics to plot");
  const double bw = 70, gap = 30, h = 220, top = 30;
  Svg svg(60 + stats.by_role.size() * (bw + gap), h + 80);
  double hi = 0;
  for (const auto& [r, s] : stats.by_role) hi = std::max(hi, s.mean);
  if (!(hi > 0)) hi = 1;
  double x = 50;
  for (const auto& [role, s] : stats.by_role) {
    const double bh = s.mean / hi * h;
    svg.rect(x, top + h - bh, bw, bh, role == Role::Assistant ? "#d62728" : "#1f77b4",
             " class=\"bar\" data-role=\"" + std::string(to_string(role)) + "\"");
    svg.text(x, top + h - bh - 4, format_real(s.mean));
    svg.text(x, top + h + 16, std::string(to_string(role)));
    svg.text(x, top + h + 30, "median " + format_real(s.median));
    x += bw + gap;
  }
  svg.text(10, 16, "Mean per-token output entropy by role (nats)");
  return svg.str();
}

std::string svg_matrix(const CrossMatrixResult& result) {
  const auto& m = result.matrix;
  if (m.generators.empty() || m.evaluators.empty()) throw std::invalid_argument("empty matrix");
  const double cell = 80, left = 120, top = 60;
  Svg svg(left + cell * m.evaluators.size() + 20, top + cell * m.generators.size() + 20);
  Range r;
  for (const auto& row : m.cells)
    for (const auto& c : row)
      if (c) r.add(*c);
  r.pad();
  for (std::size_t g = 0; g < m.generators.size(); ++g) {
    svg.text(4, top + g * cell + cell / 2, m.generators[g]);
    for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
      const double x = left + e * cell, y = top + g * cell;
      const auto& c = m.cells[g][e];
      svg.rect(x, y, cell - 2, cell - 2, c ? ramp(r.map(*c, 0, 1)) : "#dddddd", " class=\"cell\"");
      svg.text(x + 6, y + cell / 2, c ? format_real(*c) : "n/a", " class=\"value\"");
    }
  }
  for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
    svg.text(left + e * cell, top - 18, m.evaluators[e]);
    svg.text(left + e * cell, top - 6, "diag-min " + std::string(to_string(result.diagonal_minimum[e])));
  }
  svg.text(4, 16, "Generator x evaluator mean entropy, " + std::string(to_string(m.condition)));
  return svg.str();
}

std::string svg_sweep(std::span<const SweepRecord> records, const FeedbackFit& fit) {
  Range rx, ry;
  for (const auto& rec : records) {
    if (rec.rel_excess && rec.rel_delta) {
      rx.add(*rec.rel_excess);
      ry.add(*rec.rel_delta);
    }
  }
  if (!std::isfinite(rx.lo)) throw std::invalid_argument("no sweep records with relative fields");
  rx.pad();
  ry.add(fit.a * rx.lo + fit.beta);
  ry.add(fit.a * rx.hi + fit.beta);
  ry.pad();
  const double W = 420, H = 320, L = 50, T = 30, R = 20, B = 40;
  Svg svg(W, H);
  for (const auto& rec : records) {
    if (!rec.rel_excess || !rec.rel_delta) continue;
    svg.circle(rx.map(*rec.rel_excess, L, W - R), ry.map(*rec.rel_delta, H - B, T), 2.5, "#1f77b4");
  }
  svg.line(rx.map(rx.lo, L, W - R), ry.map(fit.a * rx.lo + fit.beta, H - B, T), rx.map(rx.hi, L, W - R),
           ry.map(fit.a * rx.hi + fit.beta, H - B, T), "#d62728", " class=\"fit\"");
  svg.text(L, 18, "a = " + format_real(fit.a), " class=\"slope\"");
  svg.text(L + 160, 18, "beta = " + format_real(fit.beta), " class=\"intercept\"");
  svg.text(L, H - 8, "(S - H) / H");
  svg.text(4, T - 8, "dH / H");
  return svg.str();
}

std::string svg_pc_grid(std::span<const PcPanel> panels) {
  if (panels.empty()) throw std::invalid_argument("no PCA panels");
  std::vector<std::string> features, conditions;
  for (const auto& p : panels) {
    if (std::find(features.begin(), features.end(), p.feature) == features.end()) features.push_back(p.feature);
    if (std::find(conditions.begin(), conditions.end(), p.condition) == conditions.end())
      conditions.push_back(p.condition);
  }
  const double pw = 180, ph = 160, left = 90, top = 40;
  Svg svg(left + pw * features.size() + 10, top + ph * conditions.size() + 10);
  for (std::size_t c = 0; c < features.size(); ++c) svg.text(left + c * pw + 4, top - 10, features[c]);
  for (std::size_t r = 0; r < conditions.size(); ++r) svg.text(4, top + r * ph + ph / 2, conditions[r]);
  for (const auto& p : panels) {
    const auto c = static_cast<std::size_t>(std::find(features.begin(), features.end(), p.feature) - features.begin());
    const auto r =
        static_cast<std::size_t>(std::find(conditions.begin(), conditions.end(), p.condition) - conditions.begin());
    const double x0 = left + c * pw, y0 = top + r * ph;
    svg.raw("<g class=\"panel\" data-feature=\"" + escape(p.feature) + "\" data-condition=\"" + escape(p.condition) +
            "\">\n");
    svg.rect(x0 + 2, y0 + 2, pw - 4, ph - 4, "none", " stroke=\"#999999\"");
    const std::size_t k = p.pca.components;
    if (k >= 1) {
      Range rx, ry, rv;
      for (std::size_t i = 0; i < p.pca.rows; ++i) {
        rx.add(p.pca.coords[i * k]);
        ry.add(k >= 2 ? p.pca.coords[i * k + 1] : 0.0);
      }
      for (double v : p.bin_values) rv.add(v);
      rx.pad();
      ry.pad();
      rv.pad();
      std::vector<std::pair<double, double>> pts;
      for (std::size_t i = 0; i < p.pca.rows; ++i) {
        const double x = rx.map(p.pca.coords[i * k], x0 + 12, x0 + pw - 12);
        const double y = ry.map(k >= 2 ? p.pca.coords[i * k + 1] : 0.0, y0 + ph - 12, y0 + 12);
        pts.emplace_back(x, y);
      }
      svg.polyline(pts, "#bbbbbb");
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const double v = i < p.bin_values.size() ? rv.map(p.bin_values[i], 0, 1) : 0.5;
        svg.circle(pts[i].first, pts[i].second, 3, ramp(v));
      }
      std::string ev = "var";
      for (double e : p.pca.explained) ev += " " + format_real(e);
      svg.text(x0 + 6, y0 + ph - 6, ev, " font-size=\"8\"");
    }
    svg.raw("</g>\n");
  }
  return svg.str();
}

std::string svg_verdict_bars(std::span<const VerdictResult> results) {
  if (results.empty()) throw std::invalid_argument("no verdict results");
  const double bw = 36, gap = 12, h = 200, top = 30, left = 40;
  Svg svg(left + results.size() * (bw + gap) + 20, h + 110);
  double x = left;
  for (const auto& r : results) {
    const double bh = r.verdict.p_prefilled * h;
    const bool patched = r.patch_mode != PatchMode::None;
    svg.rect(x, top + h - bh, bw, bh, patched ? "#2ca02c" : "#d62728", " class=\"bar\"");
    svg.text(x, top + h - bh - 4, format_real(r.verdict.p_prefilled), " font-size=\"8\"");
    svg.text(x, top + h + 14, r.domain, " font-size=\"8\"");
    svg.text(x, top + h + 26, std::string(to_string(r.arm)), " font-size=\"7\"");
    x += bw + gap;
  }
  svg.line(left - 4, top + h, x, top + h, "#000000");
  svg.text(4, 16, "P(PREFILLED) at the verdict cue");
  return svg.str();
}

std::string svg_trajectories(std::span<const Trajectory> series, std::span<const std::string> labels) {
  if (series.empty()) throw std::invalid_argument("no trajectories");
  Range rx, ry;
  for (const auto& t : series) {
    for (std::size_t i = 0; i < t.smoothed.size(); ++i) {
      rx.add(static_cast<double>(t.positions[i]));
      ry.add(t.smoothed[i]);
    }
  }
  rx.pad();
  ry.pad();
  const double W = 480, H = 300, L = 50, T = 30, R = 20, B = 40;
  Svg svg(W, H);
  for (std::size_t s = 0; s < series.size(); ++s) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < series[s].smoothed.size(); ++i) {
      pts.emplace_back(rx.map(series[s].positions[i], L, W - R), ry.map(series[s].smoothed[i], H - B, T));
    }
    svg.polyline(pts, kPalette[s % 8]);
    const std::string label = s < labels.size() ? labels[s] : std::to_string(s);
    svg.text(W - R - 140, T + 12 * s, label + " slope " + format_real(series[s].slope), " font-size=\"8\"");
  }
  svg.text(L, H - 8, "position");
  svg.text(4, 16, "Per-position output entropy (nats, smoothed)");
  return svg.str();
}

std::string svg_steering(const SteeringSweepResult& result) {
  if (result.bins.empty()) throw std::invalid_argument("no steering bins");
  Range rx, ry;
  for (const auto& b : result.bins) {
    rx.add(b.bin_feature_mean);
    ry.add(b.entropy_mean - b.entropy_stddev);
    ry.add(b.entropy_mean + b.entropy_stddev);
  }
  ry.add(result.baseline_mean);
  rx.pad();
  ry.pad();
  const double W = 420, H = 300, L = 50, T = 30, R = 20, B = 40;
  Svg svg(W, H);
  const double yb = ry.map(result.baseline_mean, H - B, T);
  svg.line(L, yb, W - R, yb, "#7f7f7f", " stroke-dasharray=\"4 3\"");
  std::vector<std::pair<double, double>> pts;
  for (const auto& b : result.bins) {
    const double x = rx.map(b.bin_feature_mean, L, W - R);
    svg.line(x, ry.map(b.entropy_mean - b.entropy_stddev, H - B, T), x,
             ry.map(b.entropy_mean + b.entropy_stddev, H - B, T), "#1f77b4");
    pts.emplace_back(x, ry.map(b.entropy_mean, H - B, T));
  }
  svg.polyline(pts, "#1f77b4");
  for (const auto& [x, y] : pts) svg.circle(x, y, 3, "#1f77b4");
  svg.text(L, 18, "frac " + format_real(result.frac) + ", layers " + std::to_string(result.layer_lo) + "-" +
                      std::to_string(result.layer_hi) +
                      (result.trend ? ", slope " + format_real(result.trend->slope) : std::string()));
  svg.text(L, H - 8, "bin feature value (nats)");
  return svg.str();
}

std::string svg_commitment(std::span<const CommitmentStats> rows) {
  if (rows.empty()) throw std::invalid_argument("no commitment rows");
  const double rh = 24, left = 140, w = 300, top = 30;
  Svg svg(left + w + 160, top + rh * rows.size() + 20);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = top + i * rh;
    svg.text(4, y + 14, rows[i].domain);
    const double f = rows[i].mode_fraction.value_or(0.0);
    svg.rect(left, y + 2, f * w, rh - 6, "#9467bd", " class=\"bar\"");
    svg.text(left + f * w + 4, y + 14,
             (rows[i].mode_fraction ? format_real(f) : std::string("undefined")) + " (" +
                 std::to_string(rows[i].distinct_topics) + " topics)");
  }
  svg.text(4, 16, "Fraction of completions choosing the most common topic");
  return svg.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
}

}  // namespace plab
