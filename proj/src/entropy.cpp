#include "plab/entropy.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "plab/runtime.hpp"

namespace plab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Distribution kernels

namespace {

void require_finite(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("empty logit vector");
  for (double v : logits) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite logit");
  }
}

}  // namespace

double entropy_of(std::span<const double> logits, double temperature) {
  require_finite(logits);
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw std::invalid_argument("temperature must be >= 0");
  if (temperature == 0.0) return 0.0;
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  // H = log Z - sum(e^z z) / Z with z = (l - max) / T
  double z_sum = 0.0, ez_sum = 0.0;
  for (double l : logits) {
    const double z = (l - max_logit) / temperature;
    const double e = std::exp(z);
    z_sum += e;
    ez_sum += e * z;
  }
  const double h = std::log(z_sum) - ez_sum / z_sum;
  return std::max(h, 0.0);
}

std::vector<double> log_softmax(std::span<const double> logits) {
  require_finite(logits);
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - max_logit);
  const double log_z = max_logit + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_z;
  return out;
}

double surprise_of(std::span<const double> logits, TokenId token) {
  require_finite(logits);
  if (token >= logits.size()) throw std::out_of_range("token outside logit vector");
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - max_logit);
  return std::max(0.0, std::log(z) - (logits[token] - max_logit));
}

std::vector<TokenId> rank_order(std::span<const double> logits) {
  std::vector<TokenId> order(logits.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
  return order;
}

// ---------------------------------------------------------------------------
// Role statistics

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  const std::size_t mid = values.size() / 2;
  s.median = values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / n);
  s.min = values.front();
  s.max = values.back();
  return s;
}

RoleStats role_stats(std::span<const Trace> traces, const RoleStatsOptions& options) {
  RoleStats out;
  for (const auto& t : traces) {
    for (const auto& r : t.tokens) {
      if (!options.include_special && t.is_special(r.token_id)) continue;
      out.values[r.role].push_back(r.predicted_entropy);
    }
  }
  for (const auto& [role, values] : out.values) out.by_role[role] = summarize(values);
  return out;
}

Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi) {
  if (bins == 0 || !(hi > lo)) throw std::invalid_argument("histogram needs bins >= 1 and hi > lo");
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  for (double v : values) {
    auto b = static_cast<std::ptrdiff_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

// ---------------------------------------------------------------------------
// Cross-model matrices

std::string_view to_string(Tristate t) {
  switch (t) {
    case Tristate::False: return "false";
    case Tristate::True: return "true";
    case Tristate::Indeterminate: return "indeterminate";
  }
  return "?";
}

Role response_role(TemplateCondition condition) {
  switch (condition) {
    case TemplateCondition::AssistantField: return Role::Assistant;
    case TemplateCondition::UserField: return Role::User;
    case TemplateCondition::NoTemplate: return Role::Untagged;
  }
  return Role::Untagged;
}

std::vector<TemplateCondition> conditions_present(std::span<const Trace> traces) {
  std::set<TemplateCondition> seen;
  for (const auto& t : traces) seen.insert(t.meta.template_condition);
  return {seen.begin(), seen.end()};
}

std::vector<Tristate> diagonal_minimum_flags(const CrossMatrix& m) {
  std::vector<Tristate> flags;
  for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
    auto self_row = std::find(m.generators.begin(), m.generators.end(), m.evaluators[e]);
    if (self_row == m.generators.end()) {
      flags.push_back(Tristate::Indeterminate);
      continue;
    }
    const auto g_self = static_cast<std::size_t>(self_row - m.generators.begin());
    const auto& self = m.cells[g_self][e];
    if (!self) {
      flags.push_back(Tristate::Indeterminate);
      continue;
    }
    bool is_min = true;
    for (std::size_t g = 0; g < m.generators.size(); ++g) {
      if (g != g_self && m.cells[g][e] && *m.cells[g][e] < *self) is_min = false;
    }
    flags.push_back(is_min ? Tristate::True : Tristate::False);
  }
  return flags;
}

CrossMatrixResult cross_matrix(std::span<const Trace> traces, TemplateCondition condition,
                               const std::optional<std::string>& persona) {
  const Role role = response_role(condition);
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> sums;
  std::set<std::string> generators, evaluators;
  for (const auto& t : traces) {
    if (t.meta.template_condition != condition) continue;
    if (persona && t.meta.persona != persona) continue;
    if (t.meta.generator_id.empty() || t.meta.evaluator_id.empty()) {
      throw std::invalid_argument("trace lacks generator_id / evaluator_id");
    }
    generators.insert(t.meta.generator_id);
    evaluators.insert(t.meta.evaluator_id);
    auto& [sum, count] = sums[{t.meta.generator_id, t.meta.evaluator_id}];
    for (const auto& r : t.tokens) {
      if (r.role != role || t.is_special(r.token_id)) continue;
      sum += r.predicted_entropy;
      ++count;
    }
  }
  CrossMatrixResult out;
  auto& m = out.matrix;
  m.condition = condition;
  m.generators.assign(generators.begin(), generators.end());
  m.evaluators.assign(evaluators.begin(), evaluators.end());
  m.cells.assign(m.generators.size(), std::vector<std::optional<double>>(m.evaluators.size()));
  m.counts.assign(m.generators.size(), std::vector<std::size_t>(m.evaluators.size(), 0));
  for (std::size_t g = 0; g < m.generators.size(); ++g) {
    for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
      auto it = sums.find({m.generators[g], m.evaluators[e]});
      if (it == sums.end() || it->second.second == 0) continue;
      m.cells[g][e] = it->second.first / static_cast<double>(it->second.second);
      m.counts[g][e] = it->second.second;
    }
  }
  out.diagonal_minimum = diagonal_minimum_flags(m);
  return out;
}

std::vector<SelfAdvantage> self_advantage(const CrossMatrix& m) {
  std::vector<SelfAdvantage> out;
  for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
    SelfAdvantage s;
    s.evaluator = m.evaluators[e];
    auto self_row = std::find(m.generators.begin(), m.generators.end(), s.evaluator);
    std::vector<double> cross;
    std::optional<double> self;
    for (std::size_t g = 0; g < m.generators.size(); ++g) {
      if (!m.cells[g][e]) continue;
      if (self_row != m.generators.end() && g == static_cast<std::size_t>(self_row - m.generators.begin())) {
        self = m.cells[g][e];
      } else {
        cross.push_back(*m.cells[g][e]);
      }
    }
    s.n_cross = cross.size();
    if (self && !cross.empty()) {
      s.defined = true;
      s.self = *self;
      s.cross_mean = std::accumulate(cross.begin(), cross.end(), 0.0) / static_cast<double>(cross.size());
      s.cross_min = *std::min_element(cross.begin(), cross.end());
      s.cross_max = *std::max_element(cross.begin(), cross.end());
      s.advantage = s.cross_mean - s.self;
    }
    out.push_back(s);
  }
  return out;
}

std::vector<GroupedAdvantage> aggregate_advantage(std::span<const CrossMatrixResult> matrices,
                                                  const std::map<std::string, std::string>& group_of) {
  std::map<std::pair<std::string, TemplateCondition>, std::vector<SelfAdvantage>> grouped;
  for (const auto& r : matrices) {
    for (const auto& s : self_advantage(r.matrix)) {
      auto it = group_of.find(s.evaluator);
      if (!s.defined || it == group_of.end()) continue;
      grouped[{it->second, r.matrix.condition}].push_back(s);
    }
  }
  std::vector<GroupedAdvantage> out;
  for (const auto& [key, rows] : grouped) {
    GroupedAdvantage g;
    g.group = key.first;
    g.condition = key.second;
    g.n_models = rows.size();
    g.cross_min = rows.front().cross_min;
    g.cross_max = rows.front().cross_max;
    for (const auto& s : rows) {
      g.self_mean += s.self;
      g.cross_mean += s.cross_mean;
      g.cross_min = std::min(g.cross_min, s.cross_min);
      g.cross_max = std::max(g.cross_max, s.cross_max);
    }
    g.self_mean /= static_cast<double>(rows.size());
    g.cross_mean /= static_cast<double>(rows.size());
    out.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweep and fit

std::vector<std::size_t> default_ranks(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

std::vector<SweepRecord> single_step_sweep(Session& session, std::span<const TokenId> context,
                                           std::span<const std::size_t> ranks, const std::string& context_id) {
  if (context.empty()) throw std::invalid_argument("sweep context is empty");
  const std::size_t vocab = session.weights().dims.vocab_size;
  for (auto r : ranks) {
    if (r >= vocab) throw std::invalid_argument("sweep rank exceeds vocabulary");
  }
  const std::size_t start = session.length();
  if (start + context.size() + 1 > session.weights().dims.max_context) {
    throw ContextOverflow("sweep context does not fit");
  }
  session.feed(context);
  const std::size_t base = session.length();
  const std::vector<double> p = session.last_logits();
  const double h = entropy_of(p);
  const auto order = rank_order(p);

  std::vector<SweepRecord> out;
  out.reserve(ranks.size());
  for (std::size_t rank : ranks) {
    SweepRecord rec;
    rec.context_id = context_id;
    rec.baseline_H = h;
    rec.rank = rank;
    rec.token_id = order[rank];
    rec.surprise = surprise_of(p, rec.token_id);
    session.feed(rec.token_id);
    rec.next_H = entropy_of(session.last_logits());
    session.truncate(base);
    if (h >= kEntropyFloor) {
      rec.rel_excess = (rec.surprise - h) / h;
      rec.rel_delta = (rec.next_H - h) / h;
    }
    out.push_back(std::move(rec));
  }
  session.truncate(start);
  return out;
}

LinearFit ols(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("ols: x and y differ in length");
  if (x.size() < 2) throw std::invalid_argument("ols: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw std::domain_error("slope undefined: all x values are equal");
  LinearFit f;
  f.n = x.size();
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (f.slope * x[i] + f.intercept);
    ss += r * r;
  }
  f.rmse = std::sqrt(ss / n);
  return f;
}

FeedbackFit fit_feedback(std::span<const SweepRecord> records) {
  std::vector<double> x, y;
  for (const auto& r : records) {
    if (r.rel_excess && r.rel_delta) {
      x.push_back(*r.rel_excess);
      y.push_back(*r.rel_delta);
    }
  }
  if (x.size() < 2) throw std::invalid_argument("feedback fit needs >= 2 records with relative fields");
  const LinearFit f = ols(x, y);
  return {f.slope, f.intercept, f.rmse, f.n};
}

// ---------------------------------------------------------------------------
// Trajectories

Trajectory trajectory(const Trace& trace, std::size_t window) {
  if (trace.tokens.empty()) throw std::invalid_argument("trajectory of an empty trace");
  Trajectory t;
  const std::size_t n = trace.tokens.size();
  t.window = std::clamp<std::size_t>(window, 1, n);
  for (const auto& r : trace.tokens) {
    t.positions.push_back(r.position);
    t.raw.push_back(r.predicted_entropy);
  }
  const std::size_t left = (t.window - 1) / 2;
  const std::size_t right = t.window - 1 - left;
  t.smoothed.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= left ? i - left : 0;
    const std::size_t hi = std::min(n - 1, i + right);
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += t.raw[j];
    t.smoothed[i] = s / static_cast<double>(hi - lo + 1);
  }
  if (n >= 2) {
    std::vector<double> x(t.positions.begin(), t.positions.end());
    const LinearFit f = ols(x, t.raw);
    t.slope = f.slope;
    t.intercept = f.intercept;
  } else {
    t.intercept = t.raw.front();
  }
  return t;
}

TrajectoryBand trajectory_band(std::span<const Trace> traces, std::size_t window) {
  TrajectoryBand band;
  std::vector<std::vector<double>> columns;
  for (const auto& tr : traces) {
    const Trajectory t = trajectory(tr, window);
    if (columns.size() < t.smoothed.size()) columns.resize(t.smoothed.size());
    for (std::size_t i = 0; i < t.smoothed.size(); ++i) columns[i].push_back(t.smoothed[i]);
  }
  for (const auto& c : columns) {
    const Summary s = summarize(c);
    band.mean.push_back(s.mean);
    band.stddev.push_back(s.stddev);
    band.count.push_back(s.count);
  }
  return band;
}

BodyEntropy body_entropy(const Trace& trace, std::size_t start, std::size_t end) {
  const Role role = response_role(trace.meta.template_condition);
  std::vector<double> response;
  for (const auto& r : trace.tokens) {
    if (r.role == role && !trace.is_special(r.token_id)) response.push_back(r.predicted_entropy);
  }
  BodyEntropy b;
  b.start = start;
  b.end = std::min(end, response.size());
  if (b.end <= b.start) throw std::invalid_argument("no response positions in the body window");
  b.count = b.end - b.start;
  b.mean = std::accumulate(response.begin() + static_cast<std::ptrdiff_t>(b.start),
                           response.begin() + static_cast<std::ptrdiff_t>(b.end), 0.0) /
           static_cast<double>(b.count);
  return b;
}

// ---------------------------------------------------------------------------
// Emitters

std::string format_real(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

namespace {
std::string opt_real(const std::optional<double>& x) { return x ? format_real(*x) : ""; }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
}  // namespace

void write_role_stats_csv(std::ostream& os, const RoleStats& stats) {
  os << "role,count,mean_nats,median_nats,stddev_nats,min_nats,max_nats\n";
  for (const auto& [role, s] : stats.by_role) {
    os << to_string(role) << ',' << s.count << ',' << format_real(s.mean) << ',' << format_real(s.median) << ','
       << format_real(s.stddev) << ',' << format_real(s.min) << ',' << format_real(s.max) << '\n';
  }
}

void write_matrix_csv(std::ostream& os, const CrossMatrix& m) {
  os << "generator,evaluator,condition,mean_nats,n_tokens\n";
  for (std::size_t g = 0; g < m.generators.size(); ++g) {
    for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
      if (!m.cells[g][e]) continue;
      os << m.generators[g] << ',' << m.evaluators[e] << ',' << to_string(m.condition) << ','
         << format_real(*m.cells[g][e]) << ',' << m.counts[g][e] << '\n';
    }
  }
}

void write_matrix_flags_csv(std::ostream& os, const CrossMatrixResult& r) {
  os << "evaluator,condition,diagonal_is_column_min\n";
  for (std::size_t e = 0; e < r.matrix.evaluators.size(); ++e) {
    os << r.matrix.evaluators[e] << ',' << to_string(r.matrix.condition) << ',' << to_string(r.diagonal_minimum[e])
       << '\n';
  }
}

void write_self_advantage_csv(std::ostream& os, const CrossMatrix& m, std::span<const SelfAdvantage> rows) {
  os << "evaluator,condition,defined,self_nats,cross_mean_nats,cross_min_nats,cross_max_nats,advantage_nats,n_cross\n";
  for (const auto& s : rows) {
    os << s.evaluator << ',' << to_string(m.condition) << ',' << (s.defined ? "true" : "false") << ',';
    if (s.defined) {
      os << format_real(s.self) << ',' << format_real(s.cross_mean) << ',' << format_real(s.cross_min) << ','
         << format_real(s.cross_max) << ',' << format_real(s.advantage);
    } else {
      os << ",,,,";
    }
    os << ',' << s.n_cross << '\n';
  }
}

void write_grouped_advantage_csv(std::ostream& os, std::span<const GroupedAdvantage> rows) {
  os << "group,condition,self_nats,cross_mean_nats,cross_min_nats,cross_max_nats,n_models\n";
  for (const auto& g : rows) {
    os << g.group << ',' << to_string(g.condition) << ',' << format_real(g.self_mean) << ','
       << format_real(g.cross_mean) << ',' << format_real(g.cross_min) << ',' << format_real(g.cross_max) << ','
       << g.n_models << '\n';
  }
}

void write_sweep_csv(std::ostream& os, std::span<const SweepRecord> records) {
  os << "context_id,baseline_H,rank,token_id,surprise_S,next_H,rel_excess,rel_delta\n";
  for (const auto& r : records) {
    os << r.context_id << ',' << format_real(r.baseline_H) << ',' << r.rank << ',' << r.token_id << ','
       << format_real(r.surprise) << ',' << format_real(r.next_H) << ',' << opt_real(r.rel_excess) << ','
       << opt_real(r.rel_delta) << '\n';
  }
}

std::vector<SweepRecord> read_sweep_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("empty sweep CSV");
  const auto header = split_csv_line(line);
  const std::vector<std::string> expected = {"context_id", "baseline_H", "rank",       "token_id",
                                             "surprise_S", "next_H",     "rel_excess", "rel_delta"};
  if (header != expected) throw std::invalid_argument("unexpected sweep CSV header");
  std::vector<SweepRecord> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != expected.size()) {
      throw std::invalid_argument("sweep CSV line " + std::to_string(line_no) + " has " + std::to_string(c.size()) +
                                  " columns");
    }
    try {
      SweepRecord r;
      r.context_id = c[0];
      r.baseline_H = std::stod(c[1]);
      r.rank = std::stoul(c[2]);
      r.token_id = static_cast<TokenId>(std::stoul(c[3]));
      r.surprise = std::stod(c[4]);
      r.next_H = std::stod(c[5]);
      if (!c[6].empty()) r.rel_excess = std::stod(c[6]);
      if (!c[7].empty()) r.rel_delta = std::stod(c[7]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("sweep CSV line " + std::to_string(line_no) + " is malformed");
    }
  }
  return out;
}

void write_fit_csv(std::ostream& os, const FeedbackFit& fit) {
  os << "a,beta,rmse,n_points\n"
     << format_real(fit.a) << ',' << format_real(fit.beta) << ',' << format_real(fit.rmse) << ',' << fit.n_points
     << '\n';
}

void write_trajectory_csv(std::ostream& os, const std::string& trace_id, const Trajectory& t) {
  for (std::size_t i = 0; i < t.raw.size(); ++i) {
    os << trace_id << ',' << t.positions[i] << ',' << format_real(t.raw[i]) << ',' << format_real(t.smoothed[i])
       << '\n';
  }
}

json to_json(const Summary& s) {
  return {{"count", s.count}, {"mean", s.mean}, {"median", s.median},
          {"stddev", s.stddev}, {"min", s.min},   {"max", s.max}};
}

json to_json(const RoleStats& s) {
  json j = json::object();
  for (const auto& [role, summary] : s.by_role) j[std::string(to_string(role))] = to_json(summary);
  return j;
}

json to_json(const CrossMatrixResult& r) {
  const auto& m = r.matrix;
  json cells = json::array();
  for (std::size_t g = 0; g < m.generators.size(); ++g) {
    json row = json::array();
    for (std::size_t e = 0; e < m.evaluators.size(); ++e) {
      row.push_back(m.cells[g][e] ? json(*m.cells[g][e]) : json(nullptr));
    }
    cells.push_back(row);
  }
  json flags = json::array();
  for (auto f : r.diagonal_minimum) flags.push_back(std::string(to_string(f)));
  return {{"condition", std::string(to_string(m.condition))},
          {"generators", m.generators},
          {"evaluators", m.evaluators},
          {"cells", cells},
          {"counts", m.counts},
          {"diagonal_minimum", flags}};
}

json to_json(const SelfAdvantage& s) {
  json j = {{"evaluator", s.evaluator}, {"defined", s.defined}, {"n_cross", s.n_cross}};
  if (s.defined) {
    j["self"] = s.self;
    j["cross_mean"] = s.cross_mean;
    j["cross_min"] = s.cross_min;
    j["cross_max"] = s.cross_max;
    j["advantage"] = s.advantage;
  }
  return j;
}

json to_json(const SweepRecord& r) {
  json j = {{"context_id", r.context_id}, {"baseline_H", r.baseline_H}, {"rank", r.rank},
            {"token_id", r.token_id},     {"surprise_S", r.surprise},   {"next_H", r.next_H}};
  if (r.rel_excess) j["rel_excess"] = *r.rel_excess;
  if (r.rel_delta) j["rel_delta"] = *r.rel_delta;
  return j;
}

json to_json(const FeedbackFit& f) {
  return {{"a", f.a}, {"beta", f.beta}, {"rmse", f.rmse}, {"n_points", f.n_points}};
}

json to_json(const Trajectory& t) {
  return {{"window", t.window}, {"slope", t.slope}, {"intercept", t.intercept}, {"positions", t.positions},
          {"raw", t.raw},       {"smoothed", t.smoothed}};
}

json to_json(const BodyEntropy& b) {
  return {{"mean", b.mean}, {"start", b.start}, {"end", b.end}, {"count", b.count}};
}

}  // namespace plab
