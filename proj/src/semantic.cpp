#include "plab/semantic.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include "plab/entropy.hpp"

namespace plab {

using nlohmann::json;

namespace {

std::string fold_keyword(const std::string& k) {
  const auto w = words_of(k);
  std::string out;
  for (const auto& s : w) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

}  // namespace

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

void TopicLexicon::validate() const {
  for (const auto& [domain, topics] : domains) {
    if (topics.empty()) throw std::invalid_argument("lexicon domain '" + domain + "' has no topics");
    std::map<std::string, std::string> owner;
    for (const auto& [topic, keywords] : topics) {
      if (keywords.empty()) throw std::invalid_argument("lexicon topic '" + topic + "' has no keywords");
      for (const auto& k : keywords) {
        const std::string f = fold_keyword(k);
        if (f.empty()) throw std::invalid_argument("lexicon keyword without words in topic '" + topic + "'");
        auto [it, inserted] = owner.emplace(f, topic);
        if (!inserted && it->second != topic) {
          throw std::invalid_argument("keyword '" + f + "' maps to both '" + it->second + "' and '" + topic +
                                      "' in domain '" + domain + "'");
        }
      }
    }
  }
}

const std::map<std::string, std::vector<std::string>>& TopicLexicon::topics(const std::string& domain) const {
  auto it = domains.find(domain);
  if (it == domains.end()) throw std::invalid_argument("lexicon does not cover domain '" + domain + "'");
  return it->second;
}

TopicLexicon TopicLexicon::from_json(const json& j) {
  TopicLexicon lex;
  try {
    for (const auto& [domain, topics] : j.items()) {
      for (const auto& [topic, keywords] : topics.items()) {
        lex.domains[domain][topic] = keywords.get<std::vector<std::string>>();
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed lexicon: ") + e.what());
  }
  lex.validate();
  return lex;
}

TopicLexicon load_lexicon(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lexicon " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("lexicon " + path + ": " + e.what());
  }
  return TopicLexicon::from_json(j);
}

std::string default_lexicon_path() { return std::string(PLAB_DATA_DIR) + "/topic_lexicon.json"; }

std::optional<std::string> topic_classify(std::string_view text, const TopicLexicon& lexicon,
                                          const std::string& domain, std::size_t window) {
  if (text.empty()) throw std::invalid_argument("cannot classify empty text");
  std::vector<std::string> words = words_of(text);
  if (words.size() > window) words.resize(window);

  struct Hit {
    std::size_t start;
    std::size_t length;
    std::string topic;
  };
  std::optional<Hit> best;
  for (const auto& [topic, keywords] : lexicon.topics(domain)) {
    for (const auto& k : keywords) {
      const auto kw = words_of(k);
      if (kw.empty() || kw.size() > words.size()) continue;
      for (std::size_t s = 0; s + kw.size() <= words.size(); ++s) {
        if (!std::equal(kw.begin(), kw.end(), words.begin() + static_cast<std::ptrdiff_t>(s))) continue;
        const Hit h{s, kw.size(), topic};
        if (!best || h.start < best->start || (h.start == best->start && h.length > best->length) ||
            (h.start == best->start && h.length == best->length && h.topic < best->topic)) {
          best = h;
        }
        break;
      }
    }
  }
  if (!best) return std::nullopt;
  return best->topic;
}

CommitmentStats commitment_stats(std::span<const std::string> samples, const TopicLexicon& lexicon,
                                 const std::string& domain, std::size_t window) {
  if (samples.empty()) throw std::invalid_argument("commitment_stats needs at least one sample");
  CommitmentStats s;
  s.domain = domain;
  s.n_samples = samples.size();
  for (const auto& text : samples) {
    const auto topic = text.empty() ? std::nullopt : topic_classify(text, lexicon, domain, window);
    if (topic) {
      ++s.topic_counts[*topic];
      ++s.classified;
    } else {
      ++s.unclassified_count;
    }
  }
  s.distinct_topics = s.topic_counts.size();
  if (s.classified > 0) {
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    auto mode = s.topic_counts.begin();
    for (auto it = s.topic_counts.begin(); it != s.topic_counts.end(); ++it) {
      if (it->second > mode->second) mode = it;
    }
    s.mode_topic = mode->first;
    s.mode_fraction = static_cast<double>(mode->second) / static_cast<double>(s.classified);
  }
  return s;
}

CrossoverResult crossover_from_traces(const std::string& domain, std::span<const Trace> on_policy,
                                      std::span<const Trace> off_policy, std::size_t body_start,
                                      std::size_t body_end) {
  auto arm = [&](std::span<const Trace> traces) {
    CrossoverArm a;
    for (const auto& t : traces) {
      try {
        a.body_entropy.push_back(body_entropy(t, body_start, body_end).mean);
      } catch (const std::invalid_argument&) {
        ++a.excluded;
      }
    }
    const Summary s = summarize(a.body_entropy);
    a.mean = s.mean;
    a.stddev = s.stddev;
    return a;
  };
  CrossoverResult r;
  r.domain = domain;
  r.on_policy = arm(on_policy);
  r.off_policy = arm(off_policy);
  if (!r.on_policy.body_entropy.empty() && !r.off_policy.body_entropy.empty()) {
    r.gap = r.off_policy.mean - r.on_policy.mean;
  }
  return r;
}

TokenSeq chat_prompt(const std::optional<std::string>& system, const std::string& user, const std::string& prefill) {
  std::vector<Turn> turns;
  if (system) turns.push_back({Role::System, *system});
  turns.push_back({Role::User, user});
  TokenSeq seq = render_chat(turns, true).tokens;
  if (!prefill.empty()) seq.append(tok::encode(prefill), Role::Assistant, Origin::Prefilled);
  return seq;
}

CrossoverRun crossover_experiment(const ModelWeights& weights, const CrossoverConfig& config) {
  config.pair.validate();
  if (config.n == 0) throw std::invalid_argument("crossover needs n >= 1");
  CrossoverRun run;
  const TokenSeq on = chat_prompt(config.system_prompt, config.pair.specific, config.pair.prefill);
  const TokenSeq off = chat_prompt(config.system_prompt, config.pair.underspecified, config.pair.prefill);
  TraceOptions options;
  options.condition = TemplateCondition::AssistantField;
  for (std::size_t i = 0; i < config.n; ++i) {
    const std::uint64_t seed = substream_seed(config.seed, "crossover/" + config.pair.domain + "/" + std::to_string(i));
    run.on_policy.push_back(generate(weights, on, config.max_tokens, config.temperature, seed, nullptr, options).trace);
    run.off_policy.push_back(
        generate(weights, off, config.max_tokens, config.temperature, seed, nullptr, options).trace);
  }
  run.result = crossover_from_traces(config.pair.domain, run.on_policy, run.off_policy, config.body_start,
                                     config.body_end);
  return run;
}

std::vector<std::string> sample_completions(const ModelWeights& weights, const std::string& user, std::size_t n,
                                            std::size_t max_tokens, double temperature, std::uint64_t seed,
                                            const std::string& stream) {
  const TokenSeq prompt = chat_prompt(std::nullopt, user);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = generate(weights, prompt, max_tokens, temperature,
                            substream_seed(seed, stream + "/" + std::to_string(i)));
    std::vector<TokenId> response(r.tokens.ids.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                  r.tokens.ids.end());
    std::erase_if(response, [](TokenId t) { return t >= 256; });
    out.push_back(tok::decode(response));
  }
  return out;
}

void write_commitment_csv(std::ostream& os, std::span<const CommitmentStats> rows) {
  os << "domain,n_samples,classified,unclassified,distinct_topics,mode_topic,mode_fraction\n";
  for (const auto& s : rows) {
    os << s.domain << ',' << s.n_samples << ',' << s.classified << ',' << s.unclassified_count << ','
       << s.distinct_topics << ',' << s.mode_topic.value_or("") << ','
       << (s.mode_fraction ? format_real(*s.mode_fraction) : "undefined") << '\n';
  }
}

void write_crossover_csv(std::ostream& os, std::span<const CrossoverResult> rows) {
  os << "domain,on_policy_mean,on_policy_stddev,on_policy_n,on_policy_excluded,off_policy_mean,off_policy_stddev,"
        "off_policy_n,off_policy_excluded,gap\n";
  for (const auto& r : rows) {
    os << r.domain << ',' << format_real(r.on_policy.mean) << ',' << format_real(r.on_policy.stddev) << ','
       << r.on_policy.body_entropy.size() << ',' << r.on_policy.excluded << ',' << format_real(r.off_policy.mean)
       << ',' << format_real(r.off_policy.stddev) << ',' << r.off_policy.body_entropy.size() << ','
       << r.off_policy.excluded << ',' << (r.gap ? format_real(*r.gap) : "undefined") << '\n';
  }
}

json to_json(const CommitmentStats& s) {
  json j = {{"domain", s.domain},
            {"n_samples", s.n_samples},
            {"classified", s.classified},
            {"unclassified", s.unclassified_count},
            {"distinct_topics", s.distinct_topics},
            {"topic_counts", s.topic_counts}};
  if (s.mode_topic) j["mode_topic"] = *s.mode_topic;
  if (s.mode_fraction) j["mode_fraction"] = *s.mode_fraction;
  return j;
}

json to_json(const CrossoverResult& r) {
  auto arm = [](const CrossoverArm& a) {
    return json{{"body_entropy", a.body_entropy}, {"mean", a.mean}, {"stddev", a.stddev}, {"excluded", a.excluded}};
  };
  json j = {{"domain", r.domain}, {"on_policy", arm(r.on_policy)}, {"off_policy", arm(r.off_policy)}};
  if (r.gap) j["gap"] = *r.gap;
  return j;
}

}  // namespace plab
