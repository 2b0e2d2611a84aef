#include "mese/evaluation.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace mese {

using json = nlohmann::ordered_json;

double precision_at_k(const std::vector<int>& ranked, const std::set<int>& gt, int k) {
  if (k <= 0) throw ValidationError("precision_at_k: k must be >= 1");
  int hits = 0;
  for (int i = 0; i < k && i < static_cast<int>(ranked.size()); ++i)
    if (gt.count(ranked[static_cast<std::size_t>(i)])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(k);
}

double average_precision_at_k(const std::vector<int>& ranked, const std::set<int>& gt, int k) {
  if (k <= 0) throw ValidationError("average_precision_at_k: k must be >= 1");
  if (gt.empty()) throw ValidationError("average_precision_at_k: empty ground truth");
  int hits = 0;
  double sum = 0.0;
  for (int i = 0; i < k && i < static_cast<int>(ranked.size()); ++i) {
    if (gt.count(ranked[static_cast<std::size_t>(i)])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(std::min<std::size_t>(static_cast<std::size_t>(k), gt.size()));
}

namespace {

QueryMetrics score_query(const RankedExpansion& ex, const Query& query, int query_index) {
  std::set<int> seeds(query.seeds.begin(), query.seeds.end());
  std::set<int> gt;
  for (int g : query.ground_truth)
    if (!seeds.count(g)) gt.insert(g);
  if (gt.empty())
    throw ValidationError("evaluate: query " + std::to_string(query_index) +
                          " has no ground truth beyond its seeds");
  std::vector<int> ranked;
  ranked.reserve(ex.ranked.size());
  for (const auto& [e, score] : ex.ranked)
    if (!seeds.count(e)) ranked.push_back(e);

  QueryMetrics m;
  m.query_index = query_index;
  m.class_id = query.class_id;
  m.seed_count = static_cast<int>(query.seeds.size());
  for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i) {
    m.ap[i] = average_precision_at_k(ranked, gt, kMetricCutoffs[i]);
    m.p[i] = precision_at_k(ranked, gt, kMetricCutoffs[i]);
  }
  return m;
}

}  // namespace

MetricReport evaluate(const std::vector<RankedExpansion>& expansions,
                      const std::vector<Query>& queries) {
  // Pair expansions with queries by (class_id, seed set); each expansion is
  // consumed once.
  std::map<std::pair<int, std::vector<int>>, std::vector<std::size_t>> index;
  for (std::size_t i = 0; i < expansions.size(); ++i) {
    std::vector<int> key_seeds = expansions[i].seeds;
    std::sort(key_seeds.begin(), key_seeds.end());
    index[{expansions[i].class_id, std::move(key_seeds)}].push_back(i);
  }

  MetricReport report;
  std::map<int, std::vector<const QueryMetrics*>> by_class;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    std::vector<int> key_seeds = queries[qi].seeds;
    std::sort(key_seeds.begin(), key_seeds.end());
    auto it = index.find({queries[qi].class_id, key_seeds});
    if (it == index.end() || it->second.empty())
      throw ValidationError("evaluate: missing expansion for query " + std::to_string(qi) +
                            " (class " + std::to_string(queries[qi].class_id) + ")");
    const std::size_t ei = it->second.back();
    it->second.pop_back();
    report.per_query.push_back(score_query(expansions[ei], queries[qi], static_cast<int>(qi)));
  }

  for (const auto& m : report.per_query) by_class[m.class_id].push_back(&m);
  for (const auto& [cls, rows] : by_class) {
    std::array<double, 8> mean{};
    for (const auto* m : rows) {
      for (std::size_t i = 0; i < 4; ++i) {
        mean[i] += m->ap[i];
        mean[i + 4] += m->p[i];
      }
    }
    for (auto& v : mean) v /= static_cast<double>(rows.size());
    report.per_class[cls] = mean;
  }

  const double n = static_cast<double>(report.per_query.size());
  for (const auto& m : report.per_query)
    for (std::size_t i = 0; i < 4; ++i) {
      report.map_at[i] += m.ap[i] / n;
      report.p_at[i] += m.p[i] / n;
    }
  for (std::size_t i = 0; i < 4; ++i) report.avg += (report.map_at[i] + report.p_at[i]) / 8.0;
  return report;
}

double map_at_k(const std::vector<RankedExpansion>& expansions, const std::vector<Query>& queries,
                int k) {
  auto it = std::find(kMetricCutoffs.begin(), kMetricCutoffs.end(), k);
  const MetricReport report = evaluate(expansions, queries);
  if (it != kMetricCutoffs.end())
    return report.map_at[static_cast<std::size_t>(it - kMetricCutoffs.begin())];
  // Arbitrary cutoff: recompute directly.
  double sum = 0.0;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    std::set<int> seeds(queries[qi].seeds.begin(), queries[qi].seeds.end());
    std::set<int> gt;
    for (int g : queries[qi].ground_truth)
      if (!seeds.count(g)) gt.insert(g);
    std::vector<int> ranked;
    for (const auto& [e, s] : expansions[qi].ranked)
      if (!seeds.count(e)) ranked.push_back(e);
    sum += average_precision_at_k(ranked, gt, k);
  }
  return sum / static_cast<double>(queries.size());
}

AblationMode parse_ablation_mode(const std::string& name) {
  if (name == "none" || name == "baseline") return AblationMode::kBaseline;
  if (name == "T_s") return AblationMode::kNoTextSeeds;
  if (name == "T_c") return AblationMode::kNoTextCands;
  if (name == "V_s") return AblationMode::kNoImageSeeds;
  if (name == "V_c") return AblationMode::kNoImageCands;
  if (name == "T") return AblationMode::kNoTextAll;
  if (name == "V") return AblationMode::kNoImageAll;
  throw ValidationError("unknown ablation mode '" + name +
                        "' (expected one of none,T_s,T_c,V_s,V_c,T,V)");
}

std::string ablation_mode_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::kBaseline: return "none";
    case AblationMode::kNoTextSeeds: return "T_s";
    case AblationMode::kNoTextCands: return "T_c";
    case AblationMode::kNoImageSeeds: return "V_s";
    case AblationMode::kNoImageCands: return "V_c";
    case AblationMode::kNoTextAll: return "T";
    case AblationMode::kNoImageAll: return "V";
  }
  throw ValidationError("unknown ablation mode");
}

MetricReport ablate_modality(const Model& model, const Corpus& corpus, AblationMode mode,
                             const ExpansionConfig& config) {
  const bool drop_text = mode == AblationMode::kNoTextSeeds || mode == AblationMode::kNoTextCands ||
                         mode == AblationMode::kNoTextAll;
  const bool drop_image = mode == AblationMode::kNoImageSeeds ||
                          mode == AblationMode::kNoImageCands || mode == AblationMode::kNoImageAll;
  const bool seed_side = mode == AblationMode::kNoTextSeeds || mode == AblationMode::kNoImageSeeds ||
                         mode == AblationMode::kNoTextAll || mode == AblationMode::kNoImageAll;
  const bool cand_side = mode == AblationMode::kNoTextCands || mode == AblationMode::kNoImageCands ||
                         mode == AblationMode::kNoTextAll || mode == AblationMode::kNoImageAll;

  const auto intact = all_representations(model, corpus);
  std::vector<Distribution> ablated;
  if (drop_text || drop_image)
    ablated = all_representations(model, corpus, drop_text, drop_image);

  const auto& seed_reps = seed_side ? ablated : intact;
  const auto& cand_reps = cand_side ? ablated : intact;

  std::vector<RankedExpansion> expansions;
  expansions.reserve(corpus.queries.size());
  for (std::size_t qi = 0; qi < corpus.queries.size(); ++qi) {
    const Query& q = corpus.queries[qi];
    expansions.push_back(config.ensemble
                             ? rerank(q, static_cast<int>(qi), cand_reps, seed_reps, config)
                             : window_search(q, static_cast<int>(qi), cand_reps, seed_reps, config));
  }
  return evaluate(expansions, corpus.queries);
}

void write_report_csv(const MetricReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out << "query_index,class_id,seed_count";
  for (int k : kMetricCutoffs) out << ",AP@" << k;
  for (int k : kMetricCutoffs) out << ",P@" << k;
  out << '\n';
  out.precision(10);
  for (const auto& m : report.per_query) {
    out << m.query_index << ',' << m.class_id << ',' << m.seed_count;
    for (double v : m.ap) out << ',' << v;
    for (double v : m.p) out << ',' << v;
    out << '\n';
  }
}

void write_report_json(const MetricReport& report, const std::string& path) {
  json j;
  for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i)
    j["MAP@" + std::to_string(kMetricCutoffs[i])] = report.map_at[i];
  for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i)
    j["P@" + std::to_string(kMetricCutoffs[i])] = report.p_at[i];
  j["Avg"] = report.avg;
  json per_class = json::object();
  for (const auto& [cls, mean] : report.per_class) {
    json row;
    for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i)
      row["MAP@" + std::to_string(kMetricCutoffs[i])] = mean[i];
    for (std::size_t i = 0; i < kMetricCutoffs.size(); ++i)
      row["P@" + std::to_string(kMetricCutoffs[i])] = mean[i + 4];
    per_class[std::to_string(cls)] = row;
  }
  j["per_class"] = per_class;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace mese
