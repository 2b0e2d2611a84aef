#include "mese/expansion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

namespace mese {

using json = nlohmann::ordered_json;

void ExpansionConfig::check() const {
  if (window < 1) throw ValidationError("ExpansionConfig: window must be >= 1");
  if (target < window) throw ValidationError("ExpansionConfig: target must be >= window");
  if (gamma <= 0.0 || gamma > 1.0) throw ValidationError("ExpansionConfig: gamma must be in (0,1]");
  if (epsilon < 0.0) throw ValidationError("ExpansionConfig: epsilon must be >= 0");
}

EntityRepresentation entity_representation(const Model& model, const Corpus& corpus, int entity_id,
                                           bool drop_text, bool drop_image) {
  if (entity_id < 0 || entity_id >= corpus.entity_count())
    throw ValidationError("entity_representation: unknown entity " + std::to_string(entity_id));
  Distribution mean;
  int count = 0;
  for (const auto& ctx : corpus.contexts) {
    if (ctx.entity_id != entity_id) continue;
    const auto yhat = model.predict_distribution(make_sample(corpus, ctx, drop_text, drop_image));
    if (mean.empty()) mean.assign(yhat.size(), 0.0);
    for (std::size_t i = 0; i < yhat.size(); ++i) mean[i] += yhat[i];
    ++count;
  }
  if (count == 0)
    throw ValidationError("entity_representation: entity " + std::to_string(entity_id) +
                          " ('" + corpus.entities[static_cast<std::size_t>(entity_id)].name +
                          "') has no contexts");
  double sum = 0.0;
  for (auto& v : mean) {
    v /= count;
    sum += v;
  }
  for (auto& v : mean) v /= sum;
  return {entity_id, std::move(mean)};
}

std::vector<Distribution> all_representations(const Model& model, const Corpus& corpus,
                                              bool drop_text, bool drop_image) {
  std::vector<Distribution> out(corpus.entities.size());
  std::vector<int> counts(corpus.entities.size(), 0);
  for (const auto& ctx : corpus.contexts) {
    const auto yhat = model.predict_distribution(make_sample(corpus, ctx, drop_text, drop_image));
    auto& acc = out[static_cast<std::size_t>(ctx.entity_id)];
    if (acc.empty()) acc.assign(yhat.size(), 0.0);
    for (std::size_t i = 0; i < yhat.size(); ++i) acc[i] += yhat[i];
    counts[static_cast<std::size_t>(ctx.entity_id)] += 1;
  }
  for (std::size_t e = 0; e < out.size(); ++e) {
    if (counts[e] == 0)
      throw ValidationError("all_representations: entity " + std::to_string(e) + " ('" +
                            corpus.entities[e].name + "') has no contexts");
    double sum = 0.0;
    for (auto& v : out[e]) sum += v;
    for (auto& v : out[e]) v /= sum;
  }
  return out;
}

Distribution class_representation(
    const std::vector<std::pair<const Distribution*, double>>& members) {
  if (members.empty()) throw ValidationError("class_representation: empty member set");
  const std::size_t dim = members.front().first->size();
  Distribution out(dim, 0.0);
  double total_weight = 0.0;
  for (const auto& [dist, weight] : members) {
    if (weight <= 0.0) throw ValidationError("class_representation: weights must be positive");
    if (dist->size() != dim) throw ValidationError("class_representation: length mismatch");
    for (std::size_t i = 0; i < dim; ++i) out[i] += weight * (*dist)[i];
    total_weight += weight;
  }
  for (auto& v : out) v /= total_weight;
  return out;
}

double divergence(const Distribution& p, const Distribution& q, double epsilon) {
  if (p.size() != q.size()) throw ValidationError("divergence: length mismatch");
  if (p.empty()) throw ValidationError("divergence: empty distributions");
  double ps = 0.0, qs = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    ps += p[i] + epsilon;
    qs += q[i] + epsilon;
  }
  double kl_pq = 0.0, kl_qp = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = (p[i] + epsilon) / ps;
    const double qi = (q[i] + epsilon) / qs;
    if (pi > 0.0) kl_pq += pi * std::log(pi / qi);
    if (qi > 0.0) kl_qp += qi * std::log(qi / pi);
  }
  return 0.5 * (kl_pq + kl_qp);
}

namespace {

struct Admitted {
  int entity_id;
  double weight;
};

RankedExpansion window_search_impl(const std::vector<int>& centroid_seeds,
                                   const std::vector<int>& excluded, const Query& query,
                                   int query_index, const std::vector<Distribution>& candidate_reps,
                                   const std::vector<Distribution>& seed_reps,
                                   const ExpansionConfig& config) {
  config.check();
  const int n = static_cast<int>(candidate_reps.size());
  std::set<int> out_of_play(excluded.begin(), excluded.end());
  if (config.target + static_cast<int>(out_of_play.size()) > n)
    throw ValidationError("window_search: target " + std::to_string(config.target) +
                          " infeasible for " + std::to_string(n) + " candidates");

  std::vector<Admitted> admitted;
  admitted.reserve(static_cast<std::size_t>(config.target));
  std::set<int> in_cur(out_of_play);

  auto centroid = [&]() {
    std::vector<std::pair<const Distribution*, double>> members;
    for (int s : centroid_seeds) members.push_back({&seed_reps[static_cast<std::size_t>(s)], 1.0});
    for (const auto& a : admitted)
      members.push_back({&candidate_reps[static_cast<std::size_t>(a.entity_id)], a.weight});
    return class_representation(members);
  };

  int round = 0;
  while (static_cast<int>(admitted.size()) < config.target) {
    ++round;
    const Distribution q = centroid();
    std::vector<std::pair<double, int>> scored;  // (divergence, id)
    scored.reserve(static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) {
      if (in_cur.count(e)) continue;
      scored.push_back({divergence(candidate_reps[static_cast<std::size_t>(e)], q, config.epsilon), e});
    }
    const int take = std::min(config.window, config.target - static_cast<int>(admitted.size()));
    std::partial_sort(scored.begin(), scored.begin() + take, scored.end());
    const double weight = std::pow(config.gamma, round);
    for (int i = 0; i < take; ++i) {
      admitted.push_back({scored[static_cast<std::size_t>(i)].second, weight});
      in_cur.insert(scored[static_cast<std::size_t>(i)].second);
    }
  }

  // Final pass: re-score the admitted set against the full representation.
  const Distribution q = centroid();
  std::vector<std::pair<double, int>> final_scored;
  final_scored.reserve(admitted.size());
  for (const auto& a : admitted)
    final_scored.push_back(
        {divergence(candidate_reps[static_cast<std::size_t>(a.entity_id)], q, config.epsilon),
         a.entity_id});
  std::sort(final_scored.begin(), final_scored.end());

  RankedExpansion out;
  out.query_index = query_index;
  out.class_id = query.class_id;
  out.seeds = query.seeds;
  out.ranked.reserve(final_scored.size());
  for (const auto& [d, e] : final_scored) out.ranked.push_back({e, -d});
  return out;
}

}  // namespace

RankedExpansion window_search(const Query& query, int query_index,
                              const std::vector<Distribution>& candidate_reps,
                              const std::vector<Distribution>& seed_reps,
                              const ExpansionConfig& config) {
  return window_search_impl(query.seeds, query.seeds, query, query_index, candidate_reps,
                            seed_reps, config);
}

RankedExpansion rerank(const Query& query, int query_index,
                       const std::vector<Distribution>& candidate_reps,
                       const std::vector<Distribution>& seed_reps, const ExpansionConfig& config) {
  if (query.seeds.size() < 2) throw ValidationError("rerank: need at least 2 seeds");
  std::vector<std::vector<int>> variants;
  variants.push_back(query.seeds);
  for (std::size_t drop = 0; drop < query.seeds.size(); ++drop) {
    std::vector<int> subset;
    for (std::size_t i = 0; i < query.seeds.size(); ++i)
      if (i != drop) subset.push_back(query.seeds[i]);
    variants.push_back(std::move(subset));
  }

  std::map<int, double> aggregate;
  const double absent = 1.0 / static_cast<double>(config.target + 1);
  std::vector<std::map<int, int>> ranks(variants.size());
  std::set<int> universe;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const auto run = window_search_impl(variants[v], query.seeds, query, query_index,
                                        candidate_reps, seed_reps, config);
    for (std::size_t r = 0; r < run.ranked.size(); ++r) {
      ranks[v][run.ranked[r].first] = static_cast<int>(r + 1);
      universe.insert(run.ranked[r].first);
    }
  }
  for (int e : universe) {
    double score = 0.0;
    for (std::size_t v = 0; v < variants.size(); ++v) {
      auto it = ranks[v].find(e);
      score += it == ranks[v].end() ? absent : 1.0 / static_cast<double>(it->second);
    }
    aggregate[e] = score / static_cast<double>(variants.size());
  }

  std::vector<std::pair<double, int>> order;  // (-score, id) for asc sort
  order.reserve(aggregate.size());
  for (const auto& [e, score] : aggregate) order.push_back({-score, e});
  std::sort(order.begin(), order.end());

  RankedExpansion out;
  out.query_index = query_index;
  out.class_id = query.class_id;
  out.seeds = query.seeds;
  for (int i = 0; i < config.target && i < static_cast<int>(order.size()); ++i)
    out.ranked.push_back({order[static_cast<std::size_t>(i)].second,
                          -order[static_cast<std::size_t>(i)].first});
  return out;
}

std::vector<RankedExpansion> expand_all(const Model& model, const Corpus& corpus,
                                        const ExpansionConfig& config) {
  const auto reps = all_representations(model, corpus);
  std::vector<RankedExpansion> out;
  out.reserve(corpus.queries.size());
  for (std::size_t qi = 0; qi < corpus.queries.size(); ++qi) {
    const Query& q = corpus.queries[qi];
    out.push_back(config.ensemble ? rerank(q, static_cast<int>(qi), reps, reps, config)
                                  : window_search(q, static_cast<int>(qi), reps, reps, config));
  }
  return out;
}

void save_expansions(const std::vector<RankedExpansion>& expansions, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  for (const auto& ex : expansions) {
    json j;
    j["class_id"] = ex.class_id;
    j["seeds"] = ex.seeds;
    json ranked = json::array();
    for (const auto& [e, score] : ex.ranked) ranked.push_back(json::array({e, score}));
    j["ranked"] = ranked;
    out << j.dump() << '\n';
  }
}

std::vector<RankedExpansion> load_expansions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<RankedExpansion> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    RankedExpansion ex;
    ex.query_index = static_cast<int>(out.size());
    ex.class_id = j.at("class_id").get<int>();
    ex.seeds = j.at("seeds").get<std::vector<int>>();
    for (const auto& pair : j.at("ranked"))
      ex.ranked.push_back({pair.at(0).get<int>(), pair.at(1).get<double>()});
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mese
