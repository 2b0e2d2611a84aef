#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mese/corpus.hpp"
#include "mese/encoder.hpp"

namespace mese {

using Distribution = std::vector<double>;

struct ExpansionConfig {
  int target = 100;       // T, entities admitted per query
  int window = 5;         // W, admissions per round
  double gamma = 0.8;     // admission-round weight decay, (0,1]
  bool ensemble = false;  // leave-one-out seed re-ranking
  double epsilon = 1e-12; // smoothing before logs

  void check() const;
};

struct EntityRepresentation {
  int entity_id = -1;
  Distribution distribution;  // length V_e, unit sum
};

// Ordered candidates for one query; seeds never appear.
struct RankedExpansion {
  int query_index = -1;
  int class_id = 0;
  std::vector<int> seeds;
  std::vector<std::pair<int, double>> ranked;  // score desc, ties by id asc
};

// Mean of the per-context predicted distributions, renormalised.
EntityRepresentation entity_representation(const Model& model, const Corpus& corpus, int entity_id,
                                           bool drop_text = false, bool drop_image = false);

std::vector<Distribution> all_representations(const Model& model, const Corpus& corpus,
                                              bool drop_text = false, bool drop_image = false);

// Weighted average of member distributions; weights must be positive.
Distribution class_representation(const std::vector<std::pair<const Distribution*, double>>& members);

// Symmetric KL after epsilon-smoothing and renormalisation.
double divergence(const Distribution& p, const Distribution& q, double epsilon = 1e-12);

// Iterative window search: admit the W nearest candidates per round with
// weight gamma^round into the class representation; a final pass re-scores
// the admitted set against the full representation. `seed_reps` lets callers
// substitute ablated representations for the seed side only.
RankedExpansion window_search(const Query& query, int query_index,
                              const std::vector<Distribution>& candidate_reps,
                              const std::vector<Distribution>& seed_reps,
                              const ExpansionConfig& config);

// Leave-one-out seed ensemble; aggregate score is the mean reciprocal rank
// over the |seeds|+1 runs (absent from a run counts as rank T+1).
RankedExpansion rerank(const Query& query, int query_index,
                       const std::vector<Distribution>& candidate_reps,
                       const std::vector<Distribution>& seed_reps,
                       const ExpansionConfig& config);

std::vector<RankedExpansion> expand_all(const Model& model, const Corpus& corpus,
                                        const ExpansionConfig& config);

// JSONL: {class_id, seeds, ranked: [[entity_id, score], ...]}
void save_expansions(const std::vector<RankedExpansion>& expansions, const std::string& path);
std::vector<RankedExpansion> load_expansions(const std::string& path);

}  // namespace mese
