#pragma once

#include <string>
#include <vector>

namespace mese {

struct ImageCandidate {
  int id = 0;
  std::vector<double> clip_image;                // unit vector
  std::vector<std::vector<double>> objects;      // detected-object embeddings, may be empty
};

struct RerankQuery {
  std::vector<double> clip_text;      // unit vector
  std::vector<double> typical_image;  // unit vector
  double alpha = 0.5;                 // [0,1]
};

// alpha * (clip_image . clip_text) + (1-alpha) * max_j cos(object_j, typical).
// An empty object list contributes 0 to the second term.
double score_image(const ImageCandidate& candidate, const RerankQuery& query);

// Argmax of score_image; ties resolve to the lowest candidate id.
int select_best(const std::vector<ImageCandidate>& candidates, const RerankQuery& query);

// Standard Fleiss kappa over an items x categories count table with a fixed
// rater count per item.
double fleiss_kappa(const std::vector<std::vector<int>>& table, int raters);

// Inverse of the mean pairwise cosine similarity.
double diversity(const std::vector<std::vector<double>>& embeddings);

struct RerankGroup {
  std::string id;
  RerankQuery query;  // alpha field ignored on disk; supplied at scoring time
  std::vector<ImageCandidate> candidates;
};

// rerank.bin: "MESE-RRK v1" header line, JSON index line, float32 vectors.
void save_rerank_file(const std::vector<RerankGroup>& groups, int dim, const std::string& path);
std::vector<RerankGroup> load_rerank_file(const std::string& path);

}  // namespace mese
