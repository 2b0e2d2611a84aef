#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mese/corpus.hpp"
#include "mese/expansion.hpp"

namespace mese {

inline constexpr std::array<int, 4> kMetricCutoffs{10, 20, 50, 100};

// |top-K intersect gt| / K; lists shorter than K still divide by K.
double precision_at_k(const std::vector<int>& ranked, const std::set<int>& gt, int k);

// AP@K = sum_{k<=K} P@k * rel(k) / min(K, |gt|).
double average_precision_at_k(const std::vector<int>& ranked, const std::set<int>& gt, int k);

struct QueryMetrics {
  int query_index = 0;
  int class_id = 0;
  int seed_count = 0;
  std::array<double, 4> ap{};  // AP@{10,20,50,100}
  std::array<double, 4> p{};
};

struct MetricReport {
  std::vector<QueryMetrics> per_query;
  std::map<int, std::array<double, 8>> per_class;  // AP@K x4 then P@K x4
  std::array<double, 4> map_at{};
  std::array<double, 4> p_at{};
  double avg = 0.0;  // mean of the eight global values
};

// Seeds are given, not retrieved: they are removed from both the ranked list
// and the ground truth before scoring.
MetricReport evaluate(const std::vector<RankedExpansion>& expansions,
                      const std::vector<Query>& queries);

double map_at_k(const std::vector<RankedExpansion>& expansions, const std::vector<Query>& queries,
                int k);

enum class AblationMode {
  kBaseline,       // none
  kNoTextSeeds,    // T_s
  kNoTextCands,    // T_c
  kNoImageSeeds,   // V_s
  kNoImageCands,   // V_c
  kNoTextAll,      // T
  kNoImageAll,     // V
};

AblationMode parse_ablation_mode(const std::string& name);
std::string ablation_mode_name(AblationMode mode);

// Re-runs the expansion with the named modality replaced by the learned
// placeholder on the seed side, the candidate side, or everywhere.
MetricReport ablate_modality(const Model& model, const Corpus& corpus, AblationMode mode,
                             const ExpansionConfig& config);

void write_report_csv(const MetricReport& report, const std::string& path);
void write_report_json(const MetricReport& report, const std::string& path);

}  // namespace mese
