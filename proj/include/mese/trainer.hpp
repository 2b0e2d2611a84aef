#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mese/corpus.hpp"
#include "mese/encoder.hpp"
#include "mese/expansion.hpp"
#include "mese/objectives.hpp"

namespace mese {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MiningConfig {
  int k_pos = 10;        // ranks 1..k_pos (plus seeds) form the positive pool
  int l_neg = 170;       // negatives are ranks l_neg..u_neg, both inclusive
  int u_neg = 200;
  double rho_pos = 0.5;  // fraction of batch pairs drawn from the positive pool

  void check(int candidate_count) const;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 32;       // contexts per pretrain step
  int pretrain_epochs = 30;
  int refine_epochs = 2;     // passes over the mined pair stream per round
  int rounds = 0;            // R
  double momentum = 0.99;    // EMA factor m
  LossHyper loss;
  MiningConfig mining;
  ExpansionConfig expansion;
  std::uint64_t rng_seed = 1;

  void check() const;
};

struct StepRecord {
  int step = 0;
  std::string phase;  // "pretrain" or "refine"
  double l_mask = 0.0, l_con = 0.0, l_clu = 0.0, l_mod = 0.0;
  double total = 0.0;
};

// 2N context references; (2i, 2i+1) are two contexts of the same entity.
struct PairBatch {
  std::vector<int> context_ids;
  std::vector<int> entity_ids;
};

enum LossSelect : unsigned {
  kLossMask = 1u,
  kLossCon = 2u,
  kLossClu = 4u,
  kLossMod = 8u,
};

struct BatchLossTerms {
  double l_mask = 0.0, l_con = 0.0, l_clu = 0.0, l_mod = 0.0;
  double total() const { return l_mask + l_con + l_clu + l_mod; }
};

// Forwards every context in the batch through the student (and the teacher
// when distillation is selected), evaluates the selected losses, and, if
// grad_out is non-null, accumulates d(total)/d(student params) into it.
BatchLossTerms compute_batch_loss(const Model& model, std::span<const double> params,
                                  const Corpus& corpus, const PairBatch& batch,
                                  const LossHyper& hyper, unsigned which,
                                  std::vector<double>* grad_out);

// First-order adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::size_t size, double lr, double weight_decay);
  void step(std::span<double> params, std::span<const double> grad);

 private:
  double lr_, wd_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// Masked-entity + distillation phase; EMA update after every step.
void pretrain(Model& model, const Corpus& corpus, const TrainConfig& config,
              std::vector<StepRecord>& log);

// Positive pool = top-k_pos ranks plus seeds, negative pool = ranks
// l_neg..u_neg (positives win conflicts across queries). Single-context
// entities pair a context with itself.
std::vector<PairBatch> mine_pairs(const std::vector<RankedExpansion>& expansions,
                                  const Corpus& corpus, const MiningConfig& mining, int pair_count,
                                  int n_batches, Rng& rng);

// All four objectives on a mined pair stream.
void refine(Model& model, const Corpus& corpus, const std::vector<PairBatch>& batches,
            const TrainConfig& config, std::vector<StepRecord>& log);

struct TrainResult {
  std::vector<StepRecord> log;
  // snapshots[r] = expansion of every query after round r; R+1 entries.
  std::vector<std::vector<RankedExpansion>> snapshots;
};

// pretrain, then R rounds of (expand -> mine -> refine), expanding once more
// after each refine. on_round fires after each snapshot with the model state.
TrainResult train_full(
    Model& model, const Corpus& corpus, const TrainConfig& config,
    const std::function<void(int round, const Model& model,
                             const std::vector<RankedExpansion>& snapshot)>& on_round = {});

void save_train_log(const std::vector<StepRecord>& log, const std::string& path);

}  // namespace mese
