#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mese/rng.hpp"

namespace mese {

struct LossHyper {
  double eta = 0.075;       // label smoothing factor, [0,1)
  double tau = 0.1;         // class prior probability, [0,1)
  double beta = 1.0;        // hard-negative concentration level, >= 0
  double temperature = 0.5; // > 0
  int pair_count = 8;       // N, pairs per contrastive batch, >= 2

  void check() const;
};

// Cross-entropy with the printed smoothing scheme: the eta term penalises
// log(1 - yhat[j]) over non-target entries. Mean over the batch; log
// arguments clamped at 1e-12.
double masked_entity_loss(const std::vector<std::vector<double>>& yhat,
                          const std::vector<int>& targets, double eta,
                          std::vector<std::vector<double>>* d_yhat = nullptr);

struct ContrastiveDetail {
  double value = 0.0;
  std::vector<double> r_minus;      // per anchor, after the floor clamp
  std::vector<bool> floor_active;   // per anchor
};

// Debiased, hard-negative-weighted contrastive loss over 2N unit vectors
// where (z[2i], z[2i+1]) are positive pairs. Sum of per-anchor terms.
ContrastiveDetail contrastive_loss_detailed(const std::vector<std::vector<double>>& z, double tau,
                                            double beta, double temperature,
                                            std::vector<std::vector<double>>* d_z = nullptr);
double contrastive_loss(const std::vector<std::vector<double>>& z, double tau, double beta,
                        double temperature, std::vector<std::vector<double>>* d_z = nullptr);

// Column-contrastive clustering loss: rows are simplex vectors, odd/even
// samples form the N x M matrices C and C'; the 2M L2-normalised columns are
// treated as samples with (C[:,k], C'[:,k]) positive.
double clustering_loss(const std::vector<std::vector<double>>& c, double tau, double beta,
                       double temperature, std::vector<std::vector<double>>* d_c = nullptr);

// KL(ytilde || yhat); no gradient flows into ytilde.
double distillation_loss(const std::vector<double>& yhat, const std::vector<double>& ytilde,
                         std::vector<double>* d_yhat = nullptr);

// Central finite differences on randomly probed coordinates of `params`.
// `eval` must recompute the loss from the (mutated) params. Returns
// max over probes of |analytic - fd| / max(1e-8, |fd|).
double gradient_check(const std::function<double()>& eval, std::span<double> params,
                      std::span<const double> analytic, int probes, double step, Rng& rng);

}  // namespace mese
