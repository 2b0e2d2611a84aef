#include "mese/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mese/corpus.hpp"  // ValidationError
#include "mese/mat.hpp"

namespace mese {

namespace {
constexpr double kLogClamp = 1e-12;

double clamped_log(double x) { return std::log(std::max(x, kLogClamp)); }
}  // namespace

void LossHyper::check() const {
  if (eta < 0.0 || eta >= 1.0) throw ValidationError("LossHyper: eta must be in [0,1)");
  if (tau < 0.0 || tau >= 1.0) throw ValidationError("LossHyper: tau must be in [0,1)");
  if (beta < 0.0) throw ValidationError("LossHyper: beta must be >= 0");
  if (temperature <= 0.0) throw ValidationError("LossHyper: temperature must be > 0");
  if (pair_count < 2) throw ValidationError("LossHyper: pair count must be >= 2");
}

double masked_entity_loss(const std::vector<std::vector<double>>& yhat,
                          const std::vector<int>& targets, double eta,
                          std::vector<std::vector<double>>* d_yhat) {
  if (eta < 0.0 || eta >= 1.0) throw ValidationError("masked_entity_loss: eta must be in [0,1)");
  if (yhat.empty() || yhat.size() != targets.size())
    throw ValidationError("masked_entity_loss: batch/target size mismatch");
  const double inv_n = 1.0 / static_cast<double>(yhat.size());
  if (d_yhat) {
    d_yhat->resize(yhat.size());
    for (std::size_t i = 0; i < yhat.size(); ++i)
      (*d_yhat)[i].assign(yhat[i].size(), 0.0);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < yhat.size(); ++i) {
    const auto& y = yhat[i];
    const int target = targets[i];
    if (target < 0 || target >= static_cast<int>(y.size()))
      throw ValidationError("masked_entity_loss: target out of range");
    double acc = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (static_cast<int>(j) == target) {
        acc += (1.0 - eta) * clamped_log(y[j]);
        if (d_yhat && y[j] > kLogClamp)
          (*d_yhat)[i][j] += -(1.0 - eta) / y[j] * inv_n;
      } else if (eta != 0.0) {
        acc += eta * clamped_log(1.0 - y[j]);
        if (d_yhat && 1.0 - y[j] > kLogClamp)
          (*d_yhat)[i][j] += eta / (1.0 - y[j]) * inv_n;
      }
    }
    total -= acc;
  }
  return total * inv_n;
}

ContrastiveDetail contrastive_loss_detailed(const std::vector<std::vector<double>>& z, double tau,
                                            double beta, double temperature,
                                            std::vector<std::vector<double>>* d_z) {
  const int n2 = static_cast<int>(z.size());
  if (n2 < 4 || n2 % 2 != 0)
    throw ValidationError("contrastive_loss: need at least 2 pairs of embeddings");
  if (tau < 0.0 || tau >= 1.0) throw ValidationError("contrastive_loss: tau must be in [0,1)");
  if (beta < 0.0) throw ValidationError("contrastive_loss: beta must be >= 0");
  if (temperature <= 0.0) throw ValidationError("contrastive_loss: temperature must be > 0");
  const std::size_t dim = z[0].size();
  for (const auto& v : z) {
    if (v.size() != dim) throw ValidationError("contrastive_loss: dimension mismatch");
    if (std::abs(l2_norm(v) - 1.0) > 1e-6)
      throw ValidationError("contrastive_loss: embeddings must be unit-norm");
  }

  const double t = temperature;
  const double c_tau = static_cast<double>(n2 - 2) * tau;
  Mat s(n2, n2);
  for (int i = 0; i < n2; ++i)
    for (int j = i; j < n2; ++j) {
      const double v = dot(z[static_cast<std::size_t>(i)], z[static_cast<std::size_t>(j)]);
      s.at(i, j) = v;
      s.at(j, i) = v;
    }

  Mat ds;
  if (d_z) ds = Mat(n2, n2);

  ContrastiveDetail out;
  out.r_minus.resize(static_cast<std::size_t>(n2));
  out.floor_active.resize(static_cast<std::size_t>(n2));

  std::vector<double> e1(static_cast<std::size_t>(n2 - 2)), e2(static_cast<std::size_t>(n2 - 2));
  std::vector<int> negs(static_cast<std::size_t>(n2 - 2));
  for (int i = 0; i < n2; ++i) {
    const int partner = i ^ 1;
    int m = 0;
    for (int k = 0; k < n2; ++k) {
      if (k == i || k == partner) continue;
      negs[static_cast<std::size_t>(m)] = k;
      e1[static_cast<std::size_t>(m)] = (1.0 + beta) * s.at(i, k) / t;
      e2[static_cast<std::size_t>(m)] = beta * s.at(i, k) / t;
      ++m;
    }
    const double log_a = s.at(i, partner) / t;
    const double lse1 = log_sum_exp(e1);
    const double lse2 = log_sum_exp(e2);
    const double log_rt = std::log(static_cast<double>(n2 - 2)) + lse1 - lse2;

    // Eq-style clamp, evaluated in a scaled frame to survive small t.
    const double base = std::max(log_a, log_rt);
    const double scaled_num = -c_tau * std::exp(log_a - base) + std::exp(log_rt - base);
    const double floor_log = -1.0 / t;
    bool floor = false;
    double log_r;
    if (scaled_num <= 0.0) {
      floor = true;
      log_r = floor_log;
    } else {
      const double log_cand = base + std::log(scaled_num) - std::log1p(-tau);
      floor = log_cand < floor_log;
      log_r = floor ? floor_log : log_cand;
    }
    const double log_denom = std::max(log_a, log_r) +
                             std::log1p(std::exp(std::min(log_a, log_r) - std::max(log_a, log_r)));
    const double li = log_denom - log_a;
    const double p_pos = std::exp(log_a - log_denom);
    out.value += li;
    out.r_minus[static_cast<std::size_t>(i)] = std::exp(log_r);
    out.floor_active[static_cast<std::size_t>(i)] = floor;

    if (d_z) {
      double d_log_a = p_pos - 1.0;
      double d_log_rt = 0.0;
      if (!floor) {
        d_log_a += -(c_tau / (1.0 - tau)) * p_pos;
        d_log_rt = (1.0 - p_pos) + (c_tau / (1.0 - tau)) * p_pos;
      }
      ds.at(i, partner) += d_log_a / t;
      if (d_log_rt != 0.0) {
        for (int m2 = 0; m2 < n2 - 2; ++m2) {
          const double u = std::exp(e1[static_cast<std::size_t>(m2)] - lse1);
          const double w = std::exp(e2[static_cast<std::size_t>(m2)] - lse2);
          ds.at(i, negs[static_cast<std::size_t>(m2)]) +=
              d_log_rt * ((1.0 + beta) * u - beta * w) / t;
        }
      }
    }
  }

  if (d_z) {
    d_z->assign(static_cast<std::size_t>(n2), std::vector<double>(dim, 0.0));
    for (int i = 0; i < n2; ++i)
      for (int k = 0; k < n2; ++k) {
        const double g = ds.at(i, k);
        if (g == 0.0) continue;
        for (std::size_t f = 0; f < dim; ++f) {
          (*d_z)[static_cast<std::size_t>(i)][f] += g * z[static_cast<std::size_t>(k)][f];
          (*d_z)[static_cast<std::size_t>(k)][f] += g * z[static_cast<std::size_t>(i)][f];
        }
      }
  }
  return out;
}

double contrastive_loss(const std::vector<std::vector<double>>& z, double tau, double beta,
                        double temperature, std::vector<std::vector<double>>* d_z) {
  return contrastive_loss_detailed(z, tau, beta, temperature, d_z).value;
}

double clustering_loss(const std::vector<std::vector<double>>& c, double tau, double beta,
                       double temperature, std::vector<std::vector<double>>* d_c) {
  const int n2 = static_cast<int>(c.size());
  if (n2 < 4 || n2 % 2 != 0) throw ValidationError("clustering_loss: need at least 2 sample pairs");
  const int m = static_cast<int>(c[0].size());
  if (m < 2) throw ValidationError("clustering_loss: need at least 2 clusters");
  const int n = n2 / 2;
  for (const auto& row : c) {
    if (static_cast<int>(row.size()) != m) throw ValidationError("clustering_loss: ragged rows");
    double sum = 0.0;
    for (double v : row) sum += v;
    if (std::abs(sum - 1.0) > 1e-6)
      throw ValidationError("clustering_loss: rows must sum to 1");
  }

  // Columns of C (odd samples) and C' (even samples), L2-normalised, become
  // the 2M contrastive samples, interleaved so columns k of C and C' pair up.
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(2 * m),
                                        std::vector<double>(static_cast<std::size_t>(n)));
  std::vector<double> norms(static_cast<std::size_t>(2 * m));
  for (int k = 0; k < m; ++k) {
    for (int i = 0; i < n; ++i) {
      cols[static_cast<std::size_t>(2 * k)][static_cast<std::size_t>(i)] =
          c[static_cast<std::size_t>(2 * i)][static_cast<std::size_t>(k)];
      cols[static_cast<std::size_t>(2 * k + 1)][static_cast<std::size_t>(i)] =
          c[static_cast<std::size_t>(2 * i + 1)][static_cast<std::size_t>(k)];
    }
  }
  for (int q = 0; q < 2 * m; ++q) {
    const double nn = l2_norm(cols[static_cast<std::size_t>(q)]);
    if (nn < 1e-12)
      throw ValidationError("clustering_loss: cluster " + std::to_string(q / 2) +
                            " has zero mass in the batch; cannot normalize its column");
    norms[static_cast<std::size_t>(q)] = nn;
    for (auto& v : cols[static_cast<std::size_t>(q)]) v /= nn;
  }

  std::vector<std::vector<double>> d_cols;
  const double value = contrastive_loss(cols, tau, beta, temperature, d_c ? &d_cols : nullptr);

  if (d_c) {
    d_c->assign(static_cast<std::size_t>(n2), std::vector<double>(static_cast<std::size_t>(m), 0.0));
    for (int q = 0; q < 2 * m; ++q) {
      const auto& v = cols[static_cast<std::size_t>(q)];
      const auto& dv = d_cols[static_cast<std::size_t>(q)];
      const double inner = dot(v, dv);
      const int k = q / 2;
      const bool prime = (q % 2) == 1;
      for (int i = 0; i < n; ++i) {
        const double d_raw = (dv[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(i)] * inner) /
                             norms[static_cast<std::size_t>(q)];
        const int row = prime ? 2 * i + 1 : 2 * i;
        (*d_c)[static_cast<std::size_t>(row)][static_cast<std::size_t>(k)] += d_raw;
      }
    }
  }
  return value;
}

double distillation_loss(const std::vector<double>& yhat, const std::vector<double>& ytilde,
                         std::vector<double>* d_yhat) {
  if (yhat.size() != ytilde.size())
    throw ValidationError("distillation_loss: distribution length mismatch");
  if (yhat.empty()) throw ValidationError("distillation_loss: empty distributions");
  if (d_yhat) d_yhat->assign(yhat.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < yhat.size(); ++i) {
    if (ytilde[i] <= 0.0) continue;
    total += ytilde[i] * (clamped_log(ytilde[i]) - clamped_log(yhat[i]));
    if (d_yhat && yhat[i] > kLogClamp) (*d_yhat)[i] = -ytilde[i] / yhat[i];
  }
  return total;
}

double gradient_check(const std::function<double()>& eval, std::span<double> params,
                      std::span<const double> analytic, int probes, double step, Rng& rng) {
  if (step <= 0.0) throw ValidationError("gradient_check: step must be > 0");
  if (probes <= 0) throw ValidationError("gradient_check: probe count must be > 0");
  if (params.size() != analytic.size())
    throw ValidationError("gradient_check: gradient size mismatch");
  double max_rel = 0.0;
  for (int p = 0; p < probes; ++p) {
    const std::size_t j =
        static_cast<std::size_t>(rng.next_u64() % static_cast<std::uint64_t>(params.size()));
    const double saved = params[j];
    params[j] = saved + step;
    const double f_plus = eval();
    params[j] = saved - step;
    const double f_minus = eval();
    params[j] = saved;
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
      throw ValidationError("gradient_check: non-finite loss at probe point");
    const double fd = (f_plus - f_minus) / (2.0 * step);
    const double rel = std::abs(analytic[j] - fd) / std::max(1e-8, std::abs(fd));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace mese
