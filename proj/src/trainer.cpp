#include "mese/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

namespace mese {

using json = nlohmann::ordered_json;

void MiningConfig::check(int candidate_count) const {
  if (!(0 < k_pos && k_pos < l_neg && l_neg < u_neg))
    throw ValidationError("MiningConfig: need 0 < k_pos < l_neg < u_neg");
  if (u_neg > candidate_count)
    throw ValidationError("MiningConfig: u_neg " + std::to_string(u_neg) +
                          " exceeds candidate count " + std::to_string(candidate_count));
  if (rho_pos < 0.0 || rho_pos > 1.0)
    throw ValidationError("MiningConfig: rho_pos must be in [0,1]");
}

void TrainConfig::check() const {
  if (learning_rate <= 0.0) throw ValidationError("TrainConfig: learning rate must be > 0");
  if (weight_decay < 0.0) throw ValidationError("TrainConfig: weight decay must be >= 0");
  if (batch_size < 1) throw ValidationError("TrainConfig: batch size must be >= 1");
  if (pretrain_epochs < 0 || refine_epochs < 0 || rounds < 0)
    throw ValidationError("TrainConfig: counts must be >= 0");
  if (momentum < 0.0 || momentum > 1.0) throw ValidationError("TrainConfig: momentum in [0,1]");
  loss.check();
  expansion.check();
}

BatchLossTerms compute_batch_loss(const Model& model, std::span<const double> params,
                                  const Corpus& corpus, const PairBatch& batch,
                                  const LossHyper& hyper, unsigned which,
                                  std::vector<double>* grad_out) {
  const std::size_t n = batch.context_ids.size();
  if (n == 0) throw TrainError("compute_batch_loss: empty batch");
  if (batch.entity_ids.size() != n) throw TrainError("compute_batch_loss: ragged batch");

  std::vector<ForwardCache> caches(n);
  std::vector<EncodeSample> samples(n);
  std::vector<std::vector<double>> yhat(n), zs(n), cs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ctx = corpus.contexts[static_cast<std::size_t>(batch.context_ids[i])];
    samples[i] = make_sample(corpus, ctx);
    model.forward(params, samples[i], caches[i]);
    yhat[i] = caches[i].yhat;
    zs[i] = caches[i].z;
    cs[i] = caches[i].c;
  }

  BatchLossTerms terms;
  std::vector<std::vector<double>> d_yhat, d_z, d_c;
  std::vector<std::vector<double>>* d_yhat_p = grad_out ? &d_yhat : nullptr;

  if (which & kLossMask) {
    std::vector<std::vector<double>> d_mask;
    terms.l_mask = masked_entity_loss(yhat, batch.entity_ids, hyper.eta,
                                      grad_out ? &d_mask : nullptr);
    if (grad_out) d_yhat = std::move(d_mask);
  }
  if (which & kLossMod) {
    const double inv_n = 1.0 / static_cast<double>(n);
    if (grad_out && d_yhat.empty())
      d_yhat.assign(n, std::vector<double>(yhat[0].size(), 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      ForwardCache tcache;
      model.forward(model.teacher(), samples[i], tcache);
      std::vector<double> d_one;
      terms.l_mod +=
          inv_n * distillation_loss(yhat[i], tcache.yhat, grad_out ? &d_one : nullptr);
      if (grad_out)
        for (std::size_t j = 0; j < d_one.size(); ++j) d_yhat[i][j] += inv_n * d_one[j];
    }
  }
  if (which & kLossCon)
    terms.l_con = contrastive_loss(zs, hyper.tau, hyper.beta, hyper.temperature,
                                   grad_out ? &d_z : nullptr);
  if (which & kLossClu)
    terms.l_clu = clustering_loss(cs, hyper.tau, hyper.beta, hyper.temperature,
                                  grad_out ? &d_c : nullptr);

  if (grad_out) {
    for (std::size_t i = 0; i < n; ++i) {
      HeadGrads hg;
      if (d_yhat_p && !d_yhat.empty()) hg.d_yhat = d_yhat[i];
      if (!d_z.empty()) hg.d_z = d_z[i];
      if (!d_c.empty()) hg.d_c = d_c[i];
      if (hg.d_yhat.empty() && hg.d_z.empty() && hg.d_c.empty()) continue;
      model.backward(params, samples[i], caches[i], hg, *grad_out);
    }
  }
  return terms;
}

AdamW::AdamW(std::size_t size, double lr, double weight_decay)
    : lr_(lr), wd_(weight_decay), m_(size, 0.0), v_(size, 0.0) {}

void AdamW::step(std::span<double> params, std::span<const double> grad) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * params[i]);
  }
}

namespace {

std::string batch_ids_for_message(const PairBatch& batch) {
  std::string ids;
  for (std::size_t i = 0; i < batch.context_ids.size() && i < 16; ++i)
    ids += (i ? "," : "") + std::to_string(batch.context_ids[i]);
  if (batch.context_ids.size() > 16) ids += ",...";
  return ids;
}

void run_step(Model& model, const Corpus& corpus, const PairBatch& batch,
              const TrainConfig& config, unsigned which, AdamW& opt, const std::string& phase,
              std::vector<StepRecord>& log, std::vector<double>& grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  const auto terms =
      compute_batch_loss(model, model.student(), corpus, batch, config.loss, which, &grad);
  if (!std::isfinite(terms.total()))
    throw TrainError("non-finite loss at step " + std::to_string(log.size() + 1) +
                     " (contexts " + batch_ids_for_message(batch) + ")");
  opt.step(model.student(), grad);
  ema_update(model.student(), model.teacher(), config.momentum);
  StepRecord rec;
  rec.step = static_cast<int>(log.size()) + 1;
  rec.phase = phase;
  rec.l_mask = terms.l_mask;
  rec.l_con = terms.l_con;
  rec.l_clu = terms.l_clu;
  rec.l_mod = terms.l_mod;
  rec.total = terms.total();
  log.push_back(std::move(rec));
}

}  // namespace

void pretrain(Model& model, const Corpus& corpus, const TrainConfig& config,
              std::vector<StepRecord>& log) {
  config.check();
  if (corpus.contexts.empty()) throw TrainError("pretrain: corpus has no contexts");
  Rng rng(config.rng_seed ^ 0x70726574ULL);
  AdamW opt(model.student().size(), config.learning_rate, config.weight_decay);
  std::vector<double> grad(model.student().size(), 0.0);

  std::vector<int> order(corpus.contexts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      PairBatch batch;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      for (std::size_t i = start; i < end; ++i) {
        batch.context_ids.push_back(order[i]);
        batch.entity_ids.push_back(corpus.contexts[static_cast<std::size_t>(order[i])].entity_id);
      }
      run_step(model, corpus, batch, config, kLossMask | kLossMod, opt, "pretrain", log, grad);
    }
  }
}

std::vector<PairBatch> mine_pairs(const std::vector<RankedExpansion>& expansions,
                                  const Corpus& corpus, const MiningConfig& mining, int pair_count,
                                  int n_batches, Rng& rng) {
  mining.check(corpus.entity_count());
  if (pair_count < 2) throw ValidationError("mine_pairs: pair count must be >= 2");

  std::set<int> pos_set, neg_set;
  for (const auto& ex : expansions) {
    if (static_cast<int>(ex.ranked.size()) < mining.u_neg)
      throw ValidationError("mine_pairs: expansion for query " + std::to_string(ex.query_index) +
                            " has " + std::to_string(ex.ranked.size()) +
                            " candidates but u_neg is " + std::to_string(mining.u_neg) +
                            "; rerun the expansion with a larger target");
    for (int s : ex.seeds) pos_set.insert(s);
    for (int r = 0; r < mining.k_pos; ++r) pos_set.insert(ex.ranked[static_cast<std::size_t>(r)].first);
    for (int r = mining.l_neg - 1; r < mining.u_neg; ++r)
      neg_set.insert(ex.ranked[static_cast<std::size_t>(r)].first);
  }
  for (int e : pos_set) neg_set.erase(e);  // positives win cross-query conflicts

  const auto by_entity = corpus.contexts_by_entity();
  auto usable = [&](const std::set<int>& s) {
    std::vector<int> out;
    for (int e : s)
      if (!by_entity[static_cast<std::size_t>(e)].empty()) out.push_back(e);
    return out;
  };
  const std::vector<int> pos_pool = usable(pos_set);
  const std::vector<int> neg_pool = usable(neg_set);
  if (pos_pool.empty() && neg_pool.empty())
    throw ValidationError("mine_pairs: both mining pools are empty");

  std::vector<PairBatch> batches;
  batches.reserve(static_cast<std::size_t>(n_batches));
  for (int b = 0; b < n_batches; ++b) {
    PairBatch batch;
    for (int p = 0; p < pair_count; ++p) {
      const bool want_pos = rng.uniform() < mining.rho_pos;
      const std::vector<int>& pool =
          (want_pos && !pos_pool.empty()) || neg_pool.empty() ? pos_pool : neg_pool;
      const int entity = rng.pick(pool);
      const auto& ctxs = by_entity[static_cast<std::size_t>(entity)];
      int c1, c2;
      if (ctxs.size() == 1) {
        c1 = c2 = ctxs[0];  // long-tail entity: pair the context with itself
      } else {
        c1 = rng.pick(ctxs);
        c2 = rng.pick(ctxs);
      }
      batch.context_ids.push_back(c1);
      batch.context_ids.push_back(c2);
      batch.entity_ids.push_back(entity);
      batch.entity_ids.push_back(entity);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

void refine(Model& model, const Corpus& corpus, const std::vector<PairBatch>& batches,
            const TrainConfig& config, std::vector<StepRecord>& log) {
  config.check();
  AdamW opt(model.student().size(), config.learning_rate, config.weight_decay);
  std::vector<double> grad(model.student().size(), 0.0);
  for (const auto& batch : batches)
    run_step(model, corpus, batch, config, kLossMask | kLossMod | kLossCon | kLossClu, opt,
             "refine", log, grad);
}

TrainResult train_full(
    Model& model, const Corpus& corpus, const TrainConfig& config,
    const std::function<void(int, const Model&, const std::vector<RankedExpansion>&)>& on_round) {
  config.check();
  if (corpus.queries.empty()) throw TrainError("train_full: corpus has no queries");
  TrainResult result;

  pretrain(model, corpus, config, result.log);

  // Mining needs at least u_neg ranked candidates per query.
  ExpansionConfig exp_cfg = config.expansion;
  if (config.rounds > 0) exp_cfg.target = std::max(exp_cfg.target, config.mining.u_neg);
  exp_cfg.target = std::min(exp_cfg.target, corpus.entity_count() - 5);
  exp_cfg.ensemble = false;

  auto snapshot = [&]() { return expand_all(model, corpus, exp_cfg); };

  result.snapshots.push_back(snapshot());
  if (on_round) on_round(0, model, result.snapshots.back());

  Rng mine_rng(config.rng_seed ^ 0x6d696e65ULL);
  for (int round = 1; round <= config.rounds; ++round) {
    const int pairs_per_batch = config.loss.pair_count;
    const int steps_per_epoch = std::max(
        1, static_cast<int>((corpus.contexts.size() + 2 * static_cast<std::size_t>(pairs_per_batch) - 1) /
                            (2 * static_cast<std::size_t>(pairs_per_batch))));
    const int n_batches = config.refine_epochs * steps_per_epoch;
    auto batches = mine_pairs(result.snapshots.back(), corpus, config.mining, pairs_per_batch,
                              n_batches, mine_rng);
    refine(model, corpus, batches, config, result.log);
    result.snapshots.push_back(snapshot());
    if (on_round) on_round(round, model, result.snapshots.back());
  }
  return result;
}

void save_train_log(const std::vector<StepRecord>& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  for (const auto& rec : log) {
    json j;
    j["step"] = rec.step;
    j["phase"] = rec.phase;
    j["l_mask"] = rec.l_mask;
    j["l_con"] = rec.l_con;
    j["l_clu"] = rec.l_clu;
    j["l_mod"] = rec.l_mod;
    j["total"] = rec.total;
    out << j.dump() << '\n';
  }
}

}  // namespace mese
