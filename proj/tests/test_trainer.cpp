#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "mese/trainer.hpp"

using namespace mese;

namespace {

Corpus one_entity_corpus() {
  Corpus c;
  c.token_vocab = {{kPadSurface, 0}, {kMaskSurface, 1}, {kUnkSurface, 2}, {"w", 3}};
  c.entities = {{0, "only", {}, {0}}};
  c.image_feature_dim = 2;
  c.patch_count = 2;
  c.contexts.push_back({0, {3, kMaskToken, 3}, 1, std::nullopt});
  return c;
}

TrainConfig quick_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.pretrain_epochs = 3;
  cfg.batch_size = 8;
  cfg.refine_epochs = 1;
  cfg.loss.pair_count = 4;
  cfg.mining.k_pos = 2;
  cfg.mining.l_neg = 5;
  cfg.mining.u_neg = 10;
  cfg.expansion.target = 12;
  cfg.expansion.window = 4;
  cfg.rng_seed = seed;
  return cfg;
}

std::vector<RankedExpansion> fake_expansions(int n_candidates) {
  RankedExpansion ex;
  ex.query_index = 0;
  ex.class_id = 0;
  ex.seeds = {0};
  for (int e = 1; e <= n_candidates; ++e)
    ex.ranked.push_back({e, 1.0 / static_cast<double>(e)});
  return {ex};
}

}  // namespace

TEST_CASE("pretrain: one entity, one context, 200 steps drives L_mask under 0.01") {
  auto corpus = one_entity_corpus();
  EncoderConfig ecfg;
  ecfg.hidden_dim = 8;
  ecfg.n_heads = 2;
  ecfg.ffn_dim = 16;
  ecfg.max_text_len = 4;
  ecfg.patch_count = 2;
  ecfg.image_feature_dim = 2;
  Model model(EncoderConfig::for_corpus(corpus, ecfg));

  TrainConfig cfg;
  cfg.pretrain_epochs = 200;  // one context => one step per epoch
  cfg.batch_size = 1;
  cfg.momentum = 1.0;
  cfg.loss.eta = 0.0;
  cfg.rng_seed = 1;
  std::vector<StepRecord> log;
  pretrain(model, corpus, cfg, log);
  REQUIRE(log.size() == 200);
  CHECK(log.back().l_mask < 0.01);
}

TEST_CASE("pretrain: same seed gives an identical loss curve") {
  auto corpus = test::tiny_corpus(3);
  const auto ecfg = test::tiny_config(corpus, 5);
  TrainConfig cfg = quick_config(17);

  std::vector<StepRecord> log_a, log_b;
  Model a(ecfg), b(ecfg);
  pretrain(a, corpus, cfg, log_a);
  pretrain(b, corpus, cfg, log_b);
  REQUIRE(log_a.size() == log_b.size());
  for (std::size_t i = 0; i < log_a.size(); ++i) {
    CHECK(log_a[i].total == log_b[i].total);
    CHECK(log_a[i].l_mask == log_b[i].l_mask);
  }
  CHECK(a.student() == b.student());

  std::vector<StepRecord> log_c;
  Model c(ecfg);
  TrainConfig other = cfg;
  other.rng_seed = 18;
  pretrain(c, corpus, other, log_c);
  CHECK(a.student() != c.student());
}

TEST_CASE("pretrain: log has one record per optimizer step") {
  auto corpus = test::tiny_corpus(3);
  Model model(test::tiny_config(corpus));
  TrainConfig cfg = quick_config(2);
  cfg.pretrain_epochs = 2;
  cfg.batch_size = 7;
  std::vector<StepRecord> log;
  pretrain(model, corpus, cfg, log);
  const std::size_t per_epoch = (corpus.contexts.size() + 6) / 7;
  CHECK(log.size() == 2 * per_epoch);
  for (std::size_t i = 0; i < log.size(); ++i) CHECK(log[i].step == static_cast<int>(i) + 1);
}

TEST_CASE("mine_pairs: pools follow the rank bounds and stay disjoint") {
  auto corpus = test::tiny_corpus(9);  // 20 entities
  MiningConfig mining;
  mining.k_pos = 3;
  mining.l_neg = 8;
  mining.u_neg = 14;
  auto expansions = fake_expansions(19);
  Rng rng(4);
  auto batches = mine_pairs(expansions, corpus, mining, 4, 50, rng);
  CHECK(batches.size() == 50);

  // positive pool: seed {0} + ranks 1..3 = entities {1,2,3}; negatives are
  // the entities at ranks 8..14 of the fake list, i.e. ids 8..14.
  std::set<int> pos_expected = {0, 1, 2, 3};
  std::set<int> neg_expected;
  for (int r = 8; r <= 14; ++r) neg_expected.insert(r);

  std::set<int> seen_pos, seen_neg;
  for (const auto& batch : batches) {
    REQUIRE(batch.context_ids.size() == 8);
    REQUIRE(batch.entity_ids.size() == 8);
    for (std::size_t i = 0; i < 8; i += 2) {
      CHECK(batch.entity_ids[i] == batch.entity_ids[i + 1]);
      const int e = batch.entity_ids[i];
      const bool is_pos = pos_expected.count(e) > 0;
      const bool is_neg = neg_expected.count(e) > 0;
      CHECK((is_pos || is_neg));
      (is_pos ? seen_pos : seen_neg).insert(e);
    }
  }
  // both pools actually get sampled at rho_pos = 0.5
  CHECK(!seen_pos.empty());
  CHECK(!seen_neg.empty());
}

TEST_CASE("mine_pairs: inclusive 170..200 bounds select 31 negatives") {
  MiningConfig mining;  // defaults carry the 170/200 bounds
  CHECK(mining.l_neg == 170);
  CHECK(mining.u_neg == 200);
  CHECK(mining.u_neg - mining.l_neg + 1 == 31);
}

TEST_CASE("mine_pairs: single-context entities pair a context with itself") {
  auto big = test::tiny_corpus(10);
  Corpus pruned = big;
  pruned.contexts.clear();
  bool kept_one = false;
  for (const auto& ctx : big.contexts) {
    if (ctx.entity_id == 0) {
      if (kept_one) continue;
      kept_one = true;
    }
    pruned.contexts.push_back(ctx);
  }

  MiningConfig mining;
  mining.k_pos = 1;
  mining.l_neg = 5;
  mining.u_neg = 8;
  mining.rho_pos = 1.0;  // draw only from the positive pool
  RankedExpansion ex;
  ex.query_index = 0;
  ex.class_id = 0;
  ex.seeds = {0};  // single-context entity in the pool
  for (int e = 1; e < pruned.entity_count(); ++e)
    ex.ranked.push_back({e, 1.0 / (e + 1.0)});
  Rng rng(6);
  auto batches = mine_pairs({ex}, pruned, mining, 2, 40, rng);
  bool saw_self_pair = false;
  for (const auto& batch : batches)
    for (std::size_t i = 0; i < batch.context_ids.size(); i += 2)
      if (batch.entity_ids[i] == 0) {
        CHECK(batch.context_ids[i] == batch.context_ids[i + 1]);
        saw_self_pair = true;
      }
  CHECK(saw_self_pair);
}

TEST_CASE("mine_pairs: expansion shorter than u_neg is an instructive error") {
  auto corpus = test::tiny_corpus(11);
  MiningConfig mining;
  mining.k_pos = 2;
  mining.l_neg = 5;
  mining.u_neg = 15;
  auto expansions = fake_expansions(10);  // too short
  Rng rng(7);
  try {
    mine_pairs(expansions, corpus, mining, 2, 1, rng);
    FAIL("expected error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("larger target") != std::string::npos);
  }
}

TEST_CASE("refine: all four losses stay finite over a mined epoch") {
  auto corpus = test::tiny_corpus(12);
  Model model(test::tiny_config(corpus, 2));
  TrainConfig cfg = quick_config(3);

  std::vector<StepRecord> log;
  pretrain(model, corpus, cfg, log);
  const std::size_t pretrain_steps = log.size();

  ExpansionConfig exp_cfg = cfg.expansion;
  exp_cfg.target = corpus.entity_count() - 5;
  auto expansions = expand_all(model, corpus, exp_cfg);
  Rng rng(cfg.rng_seed);
  auto batches = mine_pairs(expansions, corpus, cfg.mining, cfg.loss.pair_count, 10, rng);
  refine(model, corpus, batches, cfg, log);
  CHECK(log.size() == pretrain_steps + 10);
  for (const auto& rec : log) CHECK(std::isfinite(rec.total));
  for (std::size_t i = pretrain_steps; i < log.size(); ++i) {
    CHECK(log[i].phase == "refine");
    CHECK(log[i].l_con != 0.0);
    CHECK(log[i].l_clu != 0.0);
  }
}

TEST_CASE("train_full: R=0 reduces to pretraining and yields one snapshot") {
  auto corpus = test::tiny_corpus(13);
  const auto ecfg = test::tiny_config(corpus, 4);
  TrainConfig cfg = quick_config(5);
  cfg.rounds = 0;

  Model full(ecfg);
  auto result = train_full(full, corpus, cfg);
  CHECK(result.snapshots.size() == 1);

  Model pre(ecfg);
  std::vector<StepRecord> pre_log;
  pretrain(pre, corpus, cfg, pre_log);
  CHECK(full.student() == pre.student());
  CHECK(result.log.size() == pre_log.size());
}

TEST_CASE("train_full: snapshots count R+1 and rounds fire in order") {
  auto corpus = test::tiny_corpus(14);
  TrainConfig cfg = quick_config(6);
  cfg.rounds = 2;
  Model model(test::tiny_config(corpus, 6));
  std::vector<int> rounds_seen;
  auto result = train_full(model, corpus, cfg,
                           [&](int round, const Model&, const std::vector<RankedExpansion>& snap) {
                             rounds_seen.push_back(round);
                             CHECK(snap.size() == corpus.queries.size());
                           });
  CHECK(result.snapshots.size() == 3);
  CHECK(rounds_seen == std::vector<int>{0, 1, 2});
}

TEST_CASE("teacher follows the exact EMA recurrence across a training step") {
  auto corpus = test::tiny_corpus(16);
  Model model(test::tiny_config(corpus, 10));
  const double m = 0.9;

  // One manual step: grad -> AdamW -> ema_update, checked elementwise
  // against an independent blend of (old teacher, new student).
  const auto teacher_before = model.teacher();
  PairBatch batch = test::first_contexts_batch(corpus, 4);
  LossHyper hyper;
  std::vector<double> grad(model.student().size(), 0.0);
  compute_batch_loss(model, model.student(), corpus, batch, hyper, kLossMask | kLossMod, &grad);
  AdamW opt(model.student().size(), 1e-3, 0.01);
  opt.step(model.student(), grad);
  ema_update(model.student(), model.teacher(), m);
  for (std::size_t i = 0; i < teacher_before.size(); ++i) {
    const double expect = m * teacher_before[i] + (1.0 - m) * model.student()[i];
    REQUIRE(model.teacher()[i] == expect);
  }
}

TEST_CASE("train_full is deterministic in corpus and config") {
  auto corpus = test::tiny_corpus(15);
  const auto ecfg = test::tiny_config(corpus, 8);
  TrainConfig cfg = quick_config(9);
  cfg.rounds = 1;

  Model a(ecfg), b(ecfg);
  auto ra = train_full(a, corpus, cfg);
  auto rb = train_full(b, corpus, cfg);
  CHECK(a.student() == b.student());
  CHECK(a.teacher() == b.teacher());
  REQUIRE(ra.snapshots.size() == rb.snapshots.size());
  for (std::size_t s = 0; s < ra.snapshots.size(); ++s)
    for (std::size_t q = 0; q < ra.snapshots[s].size(); ++q)
      CHECK(ra.snapshots[s][q].ranked == rb.snapshots[s][q].ranked);
}
