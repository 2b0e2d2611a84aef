#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mese/corpus.hpp"
#include "mese/rng.hpp"

namespace mese {

namespace {

struct ClassPlan {
  std::vector<int> pool;        // token ids this class draws from
  std::vector<double> image_mean;
  std::vector<int> entity_ids;  // dense, ascending
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError("generate_synthetic: " + msg);
}

int zipf_count(int base, int rank, double exponent) {
  const double c = static_cast<double>(base) * std::pow(static_cast<double>(rank), -exponent);
  return std::max(1, static_cast<int>(std::llround(c)));
}

}  // namespace

Corpus generate_synthetic(const SyntheticSpec& spec) {
  require(spec.n_classes >= 1, "n_classes must be >= 1");
  require(spec.entities_per_class >= 5, "entities_per_class must be >= 5 (queries need 5 seeds)");
  require(spec.token_overlap >= 0.0 && spec.token_overlap <= 1.0, "token_overlap must be in [0,1]");
  require(spec.sibling_pairs >= 0 && 2 * spec.sibling_pairs <= spec.n_classes,
          "sibling_pairs exceeds available classes");
  require(spec.n_polysemes >= 0 && spec.n_random_negatives >= 0 && spec.n_synonym_pairs >= 0,
          "counts must be >= 0");
  require(spec.n_polysemes == 0 || spec.n_classes >= 2, "polysemes need at least two classes");
  require(spec.image_feature_dim >= 1 && spec.patches_per_context >= 1, "image shape must be positive");
  require(spec.tokens_per_class_pool >= 4, "class token pool too small");
  require(spec.sentence_len_min >= 3 && spec.sentence_len_max >= spec.sentence_len_min,
          "bad sentence length range");
  const int shared_per_pair =
      static_cast<int>(std::llround(spec.token_overlap * spec.tokens_per_class_pool));
  require(shared_per_pair <= spec.tokens_per_class_pool,
          "token pool too small for requested overlap");

  // Polysemes are drawn from the back of each class, synonym twins from the
  // front; the two allocations must not collide.
  std::vector<int> syn_front(static_cast<std::size_t>(spec.n_classes), 0);
  std::vector<int> poly_back(static_cast<std::size_t>(spec.n_classes), 0);
  for (int j = 0; j < spec.n_synonym_pairs; ++j) syn_front[static_cast<std::size_t>(j % spec.n_classes)] += 2;
  for (int i = 0; i < spec.n_polysemes; ++i) {
    poly_back[static_cast<std::size_t>((2 * i) % spec.n_classes)] += 1;
    poly_back[static_cast<std::size_t>((2 * i + 1) % spec.n_classes)] += 1;
  }
  for (int c = 0; c < spec.n_classes; ++c)
    require(syn_front[static_cast<std::size_t>(c)] + poly_back[static_cast<std::size_t>(c)] <=
                spec.entities_per_class,
            "class " + std::to_string(c) + " too small for requested synonyms+polysemes");

  Rng rng(spec.rng_seed);
  Corpus corpus;
  corpus.image_feature_dim = spec.image_feature_dim;
  corpus.patch_count = spec.patches_per_context;

  // --- token vocabulary -----------------------------------------------------
  corpus.token_vocab[kPadSurface] = kPadToken;
  corpus.token_vocab[kMaskSurface] = kMaskToken;
  corpus.token_vocab[kUnkSurface] = kUnkToken;
  int next_token = kReservedTokens;
  auto add_token = [&](const std::string& surface) {
    corpus.token_vocab[surface] = next_token;
    return next_token++;
  };

  std::vector<int> function_pool;
  for (int i = 0; i < spec.function_words; ++i)
    function_pool.push_back(add_token("f" + std::to_string(i)));

  std::vector<ClassPlan> classes(static_cast<std::size_t>(spec.n_classes));
  // Shared sibling tokens first so both classes of a pair reference one id.
  for (int p = 0; p < spec.sibling_pairs; ++p) {
    for (int i = 0; i < shared_per_pair; ++i) {
      const int id = add_token("s" + std::to_string(p) + "_t" + std::to_string(i));
      classes[static_cast<std::size_t>(2 * p)].pool.push_back(id);
      classes[static_cast<std::size_t>(2 * p + 1)].pool.push_back(id);
    }
  }
  for (int c = 0; c < spec.n_classes; ++c) {
    auto& plan = classes[static_cast<std::size_t>(c)];
    const int unique = spec.tokens_per_class_pool - static_cast<int>(plan.pool.size());
    for (int i = 0; i < unique; ++i)
      plan.pool.push_back(add_token("c" + std::to_string(c) + "_t" + std::to_string(i)));
    plan.image_mean.resize(static_cast<std::size_t>(spec.image_feature_dim));
    for (auto& v : plan.image_mean) v = spec.class_image_separation * rng.normal();
  }

  // --- entities ---------------------------------------------------------------
  for (int c = 0; c < spec.n_classes; ++c) {
    auto& plan = classes[static_cast<std::size_t>(c)];
    for (int k = 0; k < spec.entities_per_class; ++k) {
      Entity e;
      e.id = corpus.entity_count();
      e.name = "e" + std::to_string(c) + "_" + std::to_string(k);
      e.class_ids = {c};
      plan.entity_ids.push_back(e.id);
      corpus.entities.push_back(std::move(e));
    }
  }
  std::vector<std::vector<int>> negative_pools;
  for (int k = 0; k < spec.n_random_negatives; ++k) {
    Entity e;
    e.id = corpus.entity_count();
    e.name = "neg" + std::to_string(k);
    corpus.entities.push_back(std::move(e));
    std::vector<int> pool;
    for (int i = 0; i < 3; ++i) pool.push_back(add_token("n" + std::to_string(k) + "_t" + std::to_string(i)));
    negative_pools.push_back(std::move(pool));
  }

  // Synonym twins: the second entry of each pair carries the first's name as
  // an alias and will receive byte-identical contexts below.
  std::vector<int> synonym_source(corpus.entities.size(), -1);
  {
    std::vector<int> cursor(static_cast<std::size_t>(spec.n_classes), 0);
    for (int j = 0; j < spec.n_synonym_pairs; ++j) {
      const int c = j % spec.n_classes;
      auto& ids = classes[static_cast<std::size_t>(c)].entity_ids;
      const int a = ids[static_cast<std::size_t>(cursor[static_cast<std::size_t>(c)])];
      const int b = ids[static_cast<std::size_t>(cursor[static_cast<std::size_t>(c)] + 1)];
      cursor[static_cast<std::size_t>(c)] += 2;
      corpus.entities[static_cast<std::size_t>(b)].name = "syn" + std::to_string(j);
      corpus.entities[static_cast<std::size_t>(b)].aliases = {
          corpus.entities[static_cast<std::size_t>(a)].name};
      synonym_source[static_cast<std::size_t>(b)] = a;
    }
  }
  // Polysemes: one surface name shared by two entities of different classes.
  {
    std::vector<int> back(static_cast<std::size_t>(spec.n_classes), 0);
    for (int i = 0; i < spec.n_polysemes; ++i) {
      const int ca = (2 * i) % spec.n_classes;
      const int cb = (2 * i + 1) % spec.n_classes;
      auto take_back = [&](int c) {
        auto& ids = classes[static_cast<std::size_t>(c)].entity_ids;
        const int idx = spec.entities_per_class - 1 - back[static_cast<std::size_t>(c)];
        back[static_cast<std::size_t>(c)] += 1;
        return ids[static_cast<std::size_t>(idx)];
      };
      const int a = take_back(ca);
      const int b = take_back(cb);
      corpus.entities[static_cast<std::size_t>(a)].name = "poly" + std::to_string(i);
      corpus.entities[static_cast<std::size_t>(b)].name = "poly" + std::to_string(i);
    }
  }

  // --- contexts ---------------------------------------------------------------
  auto sample_image = [&](const std::vector<double>& mean) {
    const int row = corpus.image_rows();
    for (int p = 0; p < spec.patches_per_context; ++p)
      for (int d = 0; d < spec.image_feature_dim; ++d)
        corpus.image_blob.push_back(
            static_cast<float>(mean[static_cast<std::size_t>(d)] + rng.normal()));
    return row;
  };

  auto make_context = [&](int entity_id, const std::vector<int>& pool,
                          const std::vector<double>& image_mean) {
    const int len = rng.uniform_int(spec.sentence_len_min, spec.sentence_len_max);
    const int mask_pos = rng.uniform_int(0, len - 1);
    MultiModalContext ctx;
    ctx.entity_id = entity_id;
    ctx.mask_index = mask_pos;
    ctx.tokens.resize(static_cast<std::size_t>(len));
    int pool_hits = 0;
    for (int i = 0; i < len; ++i) {
      if (i == mask_pos) {
        ctx.tokens[static_cast<std::size_t>(i)] = kMaskToken;
      } else if (rng.uniform() < 0.5) {
        ctx.tokens[static_cast<std::size_t>(i)] = rng.pick(function_pool);
      } else {
        ctx.tokens[static_cast<std::size_t>(i)] = rng.pick(pool);
        ++pool_hits;
      }
    }
    // Every sentence carries at least two pool tokens so class identity is
    // always recoverable from token statistics.
    while (pool_hits < 2) {
      const int i = rng.uniform_int(0, len - 1);
      if (i == mask_pos) continue;
      if (std::find(pool.begin(), pool.end(), ctx.tokens[static_cast<std::size_t>(i)]) ==
          pool.end()) {
        ctx.tokens[static_cast<std::size_t>(i)] = rng.pick(pool);
        ++pool_hits;
      }
    }
    ctx.image_row = sample_image(image_mean);
    corpus.contexts.push_back(std::move(ctx));
  };

  std::vector<std::vector<int>> contexts_of(corpus.entities.size());
  for (int c = 0; c < spec.n_classes; ++c) {
    const auto& plan = classes[static_cast<std::size_t>(c)];
    for (int k = 0; k < spec.entities_per_class; ++k) {
      const int id = plan.entity_ids[static_cast<std::size_t>(k)];
      const int src = synonym_source[static_cast<std::size_t>(id)];
      if (src >= 0) {
        // Identical planted contexts: copy the twin's sentences and images.
        for (int ci : contexts_of[static_cast<std::size_t>(src)]) {
          MultiModalContext copy = corpus.contexts[static_cast<std::size_t>(ci)];
          copy.entity_id = id;
          contexts_of[static_cast<std::size_t>(id)].push_back(
              static_cast<int>(corpus.contexts.size()));
          corpus.contexts.push_back(std::move(copy));
        }
        continue;
      }
      const int count = zipf_count(spec.base_contexts, k + 1, spec.zipf_exponent);
      for (int n = 0; n < count; ++n) {
        contexts_of[static_cast<std::size_t>(id)].push_back(
            static_cast<int>(corpus.contexts.size()));
        make_context(id, plan.pool, plan.image_mean);
      }
    }
  }
  for (int k = 0; k < spec.n_random_negatives; ++k) {
    const int id = spec.n_classes * spec.entities_per_class + k;
    std::vector<double> mean(static_cast<std::size_t>(spec.image_feature_dim));
    for (auto& v : mean) v = spec.class_image_separation * rng.normal();
    const int count = zipf_count(spec.base_contexts, k + 1, spec.zipf_exponent);
    for (int n = 0; n < count; ++n)
      make_context(id, negative_pools[static_cast<std::size_t>(k)], mean);
  }

  // --- queries ----------------------------------------------------------------
  for (int c = 0; c < spec.n_classes; ++c) {
    const auto& ids = classes[static_cast<std::size_t>(c)].entity_ids;
    std::vector<int> gt = ids;
    std::sort(gt.begin(), gt.end());
    for (int seed_size : {3, 5}) {
      for (int qn = 0; qn < spec.queries_per_class_per_size; ++qn) {
        std::vector<int> pool = ids;
        rng.shuffle(pool);
        Query q;
        q.class_id = c;
        q.seeds.assign(pool.begin(), pool.begin() + seed_size);
        q.ground_truth = gt;
        corpus.queries.push_back(std::move(q));
      }
    }
  }

  return corpus;
}

}  // namespace mese
