#pragma once

#include <string>
#include <vector>

#include "mese/corpus.hpp"
#include "mese/encoder.hpp"
#include "mese/rng.hpp"
#include "mese/trainer.hpp"

namespace mese::test {

// Small corpus sized for the gradient-check configs: 4 classes x 5 entities
// (V_e = 20), 4 patches of dim 4, sentences of length <= 8.
inline Corpus tiny_corpus(std::uint64_t seed = 7) {
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.entities_per_class = 5;
  spec.n_random_negatives = 0;
  spec.image_feature_dim = 4;
  spec.patches_per_context = 4;
  spec.sentence_len_min = 5;
  spec.sentence_len_max = 8;
  spec.base_contexts = 3;
  spec.tokens_per_class_pool = 6;
  spec.function_words = 8;
  spec.queries_per_class_per_size = 1;
  spec.rng_seed = seed;
  return generate_synthetic(spec);
}

inline EncoderConfig tiny_config(const Corpus& corpus, std::uint64_t seed = 11) {
  EncoderConfig cfg;
  cfg.hidden_dim = 8;
  cfg.n_heads = 2;
  cfg.ffn_dim = 16;
  cfg.max_text_len = 8;
  cfg.contrastive_dim = 6;
  cfg.cluster_count = 5;
  cfg.rng_seed = seed;
  return EncoderConfig::for_corpus(corpus, cfg);
}

// First 2N contexts as a pair batch (entity ids as targets).
inline PairBatch first_contexts_batch(const Corpus& corpus, int count) {
  PairBatch batch;
  for (int i = 0; i < count; ++i) {
    batch.context_ids.push_back(i);
    batch.entity_ids.push_back(corpus.contexts[static_cast<std::size_t>(i)].entity_id);
  }
  return batch;
}

inline std::vector<double> random_distribution(Rng& rng, int n) {
  std::vector<double> p(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (auto& v : p) {
    v = -std::log(1.0 - rng.uniform());
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

inline std::vector<double> random_unit(Rng& rng, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace mese::test
