#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mese {

// Reserved token ids. The generator writes these surfaces into vocab.json and
// the loader checks that they are present with exactly these ids.
inline constexpr int kPadToken = 0;
inline constexpr int kMaskToken = 1;
inline constexpr int kUnkToken = 2;
inline constexpr int kReservedTokens = 3;
inline constexpr const char* kPadSurface = "[PAD]";
inline constexpr const char* kMaskSurface = "[MASK]";
inline constexpr const char* kUnkSurface = "[UNK]";

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Entity {
  int id = 0;
  std::string name;
  std::vector<std::string> aliases;
  std::vector<int> class_ids;  // empty for random negatives

  bool operator==(const Entity&) const = default;
};

// One masked sentence plus an optional reference into the corpus image store.
struct MultiModalContext {
  int entity_id = 0;
  std::vector<int> tokens;  // token at mask_index is kMaskToken
  int mask_index = 0;
  std::optional<int> image_row;

  bool operator==(const MultiModalContext&) const = default;
};

struct Query {
  int class_id = 0;
  std::vector<int> seeds;
  std::vector<int> ground_truth;  // superset of seeds

  bool operator==(const Query&) const = default;
};

struct Corpus {
  std::vector<Entity> entities;
  std::vector<MultiModalContext> contexts;
  std::vector<Query> queries;
  std::map<std::string, int> token_vocab;
  int image_feature_dim = 0;
  int patch_count = 0;                  // rows-per-image (L2) of images.bin
  std::vector<float> image_blob;        // image_rows * patch_count * dim

  int entity_count() const { return static_cast<int>(entities.size()); }
  int vocab_size() const { return static_cast<int>(token_vocab.size()); }
  int image_rows() const {
    const int stride = patch_count * image_feature_dim;
    return stride == 0 ? 0 : static_cast<int>(image_blob.size()) / stride;
  }
  std::span<const float> image_row(int row) const {
    const std::size_t stride =
        static_cast<std::size_t>(patch_count) * static_cast<std::size_t>(image_feature_dim);
    return {image_blob.data() + static_cast<std::size_t>(row) * stride, stride};
  }
  std::span<const float> patches_of(const MultiModalContext& ctx) const {
    if (!ctx.image_row) return {};
    return image_row(*ctx.image_row);
  }
  // Context indices per entity, in file order.
  std::vector<std::vector<int>> contexts_by_entity() const;

  bool operator==(const Corpus&) const = default;
};

struct Violation {
  std::string where;   // file-ish location ("entities[3]", "queries[0]", ...)
  std::string message;
};

// Empty result iff every type invariant holds.
std::vector<Violation> validate(const Corpus& corpus);

// Directory layout: entities.jsonl, contexts.jsonl, queries.jsonl, images.bin,
// vocab.json. Throws ParseError (malformed file, names file and line) or
// ValidationError (dangling ids etc., lists offenders).
Corpus load_corpus(const std::string& dir);
void save_corpus(const Corpus& corpus, const std::string& dir);

// Replaces the mention span by a single [MASK] token.
MultiModalContext mask_context(const std::vector<int>& tokens, int span_begin, int span_end,
                               int entity_id, std::optional<int> image_row = std::nullopt);

struct SyntheticSpec {
  int n_classes = 8;
  int sibling_pairs = 0;         // class pairs (0,1), (2,3), ... share tokens
  double token_overlap = 0.0;    // rho, fraction of sibling pools shared
  int entities_per_class = 40;
  double zipf_exponent = 1.1;    // context counts per entity follow this law
  int n_polysemes = 0;           // entity pairs sharing one surface name
  int n_synonym_pairs = 0;       // same-class entries with identical planted contexts
  int n_random_negatives = 0;
  int image_feature_dim = 8;
  double class_image_separation = 4.0;  // sigma
  std::uint64_t rng_seed = 1;

  // Desk-scale shape knobs with fixed defaults (not part of the difficulty
  // axes, but the files need concrete sizes).
  int base_contexts = 12;        // Zipf head size; rank r gets ~base/r^a contexts
  int sentence_len_min = 5;
  int sentence_len_max = 12;
  int patches_per_context = 4;   // L2 written to images.bin
  int tokens_per_class_pool = 12;
  int function_words = 24;
  int queries_per_class_per_size = 5;  // x {3,5} seeds = 10 queries per class
};

// Deterministic in spec.rng_seed. Throws ValidationError for infeasible specs.
Corpus generate_synthetic(const SyntheticSpec& spec);

}  // namespace mese
