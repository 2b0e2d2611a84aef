#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "helpers.hpp"
#include "mese/corpus.hpp"

using namespace mese;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  const auto dir = fs::temp_directory_path() / ("mese_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Corpus minimal_two_entity_corpus() {
  Corpus c;
  c.token_vocab = {{kPadSurface, 0}, {kMaskSurface, 1}, {kUnkSurface, 2}, {"alpha", 3}, {"beta", 4}};
  c.entities = {{0, "first", {}, {0}}, {1, "second", {}, {0}}};
  c.image_feature_dim = 2;
  c.patch_count = 2;
  c.contexts.push_back({0, {3, kMaskToken, 4}, 1, std::nullopt});
  c.contexts.push_back({1, {4, kMaskToken}, 1, std::nullopt});
  return c;
}

}  // namespace

TEST_CASE("mask_context collapses the mention span to one [MASK]") {
  // tokens [a,b,ENT,c], span {2}
  auto ctx = mask_context({10, 11, 12, 13}, 2, 3, 0);
  CHECK(ctx.tokens == std::vector<int>{10, 11, kMaskToken, 13});
  CHECK(ctx.mask_index == 2);

  // multi-token mention [a,ENT1,ENT2,b], span {1,2}
  auto multi = mask_context({10, 20, 21, 11}, 1, 3, 0);
  CHECK(multi.tokens == std::vector<int>{10, kMaskToken, 11});
  CHECK(multi.mask_index == 1);
}

TEST_CASE("mask_context rejects empty and out-of-bounds spans") {
  CHECK_THROWS_AS(mask_context({1, 2, 3}, 1, 1, 0), ValidationError);
  CHECK_THROWS_AS(mask_context({1, 2, 3, 4}, 5, 6, 0), ValidationError);
}

TEST_CASE("minimal two-entity corpus validates and round-trips") {
  auto corpus = minimal_two_entity_corpus();
  CHECK(validate(corpus).empty());
  CHECK(corpus.entity_count() == 2);

  const auto dir = temp_dir("minimal");
  save_corpus(corpus, dir);
  const auto loaded = load_corpus(dir);
  CHECK(loaded == corpus);
}

TEST_CASE("validation flags dangling entity references") {
  auto corpus = minimal_two_entity_corpus();
  corpus.contexts.push_back({99, {3, kMaskToken}, 1, std::nullopt});
  const auto report = validate(corpus);
  REQUIRE(report.size() == 1);
  CHECK(report[0].message.find("unknown entity 99") != std::string::npos);

  const auto dir = temp_dir("dangling");
  save_corpus(corpus, dir);
  CHECK_THROWS_AS(load_corpus(dir), ValidationError);
}

TEST_CASE("validation flags duplicate ids and seed/ground-truth violations") {
  auto corpus = minimal_two_entity_corpus();
  corpus.entities[1].id = 0;
  CHECK(!validate(corpus).empty());

  auto corpus2 = minimal_two_entity_corpus();
  corpus2.queries.push_back({0, {0, 1, 1}, {0}});  // seeds not subset of gt
  CHECK(!validate(corpus2).empty());
}

TEST_CASE("malformed jsonl is reported with file and line") {
  const auto dir = temp_dir("malformed");
  save_corpus(minimal_two_entity_corpus(), dir);
  {
    std::ofstream out(fs::path(dir) / "entities.jsonl", std::ios::app);
    out << "{not json\n";
  }
  try {
    load_corpus(dir);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("entities.jsonl:3") != std::string::npos);
  }
}

TEST_CASE("synthetic generation: entity and query counts match the requested shape") {
  SyntheticSpec spec;
  spec.n_classes = 8;
  spec.entities_per_class = 40;
  spec.n_random_negatives = 16;
  spec.rng_seed = 5;
  const auto corpus = generate_synthetic(spec);
  CHECK(corpus.entity_count() == 8 * 40 + 16);
  CHECK(corpus.queries.size() == 8 * 10);  // 5 queries x {3,5} seeds per class
  std::map<int, int> queries_per_class;
  for (const auto& q : corpus.queries) queries_per_class[q.class_id]++;
  for (const auto& [cls, count] : queries_per_class) CHECK(count == 10);
  CHECK(validate(corpus).empty());
}

TEST_CASE("synthetic generation is deterministic: same seed, identical bytes") {
  SyntheticSpec spec;
  spec.n_classes = 3;
  spec.entities_per_class = 6;
  spec.n_random_negatives = 4;
  spec.n_polysemes = 2;
  spec.n_synonym_pairs = 2;
  spec.rng_seed = 77;

  const auto dir_a = temp_dir("det_a");
  const auto dir_b = temp_dir("det_b");
  save_corpus(generate_synthetic(spec), dir_a);
  save_corpus(generate_synthetic(spec), dir_b);
  for (const char* f : {"entities.jsonl", "contexts.jsonl", "queries.jsonl", "vocab.json", "images.bin"})
    CHECK(read_file(fs::path(dir_a) / f) == read_file(fs::path(dir_b) / f));

  spec.rng_seed = 78;
  const auto dir_c = temp_dir("det_c");
  save_corpus(generate_synthetic(spec), dir_c);
  CHECK(read_file(fs::path(dir_a) / "contexts.jsonl") != read_file(fs::path(dir_c) / "contexts.jsonl"));
}

TEST_CASE("generated corpora survive a save/load round trip unchanged") {
  auto corpus = test::tiny_corpus(13);
  const auto dir = temp_dir("roundtrip");
  save_corpus(corpus, dir);
  CHECK(load_corpus(dir) == corpus);
}

TEST_CASE("rho=0: entities of different classes share zero non-function tokens") {
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.entities_per_class = 8;
  spec.sibling_pairs = 2;
  spec.token_overlap = 0.0;
  spec.rng_seed = 9;
  const auto corpus = generate_synthetic(spec);

  const int function_end = kReservedTokens + spec.function_words;
  std::map<int, std::set<int>> class_tokens;
  for (const auto& ctx : corpus.contexts) {
    const auto& classes = corpus.entities[static_cast<std::size_t>(ctx.entity_id)].class_ids;
    REQUIRE(classes.size() == 1);
    for (int t : ctx.tokens)
      if (t >= function_end) class_tokens[classes[0]].insert(t);
  }
  for (const auto& [ca, ta] : class_tokens)
    for (const auto& [cb, tb] : class_tokens) {
      if (ca >= cb) continue;
      for (int t : ta) CHECK(!tb.count(t));
    }
}

TEST_CASE("rho=0.5 siblings share tokens, non-siblings do not") {
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.entities_per_class = 8;
  spec.sibling_pairs = 2;
  spec.token_overlap = 0.5;
  spec.rng_seed = 10;
  const auto corpus = generate_synthetic(spec);

  const int function_end = kReservedTokens + spec.function_words;
  std::map<int, std::set<int>> class_tokens;
  for (const auto& ctx : corpus.contexts)
    for (int t : ctx.tokens)
      if (t >= function_end)
        class_tokens[corpus.entities[static_cast<std::size_t>(ctx.entity_id)].class_ids[0]].insert(t);

  auto shared = [&](int a, int b) {
    int n = 0;
    for (int t : class_tokens[a])
      if (class_tokens[b].count(t)) ++n;
    return n;
  };
  CHECK(shared(0, 1) > 0);
  CHECK(shared(2, 3) > 0);
  CHECK(shared(0, 2) == 0);
  CHECK(shared(1, 3) == 0);
}

TEST_CASE("rho=0: planted classes are recoverable by a naive Bayes oracle") {
  SyntheticSpec spec;
  spec.n_classes = 5;
  spec.entities_per_class = 8;
  spec.rng_seed = 21;
  const auto corpus = generate_synthetic(spec);

  // Multinomial naive Bayes with Laplace smoothing, trained on all contexts.
  const int vocab = corpus.vocab_size();
  std::map<int, std::vector<double>> token_counts;
  std::map<int, double> class_totals, class_docs;
  int docs = 0;
  for (const auto& ctx : corpus.contexts) {
    const int cls = corpus.entities[static_cast<std::size_t>(ctx.entity_id)].class_ids[0];
    auto& counts = token_counts[cls];
    counts.resize(static_cast<std::size_t>(vocab), 0.0);
    for (int t : ctx.tokens) {
      if (t == kMaskToken) continue;
      counts[static_cast<std::size_t>(t)] += 1.0;
      class_totals[cls] += 1.0;
    }
    class_docs[cls] += 1.0;
    ++docs;
  }
  int correct = 0, total = 0;
  for (const auto& ctx : corpus.contexts) {
    const int truth = corpus.entities[static_cast<std::size_t>(ctx.entity_id)].class_ids[0];
    double best = -1e300;
    int best_cls = -1;
    for (const auto& [cls, counts] : token_counts) {
      double score = std::log(class_docs[cls] / docs);
      for (int t : ctx.tokens) {
        if (t == kMaskToken) continue;
        score += std::log((counts[static_cast<std::size_t>(t)] + 1.0) /
                          (class_totals[cls] + vocab));
      }
      if (score > best) {
        best = score;
        best_cls = cls;
      }
    }
    correct += best_cls == truth;
    ++total;
  }
  CHECK(correct == total);
}

TEST_CASE("zipf exponent produces a long tail of 1-2 context entities") {
  SyntheticSpec spec;
  spec.n_classes = 2;
  spec.entities_per_class = 40;
  spec.zipf_exponent = 1.1;
  spec.base_contexts = 12;
  spec.rng_seed = 4;
  const auto corpus = generate_synthetic(spec);
  const auto by_entity = corpus.contexts_by_entity();
  int tail = 0;
  for (const auto& ctxs : by_entity) {
    CHECK(!ctxs.empty());
    if (ctxs.size() <= 2) ++tail;
  }
  CHECK(tail > corpus.entity_count() / 2);
}

TEST_CASE("synonym twins get identical planted contexts; polysemes share a surface") {
  SyntheticSpec spec;
  spec.n_classes = 3;
  spec.entities_per_class = 8;
  spec.n_synonym_pairs = 2;
  spec.n_polysemes = 2;
  spec.rng_seed = 6;
  const auto corpus = generate_synthetic(spec);

  int synonyms_found = 0;
  const auto by_entity = corpus.contexts_by_entity();
  for (const auto& e : corpus.entities) {
    if (e.aliases.empty()) continue;
    ++synonyms_found;
    const Entity* src = nullptr;
    for (const auto& other : corpus.entities)
      if (other.name == e.aliases[0]) src = &other;
    REQUIRE(src != nullptr);
    const auto& a = by_entity[static_cast<std::size_t>(src->id)];
    const auto& b = by_entity[static_cast<std::size_t>(e.id)];
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(corpus.contexts[static_cast<std::size_t>(a[i])].tokens ==
            corpus.contexts[static_cast<std::size_t>(b[i])].tokens);
  }
  CHECK(synonyms_found == 2);

  std::map<std::string, std::set<int>> classes_by_name;
  for (const auto& e : corpus.entities)
    if (e.name.starts_with("poly"))
      for (int c : e.class_ids) classes_by_name[e.name].insert(c);
  CHECK(classes_by_name.size() == 2);
  for (const auto& [name, classes] : classes_by_name) CHECK(classes.size() == 2);
}

TEST_CASE("infeasible synthetic specs are rejected with a message") {
  SyntheticSpec spec;
  spec.n_classes = 1;
  spec.n_polysemes = 1;  // needs two classes
  CHECK_THROWS_AS(generate_synthetic(spec), ValidationError);

  SyntheticSpec spec2;
  spec2.entities_per_class = 3;  // five-seed queries impossible
  CHECK_THROWS_AS(generate_synthetic(spec2), ValidationError);

  SyntheticSpec spec3;
  spec3.sibling_pairs = 9;
  spec3.n_classes = 4;
  CHECK_THROWS_AS(generate_synthetic(spec3), ValidationError);
}
