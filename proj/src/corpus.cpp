#include "mese/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mese {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::vector<std::vector<int>> Corpus::contexts_by_entity() const {
  std::vector<std::vector<int>> out(entities.size());
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const int e = contexts[i].entity_id;
    if (e >= 0 && e < entity_count()) out[static_cast<std::size_t>(e)].push_back(static_cast<int>(i));
  }
  return out;
}

MultiModalContext mask_context(const std::vector<int>& tokens, int span_begin, int span_end,
                               int entity_id, std::optional<int> image_row) {
  if (span_begin >= span_end) throw ValidationError("mask_context: empty mention span");
  if (span_begin < 0 || span_end > static_cast<int>(tokens.size()))
    throw ValidationError("mask_context: span [" + std::to_string(span_begin) + "," +
                          std::to_string(span_end) + ") out of bounds for sentence of length " +
                          std::to_string(tokens.size()));
  MultiModalContext ctx;
  ctx.entity_id = entity_id;
  ctx.image_row = image_row;
  ctx.tokens.assign(tokens.begin(), tokens.begin() + span_begin);
  ctx.tokens.push_back(kMaskToken);
  ctx.tokens.insert(ctx.tokens.end(), tokens.begin() + span_end, tokens.end());
  ctx.mask_index = span_begin;
  return ctx;
}

std::vector<Violation> validate(const Corpus& corpus) {
  std::vector<Violation> out;
  auto flag = [&out](std::string where, std::string message) {
    out.push_back({std::move(where), std::move(message)});
  };

  const int n = corpus.entity_count();
  std::set<int> seen_ids;
  for (std::size_t i = 0; i < corpus.entities.size(); ++i) {
    const Entity& e = corpus.entities[i];
    const std::string where = "entities[" + std::to_string(i) + "]";
    if (e.id != static_cast<int>(i)) flag(where, "ids must be dense 0..V_e-1; got " + std::to_string(e.id));
    if (!seen_ids.insert(e.id).second) flag(where, "duplicate entity id " + std::to_string(e.id));
    for (const auto& a : e.aliases)
      if (a == e.name) flag(where, "alias repeats entity name '" + a + "'");
  }

  const int vocab = corpus.vocab_size();
  for (std::size_t i = 0; i < corpus.contexts.size(); ++i) {
    const MultiModalContext& c = corpus.contexts[i];
    const std::string where = "contexts[" + std::to_string(i) + "]";
    if (c.entity_id < 0 || c.entity_id >= n)
      flag(where, "unknown entity " + std::to_string(c.entity_id));
    if (c.tokens.empty()) {
      flag(where, "empty token sequence");
      continue;
    }
    if (c.mask_index < 0 || c.mask_index >= static_cast<int>(c.tokens.size()))
      flag(where, "mask_index " + std::to_string(c.mask_index) + " out of range");
    else if (c.tokens[static_cast<std::size_t>(c.mask_index)] != kMaskToken)
      flag(where, "token at mask_index is not [MASK]");
    for (int t : c.tokens)
      if (t < 0 || t >= vocab) {
        flag(where, "token id " + std::to_string(t) + " outside vocabulary of size " +
                        std::to_string(vocab));
        break;
      }
    if (c.image_row) {
      if (*c.image_row < 0 || *c.image_row >= corpus.image_rows())
        flag(where, "image_row " + std::to_string(*c.image_row) + " out of range");
      else {
        for (float v : corpus.patches_of(c))
          if (!std::isfinite(v)) {
            flag(where, "non-finite patch value");
            break;
          }
      }
    }
  }

  for (std::size_t i = 0; i < corpus.queries.size(); ++i) {
    const Query& q = corpus.queries[i];
    const std::string where = "queries[" + std::to_string(i) + "]";
    if (q.seeds.size() != 3 && q.seeds.size() != 5)
      flag(where, "|seeds| must be 3 or 5; got " + std::to_string(q.seeds.size()));
    if (q.ground_truth.size() < q.seeds.size())
      flag(where, "|ground_truth| < |seeds|");
    std::set<int> gt(q.ground_truth.begin(), q.ground_truth.end());
    for (int s : q.seeds) {
      if (s < 0 || s >= n) flag(where, "unknown seed entity " + std::to_string(s));
      if (!gt.count(s)) flag(where, "seed " + std::to_string(s) + " not in ground truth");
    }
    for (int g : q.ground_truth)
      if (g < 0 || g >= n) flag(where, "unknown ground-truth entity " + std::to_string(g));
  }

  return out;
}

namespace {

json parse_line(const std::string& file, int line_no, const std::string& line) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(file + ":" + std::to_string(line_no) + ": " + e.what());
  }
}

template <class Fn>
void for_each_jsonl(const fs::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    fn(parse_line(path.filename().string(), line_no, line), line_no);
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& file, int line_no) {
  if (!j.contains(key))
    throw ParseError(file + ":" + std::to_string(line_no) + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(file + ":" + std::to_string(line_no) + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

Corpus load_corpus(const std::string& dir) {
  const fs::path root(dir);
  Corpus corpus;

  {
    const fs::path p = root / "vocab.json";
    std::ifstream in(p);
    if (!in) throw ParseError("cannot open " + p.string());
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ParseError(p.string() + ": " + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it)
      corpus.token_vocab[it.key()] = it.value().get<int>();
    auto check_reserved = [&](const char* surface, int id) {
      auto it = corpus.token_vocab.find(surface);
      if (it == corpus.token_vocab.end() || it->second != id)
        throw ValidationError("vocab.json: reserved token '" + std::string(surface) +
                              "' must map to id " + std::to_string(id));
    };
    check_reserved(kPadSurface, kPadToken);
    check_reserved(kMaskSurface, kMaskToken);
    check_reserved(kUnkSurface, kUnkToken);
  }

  for_each_jsonl(root / "entities.jsonl", [&](const json& j, int line_no) {
    Entity e;
    e.id = field<int>(j, "id", "entities.jsonl", line_no);
    e.name = field<std::string>(j, "name", "entities.jsonl", line_no);
    e.aliases = field<std::vector<std::string>>(j, "aliases", "entities.jsonl", line_no);
    e.class_ids = field<std::vector<int>>(j, "class_ids", "entities.jsonl", line_no);
    corpus.entities.push_back(std::move(e));
  });

  {
    const fs::path p = root / "images.bin";
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ParseError("cannot open " + p.string());
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic, version;
    long rows = -1, l2 = -1, dim = -1;
    hs >> magic >> version >> rows >> l2 >> dim;
    if (magic != "MESE-IMG" || version != "v1" || rows < 0 || l2 <= 0 || dim <= 0)
      throw ParseError("images.bin:1: bad header '" + header + "'");
    corpus.patch_count = static_cast<int>(l2);
    corpus.image_feature_dim = static_cast<int>(dim);
    const std::size_t count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(l2) *
                              static_cast<std::size_t>(dim);
    corpus.image_blob.resize(count);
    in.read(reinterpret_cast<char*>(corpus.image_blob.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float))
      throw ParseError("images.bin: truncated payload (expected " + std::to_string(count) +
                       " floats)");
  }

  for_each_jsonl(root / "contexts.jsonl", [&](const json& j, int line_no) {
    MultiModalContext c;
    c.entity_id = field<int>(j, "entity_id", "contexts.jsonl", line_no);
    c.tokens = field<std::vector<int>>(j, "tokens", "contexts.jsonl", line_no);
    c.mask_index = field<int>(j, "mask_index", "contexts.jsonl", line_no);
    if (!j.contains("image_row"))
      throw ParseError("contexts.jsonl:" + std::to_string(line_no) + ": missing field 'image_row'");
    if (!j.at("image_row").is_null()) c.image_row = j.at("image_row").get<int>();
    corpus.contexts.push_back(std::move(c));
  });

  for_each_jsonl(root / "queries.jsonl", [&](const json& j, int line_no) {
    Query q;
    q.class_id = field<int>(j, "class_id", "queries.jsonl", line_no);
    q.seeds = field<std::vector<int>>(j, "seeds", "queries.jsonl", line_no);
    q.ground_truth = field<std::vector<int>>(j, "ground_truth", "queries.jsonl", line_no);
    corpus.queries.push_back(std::move(q));
  });

  const auto violations = validate(corpus);
  if (!violations.empty()) {
    std::string msg = "corpus validation failed:";
    for (const auto& v : violations) msg += "\n  " + v.where + ": " + v.message;
    throw ValidationError(msg);
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root);

  {
    std::ofstream out(root / "entities.jsonl", std::ios::binary);
    for (const Entity& e : corpus.entities) {
      json j;
      j["id"] = e.id;
      j["name"] = e.name;
      j["aliases"] = e.aliases;
      j["class_ids"] = e.class_ids;
      out << j.dump() << '\n';
    }
  }
  {
    std::ofstream out(root / "contexts.jsonl", std::ios::binary);
    for (const MultiModalContext& c : corpus.contexts) {
      json j;
      j["entity_id"] = c.entity_id;
      j["tokens"] = c.tokens;
      j["mask_index"] = c.mask_index;
      if (c.image_row)
        j["image_row"] = *c.image_row;
      else
        j["image_row"] = nullptr;
      out << j.dump() << '\n';
    }
  }
  {
    std::ofstream out(root / "queries.jsonl", std::ios::binary);
    for (const Query& q : corpus.queries) {
      json j;
      j["class_id"] = q.class_id;
      j["seeds"] = q.seeds;
      j["ground_truth"] = q.ground_truth;
      out << j.dump() << '\n';
    }
  }
  {
    json j = json::object();
    for (const auto& [surface, id] : corpus.token_vocab) j[surface] = id;
    std::ofstream out(root / "vocab.json", std::ios::binary);
    out << j.dump(2) << '\n';
  }
  {
    std::ofstream out(root / "images.bin", std::ios::binary);
    out << "MESE-IMG v1 " << corpus.image_rows() << ' ' << corpus.patch_count << ' '
        << corpus.image_feature_dim << '\n';
    out.write(reinterpret_cast<const char*>(corpus.image_blob.data()),
              static_cast<std::streamsize>(corpus.image_blob.size() * sizeof(float)));
  }
}

}  // namespace mese
