#include "mese/dataset_tools.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mese/corpus.hpp"  // ParseError, ValidationError
#include "mese/mat.hpp"

namespace mese {

using json = nlohmann::ordered_json;

namespace {

void check_unit(const std::vector<double>& v, const char* what) {
  if (v.empty()) throw ValidationError(std::string(what) + ": empty vector");
  if (std::abs(l2_norm(v) - 1.0) > 1e-6)
    throw ValidationError(std::string(what) + ": vector must be unit-norm");
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("cosine: dimension mismatch");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na < 1e-12 || nb < 1e-12) throw ValidationError("cosine: zero vector");
  return dot(a, b) / (na * nb);
}

}  // namespace

double score_image(const ImageCandidate& candidate, const RerankQuery& query) {
  if (query.alpha < 0.0 || query.alpha > 1.0)
    throw ValidationError("score_image: alpha must be in [0,1]");
  check_unit(candidate.clip_image, "score_image: clip_image");
  check_unit(query.clip_text, "score_image: clip_text");
  check_unit(query.typical_image, "score_image: typical_image");
  const double text_term = dot(candidate.clip_image, query.clip_text);
  double object_term = 0.0;
  for (const auto& obj : candidate.objects) {
    check_unit(obj, "score_image: object feature");
    object_term = std::max(object_term, cosine(obj, query.typical_image));
  }
  if (candidate.objects.empty()) object_term = 0.0;
  return query.alpha * text_term + (1.0 - query.alpha) * object_term;
}

int select_best(const std::vector<ImageCandidate>& candidates, const RerankQuery& query) {
  if (candidates.empty()) throw ValidationError("select_best: empty candidate list");
  int best_id = candidates.front().id;
  double best_score = score_image(candidates.front(), query);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double s = score_image(candidates[i], query);
    if (s > best_score || (s == best_score && candidates[i].id < best_id)) {
      best_score = s;
      best_id = candidates[i].id;
    }
  }
  return best_id;
}

double fleiss_kappa(const std::vector<std::vector<int>>& table, int raters) {
  if (table.empty()) throw ValidationError("fleiss_kappa: empty table");
  if (raters < 2) throw ValidationError("fleiss_kappa: need at least 2 raters");
  const std::size_t categories = table.front().size();
  if (categories < 1) throw ValidationError("fleiss_kappa: no categories");
  const double n = static_cast<double>(raters);
  const double items = static_cast<double>(table.size());

  std::vector<double> category_mass(categories, 0.0);
  double p_bar = 0.0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& row = table[i];
    if (row.size() != categories) throw ValidationError("fleiss_kappa: ragged table");
    int row_sum = 0;
    double sq = 0.0;
    for (std::size_t j = 0; j < categories; ++j) {
      if (row[j] < 0) throw ValidationError("fleiss_kappa: negative count");
      row_sum += row[j];
      sq += static_cast<double>(row[j]) * static_cast<double>(row[j]);
      category_mass[j] += static_cast<double>(row[j]);
    }
    if (row_sum != raters)
      throw ValidationError("fleiss_kappa: row " + std::to_string(i) + " sums to " +
                            std::to_string(row_sum) + ", expected " + std::to_string(raters));
    p_bar += (sq - n) / (n * (n - 1.0));
  }
  p_bar /= items;

  double p_e = 0.0;
  for (double mass : category_mass) {
    const double pj = mass / (items * n);
    p_e += pj * pj;
  }
  if (1.0 - p_e < 1e-12)
    throw ValidationError("fleiss_kappa: kappa undefined (all mass in one category)");
  return (p_bar - p_e) / (1.0 - p_e);
}

double diversity(const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.size() < 2) throw ValidationError("diversity: need at least 2 embeddings");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i)
    for (std::size_t j = i + 1; j < embeddings.size(); ++j) {
      sum += cosine(embeddings[i], embeddings[j]);
      ++pairs;
    }
  const double mean = sum / static_cast<double>(pairs);
  if (mean <= 1e-6) throw ValidationError("diversity: diversity undefined (mean similarity ~ 0)");
  return 1.0 / mean;
}

void save_rerank_file(const std::vector<RerankGroup>& groups, int dim, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out << "MESE-RRK v1\n";

  std::vector<float> payload;
  auto push_vec = [&](const std::vector<double>& v) {
    if (static_cast<int>(v.size()) != dim)
      throw ValidationError("save_rerank_file: vector dimension mismatch");
    const int index = static_cast<int>(payload.size()) / dim;
    for (double x : v) payload.push_back(static_cast<float>(x));
    return index;
  };

  json index;
  index["dim"] = dim;
  json jgroups = json::array();
  for (const auto& g : groups) {
    json jg;
    jg["id"] = g.id;
    jg["clip_text"] = push_vec(g.query.clip_text);
    jg["typical_image"] = push_vec(g.query.typical_image);
    json jcands = json::array();
    for (const auto& c : g.candidates) {
      json jc;
      jc["id"] = c.id;
      jc["clip_image"] = push_vec(c.clip_image);
      json jobjs = json::array();
      for (const auto& o : c.objects) jobjs.push_back(push_vec(o));
      jc["objects"] = jobjs;
      jcands.push_back(jc);
    }
    jg["candidates"] = jcands;
    jgroups.push_back(jg);
  }
  index["groups"] = jgroups;
  index["vectors"] = static_cast<int>(payload.size()) / dim;
  out << index.dump() << '\n';
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
}

std::vector<RerankGroup> load_rerank_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::string magic;
  std::getline(in, magic);
  if (magic != "MESE-RRK v1") throw ParseError(path + ": bad header '" + magic + "'");
  std::string index_line;
  std::getline(in, index_line);
  json index;
  try {
    index = json::parse(index_line);
  } catch (const json::exception& e) {
    throw ParseError(path + ":2: " + e.what());
  }
  const int dim = index.at("dim").get<int>();
  const int vectors = index.at("vectors").get<int>();
  if (dim <= 0 || vectors < 0) throw ParseError(path + ": bad index shape");
  std::vector<float> payload(static_cast<std::size_t>(dim) * static_cast<std::size_t>(vectors));
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != payload.size() * sizeof(float))
    throw ParseError(path + ": truncated vector payload");

  auto fetch = [&](int vi) {
    if (vi < 0 || vi >= vectors) throw ParseError(path + ": vector index out of range");
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i)
      v[static_cast<std::size_t>(i)] =
          payload[static_cast<std::size_t>(vi) * static_cast<std::size_t>(dim) + static_cast<std::size_t>(i)];
    return v;
  };

  std::vector<RerankGroup> groups;
  for (const auto& jg : index.at("groups")) {
    RerankGroup g;
    g.id = jg.at("id").get<std::string>();
    g.query.clip_text = fetch(jg.at("clip_text").get<int>());
    g.query.typical_image = fetch(jg.at("typical_image").get<int>());
    for (const auto& jc : jg.at("candidates")) {
      ImageCandidate c;
      c.id = jc.at("id").get<int>();
      c.clip_image = fetch(jc.at("clip_image").get<int>());
      for (const auto& jo : jc.at("objects")) c.objects.push_back(fetch(jo.get<int>()));
      g.candidates.push_back(std::move(c));
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace mese
