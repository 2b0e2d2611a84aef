#include "mese/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mese/rng.hpp"

namespace mese {

using json = nlohmann::ordered_json;

namespace {
constexpr double kLnEps = 1e-5;

void layernorm_row(const double* x, int n, const double* g, const double* b, double* out,
                   double* mean_out, double* rstd_out) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x[i];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < n; ++i) out[i] = g[i] * ((x[i] - mean) * rstd) + b[i];
  *mean_out = mean;
  *rstd_out = rstd;
}

// Accumulates dx into dx_row and parameter grads into dg/db.
void layernorm_backward_row(const double* x, int n, double mean, double rstd, const double* g,
                            const double* dy, double* dx_row, double* dg, double* db) {
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    dg[i] += dy[i] * xhat;
    db[i] += dy[i];
    m1 += dxhat;
    m2 += dxhat * xhat;
  }
  m1 /= n;
  m2 /= n;
  for (int i = 0; i < n; ++i) {
    const double xhat = (x[i] - mean) * rstd;
    const double dxhat = dy[i] * g[i];
    dx_row[i] += rstd * (dxhat - m1 - xhat * m2);
  }
}

// y[p] = x[p] * W + b for all rows; W is (in x out) row-major.
void linear_forward(const Mat& x, std::span<const double> w, std::span<const double> b, Mat& y) {
  const int in = x.cols, out = static_cast<int>(b.size());
  y = Mat(x.rows, out);
  for (int p = 0; p < x.rows; ++p) {
    const double* xr = x.row(p);
    double* yr = y.row(p);
    for (int j = 0; j < out; ++j) yr[j] = b[j];
    for (int i = 0; i < in; ++i) {
      const double xv = xr[i];
      const double* wr = w.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(out);
      for (int j = 0; j < out; ++j) yr[j] += xv * wr[j];
    }
  }
}

void linear_backward(const Mat& x, std::span<const double> w, const Mat& dy, Mat& dx,
                     std::span<double> dw, std::span<double> db) {
  const int in = x.cols, out = dy.cols;
  dx = Mat(x.rows, in);
  for (int p = 0; p < x.rows; ++p) {
    const double* xr = x.row(p);
    const double* dyr = dy.row(p);
    double* dxr = dx.row(p);
    for (int j = 0; j < out; ++j) db[j] += dyr[j];
    for (int i = 0; i < in; ++i) {
      const double* wr = w.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(out);
      double* dwr = dw.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(out);
      double acc = 0.0;
      for (int j = 0; j < out; ++j) {
        acc += dyr[j] * wr[j];
        dwr[j] += xr[i] * dyr[j];
      }
      dxr[i] = acc;
    }
  }
}

void mlp_head_forward(std::span<const double> h, std::span<const double> w1,
                      std::span<const double> b1, std::span<const double> w2,
                      std::span<const double> b2, std::vector<double>& pre,
                      std::vector<double>& act, std::vector<double>& out) {
  const int d = static_cast<int>(b1.size());
  const int o = static_cast<int>(b2.size());
  pre.assign(b1.begin(), b1.end());
  for (int i = 0; i < static_cast<int>(h.size()); ++i) {
    const double hv = h[i];
    const double* wr = w1.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
    for (int j = 0; j < d; ++j) pre[static_cast<std::size_t>(j)] += hv * wr[j];
  }
  act.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) act[static_cast<std::size_t>(j)] = gelu(pre[static_cast<std::size_t>(j)]);
  out.assign(b2.begin(), b2.end());
  for (int i = 0; i < d; ++i) {
    const double av = act[static_cast<std::size_t>(i)];
    const double* wr = w2.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(o);
    for (int j = 0; j < o; ++j) out[static_cast<std::size_t>(j)] += av * wr[j];
  }
}

// Returns dL/dh accumulated into dh.
void mlp_head_backward(std::span<const double> h, std::span<const double> w1,
                       std::span<const double> w2, const std::vector<double>& pre,
                       const std::vector<double>& act, std::span<const double> dout,
                       std::span<double> dh, std::span<double> dw1, std::span<double> db1,
                       std::span<double> dw2, std::span<double> db2) {
  const int d = static_cast<int>(pre.size());
  const int o = static_cast<int>(dout.size());
  std::vector<double> dact(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    const double* wr = w2.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(o);
    double* dwr = dw2.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(o);
    double acc = 0.0;
    for (int j = 0; j < o; ++j) {
      acc += dout[j] * wr[j];
      dwr[j] += act[static_cast<std::size_t>(i)] * dout[j];
    }
    dact[static_cast<std::size_t>(i)] = acc;
  }
  for (int j = 0; j < o; ++j) db2[j] += dout[j];
  std::vector<double> dpre(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i)
    dpre[static_cast<std::size_t>(i)] =
        dact[static_cast<std::size_t>(i)] * gelu_grad(pre[static_cast<std::size_t>(i)]);
  for (int i = 0; i < static_cast<int>(h.size()); ++i) {
    const double* wr = w1.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
    double* dwr = dw1.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(d);
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      acc += dpre[static_cast<std::size_t>(j)] * wr[j];
      dwr[j] += h[i] * dpre[static_cast<std::size_t>(j)];
    }
    dh[i] += acc;
  }
  for (int j = 0; j < d; ++j) db1[j] += dpre[static_cast<std::size_t>(j)];
}

}  // namespace

void EncoderConfig::check() const {
  auto bad = [](const std::string& msg) { throw ValidationError("EncoderConfig: " + msg); };
  if (hidden_dim <= 0 || n_heads <= 0 || ffn_dim <= 0) bad("dims must be positive");
  if (hidden_dim % n_heads != 0) bad("hidden_dim must be divisible by n_heads");
  if (text_layers < 0 || image_layers < 0 || fusion_layers < 0) bad("negative layer count");
  if (max_text_len <= 0 || patch_count <= 0 || image_feature_dim <= 0) bad("bad sequence shape");
  if (vocab_size < kReservedTokens) bad("vocab must include reserved tokens");
  if (candidate_count <= 0) bad("candidate_count must be positive");
  if (contrastive_dim <= 0 || cluster_count <= 0) bad("projection dims must be positive");
}

EncoderConfig EncoderConfig::for_corpus(const Corpus& corpus) {
  return for_corpus(corpus, EncoderConfig{});
}

EncoderConfig EncoderConfig::for_corpus(const Corpus& corpus, EncoderConfig base) {
  base.vocab_size = corpus.vocab_size();
  base.candidate_count = corpus.entity_count();
  if (corpus.image_feature_dim > 0) base.image_feature_dim = corpus.image_feature_dim;
  if (corpus.patch_count > 0) base.patch_count = corpus.patch_count;
  int longest = 1;
  for (const auto& ctx : corpus.contexts) longest = std::max(longest, static_cast<int>(ctx.tokens.size()));
  base.max_text_len = std::max(base.max_text_len, longest);
  base.check();
  return base;
}

int TensorRegistry::add(const std::string& name, int rows, int cols) {
  Entry e;
  e.name = name;
  e.rows = rows;
  e.cols = cols;
  e.offset = total_;
  total_ += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  const int id = static_cast<int>(entries_.size());
  entries_.push_back(std::move(e));
  index_[name] = id;
  return id;
}

int TensorRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

Model::Model(const EncoderConfig& config) : cfg_(config) {
  cfg_.check();
  build_registry();
  init_params();
}

void Model::build_registry() {
  const int d = cfg_.hidden_dim;
  tok_emb_ = reg_.add("embed.token", cfg_.vocab_size, d);
  txt_pos_ = reg_.add("embed.text_pos", cfg_.max_text_len, d);
  patch_w_ = reg_.add("embed.patch_w", cfg_.image_feature_dim, d);
  patch_b_ = reg_.add("embed.patch_b", 1, d);
  patch_pos_ = reg_.add("embed.patch_pos", cfg_.patch_count, d);
  notxt_ = reg_.add("embed.notxt", 1, d);
  noimg_ = reg_.add("embed.noimg", 1, d);

  auto add_stack = [&](const std::string& prefix, int layers, std::vector<LayerIds>& out) {
    for (int l = 0; l < layers; ++l) {
      const std::string p = prefix + "." + std::to_string(l) + ".";
      LayerIds ids{};
      ids.ln1_g = reg_.add(p + "ln1.g", 1, d);
      ids.ln1_b = reg_.add(p + "ln1.b", 1, d);
      ids.wq = reg_.add(p + "attn.wq", d, d);
      ids.bq = reg_.add(p + "attn.bq", 1, d);
      ids.wk = reg_.add(p + "attn.wk", d, d);
      ids.bk = reg_.add(p + "attn.bk", 1, d);
      ids.wv = reg_.add(p + "attn.wv", d, d);
      ids.bv = reg_.add(p + "attn.bv", 1, d);
      ids.wo = reg_.add(p + "attn.wo", d, d);
      ids.bo = reg_.add(p + "attn.bo", 1, d);
      ids.ln2_g = reg_.add(p + "ln2.g", 1, d);
      ids.ln2_b = reg_.add(p + "ln2.b", 1, d);
      ids.w1 = reg_.add(p + "ffn.w1", d, cfg_.ffn_dim);
      ids.b1 = reg_.add(p + "ffn.b1", 1, cfg_.ffn_dim);
      ids.w2 = reg_.add(p + "ffn.w2", cfg_.ffn_dim, d);
      ids.b2 = reg_.add(p + "ffn.b2", 1, d);
      out.push_back(ids);
    }
  };
  add_stack("text", cfg_.text_layers, text_ids_);
  add_stack("image", cfg_.image_layers, image_ids_);
  add_stack("fusion", cfg_.fusion_layers, fusion_ids_);
  final_ln_g_ = reg_.add("fusion.final_ln.g", 1, d);
  final_ln_b_ = reg_.add("fusion.final_ln.b", 1, d);

  cls_w1_ = reg_.add("head.cls.w1", d, d);
  cls_b1_ = reg_.add("head.cls.b1", 1, d);
  cls_w2_ = reg_.add("head.cls.w2", d, cfg_.candidate_count);
  cls_b2_ = reg_.add("head.cls.b2", 1, cfg_.candidate_count);
  con_w1_ = reg_.add("head.con.w1", d, d);
  con_b1_ = reg_.add("head.con.b1", 1, d);
  con_w2_ = reg_.add("head.con.w2", d, cfg_.contrastive_dim);
  con_b2_ = reg_.add("head.con.b2", 1, cfg_.contrastive_dim);
  clu_w1_ = reg_.add("head.clu.w1", d, d);
  clu_b1_ = reg_.add("head.clu.b1", 1, d);
  clu_w2_ = reg_.add("head.clu.w2", d, cfg_.cluster_count);
  clu_b2_ = reg_.add("head.clu.b2", 1, cfg_.cluster_count);
}

void Model::init_params() {
  student_.assign(reg_.total_size(), 0.0);
  Rng rng(cfg_.rng_seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
  for (const auto& e : reg_.entries()) {
    double* p = student_.data() + e.offset;
    const std::size_t n = static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols);
    const bool is_ln_gain = e.name.ends_with("ln.g") || e.name.ends_with("ln1.g") ||
                            e.name.ends_with("ln2.g") || e.name.ends_with("final_ln.g");
    const bool is_bias = e.name.ends_with(".b") || e.name.ends_with(".b1") ||
                         e.name.ends_with(".b2") || e.name.ends_with(".bq") ||
                         e.name.ends_with(".bk") || e.name.ends_with(".bv") ||
                         e.name.ends_with(".bo") || e.name.ends_with("ln1.b") ||
                         e.name.ends_with("ln2.b") || e.name.ends_with("patch_b");
    if (is_ln_gain) {
      std::fill(p, p + n, 1.0);
    } else if (is_bias) {
      std::fill(p, p + n, 0.0);
    } else {
      for (std::size_t i = 0; i < n; ++i) p[i] = rng.uniform(-bound, bound);
    }
  }
  teacher_ = student_;
}

std::span<const double> Model::tensor(const std::vector<double>& store, int id) const {
  const auto& e = reg_.entry(id);
  return {store.data() + e.offset, static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols)};
}

std::span<double> Model::tensor(std::vector<double>& store, int id) const {
  const auto& e = reg_.entry(id);
  return {store.data() + e.offset, static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols)};
}

namespace {
std::span<const double> slice(std::span<const double> params, const TensorRegistry::Entry& e) {
  return params.subspan(e.offset, static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols));
}
}  // namespace

Mat Model::run_stack(std::span<const double> params, const std::vector<LayerIds>& stack, Mat x,
                     const std::vector<bool>& key_valid, std::vector<LayerCache>& caches) const {
  const int d = cfg_.hidden_dim;
  const int heads = cfg_.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  caches.clear();
  caches.reserve(stack.size());

  for (const auto& ids : stack) {
    LayerCache lc;
    lc.x_in = x;
    const int L = x.rows;

    auto g1 = slice(params, reg_.entry(ids.ln1_g));
    auto b1 = slice(params, reg_.entry(ids.ln1_b));
    lc.ln1 = Mat(L, d);
    lc.ln1_mean.resize(static_cast<std::size_t>(L));
    lc.ln1_rstd.resize(static_cast<std::size_t>(L));
    for (int p = 0; p < L; ++p)
      layernorm_row(lc.x_in.row(p), d, g1.data(), b1.data(), lc.ln1.row(p),
                    &lc.ln1_mean[static_cast<std::size_t>(p)], &lc.ln1_rstd[static_cast<std::size_t>(p)]);

    linear_forward(lc.ln1, slice(params, reg_.entry(ids.wq)), slice(params, reg_.entry(ids.bq)), lc.q);
    linear_forward(lc.ln1, slice(params, reg_.entry(ids.wk)), slice(params, reg_.entry(ids.bk)), lc.k);
    linear_forward(lc.ln1, slice(params, reg_.entry(ids.wv)), slice(params, reg_.entry(ids.bv)), lc.v);

    lc.att.assign(static_cast<std::size_t>(heads), Mat(L, L));
    lc.att_ctx = Mat(L, d);
    std::vector<double> scores(static_cast<std::size_t>(L));
    for (int h = 0; h < heads; ++h) {
      Mat& att = lc.att[static_cast<std::size_t>(h)];
      const int off = h * dh;
      for (int p = 0; p < L; ++p) {
        double mx = -1e300;
        for (int kk = 0; kk < L; ++kk) {
          if (!key_valid[static_cast<std::size_t>(kk)]) continue;
          double s = 0.0;
          const double* qr = lc.q.row(p) + off;
          const double* kr = lc.k.row(kk) + off;
          for (int i = 0; i < dh; ++i) s += qr[i] * kr[i];
          s *= scale;
          scores[static_cast<std::size_t>(kk)] = s;
          mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int kk = 0; kk < L; ++kk) {
          if (!key_valid[static_cast<std::size_t>(kk)]) {
            att.at(p, kk) = 0.0;
            continue;
          }
          const double e = std::exp(scores[static_cast<std::size_t>(kk)] - mx);
          att.at(p, kk) = e;
          denom += e;
        }
        double* ctx = lc.att_ctx.row(p) + off;
        for (int i = 0; i < dh; ++i) ctx[i] = 0.0;
        for (int kk = 0; kk < L; ++kk) {
          const double w = att.at(p, kk) / denom;
          att.at(p, kk) = w;
          if (w == 0.0) continue;
          const double* vr = lc.v.row(kk) + off;
          for (int i = 0; i < dh; ++i) ctx[i] += w * vr[i];
        }
      }
    }

    Mat attn_proj;
    linear_forward(lc.att_ctx, slice(params, reg_.entry(ids.wo)), slice(params, reg_.entry(ids.bo)),
                   attn_proj);
    lc.x_mid = lc.x_in;
    for (std::size_t i = 0; i < lc.x_mid.a.size(); ++i) lc.x_mid.a[i] += attn_proj.a[i];

    auto g2 = slice(params, reg_.entry(ids.ln2_g));
    auto b2 = slice(params, reg_.entry(ids.ln2_b));
    lc.ln2 = Mat(L, d);
    lc.ln2_mean.resize(static_cast<std::size_t>(L));
    lc.ln2_rstd.resize(static_cast<std::size_t>(L));
    for (int p = 0; p < L; ++p)
      layernorm_row(lc.x_mid.row(p), d, g2.data(), b2.data(), lc.ln2.row(p),
                    &lc.ln2_mean[static_cast<std::size_t>(p)], &lc.ln2_rstd[static_cast<std::size_t>(p)]);

    linear_forward(lc.ln2, slice(params, reg_.entry(ids.w1)), slice(params, reg_.entry(ids.b1)),
                   lc.ffn_pre);
    lc.ffn_act = lc.ffn_pre;
    for (auto& v : lc.ffn_act.a) v = gelu(v);
    Mat ffn_out;
    linear_forward(lc.ffn_act, slice(params, reg_.entry(ids.w2)), slice(params, reg_.entry(ids.b2)),
                   ffn_out);
    lc.x_out = lc.x_mid;
    for (std::size_t i = 0; i < lc.x_out.a.size(); ++i) lc.x_out.a[i] += ffn_out.a[i];

    x = lc.x_out;
    caches.push_back(std::move(lc));
  }
  return x;
}

void Model::backward_stack(std::span<const double> params, const std::vector<LayerIds>& stack,
                           const std::vector<LayerCache>& caches, const std::vector<bool>& key_valid,
                           Mat& d_out, std::span<double> grad) const {
  const int d = cfg_.hidden_dim;
  const int heads = cfg_.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto gslice = [&](int id) {
    const auto& e = reg_.entry(id);
    return grad.subspan(e.offset, static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols));
  };

  for (int li = static_cast<int>(stack.size()) - 1; li >= 0; --li) {
    const auto& ids = stack[static_cast<std::size_t>(li)];
    const LayerCache& lc = caches[static_cast<std::size_t>(li)];
    const int L = lc.x_in.rows;

    // FFN branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
    Mat d_ffn_act;
    linear_backward(lc.ffn_act, slice(params, reg_.entry(ids.w2)), d_out, d_ffn_act,
                    gslice(ids.w2), gslice(ids.b2));
    for (std::size_t i = 0; i < d_ffn_act.a.size(); ++i)
      d_ffn_act.a[i] *= gelu_grad(lc.ffn_pre.a[i]);
    Mat d_ln2;
    linear_backward(lc.ln2, slice(params, reg_.entry(ids.w1)), d_ffn_act, d_ln2, gslice(ids.w1),
                    gslice(ids.b1));

    Mat d_x_mid = d_out;  // residual path
    auto g2 = slice(params, reg_.entry(ids.ln2_g));
    for (int p = 0; p < L; ++p)
      layernorm_backward_row(lc.x_mid.row(p), d, lc.ln2_mean[static_cast<std::size_t>(p)],
                             lc.ln2_rstd[static_cast<std::size_t>(p)], g2.data(), d_ln2.row(p),
                             d_x_mid.row(p), gslice(ids.ln2_g).data(), gslice(ids.ln2_b).data());

    // Attention branch: x_mid = x_in + Wo att_ctx + bo
    Mat d_att_ctx;
    linear_backward(lc.att_ctx, slice(params, reg_.entry(ids.wo)), d_x_mid, d_att_ctx,
                    gslice(ids.wo), gslice(ids.bo));

    Mat d_q(L, d), d_k(L, d), d_v(L, d);
    std::vector<double> d_att_row(static_cast<std::size_t>(L));
    for (int h = 0; h < heads; ++h) {
      const Mat& att = lc.att[static_cast<std::size_t>(h)];
      const int off = h * dh;
      for (int p = 0; p < L; ++p) {
        const double* dctx = d_att_ctx.row(p) + off;
        double inner = 0.0;
        for (int kk = 0; kk < L; ++kk) {
          if (!key_valid[static_cast<std::size_t>(kk)]) {
            d_att_row[static_cast<std::size_t>(kk)] = 0.0;
            continue;
          }
          const double* vr = lc.v.row(kk) + off;
          double da = 0.0;
          for (int i = 0; i < dh; ++i) da += dctx[i] * vr[i];
          d_att_row[static_cast<std::size_t>(kk)] = da;
          inner += da * att.at(p, kk);
          double* dvr = d_v.row(kk) + off;
          const double w = att.at(p, kk);
          for (int i = 0; i < dh; ++i) dvr[i] += w * dctx[i];
        }
        // softmax backward, then scores -> q,k
        const double* qr = lc.q.row(p) + off;
        double* dqr = d_q.row(p) + off;
        for (int kk = 0; kk < L; ++kk) {
          if (!key_valid[static_cast<std::size_t>(kk)]) continue;
          const double ds =
              att.at(p, kk) * (d_att_row[static_cast<std::size_t>(kk)] - inner) * scale;
          if (ds == 0.0) continue;
          const double* kr = lc.k.row(kk) + off;
          double* dkr = d_k.row(kk) + off;
          for (int i = 0; i < dh; ++i) {
            dqr[i] += ds * kr[i];
            dkr[i] += ds * qr[i];
          }
        }
      }
    }

    Mat d_ln1(L, d);
    {
      Mat tmp;
      linear_backward(lc.ln1, slice(params, reg_.entry(ids.wq)), d_q, tmp, gslice(ids.wq),
                      gslice(ids.bq));
      for (std::size_t i = 0; i < d_ln1.a.size(); ++i) d_ln1.a[i] += tmp.a[i];
      linear_backward(lc.ln1, slice(params, reg_.entry(ids.wk)), d_k, tmp, gslice(ids.wk),
                      gslice(ids.bk));
      for (std::size_t i = 0; i < d_ln1.a.size(); ++i) d_ln1.a[i] += tmp.a[i];
      linear_backward(lc.ln1, slice(params, reg_.entry(ids.wv)), d_v, tmp, gslice(ids.wv),
                      gslice(ids.bv));
      for (std::size_t i = 0; i < d_ln1.a.size(); ++i) d_ln1.a[i] += tmp.a[i];
    }

    Mat d_x_in = d_x_mid;  // residual path
    auto g1 = slice(params, reg_.entry(ids.ln1_g));
    for (int p = 0; p < L; ++p)
      layernorm_backward_row(lc.x_in.row(p), d, lc.ln1_mean[static_cast<std::size_t>(p)],
                             lc.ln1_rstd[static_cast<std::size_t>(p)], g1.data(), d_ln1.row(p),
                             d_x_in.row(p), gslice(ids.ln1_g).data(), gslice(ids.ln1_b).data());

    d_out = std::move(d_x_in);
  }
}

Mat Model::encode_text(std::span<const double> params, std::span<const int> tokens) const {
  const int d = cfg_.hidden_dim;
  if (tokens.empty()) throw ValidationError("encode_text: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg_.max_text_len)
    throw ValidationError("encode_text: sequence longer than max_text_len");
  Mat x(static_cast<int>(tokens.size()), d);
  std::vector<bool> valid(tokens.size());
  auto emb = slice(params, reg_.entry(tok_emb_));
  auto pos = slice(params, reg_.entry(txt_pos_));
  bool any_valid = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || t >= cfg_.vocab_size)
      throw ValidationError("encode_text: token id " + std::to_string(t) +
                            " outside embedding table of size " + std::to_string(cfg_.vocab_size));
    for (int j = 0; j < d; ++j)
      x.at(static_cast<int>(i), j) = emb[static_cast<std::size_t>(t) * static_cast<std::size_t>(d) +
                                         static_cast<std::size_t>(j)] +
                                     pos[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
    valid[i] = (t != kPadToken);
    any_valid = any_valid || valid[i];
  }
  if (!any_valid) throw ValidationError("encode_text: all tokens are padding");
  std::vector<LayerCache> caches;
  return run_stack(params, text_ids_, std::move(x), valid, caches);
}

Mat Model::encode_image(std::span<const double> params, std::span<const float> patches) const {
  const int d = cfg_.hidden_dim;
  if (patches.empty()) {
    Mat x(1, d);
    auto v = slice(params, reg_.entry(noimg_));
    for (int j = 0; j < d; ++j) x.at(0, j) = v[static_cast<std::size_t>(j)];
    return x;
  }
  const std::size_t expect = static_cast<std::size_t>(cfg_.patch_count) *
                             static_cast<std::size_t>(cfg_.image_feature_dim);
  if (patches.size() != expect)
    throw ValidationError("encode_image: expected " + std::to_string(cfg_.patch_count) + "x" +
                          std::to_string(cfg_.image_feature_dim) + " patch matrix, got " +
                          std::to_string(patches.size()) + " values");
  Mat x(cfg_.patch_count, d);
  auto w = slice(params, reg_.entry(patch_w_));
  auto b = slice(params, reg_.entry(patch_b_));
  auto pos = slice(params, reg_.entry(patch_pos_));
  for (int p = 0; p < cfg_.patch_count; ++p) {
    double* xr = x.row(p);
    for (int j = 0; j < d; ++j)
      xr[j] = b[static_cast<std::size_t>(j)] +
              pos[static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
    for (int f = 0; f < cfg_.image_feature_dim; ++f) {
      const double pv = patches[static_cast<std::size_t>(p) * static_cast<std::size_t>(cfg_.image_feature_dim) +
                                static_cast<std::size_t>(f)];
      const double* wr = w.data() + static_cast<std::size_t>(f) * static_cast<std::size_t>(d);
      for (int j = 0; j < d; ++j) xr[j] += pv * wr[j];
    }
  }
  std::vector<bool> valid(static_cast<std::size_t>(cfg_.patch_count), true);
  std::vector<LayerCache> caches;
  return run_stack(params, image_ids_, std::move(x), valid, caches);
}

Mat Model::fuse(std::span<const double> params, const Mat& text_hidden, const Mat& image_hidden,
                const std::vector<bool>& text_valid) const {
  if (text_hidden.cols != cfg_.hidden_dim || image_hidden.cols != cfg_.hidden_dim)
    throw ValidationError("fuse: hidden dim mismatch");
  Mat x(text_hidden.rows + image_hidden.rows, cfg_.hidden_dim);
  std::copy(text_hidden.a.begin(), text_hidden.a.end(), x.a.begin());
  std::copy(image_hidden.a.begin(), image_hidden.a.end(),
            x.a.begin() + static_cast<std::ptrdiff_t>(text_hidden.a.size()));
  std::vector<bool> valid(static_cast<std::size_t>(x.rows), true);
  for (int i = 0; i < text_hidden.rows; ++i) valid[static_cast<std::size_t>(i)] = text_valid[static_cast<std::size_t>(i)];
  std::vector<LayerCache> caches;
  return run_stack(params, fusion_ids_, std::move(x), valid, caches);
}

EncodeSample make_sample(const Corpus& corpus, const MultiModalContext& ctx, bool drop_text,
                         bool drop_image) {
  EncodeSample s;
  s.tokens = ctx.tokens;
  s.mask_index = ctx.mask_index;
  s.patches = corpus.patches_of(ctx);
  s.drop_text = drop_text;
  s.drop_image = drop_image;
  return s;
}

void Model::forward(std::span<const double> params, const EncodeSample& sample,
                    ForwardCache& cache) const {
  const int d = cfg_.hidden_dim;
  cache = ForwardCache{};
  cache.text_placeholder = sample.drop_text || sample.tokens.empty();
  cache.image_placeholder = sample.drop_image || sample.patches.empty();

  // Text input
  std::vector<bool> text_valid;
  if (cache.text_placeholder) {
    cache.text_in = Mat(1, d);
    auto v = slice(params, reg_.entry(notxt_));
    for (int j = 0; j < d; ++j) cache.text_in.at(0, j) = v[static_cast<std::size_t>(j)];
    text_valid = {true};
    cache.mask_pos = 0;
  } else {
    const auto& tokens = sample.tokens;
    if (static_cast<int>(tokens.size()) > cfg_.max_text_len)
      throw ValidationError("forward: sentence longer than max_text_len");
    if (sample.mask_index < 0 || sample.mask_index >= static_cast<int>(tokens.size()))
      throw ValidationError("forward: mask_index out of range");
    if (tokens[static_cast<std::size_t>(sample.mask_index)] != kMaskToken)
      throw ValidationError("forward: token at mask_index is not [MASK]");
    cache.text_tokens = tokens;
    cache.text_in = Mat(static_cast<int>(tokens.size()), d);
    text_valid.resize(tokens.size());
    auto emb = slice(params, reg_.entry(tok_emb_));
    auto pos = slice(params, reg_.entry(txt_pos_));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const int t = tokens[i];
      if (t < 0 || t >= cfg_.vocab_size)
        throw ValidationError("forward: token id " + std::to_string(t) +
                              " outside embedding table");
      for (int j = 0; j < d; ++j)
        cache.text_in.at(static_cast<int>(i), j) =
            emb[static_cast<std::size_t>(t) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] +
            pos[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
      text_valid[i] = (t != kPadToken);
    }
    cache.mask_pos = sample.mask_index;
  }

  // Image input
  if (cache.image_placeholder) {
    cache.image_in = Mat(1, d);
    auto v = slice(params, reg_.entry(noimg_));
    for (int j = 0; j < d; ++j) cache.image_in.at(0, j) = v[static_cast<std::size_t>(j)];
  } else {
    const std::size_t expect = static_cast<std::size_t>(cfg_.patch_count) *
                               static_cast<std::size_t>(cfg_.image_feature_dim);
    if (sample.patches.size() != expect)
      throw ValidationError("forward: bad patch shape");
    cache.image_in = Mat(cfg_.patch_count, d);
    auto w = slice(params, reg_.entry(patch_w_));
    auto b = slice(params, reg_.entry(patch_b_));
    auto pos = slice(params, reg_.entry(patch_pos_));
    for (int p = 0; p < cfg_.patch_count; ++p) {
      double* xr = cache.image_in.row(p);
      for (int j = 0; j < d; ++j)
        xr[j] = b[static_cast<std::size_t>(j)] +
                pos[static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
      for (int f = 0; f < cfg_.image_feature_dim; ++f) {
        const double pv =
            sample.patches[static_cast<std::size_t>(p) * static_cast<std::size_t>(cfg_.image_feature_dim) +
                           static_cast<std::size_t>(f)];
        const double* wr = w.data() + static_cast<std::size_t>(f) * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) xr[j] += pv * wr[j];
      }
    }
  }

  run_stack(params, text_ids_, cache.text_in, text_valid, cache.text_layers);
  const Mat& text_out = cache.text_layers.empty() ? cache.text_in : cache.text_layers.back().x_out;
  std::vector<bool> image_valid(static_cast<std::size_t>(cache.image_in.rows), true);
  run_stack(params, image_ids_, cache.image_in, image_valid, cache.image_layers);
  const Mat& image_out = cache.image_layers.empty() ? cache.image_in : cache.image_layers.back().x_out;

  cache.fused_in = Mat(text_out.rows + image_out.rows, d);
  std::copy(text_out.a.begin(), text_out.a.end(), cache.fused_in.a.begin());
  std::copy(image_out.a.begin(), image_out.a.end(),
            cache.fused_in.a.begin() + static_cast<std::ptrdiff_t>(text_out.a.size()));
  cache.key_valid.assign(static_cast<std::size_t>(cache.fused_in.rows), true);
  for (int i = 0; i < text_out.rows; ++i) cache.key_valid[static_cast<std::size_t>(i)] = text_valid[static_cast<std::size_t>(i)];

  run_stack(params, fusion_ids_, cache.fused_in, cache.key_valid, cache.fusion_layers);
  const Mat& fused_out =
      cache.fusion_layers.empty() ? cache.fused_in : cache.fusion_layers.back().x_out;

  auto fg = slice(params, reg_.entry(final_ln_g_));
  auto fb = slice(params, reg_.entry(final_ln_b_));
  cache.final_ln = Mat(fused_out.rows, d);
  cache.final_ln_mean.resize(static_cast<std::size_t>(fused_out.rows));
  cache.final_ln_rstd.resize(static_cast<std::size_t>(fused_out.rows));
  for (int p = 0; p < fused_out.rows; ++p)
    layernorm_row(fused_out.row(p), d, fg.data(), fb.data(), cache.final_ln.row(p),
                  &cache.final_ln_mean[static_cast<std::size_t>(p)],
                  &cache.final_ln_rstd[static_cast<std::size_t>(p)]);

  cache.h_mask.assign(cache.final_ln.row(cache.mask_pos), cache.final_ln.row(cache.mask_pos) + d);

  mlp_head_forward(cache.h_mask, slice(params, reg_.entry(cls_w1_)), slice(params, reg_.entry(cls_b1_)),
                   slice(params, reg_.entry(cls_w2_)), slice(params, reg_.entry(cls_b2_)),
                   cache.cls_pre, cache.cls_act, cache.logits);
  cache.yhat = cache.logits;
  softmax_inplace(cache.yhat);

  mlp_head_forward(cache.h_mask, slice(params, reg_.entry(con_w1_)), slice(params, reg_.entry(con_b1_)),
                   slice(params, reg_.entry(con_w2_)), slice(params, reg_.entry(con_b2_)),
                   cache.con_pre, cache.con_act, cache.z_raw);
  cache.z = cache.z_raw;
  {
    const double n = std::max(l2_norm(cache.z_raw), 1e-12);
    for (auto& v : cache.z) v /= n;
  }

  mlp_head_forward(cache.h_mask, slice(params, reg_.entry(clu_w1_)), slice(params, reg_.entry(clu_b1_)),
                   slice(params, reg_.entry(clu_w2_)), slice(params, reg_.entry(clu_b2_)),
                   cache.clu_pre, cache.clu_act, cache.c_logits);
  cache.c = cache.c_logits;
  softmax_inplace(cache.c);
}

void Model::backward(std::span<const double> params, const EncodeSample& sample,
                     const ForwardCache& cache, const HeadGrads& grads,
                     std::span<double> grad_out) const {
  const int d = cfg_.hidden_dim;
  auto gslice = [&](int id) {
    const auto& e = reg_.entry(id);
    return grad_out.subspan(e.offset,
                            static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols));
  };

  std::vector<double> d_h(static_cast<std::size_t>(d), 0.0);

  if (!grads.d_yhat.empty()) {
    std::vector<double> d_logits(grads.d_yhat.size());
    softmax_backward(cache.yhat, grads.d_yhat, d_logits);
    mlp_head_backward(cache.h_mask, slice(params, reg_.entry(cls_w1_)),
                      slice(params, reg_.entry(cls_w2_)), cache.cls_pre, cache.cls_act, d_logits,
                      d_h, gslice(cls_w1_), gslice(cls_b1_), gslice(cls_w2_), gslice(cls_b2_));
  }
  if (!grads.d_z.empty()) {
    const double n = std::max(l2_norm(cache.z_raw), 1e-12);
    const double inner = dot(cache.z, grads.d_z);
    std::vector<double> d_zraw(grads.d_z.size());
    for (std::size_t i = 0; i < d_zraw.size(); ++i)
      d_zraw[i] = (grads.d_z[i] - cache.z[i] * inner) / n;
    mlp_head_backward(cache.h_mask, slice(params, reg_.entry(con_w1_)),
                      slice(params, reg_.entry(con_w2_)), cache.con_pre, cache.con_act, d_zraw,
                      d_h, gslice(con_w1_), gslice(con_b1_), gslice(con_w2_), gslice(con_b2_));
  }
  if (!grads.d_c.empty()) {
    std::vector<double> d_clogits(grads.d_c.size());
    softmax_backward(cache.c, grads.d_c, d_clogits);
    mlp_head_backward(cache.h_mask, slice(params, reg_.entry(clu_w1_)),
                      slice(params, reg_.entry(clu_w2_)), cache.clu_pre, cache.clu_act, d_clogits,
                      d_h, gslice(clu_w1_), gslice(clu_b1_), gslice(clu_w2_), gslice(clu_b2_));
  }

  // Final layernorm: only the mask row receives upstream gradient.
  const Mat& fused_out =
      cache.fusion_layers.empty() ? cache.fused_in : cache.fusion_layers.back().x_out;
  Mat d_fused(fused_out.rows, d);
  auto fg = slice(params, reg_.entry(final_ln_g_));
  layernorm_backward_row(fused_out.row(cache.mask_pos), d,
                         cache.final_ln_mean[static_cast<std::size_t>(cache.mask_pos)],
                         cache.final_ln_rstd[static_cast<std::size_t>(cache.mask_pos)], fg.data(),
                         d_h.data(), d_fused.row(cache.mask_pos), gslice(final_ln_g_).data(),
                         gslice(final_ln_b_).data());

  backward_stack(params, fusion_ids_, cache.fusion_layers, cache.key_valid, d_fused, grad_out);

  const int text_rows = cache.text_placeholder ? 1 : static_cast<int>(cache.text_tokens.size());
  const int image_rows = cache.image_in.rows;
  Mat d_text(text_rows, d), d_image(image_rows, d);
  std::copy(d_fused.a.begin(), d_fused.a.begin() + static_cast<std::ptrdiff_t>(d_text.a.size()),
            d_text.a.begin());
  std::copy(d_fused.a.begin() + static_cast<std::ptrdiff_t>(d_text.a.size()), d_fused.a.end(),
            d_image.a.begin());

  std::vector<bool> text_valid(static_cast<std::size_t>(text_rows), true);
  if (!cache.text_placeholder)
    for (int i = 0; i < text_rows; ++i)
      text_valid[static_cast<std::size_t>(i)] =
          (cache.text_tokens[static_cast<std::size_t>(i)] != kPadToken);
  backward_stack(params, text_ids_, cache.text_layers, text_valid, d_text, grad_out);

  std::vector<bool> image_valid(static_cast<std::size_t>(image_rows), true);
  backward_stack(params, image_ids_, cache.image_layers, image_valid, d_image, grad_out);

  if (cache.text_placeholder) {
    auto g = gslice(notxt_);
    for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(j)] += d_text.at(0, j);
  } else {
    auto ge = gslice(tok_emb_);
    auto gp = gslice(txt_pos_);
    for (int i = 0; i < text_rows; ++i) {
      const int t = cache.text_tokens[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        ge[static_cast<std::size_t>(t) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] +=
            d_text.at(i, j);
        gp[static_cast<std::size_t>(i) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] +=
            d_text.at(i, j);
      }
    }
  }

  if (cache.image_placeholder) {
    auto g = gslice(noimg_);
    for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(j)] += d_image.at(0, j);
  } else {
    auto gw = gslice(patch_w_);
    auto gb = gslice(patch_b_);
    auto gp = gslice(patch_pos_);
    for (int p = 0; p < image_rows; ++p) {
      for (int j = 0; j < d; ++j) {
        const double dv = d_image.at(p, j);
        gb[static_cast<std::size_t>(j)] += dv;
        gp[static_cast<std::size_t>(p) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] += dv;
      }
      for (int f = 0; f < cfg_.image_feature_dim; ++f) {
        const double pv =
            sample.patches[static_cast<std::size_t>(p) * static_cast<std::size_t>(cfg_.image_feature_dim) +
                           static_cast<std::size_t>(f)];
        double* gwr = gw.data() + static_cast<std::size_t>(f) * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) gwr[j] += pv * d_image.at(p, j);
      }
    }
  }
}

std::vector<double> Model::predict_distribution(const EncodeSample& sample, bool use_teacher) const {
  ForwardCache cache;
  forward(use_teacher ? std::span<const double>(teacher_) : std::span<const double>(student_),
          sample, cache);
  return cache.yhat;
}

MaskedHidden Model::project(const EncodeSample& sample) const {
  ForwardCache cache;
  forward(student_, sample, cache);
  return {cache.h_mask, cache.z, cache.c};
}

void ema_update(std::span<const double> student, std::span<double> teacher, double m) {
  if (m < 0.0 || m > 1.0) throw ValidationError("ema_update: momentum must be in [0,1]");
  if (student.size() != teacher.size()) throw ValidationError("ema_update: shape mismatch");
  if (m == 1.0) return;  // exact: teacher untouched
  for (std::size_t i = 0; i < teacher.size(); ++i)
    teacher[i] = m * teacher[i] + (1.0 - m) * student[i];
}

namespace {

json config_to_json(const EncoderConfig& c) {
  json j;
  j["hidden_dim"] = c.hidden_dim;
  j["n_heads"] = c.n_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["text_layers"] = c.text_layers;
  j["image_layers"] = c.image_layers;
  j["fusion_layers"] = c.fusion_layers;
  j["max_text_len"] = c.max_text_len;
  j["patch_count"] = c.patch_count;
  j["image_feature_dim"] = c.image_feature_dim;
  j["vocab_size"] = c.vocab_size;
  j["candidate_count"] = c.candidate_count;
  j["contrastive_dim"] = c.contrastive_dim;
  j["cluster_count"] = c.cluster_count;
  j["rng_seed"] = c.rng_seed;
  return j;
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.text_layers = j.at("text_layers").get<int>();
  c.image_layers = j.at("image_layers").get<int>();
  c.fusion_layers = j.at("fusion_layers").get<int>();
  c.max_text_len = j.at("max_text_len").get<int>();
  c.patch_count = j.at("patch_count").get<int>();
  c.image_feature_dim = j.at("image_feature_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.candidate_count = j.at("candidate_count").get<int>();
  c.contrastive_dim = j.at("contrastive_dim").get<int>();
  c.cluster_count = j.at("cluster_count").get<int>();
  c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open " + path + " for writing");
  out << "MESE-CKPT v1\n";
  json manifest;
  manifest["config"] = config_to_json(model.config());
  json tensors = json::array();
  for (const auto& e : model.registry().entries()) {
    json t;
    t["name"] = e.name;
    t["rows"] = e.rows;
    t["cols"] = e.cols;
    tensors.push_back(t);
  }
  for (const auto& e : model.registry().entries()) {
    json t;
    t["name"] = "teacher/" + e.name;
    t["rows"] = e.rows;
    t["cols"] = e.cols;
    tensors.push_back(t);
  }
  manifest["tensors"] = tensors;
  out << manifest.dump() << '\n';
  auto write_store = [&](const std::vector<double>& store) {
    std::vector<float> buf(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) buf[i] = static_cast<float>(store[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  };
  write_store(model.student());
  write_store(model.teacher());
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::string magic;
  std::getline(in, magic);
  if (magic != "MESE-CKPT v1") throw ParseError(path + ": bad checkpoint magic '" + magic + "'");
  std::string manifest_line;
  std::getline(in, manifest_line);
  json manifest;
  try {
    manifest = json::parse(manifest_line);
  } catch (const json::exception& e) {
    throw ParseError(path + ": manifest: " + e.what());
  }
  Model model(config_from_json(manifest.at("config")));
  const std::size_t n = model.registry().total_size();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != 2 * model.registry().entries().size())
    throw ParseError(path + ": tensor manifest does not match config");
  std::size_t expect = 0;
  for (const auto& t : tensors)
    expect += t.at("rows").get<std::size_t>() * t.at("cols").get<std::size_t>();
  if (expect != 2 * n) throw ParseError(path + ": tensor sizes do not match config");

  auto read_store = [&](std::vector<double>& store) {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float))
      throw ParseError(path + ": truncated tensor payload");
    for (std::size_t i = 0; i < n; ++i) store[i] = static_cast<double>(buf[i]);
  };
  read_store(model.student());
  read_store(model.teacher());
  return model;
}

}  // namespace mese
