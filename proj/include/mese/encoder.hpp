#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mese/corpus.hpp"
#include "mese/mat.hpp"

namespace mese {

struct EncoderConfig {
  int hidden_dim = 32;       // d, divisible by n_heads
  int n_heads = 4;
  int ffn_dim = 64;
  int text_layers = 1;
  int image_layers = 1;
  int fusion_layers = 1;
  int max_text_len = 16;     // L1
  int patch_count = 16;      // L2
  int image_feature_dim = 8;
  int vocab_size = 16;       // token table rows (reserved ids included)
  int candidate_count = 8;   // V_e
  int contrastive_dim = 128; // D
  int cluster_count = 41;    // M
  std::uint64_t rng_seed = 1;

  void check() const;  // throws ValidationError on bad shapes
  static EncoderConfig for_corpus(const Corpus& corpus);
  static EncoderConfig for_corpus(const Corpus& corpus, EncoderConfig base);
};

// Named-tensor layout shared by student and teacher. All parameters live in
// one flat vector so the optimizer, EMA update, finite-difference probing and
// checkpoint writer can treat them uniformly.
class TensorRegistry {
 public:
  struct Entry {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
  };

  int add(const std::string& name, int rows, int cols);
  const Entry& entry(int id) const { return entries_[static_cast<std::size_t>(id)]; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t total_size() const { return total_; }
  int find(const std::string& name) const;  // -1 if absent

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
  std::size_t total_ = 0;
};

// One encoder input. Empty `patches` means the image modality is absent;
// drop flags substitute the learned placeholder for a present modality
// (modality-ablation protocol).
struct EncodeSample {
  std::vector<int> tokens;
  int mask_index = 0;
  std::span<const float> patches;
  bool drop_text = false;
  bool drop_image = false;
};

EncodeSample make_sample(const Corpus& corpus, const MultiModalContext& ctx,
                         bool drop_text = false, bool drop_image = false);

struct MaskedHidden {
  std::vector<double> h_mask;  // d
  std::vector<double> z;       // D, unit L2 norm
  std::vector<double> c;       // M, simplex
};

// Upstream gradients for Model::backward, expressed against the public
// outputs (post-softmax yhat, unit-norm z, simplex c). Empty vector = unused.
struct HeadGrads {
  std::vector<double> d_yhat;
  std::vector<double> d_z;
  std::vector<double> d_c;
};

struct LayerCache {
  Mat x_in;
  Mat ln1;
  std::vector<double> ln1_mean, ln1_rstd;
  Mat q, k, v;
  std::vector<Mat> att;  // per head, L x L
  Mat att_ctx;           // heads re-packed, pre output-projection
  Mat x_mid;
  Mat ln2;
  std::vector<double> ln2_mean, ln2_rstd;
  Mat ffn_pre;
  Mat ffn_act;
  Mat x_out;
};

struct ForwardCache {
  std::vector<int> text_tokens;     // resolved text input (placeholder => empty)
  bool text_placeholder = false;
  bool image_placeholder = false;
  int mask_pos = 0;                 // position within fused sequence
  std::vector<bool> key_valid;      // fused-sequence key mask
  Mat text_in, image_in;            // embedding-level inputs
  std::vector<LayerCache> text_layers, image_layers, fusion_layers;
  Mat fused_in;
  Mat final_ln;
  std::vector<double> final_ln_mean, final_ln_rstd;
  std::vector<double> h_mask;
  std::vector<double> cls_pre, cls_act, logits, yhat;
  std::vector<double> con_pre, con_act, z_raw, z;
  std::vector<double> clu_pre, clu_act, c_logits, c;
};

class Model {
 public:
  explicit Model(const EncoderConfig& config);

  const EncoderConfig& config() const { return cfg_; }
  const TensorRegistry& registry() const { return reg_; }
  std::vector<double>& student() { return student_; }
  const std::vector<double>& student() const { return student_; }
  std::vector<double>& teacher() { return teacher_; }
  const std::vector<double>& teacher() const { return teacher_; }

  std::span<const double> tensor(const std::vector<double>& store, int id) const;
  std::span<double> tensor(std::vector<double>& store, int id) const;

  // Individual stages, exposed for tests. `params` is student or teacher.
  Mat encode_text(std::span<const double> params, std::span<const int> tokens) const;
  Mat encode_image(std::span<const double> params, std::span<const float> patches) const;
  Mat fuse(std::span<const double> params, const Mat& text_hidden, const Mat& image_hidden,
           const std::vector<bool>& text_valid) const;

  // Full pass; cache carries everything backward() needs.
  void forward(std::span<const double> params, const EncodeSample& sample,
               ForwardCache& cache) const;
  void backward(std::span<const double> params, const EncodeSample& sample,
                const ForwardCache& cache, const HeadGrads& grads,
                std::span<double> grad_out) const;

  std::vector<double> predict_distribution(const EncodeSample& sample,
                                           bool use_teacher = false) const;
  MaskedHidden project(const EncodeSample& sample) const;

 private:
  struct LayerIds {
    int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    int ln2_g, ln2_b, w1, b1, w2, b2;
  };

  void build_registry();
  void init_params();
  Mat run_stack(std::span<const double> params, const std::vector<LayerIds>& stack, Mat x,
                const std::vector<bool>& key_valid, std::vector<LayerCache>& caches) const;
  void backward_stack(std::span<const double> params, const std::vector<LayerIds>& stack,
                      const std::vector<LayerCache>& caches, const std::vector<bool>& key_valid,
                      Mat& d_out, std::span<double> grad) const;

  EncoderConfig cfg_;
  TensorRegistry reg_;
  std::vector<double> student_;
  std::vector<double> teacher_;

  int tok_emb_, txt_pos_, patch_w_, patch_b_, patch_pos_, notxt_, noimg_;
  std::vector<LayerIds> text_ids_, image_ids_, fusion_ids_;
  int final_ln_g_, final_ln_b_;
  int cls_w1_, cls_b1_, cls_w2_, cls_b2_;
  int con_w1_, con_b1_, con_w2_, con_b2_;
  int clu_w1_, clu_b1_, clu_w2_, clu_b2_;
};

// theta_t <- m * theta_t + (1-m) * theta_s, elementwise.
void ema_update(std::span<const double> student, std::span<double> teacher, double m);

// Checkpoint: "MESE-CKPT v1" + JSON manifest + named float32 tensors
// (student, then teacher under a "teacher/" prefix).
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace mese
