#pragma once

#include <string>
#include <vector>

#include "stp/ops.hpp"
#include "stp/patching.hpp"
#include "stp/rng.hpp"

namespace stp {

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
  bool decay = true;  // false for LayerNorm affines and cls/mask tokens
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

template <typename S>
int64_t param_count(const ParamList<S>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

constexpr double kInitStd = 0.02;

template <typename S>
struct LinearParam {
  Tensor<S> w;  // in x out
  Tensor<S> b;  // out

  static LinearParam init(int in, int out, Rng& rng) {
    LinearParam p;
    p.w = Tensor<S>::randn({in, out}, rng, kInitStd, true);
    p.b = Tensor<S>::zeros({out}, true);
    return p;
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, w, b); }
  void collect(const std::string& prefix, ParamList<S>& out) const {
    out.push_back({prefix + ".w", w, true});
    out.push_back({prefix + ".b", b, true});
  }
};

template <typename S>
struct NormParam {
  Tensor<S> gamma;
  Tensor<S> beta;
  S eps = S(1e-6);

  static NormParam init(int dim) {
    NormParam p;
    p.gamma = Tensor<S>::filled({dim}, S(1), true);
    p.beta = Tensor<S>::zeros({dim}, true);
    return p;
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, gamma, beta, eps); }
  void collect(const std::string& prefix, ParamList<S>& out) const {
    out.push_back({prefix + ".gamma", gamma, false});
    out.push_back({prefix + ".beta", beta, false});
  }
};

// Multi-head attention layer; kv defaults to the query sequence
// (self-attention) and may be a different sequence (cross-attention).
template <typename S>
struct MultiHeadAttention {
  LinearParam<S> q, k, v, out;
  int heads = 0;

  static MultiHeadAttention init(int dim, int n_heads, Rng& rng) {
    MultiHeadAttention a;
    a.q = LinearParam<S>::init(dim, dim, rng);
    a.k = LinearParam<S>::init(dim, dim, rng);
    a.v = LinearParam<S>::init(dim, dim, rng);
    a.out = LinearParam<S>::init(dim, dim, rng);
    a.heads = n_heads;
    return a;
  }
  Tensor<S> operator()(const Tensor<S>& query_seq, const Tensor<S>& kv_seq,
                       AttentionCapture<S>* capture = nullptr) const {
    Tensor<S> qh = split_heads(q(query_seq), heads);
    Tensor<S> kh = split_heads(k(kv_seq), heads);
    Tensor<S> vh = split_heads(v(kv_seq), heads);
    return out(merge_heads(attention(qh, kh, vh, capture)));
  }
  void collect(const std::string& prefix, ParamList<S>& outp) const {
    q.collect(prefix + ".q", outp);
    k.collect(prefix + ".k", outp);
    v.collect(prefix + ".v", outp);
    out.collect(prefix + ".out", outp);
  }
};

template <typename S>
struct FeedForward {
  LinearParam<S> fc1, fc2;

  static FeedForward init(int dim, int hidden, Rng& rng) {
    FeedForward f;
    f.fc1 = LinearParam<S>::init(dim, hidden, rng);
    f.fc2 = LinearParam<S>::init(hidden, dim, rng);
    return f;
  }
  Tensor<S> operator()(const Tensor<S>& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, ParamList<S>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Pre-norm block: x += attn(LN(x)); x += ffn(LN(x)).
template <typename S>
struct TransformerBlock {
  NormParam<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  FeedForward<S> ffn;

  static TransformerBlock init(int dim, int heads, int mlp_ratio, Rng& rng) {
    TransformerBlock b;
    b.ln1 = NormParam<S>::init(dim);
    b.attn = MultiHeadAttention<S>::init(dim, heads, rng);
    b.ln2 = NormParam<S>::init(dim);
    b.ffn = FeedForward<S>::init(dim, dim * mlp_ratio, rng);
    return b;
  }
  Tensor<S> operator()(const Tensor<S>& x, AttentionCapture<S>* capture = nullptr) const {
    Tensor<S> n1 = ln1(x);
    Tensor<S> h = add(x, attn(n1, n1, capture));
    return add(h, ffn(ln2(h)));
  }
  void collect(const std::string& prefix, ParamList<S>& out) const {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    ffn.collect(prefix + ".ffn", out);
  }
};

struct EncoderConfig {
  int image_size = 32;
  int patch = 4;
  int channels = 3;
  int dim = 128;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;

  static EncoderConfig paper_scale() { return {224, 16, 3, 768, 12, 12, 4}; }

  int grid() const { return image_size / patch; }
  int n_tokens() const { return grid() * grid(); }
  int token_dim() const { return patch * patch * channels; }
  void validate() const {
    if (dim % heads != 0) throw ConfigError("encoder dim must be divisible by heads");
    if (image_size % patch != 0) throw ConfigError("image size must be divisible by patch size");
    if (dim % 4 != 0) throw ConfigError("encoder dim must be divisible by 4 (sincos table)");
  }
};

// Visible-token features out of the encoder; row 0 of `seq` is [CLS].
template <typename S>
struct EncoderOutput {
  Tensor<S> seq;  // (1+V) x dim
  std::vector<int> visible;
  int n_tokens = 0;
  int visible_count() const { return static_cast<int>(visible.size()); }
};

template <typename S>
Tensor<S> cls_feature(const EncoderOutput<S>& out) {
  const int d = out.seq.dim(1);
  return reshape(gather_rows(out.seq, {0}), {d});
}

// Per-layer encoder attention maps, captured on request.
template <typename S>
struct EncoderTrace {
  std::vector<AttentionCapture<S>> layers;
};

// Plain ViT over individual frames: patch projection, fixed 2D sincos
// positions, masked-token removal, learnable [CLS] (no position), pre-norm
// blocks, final LayerNorm.
template <typename S>
class VitEncoder {
 public:
  VitEncoder() = default;
  VitEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    patch_proj_ = LinearParam<S>::init(cfg.token_dim(), cfg.dim, rng);
    cls_token_ = Tensor<S>::randn({1, cfg.dim}, rng, kInitStd, true);
    pos_ = sincos_posembed_2d<S>(cfg.grid(), cfg.grid(), cfg.dim);
    blocks_.reserve(static_cast<size_t>(cfg.depth));
    for (int i = 0; i < cfg.depth; ++i)
      blocks_.push_back(TransformerBlock<S>::init(cfg.dim, cfg.heads, cfg.mlp_ratio, rng));
    final_ln_ = NormParam<S>::init(cfg.dim);
  }

  const EncoderConfig& config() const { return cfg_; }

  // Patchify, project, add positions to all tokens, drop masked tokens,
  // prepend [CLS]; returns (1 + V) x dim.
  Tensor<S> embed(const Tensor<S>& image, const MaskingMap& map) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.channels || image.dim(1) != cfg_.image_size ||
        image.dim(2) != cfg_.image_size) {
      throw ShapeError("embed: image " + shape_str(image.shape()) + " does not match config (" +
                       std::to_string(cfg_.channels) + "," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + ")");
    }
    PatchTokens<S> patches = patchify(image, cfg_.patch);
    if (map.n_tokens != patches.n()) {
      throw ShapeError("embed: masking map covers " + std::to_string(map.n_tokens) +
                       " tokens, image has " + std::to_string(patches.n()));
    }
    Tensor<S> tok = add(patch_proj_(patches.tokens), pos_);
    Tensor<S> vis = gather_rows(tok, map.visible);
    return concat_rows(cls_token_, vis);
  }

  EncoderOutput<S> encode(const Tensor<S>& image, const MaskingMap& map,
                          EncoderTrace<S>* trace = nullptr) const {
    Tensor<S> x = embed(image, map);
    if (trace) trace->layers.assign(blocks_.size(), {});
    for (size_t i = 0; i < blocks_.size(); ++i) {
      x = blocks_[i](x, trace ? &trace->layers[i] : nullptr);
    }
    EncoderOutput<S> out;
    out.seq = final_ln_(x);
    out.visible = map.visible;
    out.n_tokens = map.n_tokens;
    return out;
  }

  EncoderOutput<S> encode_full(const Tensor<S>& image, EncoderTrace<S>* trace = nullptr) const {
    return encode(image, MaskingMap::empty(cfg_.n_tokens()), trace);
  }

  const Tensor<S>& pos_table() const { return pos_; }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    patch_proj_.collect(prefix + ".patch_proj", out);
    out.push_back({prefix + ".cls", cls_token_, false});
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    final_ln_.collect(prefix + ".final_ln", out);
  }

 private:
  EncoderConfig cfg_;
  LinearParam<S> patch_proj_;
  Tensor<S> cls_token_;
  Tensor<S> pos_;  // constant
  std::vector<TransformerBlock<S>> blocks_;
  NormParam<S> final_ln_;
};

// Last-layer CLS-query attention, averaged over heads, on the patch grid
// (rho = 0 encoding; the CLS key itself is excluded).
template <typename S>
Tensor<S> cls_attention_grid(const VitEncoder<S>& encoder, const Tensor<S>& image) {
  NoGradGuard no_grad;
  EncoderTrace<S> trace;
  encoder.encode_full(image, &trace);
  const AttentionCapture<S>& last = trace.layers.back();
  const int grid = encoder.config().grid();
  const int n = grid * grid;
  std::vector<S> heat(static_cast<size_t>(n), S(0));
  for (int h = 0; h < last.heads; ++h) {
    const S* cls_row = last.probs.data() + (static_cast<int64_t>(h) * last.q_len) * last.k_len;
    for (int i = 0; i < n; ++i) heat[static_cast<size_t>(i)] += cls_row[1 + i];
  }
  for (S& v : heat) v /= static_cast<S>(last.heads);
  return Tensor<S>::from_data({grid, grid}, std::move(heat));
}

// Min-max rescale to [0,1]; constant input maps to all zeros.
template <typename S>
Tensor<S> minmax_normalize(const Tensor<S>& x) {
  S lo = x.at(0), hi = x.at(0);
  for (int64_t i = 0; i < x.size(); ++i) {
    lo = std::min(lo, x.at(i));
    hi = std::max(hi, x.at(i));
  }
  std::vector<S> out(x.values());
  const S span = hi - lo;
  for (S& v : out) v = span > S(0) ? (v - lo) / span : S(0);
  return Tensor<S>::from_data(x.shape(), std::move(out));
}

}  // namespace stp
