#pragma once

#include <string>
#include <vector>

#include "stp/encoder.hpp"

namespace stp {

enum class DecoderArch { self_cross, joint_self };

inline const char* to_string(DecoderArch a) {
  return a == DecoderArch::self_cross ? "self_cross" : "joint_self";
}

inline DecoderArch decoder_arch_from_string(const std::string& s) {
  if (s == "self_cross") return DecoderArch::self_cross;
  if (s == "joint_self") return DecoderArch::joint_self;
  throw ConfigError("unknown decoder architecture '" + s + "' (self_cross|joint_self)");
}

struct DecoderConfig {
  int depth = 2;
  int heads = 4;
  int dim = 64;
  int mlp_ratio = 4;
  DecoderArch arch = DecoderArch::self_cross;

  static DecoderConfig paper_scale() { return {8, 16, 512, 4, DecoderArch::self_cross}; }

  void validate() const {
    if (dim % heads != 0) throw ConfigError("decoder dim must be divisible by heads");
    if (dim % 4 != 0) throw ConfigError("decoder dim must be divisible by 4 (sincos table)");
  }
};

// Pixel predictions at masked grid positions only, rows in sorted masked
// index order.
template <typename S>
struct DecodedPrediction {
  Tensor<S> predictions;  // M x (p*p*C)
  std::vector<int> masked;
};

// Per-layer instrumentation of the temporal decoder, used by the causality
// tests: in self_cross mode the kv stream fed to cross-attention, in
// joint_self mode the current-frame segment entering each layer.
template <typename S>
struct TemporalTrace {
  const TensorNode<S>* cond_node = nullptr;
  std::vector<S> cond_values;
  std::vector<const TensorNode<S>*> layer_kv_nodes;
  std::vector<std::vector<S>> layer_kv_values;
  std::vector<std::vector<S>> layer_current_segment;
};

// Fig. 2(b) block: self-attention and FFN touch only the query stream; the
// cross-attention keys/values come from a condition sequence that the block
// never updates.
template <typename S>
struct SelfCrossBlock {
  NormParam<S> ln_self, ln_cross, ln_ffn;
  MultiHeadAttention<S> self_attn, cross_attn;
  FeedForward<S> ffn;

  static SelfCrossBlock init(int dim, int heads, int mlp_ratio, Rng& rng) {
    SelfCrossBlock b;
    b.ln_self = NormParam<S>::init(dim);
    b.self_attn = MultiHeadAttention<S>::init(dim, heads, rng);
    b.ln_cross = NormParam<S>::init(dim);
    b.cross_attn = MultiHeadAttention<S>::init(dim, heads, rng);
    b.ln_ffn = NormParam<S>::init(dim);
    b.ffn = FeedForward<S>::init(dim, dim * mlp_ratio, rng);
    return b;
  }
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& cond) const {
    Tensor<S> n1 = ln_self(x);
    Tensor<S> h = add(x, self_attn(n1, n1));
    h = add(h, cross_attn(ln_cross(h), cond));
    return add(h, ffn(ln_ffn(h)));
  }
  void collect(const std::string& prefix, ParamList<S>& out) const {
    ln_self.collect(prefix + ".ln_self", out);
    self_attn.collect(prefix + ".self_attn", out);
    ln_cross.collect(prefix + ".ln_cross", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
    ffn.collect(prefix + ".ffn", out);
  }
};

namespace detail {

// gather permutation restoring full grid order from [CLS; visible...; mask...]
inline std::vector<int> assembly_permutation(const MaskingMap& map) {
  const int n = map.n_tokens;
  const int v = static_cast<int>(map.visible.size());
  std::vector<int> perm(static_cast<size_t>(1 + n));
  perm[0] = 0;
  for (int rank = 0; rank < v; ++rank) perm[static_cast<size_t>(1 + map.visible[rank])] = 1 + rank;
  for (size_t rank = 0; rank < map.masked.size(); ++rank)
    perm[static_cast<size_t>(1 + map.masked[rank])] = 1 + v + static_cast<int>(rank);
  return perm;
}

}  // namespace detail

// Shared assembly used by both decoders: project encoder tokens to decoder
// width, splice one shared mask token into every masked slot, restore grid
// order, re-add fixed positions to all non-CLS rows.
template <typename S>
class DecoderAssembly {
 public:
  DecoderAssembly() = default;
  DecoderAssembly(int enc_dim, int dec_dim, int grid_h, int grid_w, Rng& rng) {
    in_proj = LinearParam<S>::init(enc_dim, dec_dim, rng);
    Tensor<S> pos = sincos_posembed_2d<S>(grid_h, grid_w, dec_dim);
    std::vector<S> buf(static_cast<size_t>(1 + grid_h * grid_w) * dec_dim, S(0));
    std::copy(pos.data(), pos.data() + pos.size(), buf.begin() + dec_dim);
    pos_with_cls = Tensor<S>::from_data({1 + grid_h * grid_w, dec_dim}, std::move(buf));
  }

  Tensor<S> operator()(const EncoderOutput<S>& enc, const MaskingMap& map,
                       const Tensor<S>& mask_token) const {
    if (enc.n_tokens != map.n_tokens || enc.visible != map.visible) {
      throw ShapeError("assemble_decoder_input: masking map does not match the encoder output");
    }
    Tensor<S> proj = in_proj(enc.seq);                       // [CLS; visible] in decoder dim
    Tensor<S> seq = proj;
    const int m = static_cast<int>(map.masked.size());
    if (m > 0) {
      Tensor<S> mask_row = in_proj(mask_token);              // 1 x dec_dim
      seq = concat_rows(proj, repeat_row(mask_row, m));
    }
    seq = gather_rows(seq, detail::assembly_permutation(map));
    return add(seq, pos_with_cls);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    in_proj.collect(prefix + ".in_proj", out);
  }

  LinearParam<S> in_proj;
  Tensor<S> pos_with_cls;  // constant, row 0 zero
};

// Reconstructs masked current-frame patches from the visible current-frame
// features (Fig. 2 spatial path).
template <typename S>
class SpatialDecoder {
 public:
  SpatialDecoder() = default;
  SpatialDecoder(const DecoderConfig& cfg, const EncoderConfig& enc_cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    assembly_ = DecoderAssembly<S>(enc_cfg.dim, cfg.dim, enc_cfg.grid(), enc_cfg.grid(), rng);
    blocks_.reserve(static_cast<size_t>(cfg.depth));
    for (int i = 0; i < cfg.depth; ++i)
      blocks_.push_back(TransformerBlock<S>::init(cfg.dim, cfg.heads, cfg.mlp_ratio, rng));
    final_ln_ = NormParam<S>::init(cfg.dim);
    head_ = LinearParam<S>::init(cfg.dim, enc_cfg.token_dim(), rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  const DecoderAssembly<S>& assembly() const { return assembly_; }

  DecodedPrediction<S> decode(const EncoderOutput<S>& enc, const MaskingMap& map,
                              const Tensor<S>& mask_token) const {
    Tensor<S> x = assembly_(enc, map, mask_token);
    for (const auto& block : blocks_) x = block(x);
    x = final_ln_(x);
    std::vector<int> rows;
    rows.reserve(map.masked.size());
    for (int i : map.masked) rows.push_back(1 + i);  // skip CLS
    DecodedPrediction<S> out;
    out.predictions = head_(gather_rows(x, rows));
    out.masked = map.masked;
    return out;
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    assembly_.collect(prefix, out);
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    final_ln_.collect(prefix + ".final_ln", out);
    head_.collect(prefix + ".head", out);
  }

 private:
  DecoderConfig cfg_;
  DecoderAssembly<S> assembly_;
  std::vector<TransformerBlock<S>> blocks_;
  NormParam<S> final_ln_;
  LinearParam<S> head_;
};

// Predicts masked future-frame patches from the future visible tokens,
// conditioned on the current-frame features. In self_cross mode the
// condition is projected and normalized once before the stack and acts as
// constant keys/values at every layer; in joint_self mode (ablation) both
// segments travel through shared global self-attention.
template <typename S>
class TemporalDecoder {
 public:
  TemporalDecoder() = default;
  TemporalDecoder(const DecoderConfig& cfg, const EncoderConfig& enc_cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    assembly_ = DecoderAssembly<S>(enc_cfg.dim, cfg.dim, enc_cfg.grid(), enc_cfg.grid(), rng);
    current_proj_ = LinearParam<S>::init(enc_cfg.dim, cfg.dim, rng);
    cond_ln_ = NormParam<S>::init(cfg.dim);
    if (cfg.arch == DecoderArch::self_cross) {
      cross_blocks_.reserve(static_cast<size_t>(cfg.depth));
      for (int i = 0; i < cfg.depth; ++i)
        cross_blocks_.push_back(SelfCrossBlock<S>::init(cfg.dim, cfg.heads, cfg.mlp_ratio, rng));
    } else {
      joint_blocks_.reserve(static_cast<size_t>(cfg.depth));
      for (int i = 0; i < cfg.depth; ++i)
        joint_blocks_.push_back(TransformerBlock<S>::init(cfg.dim, cfg.heads, cfg.mlp_ratio, rng));
    }
    final_ln_ = NormParam<S>::init(cfg.dim);
    head_ = LinearParam<S>::init(cfg.dim, enc_cfg.token_dim(), rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  const DecoderAssembly<S>& assembly() const { return assembly_; }

  DecodedPrediction<S> decode(const EncoderOutput<S>& current, const EncoderOutput<S>& future,
                              const MaskingMap& map_future, const Tensor<S>& mask_token,
                              TemporalTrace<S>* trace = nullptr) const {
    Tensor<S> x = assembly_(future, map_future, mask_token);
    if (cfg_.arch == DecoderArch::self_cross) {
      Tensor<S> cond = cond_ln_(current_proj_(current.seq));
      if (trace) {
        trace->cond_node = cond.node_ptr();
        trace->cond_values = cond.values();
      }
      for (const auto& block : cross_blocks_) {
        if (trace) {
          trace->layer_kv_nodes.push_back(cond.node_ptr());
          trace->layer_kv_values.push_back(cond.values());
        }
        x = block(x, cond);
      }
      x = final_ln_(x);
      return read_out(x, map_future, 0);
    }

    // joint_self: [current segment || future segment], both updated.
    const int v_cur = static_cast<int>(current.visible.size());
    std::vector<int> pos_rows(static_cast<size_t>(1 + v_cur));
    pos_rows[0] = 0;
    for (int i = 0; i < v_cur; ++i) pos_rows[static_cast<size_t>(1 + i)] = 1 + current.visible[static_cast<size_t>(i)];
    Tensor<S> cur = add(current_proj_(current.seq), gather_rows(assembly_.pos_with_cls, pos_rows));
    if (trace) {
      trace->cond_node = cur.node_ptr();
      trace->cond_values = cur.values();
    }
    Tensor<S> seq = concat_rows(cur, x);
    const int cur_len = 1 + v_cur;
    for (const auto& block : joint_blocks_) {
      if (trace) {
        std::vector<S> seg(seq.data(), seq.data() + static_cast<size_t>(cur_len) * cfg_.dim);
        trace->layer_current_segment.push_back(std::move(seg));
      }
      seq = block(seq);
    }
    seq = final_ln_(seq);
    return read_out(seq, map_future, cur_len);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    assembly_.collect(prefix, out);
    current_proj_.collect(prefix + ".current_proj", out);
    cond_ln_.collect(prefix + ".cond_ln", out);
    for (size_t i = 0; i < cross_blocks_.size(); ++i)
      cross_blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    for (size_t i = 0; i < joint_blocks_.size(); ++i)
      joint_blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    final_ln_.collect(prefix + ".final_ln", out);
    head_.collect(prefix + ".head", out);
  }

 private:
  DecodedPrediction<S> read_out(const Tensor<S>& seq, const MaskingMap& map, int offset) const {
    std::vector<int> rows;
    rows.reserve(map.masked.size());
    for (int i : map.masked) rows.push_back(offset + 1 + i);
    DecodedPrediction<S> out;
    out.predictions = head_(gather_rows(seq, rows));
    out.masked = map.masked;
    return out;
  }

  DecoderConfig cfg_;
  DecoderAssembly<S> assembly_;
  LinearParam<S> current_proj_;
  NormParam<S> cond_ln_;
  std::vector<SelfCrossBlock<S>> cross_blocks_;
  std::vector<TransformerBlock<S>> joint_blocks_;
  NormParam<S> final_ln_;
  LinearParam<S> head_;
};

}  // namespace stp
