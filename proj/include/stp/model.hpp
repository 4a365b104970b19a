#pragma once

#include <string>
#include <vector>

#include "stp/decoders.hpp"
#include "stp/encoder.hpp"

namespace stp {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  // Desk-scale defaults: gradient checks and overfit runs finish in minutes.
  static ModelConfig tiny() { return {EncoderConfig{}, DecoderConfig{}}; }
  static ModelConfig paper() { return {EncoderConfig::paper_scale(), DecoderConfig::paper_scale()}; }

  void validate() const {
    encoder.validate();
    decoder.validate();
  }
};

// Encoder, dual decoders, and the single mask token they share. One encoder
// instance processes both frames of a pair.
template <typename S>
class StpModel {
 public:
  StpModel() = default;
  StpModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    encoder_ = VitEncoder<S>(cfg.encoder, rng);
    mask_token_ = Tensor<S>::randn({1, cfg.encoder.dim}, rng, kInitStd, true);
    spatial_ = SpatialDecoder<S>(cfg.decoder, cfg.encoder, rng);
    temporal_ = TemporalDecoder<S>(cfg.decoder, cfg.encoder, rng);
    params_.clear();
    encoder_.collect("encoder", params_);
    params_.push_back({"mask_token", mask_token_, false});
    spatial_.collect("spatial_dec", params_);
    temporal_.collect("temporal_dec", params_);
  }

  const ModelConfig& config() const { return cfg_; }
  VitEncoder<S>& encoder() { return encoder_; }
  const VitEncoder<S>& encoder() const { return encoder_; }
  const SpatialDecoder<S>& spatial_decoder() const { return spatial_; }
  const TemporalDecoder<S>& temporal_decoder() const { return temporal_; }
  const Tensor<S>& mask_token() const { return mask_token_; }

  const ParamList<S>& params() const { return params_; }

  EncoderOutput<S> encode(const Tensor<S>& image, const MaskingMap& map) const {
    return encoder_.encode(image, map);
  }

  DecodedPrediction<S> spatial_decode(const EncoderOutput<S>& z_current,
                                      const MaskingMap& map_current) const {
    return spatial_.decode(z_current, map_current, mask_token_);
  }

  DecodedPrediction<S> temporal_decode(const EncoderOutput<S>& z_current,
                                       const EncoderOutput<S>& z_future,
                                       const MaskingMap& map_future,
                                       TemporalTrace<S>* trace = nullptr) const {
    return temporal_.decode(z_current, z_future, map_future, mask_token_, trace);
  }

  struct PairForward {
    EncoderOutput<S> z_current, z_future;
    DecodedPrediction<S> pred_current, pred_future;
  };

  PairForward forward_pair(const Tensor<S>& img_current, const Tensor<S>& img_future,
                           const MaskingMap& map_current, const MaskingMap& map_future) const {
    PairForward f;
    f.z_current = encode(img_current, map_current);
    f.z_future = encode(img_future, map_future);
    f.pred_current = spatial_decode(f.z_current, map_current);
    f.pred_future = temporal_decode(f.z_current, f.z_future, map_future);
    return f;
  }

 private:
  ModelConfig cfg_;
  VitEncoder<S> encoder_;
  Tensor<S> mask_token_;
  SpatialDecoder<S> spatial_;
  TemporalDecoder<S> temporal_;
  ParamList<S> params_;
};

// Bit-level digest of all parameter payloads, registry order.
template <typename S>
uint64_t param_digest(const ParamList<S>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    h = fnv1a64(p.name.data(), p.name.size(), h);
    h = fnv1a64(p.tensor.data(), p.tensor.values().size() * sizeof(S), h);
  }
  return h;
}

}  // namespace stp
