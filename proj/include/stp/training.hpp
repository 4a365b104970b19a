#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "stp/checkpoint.hpp"
#include "stp/data.hpp"
#include "stp/model.hpp"

namespace stp {

struct TrainConfig {
  double base_lr = 1.5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int total_steps = 1000;
  int warmup_steps = 100;
  double lambda_spatial = 1.0;
  double lambda_temporal = 1.0;
  double rho_current = 0.75;
  double rho_future = 0.95;
  uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps must be <= total_steps");
    if (lambda_spatial < 0 || lambda_temporal < 0) throw ConfigError("loss weights must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

// Linear warmup 0 -> base_lr over warmup_steps, then half-cosine from
// base_lr down to 0 at total_steps.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const int64_t span = cfg.total_steps - cfg.warmup_steps;
  const double progress =
      span > 0 ? static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span) : 1.0;
  return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// AdamW with decoupled weight decay. Parameters whose registry entry has
// decay=false (LayerNorm affines, cls/mask tokens) skip the decay term.
// Per-element arithmetic runs in double; first/second moments are stored in
// the model scalar type so checkpoints round-trip bit-exactly.
template <typename S>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamList<S>& params, const TrainConfig& cfg)
      : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.values().size(), S(0));
      v_.emplace_back(p.tensor.values().size(), S(0));
    }
  }

  void step(ParamList<S>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      S* w = p.tensor.mutable_data();
      const std::vector<S>& grad = p.tensor.grad();
      const bool has_grad = !grad.empty();
      const double decay = p.decay ? weight_decay_ : 0.0;
      for (size_t i = 0; i < p.tensor.values().size(); ++i) {
        const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
        const double m = beta1_ * static_cast<double>(m_[pi][i]) + (1.0 - beta1_) * g;
        const double v = beta2_ * static_cast<double>(v_[pi][i]) + (1.0 - beta2_) * g * g;
        m_[pi][i] = static_cast<S>(m);
        v_[pi][i] = static_cast<S>(v);
        const double m_hat = static_cast<double>(m_[pi][i]) / bc1;
        const double v_hat = static_cast<double>(v_[pi][i]) / bc2;
        double wi = static_cast<double>(w[i]);
        wi -= lr * decay * wi;
        wi -= lr * m_hat / (std::sqrt(v_hat) + eps_);
        w[i] = static_cast<S>(wi);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::vector<std::vector<S>>& moments_m() { return m_; }
  std::vector<std::vector<S>>& moments_v() { return v_; }
  const std::vector<std::vector<S>>& moments_m() const { return m_; }
  const std::vector<std::vector<S>>& moments_v() const { return v_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.95, eps_ = 1e-8, weight_decay_ = 0.05;
  int64_t t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

// ---------------------------------------------------------------------------
// Eq. 3 joint objective

template <typename S>
struct StpLoss {
  Tensor<S> total;      // lambda_s * spatial + lambda_t * temporal (graph)
  double spatial = 0;   // unweighted per-term values
  double temporal = 0;
};

// Each term is the mean square over (masked tokens x pixel dims) of the
// normalized-target residual; an empty prediction set contributes zero.
template <typename S>
StpLoss<S> stp_loss(const DecodedPrediction<S>& pred_current, const DecodedPrediction<S>& pred_future,
                    const Tensor<S>& targets_current, const Tensor<S>& targets_future,
                    double lambda_s, double lambda_t) {
  auto check = [](const DecodedPrediction<S>& p, const Tensor<S>& t, const char* which) {
    if (p.predictions.dim(0) != t.dim(0) || p.predictions.dim(1) != t.dim(1)) {
      throw ShapeError(std::string("stp_loss: ") + which + " prediction rows " +
                       shape_str(p.predictions.shape()) + " vs target rows " + shape_str(t.shape()));
    }
  };
  check(pred_current, targets_current, "current");
  check(pred_future, targets_future, "future");

  StpLoss<S> out;
  Tensor<S> total;
  if (pred_current.predictions.dim(0) > 0) {
    Tensor<S> ls = mse(pred_current.predictions, targets_current);
    out.spatial = static_cast<double>(ls.value());
    total = scale(ls, static_cast<S>(lambda_s));
  }
  if (pred_future.predictions.dim(0) > 0) {
    Tensor<S> lt = mse(pred_future.predictions, targets_future);
    out.temporal = static_cast<double>(lt.value());
    Tensor<S> wt = scale(lt, static_cast<S>(lambda_t));
    total = total.defined() ? add(total, wt) : wt;
  }
  if (!total.defined()) total = Tensor<S>::scalar(S(0));
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// training loop

struct StepStats {
  int64_t step = 0;
  double total = 0, spatial = 0, temporal = 0, lr = 0;
};

namespace stream_tag {
constexpr uint64_t kMasking = 0x4d41534bull;  // "MASK"
constexpr uint64_t kData = 0x44415441ull;     // "DATA"
constexpr uint64_t kInit = 0x494e4954ull;     // "INIT"
}  // namespace stream_tag

// Masked targets for one frame: per-patch-normalized rows at masked indices.
template <typename S>
Tensor<S> masked_targets(const Tensor<S>& raw_frame, int patch, const MaskingMap& map, S eps = S(1e-6)) {
  Tensor<S> norm = normalize_targets(patchify(raw_frame, patch), eps);
  const int d = norm.dim(1);
  std::vector<S> rows(map.masked.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < map.masked.size(); ++i) {
    const S* src = norm.data() + static_cast<size_t>(map.masked[i]) * d;
    std::copy(src, src + d, rows.begin() + static_cast<int64_t>(i) * d);
  }
  return Tensor<S>::from_data({static_cast<int>(map.masked.size()), d}, std::move(rows));
}

template <typename S>
class Trainer {
 public:
  Trainer(StpModel<S>& model, const TrainConfig& cfg, uint64_t config_digest = 0)
      : model_(model), cfg_(cfg), digest_(config_digest) {
    cfg.validate();
    params_ = model.params();
    opt_ = AdamW<S>(params_, cfg);
  }

  int64_t step_count() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  // Runs Eq. 1-3 on every pair of the batch, accumulates the per-pair
  // gradient contributions in pair order (bit-identical for any thread
  // count), then takes one AdamW step at lr_at(step).
  StepStats train_step(const std::vector<PairExample<S>>& batch) {
    if (batch.empty()) throw ValueError("train_step: empty batch");
    const int b = static_cast<int>(batch.size());
    const int n_tokens = model_.config().encoder.n_tokens();
    const int patch = model_.config().encoder.patch;

    std::vector<GradStore<S>> stores(static_cast<size_t>(b));
    std::vector<double> spatial(static_cast<size_t>(b), 0.0), temporal(static_cast<size_t>(b), 0.0);

    auto run_pair = [&](int i) {
      Rng rng = Rng(cfg_.seed).derive({stream_tag::kMasking, static_cast<uint64_t>(step_),
                                       static_cast<uint64_t>(i)});
      const MaskingMap map_c = sample_masking_map(n_tokens, cfg_.rho_current, rng);
      const MaskingMap map_f = sample_masking_map(n_tokens, cfg_.rho_future, rng);
      auto fwd = model_.forward_pair(batch[static_cast<size_t>(i)].input_current,
                                     batch[static_cast<size_t>(i)].input_future, map_c, map_f);
      Tensor<S> tgt_c = masked_targets(batch[static_cast<size_t>(i)].raw_current, patch, map_c);
      Tensor<S> tgt_f = masked_targets(batch[static_cast<size_t>(i)].raw_future, patch, map_f);
      StpLoss<S> loss = stp_loss(fwd.pred_current, fwd.pred_future, tgt_c, tgt_f,
                                 cfg_.lambda_spatial, cfg_.lambda_temporal);
      spatial[static_cast<size_t>(i)] = loss.spatial;
      temporal[static_cast<size_t>(i)] = loss.temporal;
      Tensor<S> share = scale(loss.total, S(1) / static_cast<S>(b));
      backward_into(share, stores[static_cast<size_t>(i)]);
    };

    const int threads = std::max(1, std::min(cfg_.threads, b));
    if (threads == 1) {
      for (int i = 0; i < b; ++i) run_pair(i);
    } else {
      std::vector<std::thread> pool;
      std::atomic<int> next{0};
      for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
          for (int i = next.fetch_add(1); i < b; i = next.fetch_add(1)) run_pair(i);
        });
      }
      for (auto& th : pool) th.join();
    }

    StepStats stats;
    stats.step = step_;
    for (int i = 0; i < b; ++i) {
      stats.spatial += spatial[static_cast<size_t>(i)];
      stats.temporal += temporal[static_cast<size_t>(i)];
    }
    stats.spatial /= b;
    stats.temporal /= b;
    stats.total = cfg_.lambda_spatial * stats.spatial + cfg_.lambda_temporal * stats.temporal;
    if (!std::isfinite(stats.total)) {
      throw ValueError("train_step " + std::to_string(step_) + ": non-finite loss " +
                       std::to_string(stats.total));
    }

    for (auto& p : params_) p.tensor.zero_grad();
    for (int i = 0; i < b; ++i) {
      for (auto& p : params_) {
        if (const std::vector<S>* g = stores[static_cast<size_t>(i)].find(p.tensor.node_ptr()))
          accumulate_grad_into_node(p.tensor.node(), *g);
      }
    }

    stats.lr = lr_at(step_, cfg_);
    opt_.step(params_, stats.lr);
    ++step_;
    return stats;
  }

  // ---- checkpointing -------------------------------------------------------

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.config_digest = digest_;
    auto push = [&ck](const std::string& name, const Shape& shape, const std::vector<S>& data) {
      CheckpointTensor t;
      t.name = name;
      t.shape = shape;
      t.data.assign(data.begin(), data.end());
      ck.tensors.push_back(std::move(t));
    };
    for (const auto& p : params_) push(p.name, p.tensor.shape(), p.tensor.values());
    const auto& m = opt_.moments_m();
    const auto& v = opt_.moments_v();
    for (size_t i = 0; i < params_.size(); ++i) push("opt.m." + params_[i].name, params_[i].tensor.shape(), m[i]);
    for (size_t i = 0; i < params_.size(); ++i) push("opt.v." + params_[i].name, params_[i].tensor.shape(), v[i]);
    push("train.step", {}, {static_cast<S>(step_)});
    return ck;
  }

  void save_checkpoint(const std::string& path) const { to_checkpoint().save(path); }

  void restore(const Checkpoint& ck, bool force_digest = false) {
    if (!force_digest && ck.config_digest != digest_) {
      throw ConfigError("checkpoint: config digest mismatch (checkpoint " +
                        std::to_string(ck.config_digest) + ", expected " + std::to_string(digest_) +
                        "); pass force to override");
    }
    auto fetch = [&ck](const std::string& name, std::vector<S>& dst) {
      const CheckpointTensor* t = ck.find(name);
      if (!t) throw IoError("checkpoint: missing tensor '" + name + "'");
      if (t->data.size() != dst.size())
        throw ShapeError("checkpoint: tensor '" + name + "' has " + std::to_string(t->data.size()) +
                         " values, expected " + std::to_string(dst.size()));
      for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(t->data[i]);
    };
    std::vector<S> buf;
    for (auto& p : params_) {
      buf.resize(p.tensor.values().size());
      fetch(p.name, buf);
      std::copy(buf.begin(), buf.end(), p.tensor.mutable_data());
      p.tensor.zero_grad();
    }
    for (size_t i = 0; i < params_.size(); ++i) fetch("opt.m." + params_[i].name, opt_.moments_m()[i]);
    for (size_t i = 0; i < params_.size(); ++i) fetch("opt.v." + params_[i].name, opt_.moments_v()[i]);
    const CheckpointTensor* st = ck.find("train.step");
    if (!st || st->data.size() != 1) throw IoError("checkpoint: missing train.step");
    step_ = static_cast<int64_t>(st->data[0]);
    opt_.set_step_count(step_);
  }

  void load_checkpoint(const std::string& path, bool force_digest = false) {
    restore(Checkpoint::load(path), force_digest);
  }

 private:
  StpModel<S>& model_;
  TrainConfig cfg_;
  uint64_t digest_ = 0;
  ParamList<S> params_;
  AdamW<S> opt_;
  int64_t step_ = 0;
};

// Deterministic batch assembly: per-example randomness is derived from
// (seed, step, slot), so any step's batch can be regenerated in isolation.
template <typename S = float>
std::vector<PairExample<S>> make_batch(const std::vector<VideoClip>& clips,
                                       const DataPipelineConfig& dcfg, const ChannelStats& stats,
                                       uint64_t seed, int64_t step, int batch_size) {
  if (clips.empty()) throw ValueError("make_batch: empty clip set");
  std::vector<PairExample<S>> batch;
  batch.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    Rng rng = Rng(seed).derive({stream_tag::kData, static_cast<uint64_t>(step),
                                static_cast<uint64_t>(i)});
    const auto& clip = clips[rng.uniform_u64(clips.size())];
    batch.push_back(make_example<S>(clip, dcfg, stats, rng));
  }
  return batch;
}

// Drives the trainer from its current step up to `total_steps` (absolute, so
// a restored trainer resumes mid-schedule). Optional early stop once the
// batch loss drops below `stop_below`.
template <typename S>
std::vector<StepStats> train_loop(Trainer<S>& trainer, const std::vector<VideoClip>& clips,
                                  const DataPipelineConfig& dcfg, const ChannelStats& stats,
                                  int64_t total_steps,
                                  const std::function<void(const StepStats&)>& on_step = {},
                                  double stop_below = -1.0) {
  std::vector<StepStats> trace;
  while (trainer.step_count() < total_steps) {
    auto batch = make_batch<S>(clips, dcfg, stats, trainer.config().seed, trainer.step_count(),
                               trainer.config().batch_size);
    StepStats stats_out = trainer.train_step(batch);
    if (on_step) on_step(stats_out);
    trace.push_back(stats_out);
    if (stop_below > 0.0 && stats_out.total < stop_below) break;
  }
  return trace;
}

// Loads only the model weights (no optimizer state) from a checkpoint, e.g.
// for downstream use of the frozen encoder.
template <typename S>
void load_model_params(StpModel<S>& model, const Checkpoint& ck, uint64_t expected_digest,
                       bool force_digest = false) {
  if (!force_digest && ck.config_digest != expected_digest) {
    throw ConfigError("checkpoint: config digest mismatch (checkpoint " +
                      std::to_string(ck.config_digest) + ", expected " +
                      std::to_string(expected_digest) + ")");
  }
  for (const auto& p : model.params()) {
    const CheckpointTensor* t = ck.find(p.name);
    if (!t) throw IoError("checkpoint: missing tensor '" + p.name + "'");
    if (static_cast<int64_t>(t->data.size()) != p.tensor.size())
      throw ShapeError("checkpoint: tensor '" + p.name + "' size mismatch");
    Tensor<S> tensor = p.tensor;
    for (size_t i = 0; i < t->data.size(); ++i)
      tensor.mutable_data()[i] = static_cast<S>(t->data[i]);
  }
}

}  // namespace stp
