#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "stp/data.hpp"
#include "stp/model.hpp"
#include "stp/training.hpp"

namespace stp {

// ---------------------------------------------------------------------------
// toy pixel-rendered control environment

struct ToyEnvConfig {
  int image_size = 32;
  double action_max = 0.08;       // per-axis displacement bound, arena units
  double success_radius = 0.10;   // 10% of the arena
  int horizon = 50;
  double agent_radius_px = 2.5;
  double goal_radius_px = 2.5;
  float background = 0.08f;
};

// 2D point mass in the unit square; rendering is a pure function of state
// and dynamics are deterministic given the action.
class ToyEnv {
 public:
  explicit ToyEnv(const ToyEnvConfig& cfg = {}) : cfg_(cfg) {}

  const ToyEnvConfig& config() const { return cfg_; }

  void reset(uint64_t seed) {
    Rng rng(splitmix64(seed ^ 0x544f59454e56ull));
    agent_ = {rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
    do {
      goal_ = {rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
    } while (distance_to_goal() < 2.0 * cfg_.success_radius);
    last_action_ = {0.0, 0.0};
    steps_ = 0;
  }

  void set_state(const std::array<double, 2>& agent, const std::array<double, 2>& goal) {
    agent_ = agent;
    goal_ = goal;
    last_action_ = {0.0, 0.0};
    steps_ = 0;
  }

  std::array<double, 2> clip_action(std::array<double, 2> a) const {
    for (auto& v : a) v = std::max(-cfg_.action_max, std::min(cfg_.action_max, v));
    return a;
  }

  void step(std::array<double, 2> action) {
    action = clip_action(action);
    agent_[0] = std::max(0.0, std::min(1.0, agent_[0] + action[0]));
    agent_[1] = std::max(0.0, std::min(1.0, agent_[1] + action[1]));
    last_action_ = action;
    ++steps_;
  }

  double distance_to_goal() const {
    const double dx = goal_[0] - agent_[0], dy = goal_[1] - agent_[1];
    return std::sqrt(dx * dx + dy * dy);
  }
  bool success() const { return distance_to_goal() <= cfg_.success_radius; }
  bool done() const { return success() || steps_ >= cfg_.horizon; }
  int steps() const { return steps_; }
  const std::array<double, 2>& agent() const { return agent_; }
  const std::array<double, 2>& goal() const { return goal_; }

  Tensor<float> render() const {
    const int s = cfg_.image_size;
    std::vector<Sprite> sprites(2);
    sprites[0].radius = cfg_.goal_radius_px;
    sprites[0].color = {0.25f, 0.85f, 0.35f};  // goal: green disc
    sprites[1].radius = cfg_.agent_radius_px;
    sprites[1].color = {0.95f, 0.95f, 0.95f};  // agent: white disc
    const std::vector<std::array<double, 2>> centers{{goal_[0] * s, goal_[1] * s},
                                                     {agent_[0] * s, agent_[1] * s}};
    return render_sprites(sprites, centers, s, cfg_.background);
  }

  std::array<double, 4> proprio() const {
    return {agent_[0], agent_[1], last_action_[0], last_action_[1]};
  }

 private:
  ToyEnvConfig cfg_;
  std::array<double, 2> agent_{0.5, 0.5};
  std::array<double, 2> goal_{0.8, 0.8};
  std::array<double, 2> last_action_{0, 0};
  int steps_ = 0;
};

// Proportional controller toward the goal, clipped per axis.
inline std::array<double, 2> scripted_expert(const ToyEnv& env) {
  return env.clip_action(
      {env.goal()[0] - env.agent()[0], env.goal()[1] - env.agent()[1]});
}

// ---------------------------------------------------------------------------
// trajectories

struct Observation {
  Tensor<float> image;
  std::array<double, 4> proprio{0, 0, 0, 0};
};

struct Trajectory {
  std::vector<Observation> observations;
  std::vector<std::array<double, 2>> actions;
  bool success = false;
};

// Per-episode seed = base_seed + episode index.
inline std::vector<Trajectory> collect_expert_demos(const ToyEnvConfig& cfg, int episodes,
                                                    uint64_t base_seed) {
  std::vector<Trajectory> demos;
  demos.reserve(static_cast<size_t>(episodes));
  for (int ep = 0; ep < episodes; ++ep) {
    ToyEnv env(cfg);
    env.reset(base_seed + static_cast<uint64_t>(ep));
    Trajectory traj;
    while (!env.done()) {
      traj.observations.push_back({env.render(), env.proprio()});
      const auto action = scripted_expert(env);
      traj.actions.push_back(action);
      env.step(action);
    }
    traj.success = env.success();
    demos.push_back(std::move(traj));
  }
  return demos;
}

// Demos travel in the same container format as checkpoints: per trajectory
// an images tensor (T,3,H,W), proprio (T,4) and actions (T,2).
inline void save_demos(const std::string& path, const std::vector<Trajectory>& demos) {
  Checkpoint ck;
  ck.config_digest = fnv1a64("demos", 5);
  for (size_t d = 0; d < demos.size(); ++d) {
    const auto& traj = demos[d];
    const int t = static_cast<int>(traj.observations.size());
    const auto& img0 = traj.observations.front().image;
    CheckpointTensor images{"traj" + std::to_string(d) + ".images",
                            {t, img0.dim(0), img0.dim(1), img0.dim(2)},
                            {}};
    CheckpointTensor proprio{"traj" + std::to_string(d) + ".proprio", {t, 4}, {}};
    CheckpointTensor actions{"traj" + std::to_string(d) + ".actions", {t, 2}, {}};
    for (const auto& obs : traj.observations) {
      images.data.insert(images.data.end(), obs.image.values().begin(), obs.image.values().end());
      for (double v : obs.proprio) proprio.data.push_back(static_cast<float>(v));
    }
    for (const auto& a : traj.actions) {
      actions.data.push_back(static_cast<float>(a[0]));
      actions.data.push_back(static_cast<float>(a[1]));
    }
    ck.tensors.push_back(std::move(images));
    ck.tensors.push_back(std::move(proprio));
    ck.tensors.push_back(std::move(actions));
  }
  ck.tensors.push_back({"demos.count", {}, {static_cast<float>(demos.size())}});
  ck.save(path);
}

inline std::vector<Trajectory> load_demos(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  const CheckpointTensor* count = ck.find("demos.count");
  if (!count || count->data.size() != 1) throw IoError("demos: missing demos.count in '" + path + "'");
  std::vector<Trajectory> demos(static_cast<size_t>(count->data[0]));
  for (size_t d = 0; d < demos.size(); ++d) {
    const auto* images = ck.find("traj" + std::to_string(d) + ".images");
    const auto* proprio = ck.find("traj" + std::to_string(d) + ".proprio");
    const auto* actions = ck.find("traj" + std::to_string(d) + ".actions");
    if (!images || !proprio || !actions)
      throw IoError("demos: trajectory " + std::to_string(d) + " incomplete in '" + path + "'");
    const int t = images->shape[0];
    const int c = images->shape[1], h = images->shape[2], w = images->shape[3];
    const size_t frame = static_cast<size_t>(c) * h * w;
    for (int i = 0; i < t; ++i) {
      Observation obs;
      obs.image = Tensor<float>::from_data(
          {c, h, w}, std::vector<float>(images->data.begin() + static_cast<int64_t>(i) * frame,
                                        images->data.begin() + static_cast<int64_t>(i + 1) * frame));
      for (int j = 0; j < 4; ++j) obs.proprio[static_cast<size_t>(j)] = proprio->data[static_cast<size_t>(i) * 4 + j];
      demos[d].observations.push_back(std::move(obs));
      demos[d].actions.push_back({actions->data[static_cast<size_t>(i) * 2],
                                  actions->data[static_cast<size_t>(i) * 2 + 1]});
    }
  }
  return demos;
}

// ---------------------------------------------------------------------------
// frozen-feature extraction

struct PolicyConfig {
  std::vector<int> hidden{256, 256};
  int history = 1;
  int views = 1;
  int proprio_dim = 4;
  double lr = 1e-3;
  int epochs = 60;
  int batch = 128;
  uint64_t seed = 0;

  int feature_dim(int encoder_dim) const { return views * history * encoder_dim + proprio_dim; }
};

// [CLS] features of each view/frame concatenated with the proprioceptive
// vector. Runs under NoGradGuard: no gradient can reach the encoder.
inline std::vector<float> extract_features(const VitEncoder<float>& frozen_encoder,
                                           const std::vector<Tensor<float>>& view_frames,
                                           const std::array<double, 4>& proprio, int proprio_dim) {
  NoGradGuard no_grad;
  std::vector<float> feat;
  feat.reserve(view_frames.size() * static_cast<size_t>(frozen_encoder.config().dim) +
               static_cast<size_t>(proprio_dim));
  for (const auto& frame : view_frames) {
    Tensor<float> cls = cls_feature(frozen_encoder.encode_full(frame));
    feat.insert(feat.end(), cls.values().begin(), cls.values().end());
  }
  for (int i = 0; i < proprio_dim; ++i) feat.push_back(static_cast<float>(proprio[static_cast<size_t>(i)]));
  return feat;
}

// ---------------------------------------------------------------------------
// MLP policy and behavior cloning

template <typename S = float>
class MlpPolicy {
 public:
  MlpPolicy() = default;
  MlpPolicy(int input_dim, const std::vector<int>& hidden, int action_dim, Rng& rng) {
    int in = input_dim;
    for (int h : hidden) {
      layers_.push_back(LinearParam<S>::init(in, h, rng));
      in = h;
    }
    layers_.push_back(LinearParam<S>::init(in, action_dim, rng));
    for (size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect("policy.fc" + std::to_string(i), params_);
  }

  Tensor<S> forward(const Tensor<S>& features) const {
    Tensor<S> x = features;
    for (size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](x);
      if (i + 1 < layers_.size()) x = gelu(x);
    }
    return x;
  }

  ParamList<S>& params() { return params_; }
  const ParamList<S>& params() const { return params_; }

 private:
  std::vector<LinearParam<S>> layers_;
  ParamList<S> params_;
};

struct BcDataset {
  std::vector<std::vector<float>> features;
  std::vector<std::array<double, 2>> actions;
};

inline BcDataset build_bc_dataset(const VitEncoder<float>& frozen_encoder,
                                  const std::vector<Trajectory>& demos, const PolicyConfig& cfg) {
  if (demos.empty()) throw ValueError("bc: empty demonstration set");
  BcDataset ds;
  for (const auto& traj : demos) {
    // history window: repeat the first frame until the buffer fills
    std::deque<std::vector<float>> cls_history;
    for (size_t t = 0; t < traj.observations.size(); ++t) {
      const auto& obs = traj.observations[t];
      std::vector<float> frame_feat =
          extract_features(frozen_encoder, {obs.image}, obs.proprio, 0);
      while (static_cast<int>(cls_history.size()) < cfg.history) cls_history.push_back(frame_feat);
      cls_history.push_back(frame_feat);
      while (static_cast<int>(cls_history.size()) > cfg.history) cls_history.pop_front();
      std::vector<float> feat;
      for (const auto& f : cls_history) feat.insert(feat.end(), f.begin(), f.end());
      for (int i = 0; i < cfg.proprio_dim; ++i)
        feat.push_back(static_cast<float>(obs.proprio[static_cast<size_t>(i)]));
      ds.features.push_back(std::move(feat));
      ds.actions.push_back(traj.actions[t]);
    }
  }
  return ds;
}

// Eq. 4: minimize MSE between expert and policy actions over all (o, a)
// pairs, encoder frozen (features are precomputed constants).
inline double bc_train(MlpPolicy<float>& policy, const BcDataset& ds, const PolicyConfig& cfg) {
  if (ds.features.empty()) throw ValueError("bc_train: empty dataset");
  const int n = static_cast<int>(ds.features.size());
  const int in_dim = static_cast<int>(ds.features.front().size());
  TrainConfig opt_cfg;
  opt_cfg.weight_decay = 0.0;
  AdamW<float> opt(policy.params(), opt_cfg);
  Rng shuffle_rng = Rng(cfg.seed).derive({0x4243u /*BC*/});
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  double last_epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch) {
      const int b = std::min(cfg.batch, n - start);
      std::vector<float> xbuf(static_cast<size_t>(b) * in_dim);
      std::vector<float> ybuf(static_cast<size_t>(b) * 2);
      for (int i = 0; i < b; ++i) {
        const int j = order[static_cast<size_t>(start + i)];
        std::copy(ds.features[static_cast<size_t>(j)].begin(), ds.features[static_cast<size_t>(j)].end(),
                  xbuf.begin() + static_cast<int64_t>(i) * in_dim);
        ybuf[static_cast<size_t>(i) * 2] = static_cast<float>(ds.actions[static_cast<size_t>(j)][0]);
        ybuf[static_cast<size_t>(i) * 2 + 1] = static_cast<float>(ds.actions[static_cast<size_t>(j)][1]);
      }
      Tensor<float> x = Tensor<float>::from_data({b, in_dim}, std::move(xbuf));
      Tensor<float> y = Tensor<float>::from_data({b, 2}, std::move(ybuf));
      Tensor<float> loss = mse(policy.forward(x), y);
      for (auto& p : policy.params()) p.tensor.zero_grad();
      backward(loss);
      opt.step(policy.params(), cfg.lr);
      epoch_loss += loss.value();
      ++batches;
    }
    last_epoch_loss = epoch_loss / std::max(1, batches);
  }
  return last_epoch_loss;
}

// ---------------------------------------------------------------------------
// rollout evaluation

inline std::array<double, 2> policy_action(const MlpPolicy<float>& policy,
                                           const std::vector<float>& features) {
  NoGradGuard no_grad;
  Tensor<float> x =
      Tensor<float>::from_data({1, static_cast<int>(features.size())}, std::vector<float>(features));
  Tensor<float> a = policy.forward(x);
  return {static_cast<double>(a.at(0)), static_cast<double>(a.at(1))};
}

// Per-episode seed = base_seed + episode index; returns the fraction of
// episodes that reach the goal within the horizon.
template <typename ActionFn>
double rollout_success(const ToyEnvConfig& env_cfg, int episodes, uint64_t base_seed,
                       ActionFn&& act) {
  if (episodes < 1) throw ValueError("rollout: episodes must be >= 1");
  int successes = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    ToyEnv env(env_cfg);
    env.reset(base_seed + static_cast<uint64_t>(ep));
    while (!env.done()) env.step(act(env));
    if (env.success()) ++successes;
  }
  return static_cast<double>(successes) / episodes;
}

inline double rollout_eval(const MlpPolicy<float>& policy, const VitEncoder<float>& frozen_encoder,
                           const ToyEnvConfig& env_cfg, const PolicyConfig& policy_cfg, int episodes,
                           uint64_t base_seed) {
  std::deque<std::vector<float>> cls_history;
  int last_step = -1;
  return rollout_success(env_cfg, episodes, base_seed, [&](const ToyEnv& env) {
    if (env.steps() <= last_step) cls_history.clear();  // fresh episode
    last_step = env.steps();
    std::vector<float> frame_feat =
        extract_features(frozen_encoder, {env.render()}, env.proprio(), 0);
    while (static_cast<int>(cls_history.size()) < policy_cfg.history)
      cls_history.push_back(frame_feat);
    cls_history.push_back(frame_feat);
    while (static_cast<int>(cls_history.size()) > policy_cfg.history) cls_history.pop_front();
    std::vector<float> feat;
    for (const auto& f : cls_history) feat.insert(feat.end(), f.begin(), f.end());
    const auto prop = env.proprio();
    for (int i = 0; i < policy_cfg.proprio_dim; ++i)
      feat.push_back(static_cast<float>(prop[static_cast<size_t>(i)]));
    return policy_action(policy, feat);
  });
}

// ---------------------------------------------------------------------------
// motion linear probe (8 displacement-direction bins)

inline int direction_bin(double dx, double dy) {
  const double angle = std::atan2(dy, dx);  // (-pi, pi]
  const double shifted = angle + M_PI / 8.0;
  int bin = static_cast<int>(std::floor(shifted / (M_PI / 4.0)));
  bin %= 8;
  if (bin < 0) bin += 8;
  return bin;
}

struct ProbeConfig {
  int epochs = 120;
  double lr = 0.01;
  int batch = 64;
  double holdout = 0.2;
  uint64_t seed = 0;
};

struct ProbeExample {
  std::vector<float> feature;
  int label = 0;
};

// Concatenated [CLS] features of (current, future), both channel-normalized
// with the same stats used for pre-training inputs.
inline std::vector<ProbeExample> build_probe_dataset(const VitEncoder<float>& frozen_encoder,
                                                     const std::vector<PairExample<float>>& pairs) {
  std::vector<ProbeExample> out;
  out.reserve(pairs.size());
  for (const auto& pair : pairs) {
    if (!pair.has_motion) continue;
    ProbeExample ex;
    ex.feature = extract_features(frozen_encoder, {pair.input_current, pair.input_future},
                                  {0, 0, 0, 0}, 0);
    ex.label = direction_bin(pair.displacement[0], pair.displacement[1]);
    out.push_back(std::move(ex));
  }
  return out;
}

// Trains a linear classifier on the probe features; returns held-out
// accuracy. Split and minibatch order are deterministic in the seed.
inline double motion_probe(std::vector<ProbeExample> examples, const ProbeConfig& cfg) {
  if (examples.size() < 10) throw ValueError("motion_probe: too few labeled pairs");
  {
    std::array<bool, 8> present{};
    for (const auto& e : examples) present[static_cast<size_t>(e.label)] = true;
    int classes = 0;
    for (bool p : present) classes += p ? 1 : 0;
    if (classes < 2) throw ValueError("motion_probe: fewer than 2 classes present");
  }
  Rng rng = Rng(cfg.seed).derive({0x50524f4245ull /*PROBE*/});
  rng.shuffle(examples);
  const int n = static_cast<int>(examples.size());
  const int holdout = std::max(1, static_cast<int>(std::lround(cfg.holdout * n)));
  const int train_n = n - holdout;
  const int in_dim = static_cast<int>(examples.front().feature.size());

  Tensor<float> w = Tensor<float>::randn({in_dim, 8}, rng, 0.01, true);
  Tensor<float> b = Tensor<float>::zeros({8}, true);
  ParamList<float> params{{"probe.w", w, true}, {"probe.b", b, false}};
  TrainConfig opt_cfg;
  opt_cfg.weight_decay = 0.0;
  AdamW<float> opt(params, opt_cfg);

  std::vector<int> order(static_cast<size_t>(train_n));
  for (int i = 0; i < train_n; ++i) order[static_cast<size_t>(i)] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (int start = 0; start < train_n; start += cfg.batch) {
      const int bs = std::min(cfg.batch, train_n - start);
      std::vector<float> xbuf(static_cast<size_t>(bs) * in_dim);
      std::vector<int> labels(static_cast<size_t>(bs));
      for (int i = 0; i < bs; ++i) {
        const auto& ex = examples[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
        std::copy(ex.feature.begin(), ex.feature.end(), xbuf.begin() + static_cast<int64_t>(i) * in_dim);
        labels[static_cast<size_t>(i)] = ex.label;
      }
      Tensor<float> x = Tensor<float>::from_data({bs, in_dim}, std::move(xbuf));
      Tensor<float> loss = softmax_cross_entropy(linear(x, w, b), labels);
      for (auto& p : params) p.tensor.zero_grad();
      backward(loss);
      opt.step(params, cfg.lr);
    }
  }

  int correct = 0;
  {
    NoGradGuard no_grad;
    for (int i = train_n; i < n; ++i) {
      const auto& ex = examples[static_cast<size_t>(i)];
      Tensor<float> x = Tensor<float>::from_data({1, in_dim}, std::vector<float>(ex.feature));
      Tensor<float> logits = linear(x, w, b);
      int best = 0;
      for (int k = 1; k < 8; ++k)
        if (logits.at(k) > logits.at(best)) best = k;
      if (best == ex.label) ++correct;
    }
  }
  return static_cast<double>(correct) / holdout;
}

}  // namespace stp
