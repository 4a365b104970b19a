#include <doctest.h>

#include "oracle_utils.hpp"
#include "stp/downstream.hpp"

using namespace stp;

namespace {

EncoderConfig micro_enc() {
  EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.patch = 4;
  cfg.dim = 32;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  return cfg;
}

ToyEnvConfig micro_env() {
  ToyEnvConfig cfg;
  cfg.image_size = 16;
  return cfg;
}

}  // namespace

TEST_CASE("toy env: deterministic reset, pure render, clamped dynamics") {
  ToyEnv a(micro_env()), b(micro_env());
  a.reset(5);
  b.reset(5);
  CHECK(a.agent() == b.agent());
  CHECK(a.goal() == b.goal());
  auto r1 = a.render(), r2 = a.render();
  for (int64_t i = 0; i < r1.size(); ++i) CHECK(r1.at(i) == r2.at(i));

  a.set_state({0.99, 0.5}, {0.2, 0.2});
  a.step({10.0, 0.0});  // clipped to action_max, then clamped to the arena
  CHECK(a.agent()[0] <= 1.0);
  CHECK(a.agent()[0] == doctest::Approx(1.0));
  CHECK(a.proprio()[2] == doctest::Approx(micro_env().action_max));
}

TEST_CASE("scripted expert: zero at goal, saturated toward a distant goal") {
  ToyEnv env(micro_env());
  env.set_state({0.4, 0.6}, {0.4, 0.6});
  auto at_goal = scripted_expert(env);
  CHECK(at_goal[0] == 0.0);
  CHECK(at_goal[1] == 0.0);

  env.set_state({0.2, 0.5}, {0.9, 0.5});  // goal directly right
  auto right = scripted_expert(env);
  CHECK(right[0] == doctest::Approx(micro_env().action_max));
  CHECK(right[1] == 0.0);
}

TEST_CASE("expert rollouts succeed >= 99% of the time; random policy does not") {
  const double expert = rollout_success(micro_env(), 100, 42,
                                        [](const ToyEnv& env) { return scripted_expert(env); });
  CHECK(expert >= 0.99);

  Rng rng(7);
  const double amax = micro_env().action_max;
  const double random = rollout_success(micro_env(), 100, 42, [&](const ToyEnv&) {
    return std::array<double, 2>{rng.uniform(-amax, amax), rng.uniform(-amax, amax)};
  });
  CHECK(random <= 0.2);

  // same base seed, same result
  const double expert2 = rollout_success(micro_env(), 100, 42,
                                         [](const ToyEnv& env) { return scripted_expert(env); });
  CHECK(expert == expert2);
}

TEST_CASE("collect_expert_demos uses seed = base_seed + episode") {
  auto demos = collect_expert_demos(micro_env(), 3, 100);
  REQUIRE(demos.size() == 3);
  for (const auto& traj : demos) {
    CHECK(traj.success);
    CHECK(traj.observations.size() == traj.actions.size());
    CHECK(!traj.observations.empty());
  }
  // episode 2 of base 100 equals episode 0 of base 102
  auto shifted = collect_expert_demos(micro_env(), 1, 102);
  REQUIRE(shifted[0].actions.size() == demos[2].actions.size());
  for (size_t i = 0; i < shifted[0].actions.size(); ++i) {
    CHECK(shifted[0].actions[i] == demos[2].actions[i]);
  }
}

TEST_CASE("demo files round-trip through the container format") {
  auto demos = collect_expert_demos(micro_env(), 2, 7);
  const std::string path = "demos_test.stpc";
  save_demos(path, demos);
  auto loaded = load_demos(path);
  REQUIRE(loaded.size() == demos.size());
  for (size_t d = 0; d < demos.size(); ++d) {
    REQUIRE(loaded[d].actions.size() == demos[d].actions.size());
    for (size_t t = 0; t < demos[d].actions.size(); ++t) {
      CHECK(loaded[d].actions[t][0] == doctest::Approx(demos[d].actions[t][0]));
      for (int64_t i = 0; i < demos[d].observations[t].image.size(); ++i)
        CHECK(loaded[d].observations[t].image.at(i) == demos[d].observations[t].image.at(i));
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("extract_features: dimensions and frozen determinism") {
  EncoderConfig default_cfg;  // d=128 desk default
  Rng init(3);
  VitEncoder<float> enc(default_cfg, init);
  Rng rng(4);
  auto img = Tensor<float>::randn({3, 32, 32}, rng, 1.0);

  // 1 view, history 1, d=128, proprio 4 -> 132
  auto feat = extract_features(enc, {img}, {0.1, 0.2, 0.3, 0.4}, 4);
  CHECK(feat.size() == 132);
  auto feat2 = extract_features(enc, {img}, {0.1, 0.2, 0.3, 0.4}, 4);
  for (size_t i = 0; i < feat.size(); ++i) CHECK(feat[i] == feat2[i]);

  // history 3 emulated by passing three frames: 3*128 + 4
  auto feat3 = extract_features(enc, {img, img, img}, {0.1, 0.2, 0.3, 0.4}, 4);
  CHECK(feat3.size() == 3 * 128 + 4);
}

TEST_CASE("bc_train fits constant and linear experts; encoder stays frozen") {
  EncoderConfig cfg = micro_enc();
  Rng init(5);
  VitEncoder<float> enc(cfg, init);
  ParamList<float> enc_params;
  enc.collect("encoder", enc_params);
  const uint64_t digest_before = param_digest(enc_params);

  // constant-zero expert
  auto demos = collect_expert_demos(micro_env(), 6, 11);
  for (auto& traj : demos)
    for (auto& a : traj.actions) a = {0.0, 0.0};
  PolicyConfig pcfg;
  pcfg.epochs = 40;
  pcfg.history = 1;
  auto ds = build_bc_dataset(enc, demos, pcfg);
  Rng prng(6);
  MlpPolicy<float> policy(static_cast<int>(ds.features.front().size()), pcfg.hidden, 2, prng);
  const double zero_loss = bc_train(policy, ds, pcfg);
  CHECK(zero_loss < 1e-3);
  CHECK(param_digest(enc_params) == digest_before);  // frozen contract

  // linear expert on linearly decodable features
  Rng rng(7);
  BcDataset lin;
  const int dim = 12, n = 400;
  std::vector<double> w0(static_cast<size_t>(dim)), w1(static_cast<size_t>(dim));
  for (auto& v : w0) v = rng.normal() * 0.3;
  for (auto& v : w1) v = rng.normal() * 0.3;
  for (int i = 0; i < n; ++i) {
    std::vector<float> f(static_cast<size_t>(dim));
    for (auto& v : f) v = static_cast<float>(rng.normal());
    double a0 = 0, a1 = 0;
    for (int j = 0; j < dim; ++j) {
      a0 += w0[static_cast<size_t>(j)] * f[static_cast<size_t>(j)];
      a1 += w1[static_cast<size_t>(j)] * f[static_cast<size_t>(j)];
    }
    lin.features.push_back(std::move(f));
    lin.actions.push_back({a0, a1});
  }
  PolicyConfig lin_cfg;
  lin_cfg.epochs = 200;
  lin_cfg.lr = 3e-3;
  Rng prng2(8);
  MlpPolicy<float> lin_policy(dim, {64}, 2, prng2);
  const double lin_loss = bc_train(lin_policy, lin, lin_cfg);
  CHECK(lin_loss < 1e-3);
}

TEST_CASE("bc_train rejects an empty demo set") {
  BcDataset empty;
  PolicyConfig cfg;
  Rng rng(1);
  MlpPolicy<float> policy(8, {16}, 2, rng);
  CHECK_THROWS_AS(bc_train(policy, empty, cfg), ValueError);
  CHECK_THROWS_AS(build_bc_dataset(VitEncoder<float>(micro_enc(), rng), {}, cfg), ValueError);
}

TEST_CASE("direction_bin partitions the circle into 8 sectors") {
  CHECK(direction_bin(1.0, 0.0) == 0);
  CHECK(direction_bin(1.0, 1.0) == 1);
  CHECK(direction_bin(0.0, 1.0) == 2);
  CHECK(direction_bin(-1.0, 1.0) == 3);
  CHECK(direction_bin(-1.0, 0.0) == 4);
  CHECK(direction_bin(-1.0, -1.0) == 5);
  CHECK(direction_bin(0.0, -1.0) == 6);
  CHECK(direction_bin(1.0, -1.0) == 7);
}

TEST_CASE("motion probe: chance on shuffled labels, perfect on separable features") {
  Rng rng(9);
  // features carry the label as a noisy one-hot block
  auto make_examples = [&](bool separable) {
    std::vector<ProbeExample> out;
    for (int i = 0; i < 1600; ++i) {
      ProbeExample ex;
      ex.label = rng.uniform_int(8);
      ex.feature.assign(16, 0.0f);
      for (auto& v : ex.feature) v = static_cast<float>(rng.normal() * 0.1);
      if (separable) ex.feature[static_cast<size_t>(ex.label)] += 3.0f;
      out.push_back(std::move(ex));
    }
    return out;
  };

  ProbeConfig cfg;
  cfg.epochs = 60;
  auto separable = make_examples(true);
  CHECK(motion_probe(separable, cfg) >= 0.95);

  auto shuffled = make_examples(true);
  std::vector<int> labels;
  for (const auto& ex : shuffled) labels.push_back(ex.label);
  rng.shuffle(labels);
  for (size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
  const double chance = motion_probe(shuffled, cfg);
  CHECK(chance > 0.125 - 0.05);
  CHECK(chance < 0.125 + 0.05);
}

TEST_CASE("motion probe rejects degenerate label sets") {
  std::vector<ProbeExample> ones(64);
  for (auto& ex : ones) {
    ex.label = 3;
    ex.feature.assign(8, 1.0f);
  }
  ProbeConfig cfg;
  CHECK_THROWS_AS(motion_probe(ones, cfg), ValueError);
}

TEST_CASE("build_probe_dataset concatenates pair features and bins displacement") {
  EncoderConfig cfg = micro_enc();
  Rng init(10);
  VitEncoder<float> enc(cfg, init);
  SynthManifest manifest;
  manifest.clips = 4;
  manifest.seed = 21;
  manifest.params.size = 16;
  manifest.params.length = 24;
  manifest.params.sprites_min = manifest.params.sprites_max = 1;
  auto clips = generate_dataset(manifest);
  auto stats = compute_channel_stats(clips);
  DataPipelineConfig pcfg;
  pcfg.interval = IntervalPolicy::parse("8");
  pcfg.crop = false;
  pcfg.out_size = 16;
  std::vector<PairExample<float>> pairs;
  Rng rng(22);
  for (const auto& clip : clips) pairs.push_back(make_example<float>(clip, pcfg, stats, rng));
  auto examples = build_probe_dataset(enc, pairs);
  REQUIRE(examples.size() == pairs.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    CHECK(examples[i].feature.size() == 2 * static_cast<size_t>(cfg.dim));
    CHECK(examples[i].label ==
          direction_bin(pairs[i].displacement[0], pairs[i].displacement[1]));
  }
}
